#pragma once

#include <array>
#include <string>
#include <vector>

#include "dskd/modules.hpp"

namespace dskd {

// Preprocessed input images plus provenance.
struct ImageBatch {
    Tensor data;  // [batch, 3, h, w]
    std::vector<std::string> ids;

    ImageBatch() = default;
    explicit ImageBatch(Tensor t, std::vector<std::string> ids_ = {})
        : data(std::move(t)), ids(std::move(ids_)) {
        validate();
    }

    int height() const { return data.h; }
    int width() const { return data.w; }

    void validate() const {
        if (data.c != 3) throw ShapeError("ImageBatch: expected 3 channels, got " +
                                          std::to_string(data.c));
        if (data.h != data.w)
            throw ShapeError("ImageBatch: expected square input, got " + data.shape_str());
        if (!data.all_finite()) throw NumericError("ImageBatch: non-finite pixel values");
    }
};

enum class PyramidSource { teacher, encoder, decoder };

inline const char* to_string(PyramidSource s) {
    switch (s) {
        case PyramidSource::teacher: return "teacher";
        case PyramidSource::encoder: return "encoder";
        default: return "decoder";
    }
}

// The K=3 intermediate feature maps of one network pass, ordered by
// increasing depth: level k+1 has twice the channels and half the resolution
// of level k.
struct FeaturePyramid {
    std::array<Var, 3> levels;
    PyramidSource source = PyramidSource::teacher;

    static constexpr int K = 3;

    void validate() const {
        for (const auto& l : levels)
            if (!l) throw ShapeError("FeaturePyramid: missing level");
        for (int k = 0; k + 1 < K; ++k) {
            const Tensor& a = levels[k]->value;
            const Tensor& b = levels[k + 1]->value;
            if (b.h * 2 != a.h || b.w * 2 != a.w)
                throw ShapeError("FeaturePyramid: level " + std::to_string(k + 2) +
                                 " is not half the resolution of level " + std::to_string(k + 1));
            if (b.c <= a.c)
                throw ShapeError("FeaturePyramid: channel counts must increase with depth");
        }
    }
};

inline void check_pyramids_match(const FeaturePyramid& a, const FeaturePyramid& b,
                                 const char* where) {
    for (int k = 0; k < FeaturePyramid::K; ++k)
        check_same_shape(a.levels[k]->value, b.levels[k]->value, where);
}

// Eq.-3 style normalization: every spatial vector scaled to unit length
// (epsilon-guarded), shapes unchanged.
inline FeaturePyramid l2_normalize(const FeaturePyramid& p) {
    FeaturePyramid out;
    out.source = p.source;
    for (int k = 0; k < FeaturePyramid::K; ++k) out.levels[k] = l2norm_channels(p.levels[k]);
    return out;
}

// ---------------------------------------------------------------------------
// Feature extractor: the first three stages of a ResNet18-style network.
// Used for both the frozen teacher and the encoder student.
// ---------------------------------------------------------------------------

struct BackboneNet {
    Conv2d conv1;
    BatchNorm2d bn1;
    BasicBlock layer1_0, layer1_1;
    BasicBlock layer2_0, layer2_1;
    BasicBlock layer3_0, layer3_1;
    uint64_t init_seed = 0;

    BackboneNet()
        : conv1(3, 64, 7, 2, 3, false),
          bn1(64),
          layer1_0(64, 64, 1),
          layer1_1(64, 64, 1),
          layer2_0(64, 128, 2),
          layer2_1(128, 128, 1),
          layer3_0(128, 256, 2),
          layer3_1(256, 256, 1) {}

    void init(uint64_t seed) {
        init_seed = seed;
        Rng rng(seed);
        conv1.init(rng);
        bn1.init(rng);
        layer1_0.init(rng);
        layer1_1.init(rng);
        layer2_0.init(rng);
        layer2_1.init(rng);
        layer3_0.init(rng);
        layer3_1.init(rng);
    }

    void set_trainable(bool t) {
        visit("", [&](const std::string&, Param& p) { p.set_trainable(t); },
              [](const std::string&, Tensor&) {});
    }

    FeaturePyramid forward(const Var& x, bool training, PyramidSource source) {
        const Tensor& in = x->value;
        if (in.c != 3) throw ShapeError("backbone: expected 3-channel input");
        if (in.h % 32 != 0 || in.w % 32 != 0)
            throw ShapeError("backbone: input spatial size must be divisible by 32, got " +
                             in.shape_str());
        Var y = relu(bn1.forward(conv1.forward(x), training));
        y = maxpool(y, 3, 2, 1);
        y = layer1_1.forward(layer1_0.forward(y, training), training);
        FeaturePyramid pyr;
        pyr.source = source;
        pyr.levels[0] = y;
        y = layer2_1.forward(layer2_0.forward(y, training), training);
        pyr.levels[1] = y;
        y = layer3_1.forward(layer3_0.forward(y, training), training);
        pyr.levels[2] = y;
        return pyr;
    }

    FeaturePyramid forward(const ImageBatch& batch, bool training, PyramidSource source) {
        return forward(make_leaf(batch.data), training, source);
    }

    void visit(const std::string& prefix, const ParamVisitor& pv, const BufferVisitor& bv) {
        const std::string p = prefix.empty() ? "" : prefix + ".";
        conv1.visit(p + "conv1", pv, bv);
        bn1.visit(p + "bn1", pv, bv);
        layer1_0.visit(p + "layer1.0", pv, bv);
        layer1_1.visit(p + "layer1.1", pv, bv);
        layer2_0.visit(p + "layer2.0", pv, bv);
        layer2_1.visit(p + "layer2.1", pv, bv);
        layer3_0.visit(p + "layer3.0", pv, bv);
        layer3_1.visit(p + "layer3.1", pv, bv);
    }
};

// Frozen pretrained teacher. Runs in inference mode with gradients off; its
// parameters are never registered with an optimizer.
struct Teacher {
    BackboneNet net;
    uint64_t weight_hash = 0;

    void init_seeded(uint64_t seed) {
        net.init(seed);
        net.set_trainable(false);
        weight_hash = hash_weights();
    }

    uint64_t hash_weights() {
        auto bytes = state_bytes(net);
        return fnv1a64(bytes.data(), bytes.size());
    }

    FeaturePyramid forward(const ImageBatch& batch) {
        NoGradGuard ng;
        return net.forward(batch, /*training=*/false, PyramidSource::teacher);
    }
};

// ---------------------------------------------------------------------------
// Decoder student: the backbone mirrored stage by stage, with every stride-2
// downsampling replaced by nearest 2x upsampling plus a 3x3 convolution, and
// the channel progression reversed (256 -> 128 -> 64). Emits deepest level
// first; the returned pyramid is reordered so level k matches teacher level k.
// ---------------------------------------------------------------------------

struct DecoderNet {
    static constexpr int kEmbeddingChannels = 256;

    BasicBlock layer3_0, layer3_1;
    UpBlock up2;
    BasicBlock layer2_0, layer2_1;
    UpBlock up1;
    BasicBlock layer1_0, layer1_1;
    uint64_t init_seed = 0;

    DecoderNet()
        : layer3_0(256, 256, 1),
          layer3_1(256, 256, 1),
          up2(256, 128),
          layer2_0(128, 128, 1),
          layer2_1(128, 128, 1),
          up1(128, 64),
          layer1_0(64, 64, 1),
          layer1_1(64, 64, 1) {}

    void init(uint64_t seed) {
        init_seed = seed;
        Rng rng(seed);
        layer3_0.init(rng);
        layer3_1.init(rng);
        up2.init(rng);
        layer2_0.init(rng);
        layer2_1.init(rng);
        up1.init(rng);
        layer1_0.init(rng);
        layer1_1.init(rng);
    }

    void set_trainable(bool t) {
        visit("", [&](const std::string&, Param& p) { p.set_trainable(t); },
              [](const std::string&, Tensor&) {});
    }

    FeaturePyramid forward(const Var& embedding, bool training) {
        const Tensor& e = embedding->value;
        if (e.c != kEmbeddingChannels)
            throw ShapeError("decoder: embedding must have " +
                             std::to_string(kEmbeddingChannels) + " channels, got " +
                             e.shape_str());
        if (e.h < 1 || e.w < 1)
            throw ShapeError("decoder: embedding spatial size incompatible with upsampling");
        Var d3 = layer3_1.forward(layer3_0.forward(embedding, training), training);
        Var d2 = layer2_1.forward(layer2_0.forward(up2.forward(d3, training), training),
                                  training);
        Var d1 = layer1_1.forward(layer1_0.forward(up1.forward(d2, training), training),
                                  training);
        FeaturePyramid pyr;
        pyr.source = PyramidSource::decoder;
        pyr.levels = {d1, d2, d3};  // reorder to increasing depth
        return pyr;
    }

    void visit(const std::string& prefix, const ParamVisitor& pv, const BufferVisitor& bv) {
        const std::string p = prefix.empty() ? "" : prefix + ".";
        layer3_0.visit(p + "layer3.0", pv, bv);
        layer3_1.visit(p + "layer3.1", pv, bv);
        up2.visit(p + "up2", pv, bv);
        layer2_0.visit(p + "layer2.0", pv, bv);
        layer2_1.visit(p + "layer2.1", pv, bv);
        up1.visit(p + "up1", pv, bv);
        layer1_0.visit(p + "layer1.0", pv, bv);
        layer1_1.visit(p + "layer1.1", pv, bv);
    }
};

}  // namespace dskd
