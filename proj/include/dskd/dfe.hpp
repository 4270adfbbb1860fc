#pragma once

#include "dskd/backbone.hpp"

namespace dskd {

// Deep feature embedding: the bottleneck between the two students. The
// shallow pyramid levels are brought down to the deepest level's resolution
// with stride-2 3x3 conv blocks (doubling channels each time), concatenated,
// and fused by a residual block with a 1x1 projection shortcut.
//
//   F1 (64,  s/4)  -> 128 -> 256 at s/16
//   F2 (128, s/8)  ->        256 at s/16
//   F3 (256, s/16) ->        pass-through
//   concat -> 768 -> residual fuse -> 256 at s/16
struct FeatureEmbedding {
    ConvBnRelu down1_a, down1_b;  // F1 path, two stride-2 blocks
    ConvBnRelu down2;             // F2 path, one stride-2 block
    BasicBlock fuse;              // 768 -> 256, 1x1 projection shortcut
    uint64_t init_seed = 0;

    FeatureEmbedding()
        : down1_a(64, 128, 3, 2, 1),
          down1_b(128, 256, 3, 2, 1),
          down2(128, 256, 3, 2, 1),
          fuse(768, 256, 1) {}

    void init(uint64_t seed) {
        init_seed = seed;
        Rng rng(seed);
        down1_a.init(rng);
        down1_b.init(rng);
        down2.init(rng);
        fuse.init(rng);
    }

    void set_trainable(bool t) {
        visit("", [&](const std::string&, Param& p) { p.set_trainable(t); },
              [](const std::string&, Tensor&) {});
    }

    Var embed(const FeaturePyramid& pyramid, bool training) {
        pyramid.validate();
        const Tensor& f1 = pyramid.levels[0]->value;
        const Tensor& f2 = pyramid.levels[1]->value;
        const Tensor& f3 = pyramid.levels[2]->value;
        if (f1.c != 64 || f2.c != 128 || f3.c != 256)
            throw ShapeError("feature_embedding: expected channel counts (64,128,256), got (" +
                             std::to_string(f1.c) + "," + std::to_string(f2.c) + "," +
                             std::to_string(f3.c) + ")");
        Var a = down1_b.forward(down1_a.forward(pyramid.levels[0], training), training);
        Var b = down2.forward(pyramid.levels[1], training);
        Var cat = concat_channels({a, b, pyramid.levels[2]});
        return fuse.forward(cat, training);
    }

    void visit(const std::string& prefix, const ParamVisitor& pv, const BufferVisitor& bv) {
        const std::string p = prefix.empty() ? "" : prefix + ".";
        down1_a.visit(p + "down1.0", pv, bv);
        down1_b.visit(p + "down1.1", pv, bv);
        down2.visit(p + "down2", pv, bv);
        fuse.visit(p + "fuse", pv, bv);
    }
};

}  // namespace dskd
