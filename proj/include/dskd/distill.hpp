#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "dskd/backbone.hpp"
#include "dskd/dfe.hpp"

namespace dskd {

// ---------------------------------------------------------------------------
// Per-pixel losses and anomaly maps
// ---------------------------------------------------------------------------

enum class PairKind { teacher_encoder, teacher_decoder };

// Per-layer pixel discrepancy maps before fusion; map k is [batch, 1, h_k, w_k].
struct AnomalyMapStack {
    std::vector<Var> maps;
    PairKind pair = PairKind::teacher_decoder;
};

inline PairKind pair_of(const FeaturePyramid& a, const FeaturePyramid& b) {
    return (a.source == PyramidSource::decoder || b.source == PyramidSource::decoder)
               ? PairKind::teacher_decoder
               : PairKind::teacher_encoder;
}

// 1/2 * ||a_ij - b_ij||^2 over channels, per level.
inline AnomalyMapStack pixel_l2_loss(const FeaturePyramid& a, const FeaturePyramid& b) {
    check_pyramids_match(a, b, "pixel_l2_loss");
    AnomalyMapStack s;
    s.pair = pair_of(a, b);
    for (int k = 0; k < FeaturePyramid::K; ++k)
        s.maps.push_back(l2_map(a.levels[k], b.levels[k]));
    return s;
}

// 1 - cos(a_ij, b_ij), per level.
inline AnomalyMapStack pixel_cosine_loss(const FeaturePyramid& a, const FeaturePyramid& b) {
    check_pyramids_match(a, b, "pixel_cosine_loss");
    AnomalyMapStack s;
    s.pair = pair_of(a, b);
    for (int k = 0; k < FeaturePyramid::K; ++k)
        s.maps.push_back(cosine_map(a.levels[k], b.levels[k]));
    return s;
}

// lambda * l2 term + cosine term.
inline AnomalyMapStack anomaly_map(const FeaturePyramid& a, const FeaturePyramid& b,
                                   float lambda) {
    check_pyramids_match(a, b, "anomaly_map");
    AnomalyMapStack s;
    s.pair = pair_of(a, b);
    for (int k = 0; k < FeaturePyramid::K; ++k)
        s.maps.push_back(axpby(lambda, l2_map(a.levels[k], b.levels[k]), 1.0f,
                               cosine_map(a.levels[k], b.levels[k])));
    return s;
}

// Mean over pixels (and batch) within each level, then mean over levels.
inline Var scalar_loss(const AnomalyMapStack& stack) {
    if (stack.maps.empty()) throw ShapeError("scalar_loss: empty anomaly map stack");
    Var acc = mean_all(stack.maps[0]);
    for (size_t k = 1; k < stack.maps.size(); ++k) acc = add(acc, mean_all(stack.maps[k]));
    return scale(acc, 1.0f / static_cast<float>(stack.maps.size()));
}

// ---------------------------------------------------------------------------
// Model bundle and training
// ---------------------------------------------------------------------------

enum class Variant { DS, TE, TD, ED };

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::DS: return "DS";
        case Variant::TE: return "T-E";
        case Variant::TD: return "T-D";
        default: return "E-D";
    }
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "DS") return Variant::DS;
    if (s == "T-E" || s == "TE") return Variant::TE;
    if (s == "T-D" || s == "TD") return Variant::TD;
    if (s == "E-D" || s == "ED") return Variant::ED;
    throw ConfigError("unknown variant '" + s + "' (expected DS, T-E, T-D or E-D)");
}

struct TrainConfig {
    float learning_rate = 0.001f;
    float adam_beta1 = 0.5f;
    float adam_beta2 = 0.999f;
    int epochs = 200;
    float lambda_l2 = 0.1f;
    int batch_size = 8;
    uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1, got " + std::to_string(epochs));
        if (lambda_l2 < 0.0f) throw ConfigError("lambda must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(learning_rate > 0.0f)) throw ConfigError("learning rate must be > 0");
    }
};

// The teacher seed is fixed independently of the run seed: the teacher plays
// the role of a pretrained network and must be identical across runs,
// variants and seeds unless explicitly replaced by a weights file.
inline constexpr uint64_t kDefaultTeacherSeed = 0x7EAC11E5EEDULL;

struct DskdModel {
    Variant variant = Variant::DS;
    bool dfe_enabled = true;
    Teacher teacher;
    BackboneNet encoder;
    FeatureEmbedding dfe;
    DecoderNet decoder;
    uint64_t encoder_seed = 0;

    bool uses_teacher() const { return variant != Variant::ED; }
    bool trains_encoder() const { return variant == Variant::DS || variant == Variant::TE; }
    bool has_encoder() const { return trains_encoder() || variant == Variant::ED; }
    bool has_decoder() const { return variant != Variant::TE; }
    bool has_dfe() const { return has_decoder() && dfe_enabled; }

    void init(uint64_t seed, uint64_t teacher_seed = kDefaultTeacherSeed) {
        Rng streams(seed);
        if (uses_teacher()) teacher.init_seeded(teacher_seed);
        if (has_encoder()) {
            encoder_seed = streams.fork(1).next_u64();
            encoder.init(encoder_seed);
            // E-D keeps a frozen randomly initialized encoder as reference
            encoder.set_trainable(variant != Variant::ED);
        }
        if (has_dfe()) dfe.init(streams.fork(2).next_u64());
        if (has_decoder()) decoder.init(streams.fork(3).next_u64());
    }

    std::vector<Param*> trainable_params() {
        std::vector<Param*> out;
        if (trains_encoder())
            for (Param* p : collect_params(encoder)) out.push_back(p);
        if (has_dfe())
            for (Param* p : collect_params(dfe)) out.push_back(p);
        if (has_decoder())
            for (Param* p : collect_params(decoder)) out.push_back(p);
        return out;
    }

    // Normalized reference pyramid (the distillation target): the frozen
    // teacher, or for E-D the frozen random encoder.
    FeaturePyramid reference_forward(const ImageBatch& batch) {
        if (uses_teacher()) return l2_normalize(teacher.forward(batch));
        NoGradGuard ng;
        return l2_normalize(encoder.forward(batch, /*training=*/false, PyramidSource::encoder));
    }

    // Decoder input per the variant wiring; `source` must already be
    // normalized and detached/frozen.
    Var embedding_from(const FeaturePyramid& source, bool training) {
        if (dfe_enabled) return dfe.embed(source, training);
        return source.levels[2];  // deepest level is already at embedding size
    }
};

inline FeaturePyramid detach(const FeaturePyramid& p) {
    FeaturePyramid out;
    out.source = p.source;
    for (int k = 0; k < FeaturePyramid::K; ++k) out.levels[k] = detach(p.levels[k]);
    return out;
}

struct EpochStats {
    int epoch = 0;        // 1-based
    double loss_e = 0.0;  // mean over the epoch's batches (0 when pair untrained)
    double loss_d = 0.0;
    double wall_seconds = 0.0;
};

struct StepLosses {
    double loss_e = 0.0;
    double loss_d = 0.0;
};

// One optimization step on one batch. Exposed separately so tests can drive
// single steps; train_model loops over it.
inline StepLosses train_step(DskdModel& model, Adam& opt, const ImageBatch& batch,
                             const TrainConfig& cfg,
                             const FeaturePyramid* cached_reference = nullptr) {
    FeaturePyramid ref =
        cached_reference ? *cached_reference : model.reference_forward(batch);

    Var total;
    StepLosses out;
    if (model.trains_encoder()) {
        FeaturePyramid enc =
            l2_normalize(model.encoder.forward(batch, /*training=*/true, PyramidSource::encoder));
        Var le = scalar_loss(anomaly_map(ref, enc, cfg.lambda_l2));
        out.loss_e = le->value.data[0];
        total = le;
        if (model.has_decoder()) {
            // Stop-gradient at the DFE input: l_d trains only DFE + decoder.
            Var emb = model.embedding_from(detach(enc), /*training=*/true);
            FeaturePyramid dec = l2_normalize(model.decoder.forward(emb, /*training=*/true));
            Var ld = scalar_loss(anomaly_map(ref, dec, cfg.lambda_l2));
            out.loss_d = ld->value.data[0];
            total = add(total, ld);
        }
    } else {
        Var emb = model.embedding_from(ref, /*training=*/true);
        FeaturePyramid dec = l2_normalize(model.decoder.forward(emb, /*training=*/true));
        Var ld = scalar_loss(anomaly_map(ref, dec, cfg.lambda_l2));
        out.loss_d = ld->value.data[0];
        total = ld;
    }

    if (!std::isfinite(out.loss_e) || !std::isfinite(out.loss_d))
        throw NumericError("non-finite training loss: loss_e=" + std::to_string(out.loss_e) +
                           " loss_d=" + std::to_string(out.loss_d));

    opt.zero_grad();
    backward(total);
    opt.step();
    return out;
}

// Algorithm: per batch, reference/encoder forward, normalize, embed, decoder
// forward, normalize, per-level anomaly maps, mean losses, Adam updates with
// the encoder and DFE+decoder parameter groups isolated by the stop-gradient.
inline std::vector<EpochStats> train_model(
    DskdModel& model, const std::vector<Tensor>& images, const TrainConfig& cfg,
    const std::function<void(const EpochStats&)>& on_epoch = nullptr) {
    cfg.validate();
    if (images.empty()) throw DataError("training dataset is empty");
    for (const Tensor& t : images)
        if (t.n != 1 || t.c != 3) throw ShapeError("train: images must be [1,3,h,w] tensors");

    Adam opt(model.trainable_params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);

    // The reference network is frozen, so its normalized pyramids can be
    // precomputed once per image (bounded by a memory budget).
    const size_t per_image_floats = [&] {
        const int s = images[0].h;
        return static_cast<size_t>(64) * (s / 4) * (s / 4) + 128 * (s / 8) * (s / 8) +
               256 * (s / 16) * (s / 16);
    }();
    const bool cache_reference =
        per_image_floats * images.size() * sizeof(float) <= (512ull << 20);
    std::vector<FeaturePyramid> ref_cache;
    if (cache_reference) {
        ref_cache.reserve(images.size());
        for (const Tensor& img : images)
            ref_cache.push_back(model.reference_forward(ImageBatch(img)));
    }

    std::vector<EpochStats> history;
    Rng shuffle_rng = Rng(cfg.seed).fork(0xBA7C4);
    std::vector<int> order(images.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        // Fisher-Yates with the run's deterministic stream
        for (size_t i = order.size(); i > 1; --i) {
            const size_t j = shuffle_rng.uniform_int(static_cast<uint32_t>(i));
            std::swap(order[i - 1], order[j]);
        }

        EpochStats stats;
        stats.epoch = epoch;
        int batches = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t end = std::min(order.size(), start + cfg.batch_size);
            const int bsz = static_cast<int>(end - start);
            Tensor batch_data(bsz, 3, images[0].h, images[0].w);
            const size_t item = images[0].size();
            for (int b = 0; b < bsz; ++b)
                std::memcpy(batch_data.ptr() + b * item, images[order[start + b]].ptr(),
                            item * sizeof(float));
            ImageBatch batch(std::move(batch_data));

            StepLosses losses;
            if (cache_reference && bsz == 1) {
                losses = train_step(model, opt, batch, cfg, &ref_cache[order[start]]);
            } else if (cache_reference) {
                // Assemble the cached per-image pyramids into a batch pyramid.
                FeaturePyramid ref;
                ref.source = ref_cache[0].source;
                for (int k = 0; k < FeaturePyramid::K; ++k) {
                    const Tensor& proto = ref_cache[order[start]].levels[k]->value;
                    Tensor lv(bsz, proto.c, proto.h, proto.w);
                    for (int b = 0; b < bsz; ++b)
                        std::memcpy(lv.ptr() + static_cast<size_t>(b) * proto.size(),
                                    ref_cache[order[start + b]].levels[k]->value.ptr(),
                                    proto.size() * sizeof(float));
                    ref.levels[k] = make_leaf(std::move(lv));
                }
                losses = train_step(model, opt, batch, cfg, &ref);
            } else {
                losses = train_step(model, opt, batch, cfg);
            }
            stats.loss_e += losses.loss_e;
            stats.loss_d += losses.loss_d;
            ++batches;
        }
        stats.loss_e /= batches;
        stats.loss_d /= batches;
        stats.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        history.push_back(stats);
        if (on_epoch) on_epoch(stats);
    }
    return history;
}

}  // namespace dskd
