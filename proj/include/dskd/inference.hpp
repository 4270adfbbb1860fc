#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dskd/distill.hpp"
#include "dskd/image.hpp"

namespace dskd {

// Raw-score normalization statistics gathered on the defect-free training
// set at the end of training.
struct ScoreCalibration {
    float min_score = 0.0f;
    float max_score = 1.0f;
};

struct AnomalyResult {
    Tensor map;  // [1,1,h,w], fused + smoothed, input resolution, unnormalized
    float raw_score = 0.0f;
    float normalized_score = 0.0f;
    bool is_anomalous = false;
    std::string sample_id;
};

struct InferenceSettings {
    float lambda = 0.1f;
    float sigma = 4.0f;
    std::array<bool, 3> map_selection = {true, true, true};

    void validate() const {
        if (!(sigma > 0.0f)) throw ConfigError("sigma must be > 0");
        if (!map_selection[0] && !map_selection[1] && !map_selection[2])
            throw ConfigError("map selection must include at least one level");
    }
};

// ---------------------------------------------------------------------------
// Map fusion and smoothing
// ---------------------------------------------------------------------------

// Bilinearly upsample every selected level to the target size and sum.
inline Tensor fuse_maps(const AnomalyMapStack& stack, int target_h, int target_w,
                        std::array<bool, 3> selection = {true, true, true}) {
    if (stack.maps.empty()) throw ShapeError("fuse_maps: empty anomaly map stack");
    const int batch = stack.maps[0]->value.n;
    Tensor fused(batch, 1, target_h, target_w);
    bool any = false;
    for (size_t k = 0; k < stack.maps.size(); ++k) {
        if (k < selection.size() && !selection[k]) continue;
        any = true;
        Tensor up = detail::bilinear_resize(stack.maps[k]->value, target_h, target_w);
        for (size_t i = 0; i < fused.size(); ++i) fused.data[i] += up.data[i];
    }
    if (!any) throw ConfigError("fuse_maps: no levels selected");
    return fused;
}

namespace detail {

inline int reflect_index(int i, int n) {
    // symmetric reflection: ...edcba|abcde|edcba...
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

inline std::vector<float> gaussian_kernel(float sigma) {
    const int radius = static_cast<int>(std::ceil(4.0f * sigma));
    std::vector<float> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
        k[i + radius] = static_cast<float>(v);
        sum += v;
    }
    for (float& v : k) v = static_cast<float>(v / sum);
    return k;
}

}  // namespace detail

// Separable Gaussian with kernel radius ceil(4*sigma) and reflect padding.
inline Tensor gaussian_smooth(const Tensor& map, float sigma = 4.0f) {
    if (!(sigma > 0.0f)) throw ConfigError("gaussian_smooth: sigma must be > 0");
    const std::vector<float> kernel = detail::gaussian_kernel(sigma);
    const int radius = static_cast<int>(kernel.size() / 2);
    const int planes = map.n * map.c;
    Tensor tmp(map.n, map.c, map.h, map.w);
    Tensor out(map.n, map.c, map.h, map.w);
#pragma omp parallel for schedule(static)
    for (int pc = 0; pc < planes; ++pc) {
        const float* src = map.ptr() + static_cast<size_t>(pc) * map.h * map.w;
        float* mid = tmp.ptr() + static_cast<size_t>(pc) * map.h * map.w;
        float* dst = out.ptr() + static_cast<size_t>(pc) * map.h * map.w;
        // horizontal
        for (int y = 0; y < map.h; ++y) {
            const float* srow = src + static_cast<size_t>(y) * map.w;
            float* mrow = mid + static_cast<size_t>(y) * map.w;
            for (int x = 0; x < map.w; ++x) {
                double acc = 0.0;
                for (int t = -radius; t <= radius; ++t)
                    acc += static_cast<double>(kernel[t + radius]) *
                           srow[detail::reflect_index(x + t, map.w)];
                mrow[x] = static_cast<float>(acc);
            }
        }
        // vertical
        for (int y = 0; y < map.h; ++y) {
            for (int x = 0; x < map.w; ++x) {
                double acc = 0.0;
                for (int t = -radius; t <= radius; ++t)
                    acc += static_cast<double>(kernel[t + radius]) *
                           mid[static_cast<size_t>(detail::reflect_index(y + t, map.h)) * map.w +
                               x];
                dst[static_cast<size_t>(y) * map.w + x] = static_cast<float>(acc);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

inline AnomalyResult score_and_classify(Tensor map, const ScoreCalibration& calib,
                                        std::string sample_id = {}) {
    if (!(calib.max_score > calib.min_score))
        throw ConfigError("degenerate score calibration: max_score must exceed min_score");
    AnomalyResult r;
    r.raw_score = map.max_value();
    float norm = (r.raw_score - calib.min_score) / (calib.max_score - calib.min_score);
    norm = norm < 0.0f ? 0.0f : (norm > 1.0f ? 1.0f : norm);
    r.normalized_score = norm;
    r.is_anomalous = norm >= 0.5f;
    r.map = std::move(map);
    r.sample_id = std::move(sample_id);
    return r;
}

// ---------------------------------------------------------------------------
// Full inference path
// ---------------------------------------------------------------------------

// Reference and student pyramids used for anomaly maps at inference time:
// DS and T-D compare teacher vs decoder, T-E teacher vs encoder, E-D the
// frozen encoder vs decoder.
inline std::pair<FeaturePyramid, FeaturePyramid> inference_pyramids(DskdModel& model,
                                                                    const ImageBatch& batch) {
    NoGradGuard ng;
    FeaturePyramid ref = model.reference_forward(batch);
    if (model.variant == Variant::TE) {
        FeaturePyramid enc =
            l2_normalize(model.encoder.forward(batch, /*training=*/false, PyramidSource::encoder));
        return {ref, enc};
    }
    FeaturePyramid source = ref;
    if (model.variant == Variant::DS) {
        source =
            l2_normalize(model.encoder.forward(batch, /*training=*/false, PyramidSource::encoder));
    }
    Var emb = model.embedding_from(source, /*training=*/false);
    FeaturePyramid dec = l2_normalize(model.decoder.forward(emb, /*training=*/false));
    return {ref, dec};
}

// Fused and smoothed full-resolution anomaly map (Algorithm-2 map path).
inline Tensor raw_anomaly_map(DskdModel& model, const ImageBatch& batch,
                              const InferenceSettings& settings) {
    settings.validate();
    NoGradGuard ng;
    auto [ref, stud] = inference_pyramids(model, batch);
    AnomalyMapStack stack = anomaly_map(ref, stud, settings.lambda);
    Tensor fused = fuse_maps(stack, batch.height(), batch.width(), settings.map_selection);
    return gaussian_smooth(fused, settings.sigma);
}

inline AnomalyResult infer(DskdModel& model, const Tensor& image, const ScoreCalibration& calib,
                           const InferenceSettings& settings, std::string sample_id = {}) {
    ImageBatch batch(image, {sample_id});
    Tensor map = raw_anomaly_map(model, batch, settings);
    return score_and_classify(std::move(map), calib, std::move(sample_id));
}

// Max raw score over the (defect-free) training images; min pinned at 0.
inline ScoreCalibration calibrate(DskdModel& model, const std::vector<Tensor>& train_images,
                                  const InferenceSettings& settings) {
    if (train_images.empty()) throw DataError("calibrate: no training images");
    ScoreCalibration calib;
    calib.min_score = 0.0f;
    float max_raw = 0.0f;
    for (const Tensor& img : train_images) {
        Tensor map = raw_anomaly_map(model, ImageBatch(img), settings);
        max_raw = std::max(max_raw, map.max_value());
    }
    if (!(max_raw > 0.0f)) max_raw = 1.0f;  // untrained or duplicate-free degenerate case
    calib.max_score = max_raw;
    return calib;
}

// ---------------------------------------------------------------------------
// Heatmap export
// ---------------------------------------------------------------------------

// Undo the preprocessing standardization for overlays.
inline Image unpreprocess(const Tensor& image) {
    Tensor t(1, 3, image.h, image.w);
    const size_t plane = static_cast<size_t>(image.h) * image.w;
    for (int c = 0; c < 3; ++c)
        for (size_t i = 0; i < plane; ++i)
            t.data[c * plane + i] = image.data[c * plane + i] * kImagenetStd[c] +
                                    kImagenetMean[c];
    return tensor_to_image(t);
}

// 8-bit PNG, min-max scaled per image; optional 0.5-alpha blend over the input.
inline void save_heatmap(const AnomalyResult& result, const std::string& path,
                         const Tensor* overlay_input = nullptr) {
    Tensor scaled = result.map;
    float lo = scaled.data[0], hi = scaled.data[0];
    for (float v : scaled.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const float range = hi - lo;
    for (float& v : scaled.data) v = range > 0.0f ? (v - lo) / range : 0.0f;
    Image heat = tensor_to_image(scaled);
    if (overlay_input) {
        Image base = unpreprocess(*overlay_input);
        if (base.width == heat.width && base.height == heat.height)
            for (size_t i = 0; i < heat.rgb.size(); ++i)
                heat.rgb[i] =
                    static_cast<unsigned char>((heat.rgb[i] + base.rgb[i] + 1) / 2);
    }
    save_png(path, heat);
}

}  // namespace dskd
