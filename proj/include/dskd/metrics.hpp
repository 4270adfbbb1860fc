#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "dskd/tensor.hpp"

namespace dskd {

// ---------------------------------------------------------------------------
// Image-level AUROC
// ---------------------------------------------------------------------------

struct LabeledScores {
    std::vector<double> scores;
    std::vector<int> labels;  // 0 = normal, 1 = anomalous
};

// Rank-statistic AUROC with ties counted as 1/2; equal to the pairwise
// probability P(s+ > s-) + 1/2 P(s+ == s-).
inline double auroc(const LabeledScores& data) {
    if (data.scores.size() != data.labels.size())
        throw MetricError("auroc: scores and labels differ in length");
    const size_t n = data.scores.size();
    size_t n_pos = 0;
    for (int l : data.labels) n_pos += (l != 0);
    const size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw MetricError("auroc: undefined, both classes must be present");

    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](size_t a, size_t b) { return data.scores[a] < data.scores[b]; });

    // average ranks over tie groups (1-based)
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && data.scores[idx[j + 1]] == data.scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t k = i; k <= j; ++k)
            if (data.labels[idx[k]] != 0) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// ---------------------------------------------------------------------------
// Pixel-level metrics
// ---------------------------------------------------------------------------

struct SegmentationPair {
    Tensor map;   // [1,1,h,w] (or any tensor; compared elementwise)
    Tensor mask;  // same shape, binary
};

inline void check_pair(const SegmentationPair& p) {
    check_same_shape(p.map, p.mask, "SegmentationPair");
}

// AUROC over all pixels of all pairs pooled.
inline double pixel_auroc(const std::vector<SegmentationPair>& pairs) {
    LabeledScores pooled;
    for (const auto& p : pairs) {
        check_pair(p);
        for (size_t i = 0; i < p.map.size(); ++i) {
            pooled.scores.push_back(p.map.data[i]);
            pooled.labels.push_back(p.mask.data[i] > 0.5f ? 1 : 0);
        }
    }
    return auroc(pooled);
}

// 8-connectivity components of a binary mask, discovered in scanline order.
inline std::vector<std::vector<std::pair<int, int>>> connected_components(const Tensor& mask) {
    const int h = mask.h, w = mask.w;
    std::vector<std::vector<std::pair<int, int>>> comps;
    std::vector<char> seen(static_cast<size_t>(h) * w, 0);
    std::vector<std::pair<int, int>> queue;
    for (int r0 = 0; r0 < h; ++r0) {
        for (int c0 = 0; c0 < w; ++c0) {
            const size_t i0 = static_cast<size_t>(r0) * w + c0;
            if (seen[i0] || mask.data[i0] <= 0.5f) continue;
            comps.emplace_back();
            auto& comp = comps.back();
            queue.clear();
            queue.emplace_back(r0, c0);
            seen[i0] = 1;
            while (!queue.empty()) {
                auto [r, c] = queue.back();
                queue.pop_back();
                comp.emplace_back(r, c);
                for (int dr = -1; dr <= 1; ++dr) {
                    for (int dc = -1; dc <= 1; ++dc) {
                        if (dr == 0 && dc == 0) continue;
                        const int rr = r + dr, cc = c + dc;
                        if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
                        const size_t ii = static_cast<size_t>(rr) * w + cc;
                        if (!seen[ii] && mask.data[ii] > 0.5f) {
                            seen[ii] = 1;
                            queue.emplace_back(rr, cc);
                        }
                    }
                }
            }
            std::sort(comp.begin(), comp.end());
        }
    }
    return comps;
}

// Per-region-overlap curve integrated over FPR in [0, fpr_limit] and
// normalized by fpr_limit. Prediction at threshold t is {map > t}; the sweep
// visits distinct map values in descending order (all of them when
// num_thresholds == 0, otherwise that many rank quantiles), starts at (0,0)
// and extends the last overlap horizontally if the achieved FPR never reaches
// the limit.
inline double pro(const std::vector<SegmentationPair>& pairs, double fpr_limit = 0.3,
                  int num_thresholds = 0) {
    if (!(fpr_limit > 0.0) || fpr_limit > 1.0)
        throw MetricError("pro: fpr_limit must be in (0, 1]");

    struct Pixel {
        float value;
        int32_t region;  // -1 for normal pixels
    };
    std::vector<Pixel> pixels;
    std::vector<size_t> region_size;
    size_t n_normal = 0;
    for (const auto& p : pairs) {
        check_pair(p);
        const int h = p.mask.h, w = p.mask.w;
        std::vector<int32_t> region_of(static_cast<size_t>(h) * w, -1);
        for (const auto& comp : connected_components(p.mask)) {
            const int32_t id = static_cast<int32_t>(region_size.size());
            region_size.push_back(comp.size());
            for (auto [r, c] : comp) region_of[static_cast<size_t>(r) * w + c] = id;
        }
        for (size_t i = 0; i < p.map.size(); ++i) {
            pixels.push_back({p.map.data[i], region_of[i]});
            if (region_of[i] < 0) ++n_normal;
        }
    }
    if (region_size.empty()) throw MetricError("pro: no ground-truth regions present");
    if (n_normal == 0) throw MetricError("pro: no normal pixels, FPR undefined");

    std::sort(pixels.begin(), pixels.end(),
              [](const Pixel& a, const Pixel& b) { return a.value > b.value; });

    // Optional rank-quantile thinning for large inputs.
    std::vector<float> selected;
    if (num_thresholds > 0) {
        selected.reserve(num_thresholds);
        const size_t np = pixels.size();
        for (int k = 0; k < num_thresholds; ++k) {
            const size_t at =
                num_thresholds == 1
                    ? 0
                    : static_cast<size_t>((static_cast<double>(k) * (np - 1)) /
                                          (num_thresholds - 1));
            selected.push_back(pixels[at].value);
        }
        selected.erase(std::unique(selected.begin(), selected.end()), selected.end());
    }

    const double n_regions = static_cast<double>(region_size.size());
    std::vector<size_t> hits(region_size.size(), 0);
    double overlap_sum = 0.0;  // sum over regions of hits/size
    size_t fp = 0;

    std::vector<std::pair<double, double>> curve;  // (fpr, mean overlap)
    curve.emplace_back(0.0, 0.0);

    size_t i = 0;
    size_t next_sel = 0;
    while (i < pixels.size()) {
        const float v = pixels[i].value;
        bool emit = true;
        if (num_thresholds > 0) {
            emit = next_sel < selected.size() && selected[next_sel] == v;
            if (emit) ++next_sel;
        }
        if (emit)
            curve.emplace_back(static_cast<double>(fp) / static_cast<double>(n_normal),
                               overlap_sum / n_regions);
        while (i < pixels.size() && pixels[i].value == v) {
            if (pixels[i].region >= 0) {
                ++hits[pixels[i].region];
                overlap_sum += 1.0 / static_cast<double>(region_size[pixels[i].region]);
            } else {
                ++fp;
            }
            ++i;
        }
    }

    if (curve.back().first < fpr_limit) curve.emplace_back(fpr_limit, curve.back().second);

    double area = 0.0;
    for (size_t k = 0; k + 1 < curve.size(); ++k) {
        const auto [f0, o0] = curve[k];
        const auto [f1, o1] = curve[k + 1];
        if (f0 >= fpr_limit) break;
        if (f1 <= fpr_limit) {
            area += (f1 - f0) * 0.5 * (o0 + o1);
        } else {
            const double t = (fpr_limit - f0) / (f1 - f0);
            const double o_at = o0 + (o1 - o0) * t;
            area += (fpr_limit - f0) * 0.5 * (o0 + o_at);
            break;
        }
    }
    return area / fpr_limit;
}

}  // namespace dskd
