#pragma once

// Independent brute-force oracles used by both the unit and acceptance
// suites. These deliberately avoid the production code paths: AUROC counts
// the O(n^2) pairwise statistic directly, and PRO recomputes predictions
// from scratch at every distinct threshold.

#include <set>

#include "dskd/metrics.hpp"
#include "dskd/rng.hpp"

namespace dskd::testutil {

inline double auroc_bruteforce(const LabeledScores& d) {
    double wins = 0.0;
    size_t n_pos = 0;
    for (size_t i = 0; i < d.labels.size(); ++i) {
        if (d.labels[i] == 0) continue;
        ++n_pos;
        for (size_t j = 0; j < d.labels.size(); ++j) {
            if (d.labels[j] != 0) continue;
            if (d.scores[i] > d.scores[j]) wins += 1.0;
            else if (d.scores[i] == d.scores[j]) wins += 0.5;
        }
    }
    const size_t n_neg = d.labels.size() - n_pos;
    return wins / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

inline double pro_bruteforce(const std::vector<SegmentationPair>& pairs, double fpr_limit) {
    struct Region {
        size_t pair;
        std::vector<std::pair<int, int>> pixels;
    };
    std::vector<Region> regions;
    size_t n_normal = 0;
    std::set<float> values;
    for (size_t pi = 0; pi < pairs.size(); ++pi) {
        for (const auto& comp : connected_components(pairs[pi].mask))
            regions.push_back({pi, comp});
        for (size_t i = 0; i < pairs[pi].map.size(); ++i) {
            values.insert(pairs[pi].map.data[i]);
            if (pairs[pi].mask.data[i] <= 0.5f) ++n_normal;
        }
    }
    std::vector<std::pair<double, double>> curve;
    curve.emplace_back(0.0, 0.0);
    std::vector<float> desc(values.rbegin(), values.rend());
    for (float t : desc) {
        double overlap_sum = 0.0;
        for (const Region& r : regions) {
            size_t hit = 0;
            for (auto [y, x] : r.pixels)
                if (pairs[r.pair].map.at(0, 0, y, x) > t) ++hit;
            overlap_sum += static_cast<double>(hit) / r.pixels.size();
        }
        size_t fp = 0;
        for (const auto& p : pairs)
            for (size_t i = 0; i < p.map.size(); ++i)
                if (p.map.data[i] > t && p.mask.data[i] <= 0.5f) ++fp;
        curve.emplace_back(static_cast<double>(fp) / n_normal, overlap_sum / regions.size());
    }
    if (curve.back().first < fpr_limit) curve.emplace_back(fpr_limit, curve.back().second);
    double area = 0.0;
    for (size_t k = 0; k + 1 < curve.size(); ++k) {
        auto [f0, o0] = curve[k];
        auto [f1, o1] = curve[k + 1];
        if (f0 >= fpr_limit) break;
        if (f1 <= fpr_limit) {
            area += (f1 - f0) * 0.5 * (o0 + o1);
        } else {
            const double o_at = o0 + (o1 - o0) * (fpr_limit - f0) / (f1 - f0);
            area += (fpr_limit - f0) * 0.5 * (o0 + o_at);
            break;
        }
    }
    return area / fpr_limit;
}

inline LabeledScores random_scores(Rng& rng, int n, bool allow_ties) {
    LabeledScores d;
    for (int i = 0; i < n; ++i) {
        const float v =
            allow_ties ? static_cast<float>(rng.uniform_int(16)) / 8.0f : rng.uniform();
        d.scores.push_back(v);
        d.labels.push_back(static_cast<int>(rng.uniform_int(2)));
    }
    d.labels[0] = 0;
    d.labels[n - 1] = 1;
    return d;
}

inline SegmentationPair random_pair(Rng& rng, int size, int quant_levels) {
    SegmentationPair p;
    p.map = Tensor(1, 1, size, size);
    p.mask = Tensor(1, 1, size, size);
    for (size_t i = 0; i < p.map.size(); ++i)
        p.map.data[i] = static_cast<float>(rng.uniform_int(quant_levels)) / quant_levels;
    const int nrect = 1 + static_cast<int>(rng.uniform_int(2));
    for (int r = 0; r < nrect; ++r) {
        const int w = 2 + static_cast<int>(rng.uniform_int(size / 2));
        const int h = 2 + static_cast<int>(rng.uniform_int(size / 2));
        const int x0 = static_cast<int>(rng.uniform_int(size - w));
        const int y0 = static_cast<int>(rng.uniform_int(size - h));
        for (int y = y0; y < y0 + h; ++y)
            for (int x = x0; x < x0 + w; ++x) p.mask.at(0, 0, y, x) = 1.0f;
    }
    return p;
}

}  // namespace dskd::testutil
