#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "dskd/common.hpp"
#include "dskd/rng.hpp"

namespace dskd {

// Dense float32 tensor in NCHW layout. Maps with no channel axis use c == 1,
// scalars are (1,1,1,1).
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<float> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {
        if (n_ < 0 || c_ < 0 || h_ < 0 || w_ < 0)
            throw ShapeError("Tensor: negative dimension");
        data.assign(static_cast<size_t>(n_) * c_ * h_ * w_, 0.0f);
    }

    static Tensor scalar(float v) {
        Tensor t(1, 1, 1, 1);
        t.data[0] = v;
        return t;
    }

    static Tensor full(int n, int c, int h, int w, float v) {
        Tensor t(n, c, h, w);
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    size_t index(int in, int ic, int ih, int iw) const {
        return ((static_cast<size_t>(in) * c + ic) * h + ih) * w + iw;
    }
    float& at(int in, int ic, int ih, int iw) { return data[index(in, ic, ih, iw)]; }
    float at(int in, int ic, int ih, int iw) const { return data[index(in, ic, ih, iw)]; }

    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    std::string shape_str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) +
               "," + std::to_string(w) + ")";
    }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }

    void fill_normal(Rng& rng, float mean, float stddev) {
        for (float& x : data) x = rng.normal(mean, stddev);
    }

    void fill_uniform(Rng& rng, float lo, float hi) {
        for (float& x : data) x = rng.uniform(lo, hi);
    }

    bool all_finite() const {
        for (float x : data)
            if (!std::isfinite(x)) return false;
        return true;
    }

    float max_value() const {
        float m = -std::numeric_limits<float>::infinity();
        for (float x : data) m = std::max(m, x);
        return m;
    }

    double mean_value() const {
        if (data.empty()) return 0.0;
        double s = 0.0;
        for (float x : data) s += x;
        return s / static_cast<double>(data.size());
    }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(where) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "max_abs_diff");
    float m = 0.0f;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace dskd
