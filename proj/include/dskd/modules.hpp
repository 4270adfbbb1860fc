#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dskd/autograd.hpp"

namespace dskd {

// A learnable tensor wrapped as a persistent autograd leaf plus Adam state.
struct Param {
    Var var;
    Tensor m, v;  // Adam moments, sized on first step

    void init_shape(int n, int c, int h, int w, bool trainable) {
        var = make_leaf(Tensor(n, c, h, w), trainable);
    }
    Tensor& value() { return var->value; }
    const Tensor& value() const { return var->value; }
    void set_trainable(bool t) { var->requires_grad = t; }
    bool trainable() const { return var->requires_grad; }
};

using ParamVisitor = std::function<void(const std::string&, Param&)>;
using BufferVisitor = std::function<void(const std::string&, Tensor&)>;

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Conv2d {
    Param weight;
    Param bias;
    bool has_bias = false;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(int in_c, int out_c, int kernel, int stride_, int pad_, bool with_bias = false) {
        weight.init_shape(out_c, in_c, kernel, kernel, true);
        has_bias = with_bias;
        if (with_bias) bias.init_shape(1, out_c, 1, 1, true);
        stride = stride_;
        pad = pad_;
    }

    void init(Rng& rng) {
        // He init, fan_out mode
        const float fan_out =
            static_cast<float>(weight.value().n) * weight.value().h * weight.value().w;
        weight.value().fill_normal(rng, 0.0f, std::sqrt(2.0f / fan_out));
        if (has_bias) bias.value().fill(0.0f);
    }

    Var forward(const Var& x) const {
        return conv2d(x, weight.var, has_bias ? bias.var : nullptr, stride, pad);
    }

    void visit(const std::string& prefix, const ParamVisitor& pv, const BufferVisitor&) {
        pv(prefix + ".weight", weight);
        if (has_bias) pv(prefix + ".bias", bias);
    }
};

struct BatchNorm2d {
    Param gamma, beta;
    Tensor running_mean, running_var;
    float momentum = 0.1f;
    float eps = 1e-5f;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels) {
        gamma.init_shape(1, channels, 1, 1, true);
        beta.init_shape(1, channels, 1, 1, true);
        running_mean = Tensor(1, channels, 1, 1);
        running_var = Tensor::full(1, channels, 1, 1, 1.0f);
    }

    void init(Rng&) {
        gamma.value().fill(1.0f);
        beta.value().fill(0.0f);
        running_mean.fill(0.0f);
        running_var.fill(1.0f);
    }

    Var forward(const Var& x, bool training) {
        return batchnorm(x, gamma.var, beta.var, running_mean, running_var, training, momentum,
                         eps);
    }

    void visit(const std::string& prefix, const ParamVisitor& pv, const BufferVisitor& bv) {
        pv(prefix + ".weight", gamma);
        pv(prefix + ".bias", beta);
        bv(prefix + ".running_mean", running_mean);
        bv(prefix + ".running_var", running_var);
    }
};

// conv -> bn -> relu
struct ConvBnRelu {
    Conv2d conv;
    BatchNorm2d bn;

    ConvBnRelu() = default;
    ConvBnRelu(int in_c, int out_c, int kernel, int stride, int pad)
        : conv(in_c, out_c, kernel, stride, pad, false), bn(out_c) {}

    void init(Rng& rng) {
        conv.init(rng);
        bn.init(rng);
    }
    Var forward(const Var& x, bool training) {
        return relu(bn.forward(conv.forward(x), training));
    }
    void visit(const std::string& prefix, const ParamVisitor& pv, const BufferVisitor& bv) {
        conv.visit(prefix + ".conv", pv, bv);
        bn.visit(prefix + ".bn", pv, bv);
    }
};

// Standard two-conv residual block; 1x1 projection shortcut when the shape
// changes.
struct BasicBlock {
    Conv2d conv1, conv2;
    BatchNorm2d bn1, bn2;
    bool has_projection = false;
    Conv2d proj_conv;
    BatchNorm2d proj_bn;

    BasicBlock() = default;
    BasicBlock(int in_c, int out_c, int stride) {
        conv1 = Conv2d(in_c, out_c, 3, stride, 1, false);
        bn1 = BatchNorm2d(out_c);
        conv2 = Conv2d(out_c, out_c, 3, 1, 1, false);
        bn2 = BatchNorm2d(out_c);
        if (stride != 1 || in_c != out_c) {
            has_projection = true;
            proj_conv = Conv2d(in_c, out_c, 1, stride, 0, false);
            proj_bn = BatchNorm2d(out_c);
        }
    }

    void init(Rng& rng) {
        conv1.init(rng);
        bn1.init(rng);
        conv2.init(rng);
        bn2.init(rng);
        if (has_projection) {
            proj_conv.init(rng);
            proj_bn.init(rng);
        }
    }

    Var forward(const Var& x, bool training) {
        Var out = relu(bn1.forward(conv1.forward(x), training));
        out = bn2.forward(conv2.forward(out), training);
        Var identity = has_projection ? proj_bn.forward(proj_conv.forward(x), training) : x;
        return relu(add(out, identity));
    }

    void visit(const std::string& prefix, const ParamVisitor& pv, const BufferVisitor& bv) {
        conv1.visit(prefix + ".conv1", pv, bv);
        bn1.visit(prefix + ".bn1", pv, bv);
        conv2.visit(prefix + ".conv2", pv, bv);
        bn2.visit(prefix + ".bn2", pv, bv);
        if (has_projection) {
            proj_conv.visit(prefix + ".downsample.0", pv, bv);
            proj_bn.visit(prefix + ".downsample.1", pv, bv);
        }
    }
};

// Inverse of a stride-2 stage entry: nearest 2x upsample, then 3x3 conv.
struct UpBlock {
    Conv2d conv;
    BatchNorm2d bn;

    UpBlock() = default;
    UpBlock(int in_c, int out_c) : conv(in_c, out_c, 3, 1, 1, false), bn(out_c) {}

    void init(Rng& rng) {
        conv.init(rng);
        bn.init(rng);
    }
    Var forward(const Var& x, bool training) {
        return relu(bn.forward(conv.forward(upsample2x(x)), training));
    }
    void visit(const std::string& prefix, const ParamVisitor& pv, const BufferVisitor& bv) {
        conv.visit(prefix + ".conv", pv, bv);
        bn.visit(prefix + ".bn", pv, bv);
    }
};

// ---------------------------------------------------------------------------
// State helpers
// ---------------------------------------------------------------------------

template <typename Net>
inline std::map<std::string, Tensor*> named_state(Net& net, const std::string& prefix) {
    std::map<std::string, Tensor*> out;
    net.visit(prefix, [&](const std::string& n, Param& p) { out[n] = &p.value(); },
              [&](const std::string& n, Tensor& t) { out[n] = &t; });
    return out;
}

template <typename Net>
inline std::vector<Param*> collect_params(Net& net) {
    std::vector<Param*> out;
    net.visit("", [&](const std::string&, Param& p) { out.push_back(&p); },
              [](const std::string&, Tensor&) {});
    return out;
}

template <typename NetA, typename NetB>
inline void copy_state(NetA& src, NetB& dst) {
    auto s = named_state(src, "");
    auto d = named_state(dst, "");
    if (s.size() != d.size()) throw ShapeError("copy_state: parameter sets differ");
    for (auto& [name, t] : d) {
        auto it = s.find(name);
        if (it == s.end()) throw ShapeError("copy_state: missing tensor " + name);
        check_same_shape(*it->second, *t, "copy_state");
        t->data = it->second->data;
    }
}

// Byte image of all parameters and buffers, in name order.
template <typename Net>
inline std::vector<unsigned char> state_bytes(Net& net) {
    std::vector<unsigned char> bytes;
    for (auto& [name, t] : named_state(net, "")) {
        const auto* p = reinterpret_cast<const unsigned char*>(t->ptr());
        bytes.insert(bytes.end(), p, p + t->size() * sizeof(float));
    }
    return bytes;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct Adam {
    float lr = 1e-3f;
    float beta1 = 0.5f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    long step_count = 0;
    std::vector<Param*> params;

    Adam() = default;
    Adam(std::vector<Param*> params_, float lr_, float beta1_, float beta2_)
        : lr(lr_), beta1(beta1_), beta2(beta2_), params(std::move(params_)) {}

    void zero_grad() {
        for (Param* p : params) p->var->zero_grad();
    }

    void step() {
        ++step_count;
        const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(step_count));
        const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(step_count));
        for (Param* p : params) {
            if (!p->trainable() || p->var->grad.empty()) continue;
            Tensor& w = p->value();
            const Tensor& g = p->var->grad;
            if (p->m.empty()) {
                p->m = Tensor(w.n, w.c, w.h, w.w);
                p->v = Tensor(w.n, w.c, w.h, w.w);
            }
#pragma omp parallel for schedule(static)
            for (long long i = 0; i < static_cast<long long>(w.size()); ++i) {
                const float gi = g.data[i];
                p->m.data[i] = beta1 * p->m.data[i] + (1.0f - beta1) * gi;
                p->v.data[i] = beta2 * p->v.data[i] + (1.0f - beta2) * gi * gi;
                const float mhat = p->m.data[i] / bc1;
                const float vhat = p->v.data[i] / bc2;
                w.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }
};

}  // namespace dskd
