#include <doctest.h>

#include "dskd/modules.hpp"
#include "test_utils.hpp"

using namespace dskd;
using testutil::gradcheck;
using testutil::random_tensor;

TEST_CASE("conv2d gradients (input, weight, bias)") {
    Rng rng(11);
    Tensor x = random_tensor(2, 3, 6, 6, rng);
    Tensor w = random_tensor(4, 3, 3, 3, rng, -0.5f, 0.5f);
    Tensor b = random_tensor(1, 4, 1, 1, rng, -0.2f, 0.2f);

    for (int stride : {1, 2}) {
        // w.r.t. input
        CHECK(gradcheck(x, [&](const Var& v) {
                  return mean_all(conv2d(v, make_leaf(w), make_leaf(b), stride, 1));
              }) < 1e-2);
        // w.r.t. weight
        CHECK(gradcheck(w, [&](const Var& v) {
                  return mean_all(conv2d(make_leaf(x), v, make_leaf(b), stride, 1));
              }) < 1e-2);
        // w.r.t. bias
        CHECK(gradcheck(b, [&](const Var& v) {
                  return mean_all(conv2d(make_leaf(x), make_leaf(w), v, stride, 1));
              }) < 1e-2);
    }
}

TEST_CASE("conv2d shape errors") {
    Rng rng(1);
    Tensor x = random_tensor(1, 3, 8, 8, rng);
    Tensor w = random_tensor(4, 5, 3, 3, rng);  // channel mismatch
    CHECK_THROWS_AS(conv2d(make_leaf(x), make_leaf(w), nullptr, 1, 1), ShapeError);
}

TEST_CASE("batchnorm gradients in training mode") {
    Rng rng(13);
    Tensor x = random_tensor(3, 4, 5, 5, rng);
    Tensor gamma = random_tensor(1, 4, 1, 1, rng, 0.5f, 1.5f);
    Tensor beta = random_tensor(1, 4, 1, 1, rng, -0.3f, 0.3f);
    Tensor rm(1, 4, 1, 1), rv = Tensor::full(1, 4, 1, 1, 1.0f);

    auto bn_loss = [&](const Var& v, const Var& g, const Var& b) {
        Tensor rm2 = rm, rv2 = rv;  // keep running stats untouched across calls
        return mean_all(
            relu(batchnorm(v, g, b, rm2, rv2, /*training=*/true, 0.1f, 1e-5f)));
    };
    CHECK(gradcheck(x, [&](const Var& v) {
              return bn_loss(v, make_leaf(gamma), make_leaf(beta));
          }) < 2e-2);
    CHECK(gradcheck(gamma, [&](const Var& v) {
              return bn_loss(make_leaf(x), v, make_leaf(beta));
          }) < 1e-2);
    CHECK(gradcheck(beta, [&](const Var& v) {
              return bn_loss(make_leaf(x), make_leaf(gamma), v);
          }) < 1e-2);
}

TEST_CASE("batchnorm eval mode uses running statistics") {
    Tensor x = Tensor::full(2, 1, 2, 2, 3.0f);
    Tensor gamma = Tensor::full(1, 1, 1, 1, 2.0f);
    Tensor beta = Tensor::full(1, 1, 1, 1, 1.0f);
    Tensor rm = Tensor::full(1, 1, 1, 1, 1.0f);
    Tensor rv = Tensor::full(1, 1, 1, 1, 4.0f);
    Var y = batchnorm(make_leaf(x), make_leaf(gamma), make_leaf(beta), rm, rv,
                      /*training=*/false, 0.1f, 0.0f);
    // (3-1)/2 * 2 + 1 = 3
    CHECK(y->value.data[0] == doctest::Approx(3.0f));
    CHECK(rm.data[0] == 1.0f);  // eval must not touch running stats
}

TEST_CASE("maxpool/upsample/relu/concat gradients") {
    Rng rng(17);
    Tensor x = random_tensor(2, 3, 6, 6, rng);
    CHECK(gradcheck(x, [](const Var& v) { return mean_all(maxpool(v, 3, 2, 1)); }) < 1e-2);
    CHECK(gradcheck(x, [](const Var& v) { return mean_all(upsample2x(v)); }) < 1e-2);
    // keep relu inputs away from the kink
    Tensor xr = x;
    for (float& v : xr.data) v += (v >= 0.0f ? 0.05f : -0.05f);
    CHECK(gradcheck(xr, [](const Var& v) { return mean_all(relu(v)); }) < 1e-2);
    CHECK(gradcheck(x, [&](const Var& v) {
              Rng r2(5);
              Tensor other = random_tensor(2, 2, 6, 6, r2);
              return mean_all(concat_channels({v, make_leaf(other)}));
          }) < 1e-2);
}

TEST_CASE("l2norm / cosine / l2 map gradients") {
    Rng rng(19);
    Tensor a = random_tensor(1, 4, 3, 3, rng, 0.2f, 1.0f);
    Tensor b = random_tensor(1, 4, 3, 3, rng, 0.2f, 1.0f);
    CHECK(gradcheck(a, [](const Var& v) { return mean_all(l2norm_channels(v)); }) < 1e-2);
    CHECK(gradcheck(a, [&](const Var& v) { return mean_all(l2_map(v, make_leaf(b))); }) < 1e-2);
    CHECK(gradcheck(b, [&](const Var& v) { return mean_all(l2_map(make_leaf(a), v)); }) < 1e-2);
    CHECK(gradcheck(a, [&](const Var& v) {
              return mean_all(cosine_map(v, make_leaf(b)));
          }) < 1e-2);
    CHECK(gradcheck(b, [&](const Var& v) {
              return mean_all(cosine_map(make_leaf(a), v));
          }) < 1e-2);
}

TEST_CASE("graph reuse accumulates gradients") {
    Tensor x = Tensor::full(1, 1, 2, 2, 2.0f);
    Var leaf = make_leaf(x, true);
    Var y = scale(leaf, 3.0f);
    Var z = add(y, y);  // dz/dleaf = 6
    backward(mean_all(z));
    for (size_t i = 0; i < leaf->grad.size(); ++i)
        CHECK(leaf->grad.data[i] == doctest::Approx(6.0f / 4.0f));
}

TEST_CASE("detach cuts gradient flow") {
    Tensor x = Tensor::full(1, 1, 2, 2, 2.0f);
    Var leaf = make_leaf(x, true);
    Var z = add(scale(leaf, 2.0f), detach(scale(leaf, 5.0f)));
    backward(mean_all(z));
    for (size_t i = 0; i < leaf->grad.size(); ++i)
        CHECK(leaf->grad.data[i] == doctest::Approx(2.0f / 4.0f));
}

TEST_CASE("no-grad mode builds graph-free results") {
    Tensor x = Tensor::full(1, 1, 2, 2, 1.0f);
    Var leaf = make_leaf(x, true);
    NoGradGuard ng;
    Var y = scale(leaf, 2.0f);
    CHECK_FALSE(y->requires_grad);
    CHECK(y->parents.empty());
}

TEST_CASE("backward requires a scalar root") {
    Tensor x = Tensor::full(1, 1, 2, 2, 1.0f);
    Var leaf = make_leaf(x, true);
    Var y = scale(leaf, 2.0f);
    CHECK_THROWS_AS(backward(y), ShapeError);
}

TEST_CASE("adam reduces a quadratic") {
    Param p;
    p.init_shape(1, 1, 1, 4, true);
    Rng rng(3);
    p.value().fill_uniform(rng, 1.0f, 2.0f);
    Adam opt({&p}, 0.05f, 0.9f, 0.999f);
    for (int i = 0; i < 300; ++i) {
        opt.zero_grad();
        Var loss = mean_all(l2_map(p.var, make_leaf(Tensor(1, 1, 1, 4))));
        backward(loss);
        opt.step();
    }
    for (float v : p.value().data) CHECK(std::fabs(v) < 0.05f);
}
