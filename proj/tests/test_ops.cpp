#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "stk/ops.hpp"
#include "stk/tensor.hpp"

using namespace stk;

namespace {

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// keeps random values away from the relu6 kinks at 0 and 6
Tensor rand_off_kinks(std::vector<int64_t> shape, Rng& rng) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : d) {
        do {
            v = rng.uniform(-3.0, 3.0);
        } while (std::abs(v) < 0.05 || std::abs(v - 6.0) < 0.05);
    }
    return Tensor::create(std::move(shape), std::move(d));
}

double check_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
    return finite_diff_check(f, x, 1e-5);
}

} // namespace

TEST_SUITE_BEGIN("ops");

TEST_CASE("conv2d: hand example, identity pointwise, empty output") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(x, w, {}, {});
    CHECK(y.shape() == std::vector<int64_t>{1, 1, 1, 1});
    CHECK(y.item() == 9.0);

    // 1x1 identity pointwise leaves any input unchanged
    Rng rng(3);
    Tensor xr = Tensor::rand_uniform({2, 3, 4, 5}, rng, -1, 1);
    std::vector<double> eye(9, 0.0);
    eye[0] = eye[4] = eye[8] = 1.0; // [3,3,1,1] identity across channels
    Tensor wi = Tensor::create({3, 3, 1, 1}, std::move(eye));
    Tensor yi = conv2d(xr, wi, {}, {});
    CHECK(yi.data() == xr.data());

    Tensor small = Tensor::full({1, 1, 2, 5}, 1.0);
    CHECK_THROWS_AS(conv2d(small, w, {}, {}), Error);
}

TEST_CASE("conv2d: output shape follows the floor formula when H doubles") {
    Rng rng(4);
    Conv2dSpec sp;
    sp.stride_h = sp.stride_w = 2;
    sp.pad_h = sp.pad_w = 1;
    Tensor w = Tensor::rand_uniform({4, 2, 3, 3}, rng, -1, 1);
    for (int64_t h : {8, 16, 13}) {
        Tensor x = Tensor::rand_uniform({1, 2, h, h}, rng, -1, 1);
        Tensor y = conv2d(x, w, {}, sp);
        int64_t expect = (h + 2 - 3) / 2 + 1;
        CHECK(y.dim(2) == expect);
        CHECK(y.dim(3) == expect);
    }
}

TEST_CASE("conv2d: gradients w.r.t. input, weight, bias pass finite differences") {
    Rng rng(5);
    Tensor x = Tensor::rand_uniform({2, 3, 5, 5}, rng, -1, 1);
    Tensor w = Tensor::rand_uniform({4, 3, 3, 3}, rng, -0.5, 0.5);
    Tensor b = Tensor::rand_uniform({4}, rng, -0.5, 0.5);
    Conv2dSpec sp;
    sp.stride_h = sp.stride_w = 2;
    sp.pad_h = sp.pad_w = 1;

    CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(conv2d(t, w, b, sp),
                                                               conv2d(t, w, b, sp))); },
                     x) <= 1e-4);
    CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(conv2d(x, t, b, sp),
                                                               conv2d(x, t, b, sp))); },
                     w) <= 1e-4);
    CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(conv2d(x, w, t, sp),
                                                               conv2d(x, w, t, sp))); },
                     b) <= 1e-4);
}

TEST_CASE("depthwise: zero channel stays zero and grouped conv2d agrees") {
    Rng rng(6);
    // channel 1 of the input is zero; without bias its output must be zero
    Tensor x = Tensor::rand_uniform({1, 2, 5, 5}, rng, 0.1, 1.0);
    for (int64_t i = 0; i < 25; ++i) x.mutable_data()[25 + static_cast<size_t>(i)] = 0.0;
    Tensor w = Tensor::rand_uniform({2, 1, 3, 3}, rng, -1, 1);
    Conv2dSpec sp;
    sp.pad_h = sp.pad_w = 1;
    Tensor y = depthwise_conv2d(x, w, {}, sp);
    for (int64_t i = 0; i < 25; ++i) CHECK(y.data()[25 + static_cast<size_t>(i)] == 0.0);

    // dedicated path vs conv2d with groups=C
    Tensor xr = Tensor::rand_uniform({2, 4, 6, 6}, rng, -1, 1);
    Tensor wr = Tensor::rand_uniform({4, 1, 3, 3}, rng, -1, 1);
    Tensor br = Tensor::rand_uniform({4}, rng, -1, 1);
    Conv2dSpec gsp;
    gsp.pad_h = gsp.pad_w = 1;
    gsp.stride_h = gsp.stride_w = 2;
    gsp.groups = 4;
    Tensor a = depthwise_conv2d(xr, wr, br, gsp);
    Tensor bref = conv2d(xr, wr, br, gsp);
    REQUIRE(a.shape() == bref.shape());
    for (size_t i = 0; i < a.data().size(); ++i)
        CHECK(std::abs(a.data()[i] - bref.data()[i]) <= 1e-12);
}

TEST_CASE("depthwise: translation equivariance away from borders") {
    Rng rng(7);
    // content confined to the interior so zero padding plays no role
    Tensor x = Tensor::zeros({1, 1, 8, 8});
    for (int64_t i = 2; i < 6; ++i)
        for (int64_t j = 2; j < 6; ++j)
            x.mutable_data()[static_cast<size_t>(i * 8 + j)] = rng.uniform(0.5, 1.0);
    Tensor shifted = Tensor::zeros({1, 1, 8, 8});
    for (int64_t i = 0; i < 7; ++i)
        for (int64_t j = 0; j < 8; ++j)
            shifted.mutable_data()[static_cast<size_t>((i + 1) * 8 + j)] =
                x.data()[static_cast<size_t>(i * 8 + j)];
    Tensor w = Tensor::rand_uniform({1, 1, 3, 3}, rng, -1, 1);
    Tensor y = depthwise_conv2d(x, w, {}, {});
    Tensor ys = depthwise_conv2d(shifted, w, {}, {});
    // valid-region outputs translate by (1,0)
    for (int64_t i = 0; i < 5; ++i)
        for (int64_t j = 0; j < 6; ++j)
            CHECK(ys.at({0, 0, i + 1, j}) == doctest::Approx(y.at({0, 0, i, j})).epsilon(1e-14));
}

TEST_CASE("depthwise: gradient check") {
    Rng rng(8);
    Tensor x = Tensor::rand_uniform({1, 3, 5, 5}, rng, -1, 1);
    Tensor w = Tensor::rand_uniform({3, 1, 3, 3}, rng, -1, 1);
    Conv2dSpec sp;
    sp.pad_h = sp.pad_w = 1;
    CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(depthwise_conv2d(t, w, {}, sp),
                                                               depthwise_conv2d(t, w, {}, sp))); },
                     x) <= 1e-4);
    CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(depthwise_conv2d(x, t, {}, sp),
                                                               depthwise_conv2d(x, t, {}, sp))); },
                     w) <= 1e-4);
}

TEST_CASE("bilinear_sample: grid alignment, hand value, zero padding") {
    Tensor x = Tensor::create({1, 1, 2, 2}, {0, 1, 2, 3});
    Tensor coords = Tensor::create({1, 4, 2},
                                   {0, 0, 1, 1, 0.5, 0.5, -10, -10});
    Tensor y = bilinear_sample(x, coords);
    CHECK(y.at({0, 0, 0}) == 0.0);
    CHECK(y.at({0, 0, 1}) == 3.0);
    CHECK(y.at({0, 0, 2}) == doctest::Approx(1.5).epsilon(1e-14));
    CHECK(y.at({0, 0, 3}) == 0.0);
}

TEST_CASE("bilinear_sample: gradients w.r.t. map and coords off the lattice") {
    Rng rng(9);
    Tensor x = Tensor::rand_uniform({1, 2, 5, 5}, rng, -1, 1);
    std::vector<double> cd;
    for (int i = 0; i < 6; ++i) {
        cd.push_back(rng.uniform(0.2, 3.8) + 0.13); // fractional, interior
        cd.push_back(rng.uniform(0.2, 3.8) + 0.17);
    }
    Tensor coords = Tensor::create({1, 6, 2}, std::move(cd));
    CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(bilinear_sample(t, coords),
                                                               bilinear_sample(t, coords))); },
                     x) <= 1e-4);
    CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(bilinear_sample(x, t),
                                                               bilinear_sample(x, t))); },
                     coords) <= 1e-4);
}

TEST_CASE("batch_norm2d: constant channels, gamma zero, eval formula") {
    Tensor gamma = Tensor::full({2}, 1.0);
    Tensor beta = Tensor::zeros({2});
    BatchNormBuffers buf{Tensor::zeros({2}), Tensor::full({2}, 1.0)};

    // zero variance per channel -> zeros in train mode
    Tensor x = Tensor::create({1, 2, 2, 2}, {5, 5, 5, 5, -2, -2, -2, -2});
    Tensor y = batch_norm2d(x, gamma, beta, buf, true);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-10));

    // gamma = 0 -> output equals beta broadcast
    Tensor g0 = Tensor::zeros({2});
    Tensor b5 = Tensor::full({2}, 5.0);
    Rng rng(10);
    Tensor xr = Tensor::rand_uniform({2, 2, 3, 3}, rng, -1, 1);
    BatchNormBuffers buf2{Tensor::zeros({2}), Tensor::full({2}, 1.0)};
    Tensor y2 = batch_norm2d(xr, g0, b5, buf2, true);
    for (double v : y2.data()) CHECK(v == 5.0);

    // eval mode with stored stats (0,1)
    BatchNormBuffers buf3{Tensor::zeros({2}), Tensor::full({2}, 1.0)};
    Tensor g2 = Tensor::full({2}, 1.5);
    Tensor b2 = Tensor::full({2}, 0.25);
    Tensor y3 = batch_norm2d(xr, g2, b2, buf3, false);
    for (size_t i = 0; i < xr.data().size(); ++i) {
        double expect = xr.data()[i] / std::sqrt(1.0 + 1e-5) * 1.5 + 0.25;
        CHECK(y3.data()[i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("batch_norm2d: running stats update with momentum 0.1") {
    Tensor gamma = Tensor::full({1}, 1.0);
    Tensor beta = Tensor::zeros({1});
    BatchNormBuffers buf{Tensor::zeros({1}), Tensor::full({1}, 1.0)};
    Tensor x = Tensor::create({1, 1, 2, 2}, {1, 2, 3, 4}); // mean 2.5, biased var 1.25
    batch_norm2d(x, gamma, beta, buf, true);
    CHECK(buf.running_mean.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
    // unbiased var = 1.25 * 4/3
    CHECK(buf.running_var.data()[0] ==
          doctest::Approx(0.9 * 1.0 + 0.1 * 1.25 * 4.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("batch_norm2d: gradient check in train and eval mode") {
    Rng rng(11);
    Tensor x = Tensor::rand_uniform({2, 2, 3, 3}, rng, -1, 1);
    Tensor gamma = Tensor::rand_uniform({2}, rng, 0.5, 1.5);
    Tensor beta = Tensor::rand_uniform({2}, rng, -0.5, 0.5);
    for (bool training : {true, false}) {
        auto run = [&](const Tensor& t, int which) {
            BatchNormBuffers buf{Tensor::zeros({2}), Tensor::full({2}, 1.0)};
            const Tensor& xx = which == 0 ? t : x;
            const Tensor& gg = which == 1 ? t : gamma;
            const Tensor& bb = which == 2 ? t : beta;
            Tensor y = batch_norm2d(xx, gg, bb, buf, training);
            return sum_all(mul(y, y));
        };
        CHECK(check_grad([&](const Tensor& t) { return run(t, 0); }, x) <= 1e-4);
        CHECK(check_grad([&](const Tensor& t) { return run(t, 1); }, gamma) <= 1e-4);
        CHECK(check_grad([&](const Tensor& t) { return run(t, 2); }, beta) <= 1e-4);
    }
}

TEST_CASE("layer_norm: constants, affine, gradient") {
    Tensor g1 = Tensor::full({2}, 1.0);
    Tensor b0 = Tensor::zeros({2});

    Tensor c = Tensor::create({1, 2}, {3.0, 3.0});
    Tensor yc = layer_norm(c, g1, b0);
    CHECK(yc.data()[0] == doctest::Approx(0.0).epsilon(1e-10));

    Tensor pm = Tensor::create({1, 2}, {1.0, -1.0});
    Tensor ypm = layer_norm(pm, g1, b0);
    CHECK(ypm.data()[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(ypm.data()[1] == doctest::Approx(-1.0).epsilon(1e-4));

    Tensor g0 = Tensor::zeros({2});
    Tensor b5 = Tensor::full({2}, 5.0);
    Tensor y5 = layer_norm(pm, g0, b5);
    for (double v : y5.data()) CHECK(v == 5.0);

    Rng rng(12);
    Tensor x = Tensor::rand_uniform({3, 4}, rng, -1, 1);
    Tensor gg = Tensor::rand_uniform({4}, rng, 0.5, 1.5);
    Tensor bb = Tensor::rand_uniform({4}, rng, -0.5, 0.5);
    CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(layer_norm(t, gg, bb),
                                                               layer_norm(t, gg, bb))); },
                     x) <= 1e-4);
    CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(layer_norm(x, t, bb),
                                                               layer_norm(x, t, bb))); },
                     gg) <= 1e-4);
}

TEST_CASE("relu6 values") {
    Tensor x = Tensor::create({3}, {-1, 3, 8});
    Tensor y = relu6(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 3.0);
    CHECK(y.data()[2] == 6.0);
}

TEST_CASE("softmax: symmetry, stabilization, shift invariance, row sums") {
    Tensor a = softmax_lastdim(Tensor::create({2}, {0, 0}));
    CHECK(a.data()[0] == doctest::Approx(0.5).epsilon(1e-14));

    Tensor b = softmax_lastdim(Tensor::create({2}, {1000, 0}));
    CHECK(std::isfinite(b.data()[0]));
    CHECK(b.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(b.data()[1] == doctest::Approx(0.0).epsilon(1e-12));

    Rng rng(13);
    Tensor x = Tensor::rand_uniform({4, 6}, rng, -2, 2);
    Tensor y1 = softmax_lastdim(x);
    Tensor y2 = softmax_lastdim(add_scalar(x, 17.25));
    for (size_t i = 0; i < y1.data().size(); ++i)
        CHECK(std::abs(y1.data()[i] - y2.data()[i]) <= 1e-12);
    for (int64_t r = 0; r < 4; ++r) {
        double s = 0;
        for (int64_t j = 0; j < 6; ++j) s += y1.at({r, j});
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }

    CHECK(check_grad([](const Tensor& t) { return sum_all(mul(softmax_lastdim(t),
                                                              softmax_lastdim(t))); },
                     x) <= 1e-4);
}

namespace {

// plain-loop reference attention for one batch of tokens [T,d]
std::vector<double> mhsa_loop_reference(const Tensor& tokens, const AttentionParams& p) {
    const int64_t T = tokens.dim(1), d = tokens.dim(2);
    const int64_t h = p.heads, dh = d / h;
    auto proj = [&](const Tensor& w, const Tensor& b) {
        std::vector<double> out(static_cast<size_t>(T * d), 0.0);
        for (int64_t t = 0; t < T; ++t)
            for (int64_t j = 0; j < d; ++j) {
                double acc = b.data()[static_cast<size_t>(j)];
                for (int64_t i = 0; i < d; ++i)
                    acc += tokens.at({0, t, i}) * w.at({i, j});
                out[static_cast<size_t>(t * d + j)] = acc;
            }
        return out;
    };
    auto q = proj(p.wq, p.bq), k = proj(p.wk, p.bk), v = proj(p.wv, p.bv);
    std::vector<double> ctx(static_cast<size_t>(T * d), 0.0);
    for (int64_t hh = 0; hh < h; ++hh) {
        for (int64_t i = 0; i < T; ++i) {
            std::vector<double> row(static_cast<size_t>(T));
            double mx = -1e300;
            for (int64_t j = 0; j < T; ++j) {
                double s = 0;
                for (int64_t e = 0; e < dh; ++e)
                    s += q[static_cast<size_t>(i * d + hh * dh + e)] *
                         k[static_cast<size_t>(j * d + hh * dh + e)];
                row[static_cast<size_t>(j)] = s / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, row[static_cast<size_t>(j)]);
            }
            double sum = 0;
            for (auto& s : row) {
                s = std::exp(s - mx);
                sum += s;
            }
            for (auto& s : row) s /= sum;
            for (int64_t e = 0; e < dh; ++e) {
                double acc = 0;
                for (int64_t j = 0; j < T; ++j)
                    acc += row[static_cast<size_t>(j)] * v[static_cast<size_t>(j * d + hh * dh + e)];
                ctx[static_cast<size_t>(i * d + hh * dh + e)] = acc;
            }
        }
    }
    std::vector<double> out(static_cast<size_t>(T * d), 0.0);
    for (int64_t t = 0; t < T; ++t)
        for (int64_t j = 0; j < d; ++j) {
            double acc = p.bo.data()[static_cast<size_t>(j)];
            for (int64_t i = 0; i < d; ++i)
                acc += ctx[static_cast<size_t>(t * d + i)] * p.wo.at({i, j});
            out[static_cast<size_t>(t * d + j)] = acc;
        }
    return out;
}

AttentionParams random_attention(int64_t d, int64_t heads, int64_t ffn_hidden, Rng& rng) {
    AttentionParams p;
    p.d_model = d;
    p.heads = heads;
    p.ffn_hidden = ffn_hidden;
    p.wq = Tensor::rand_uniform({d, d}, rng, -0.5, 0.5);
    p.bq = Tensor::rand_uniform({d}, rng, -0.1, 0.1);
    p.wk = Tensor::rand_uniform({d, d}, rng, -0.5, 0.5);
    p.bk = Tensor::rand_uniform({d}, rng, -0.1, 0.1);
    p.wv = Tensor::rand_uniform({d, d}, rng, -0.5, 0.5);
    p.bv = Tensor::rand_uniform({d}, rng, -0.1, 0.1);
    p.wo = Tensor::rand_uniform({d, d}, rng, -0.5, 0.5);
    p.bo = Tensor::rand_uniform({d}, rng, -0.1, 0.1);
    p.w1 = Tensor::rand_uniform({d, ffn_hidden}, rng, -0.5, 0.5);
    p.b1 = Tensor::rand_uniform({ffn_hidden}, rng, -0.1, 0.1);
    p.w2 = Tensor::rand_uniform({ffn_hidden, d}, rng, -0.5, 0.5);
    p.b2 = Tensor::rand_uniform({d}, rng, -0.1, 0.1);
    return p;
}

} // namespace

TEST_CASE("mhsa: loop oracle agreement on random tokens") {
    Rng rng(14);
    AttentionParams p = random_attention(8, 2, 16, rng);
    Tensor tokens = Tensor::rand_uniform({1, 4, 8}, rng, -1, 1);
    Tensor y = mhsa(tokens, p);
    auto ref = mhsa_loop_reference(tokens, p);
    REQUIRE(y.numel() == static_cast<int64_t>(ref.size()));
    for (size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.data()[i] - ref[i]) <= 1e-12);
}

TEST_CASE("mhsa: single token gets attention weight exactly 1") {
    Rng rng(15);
    AttentionParams p = random_attention(8, 2, 16, rng);
    Tensor tokens = Tensor::rand_uniform({1, 1, 8}, rng, -1, 1);
    Tensor attn;
    mhsa(tokens, p, &attn);
    REQUIRE(attn.shape() == std::vector<int64_t>{2, 1, 1});
    CHECK(attn.data()[0] == 1.0);
    CHECK(attn.data()[1] == 1.0);
}

TEST_CASE("mhsa: zero Wq/Wk yields uniform attention; rows are stochastic") {
    Rng rng(16);
    AttentionParams p = random_attention(8, 2, 16, rng);
    p.wq = Tensor::zeros({8, 8});
    p.bq = Tensor::zeros({8});
    p.wk = Tensor::zeros({8, 8});
    p.bk = Tensor::zeros({8});
    Tensor tokens = Tensor::rand_uniform({1, 5, 8}, rng, -1, 1);
    Tensor attn;
    mhsa(tokens, p, &attn);
    for (double v : attn.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));

    AttentionParams pr = random_attention(8, 4, 16, rng);
    Tensor attn2;
    mhsa(tokens, pr, &attn2);
    for (int64_t b = 0; b < attn2.dim(0); ++b)
        for (int64_t i = 0; i < attn2.dim(1); ++i) {
            double s = 0;
            for (int64_t j = 0; j < attn2.dim(2); ++j) s += attn2.at({b, i, j});
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
}

TEST_CASE("mhsa: heads must divide d") {
    Rng rng(17);
    AttentionParams p = random_attention(8, 2, 16, rng);
    p.heads = 3;
    Tensor tokens = Tensor::rand_uniform({1, 2, 8}, rng, -1, 1);
    CHECK_THROWS_AS(mhsa(tokens, p), Error);
}

TEST_CASE("mhsa + ffn: gradient checks through tokens and weights") {
    Rng rng(18);
    AttentionParams p = random_attention(8, 2, 12, rng);
    Tensor tokens = Tensor::rand_uniform({2, 3, 8}, rng, -1, 1);
    CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(mhsa(t, p), mhsa(t, p))); },
                     tokens) <= 1e-4);
    {
        AttentionParams q = p;
        CHECK(finite_diff_check(
                  [&]() { return sum_all(mul(mhsa(tokens, q), mhsa(tokens, q))); },
                  (q.wq = q.wq.detach(true), q.wq), 1e-5) <= 1e-4);
    }
    {
        AttentionParams q = p;
        CHECK(finite_diff_check(
                  [&]() { return sum_all(mul(mhsa(tokens, q), mhsa(tokens, q))); },
                  (q.wo = q.wo.detach(true), q.wo), 1e-5) <= 1e-4);
    }
    CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(ffn(t, p), ffn(t, p))); },
                     tokens) <= 1e-4);
}

TEST_CASE("ffn: zero weights, scalar hand example, shape contract") {
    Rng rng(19);
    AttentionParams p = random_attention(8, 2, 12, rng);
    Tensor tokens = Tensor::rand_uniform({2, 3, 8}, rng, -1, 1);

    AttentionParams z = p;
    z.w1 = Tensor::zeros({8, 12});
    z.b1 = Tensor::zeros({12});
    z.w2 = Tensor::zeros({12, 8});
    z.b2 = Tensor::zeros({8});
    Tensor zf = ffn(tokens, z);
    for (double v : zf.data()) CHECK(v == 0.0);

    AttentionParams s;
    s.d_model = 1;
    s.heads = 1;
    s.ffn_hidden = 1;
    s.w1 = Tensor::create({1, 1}, {0.5});
    s.b1 = Tensor::zeros({1});
    s.w2 = Tensor::create({1, 1}, {2.0});
    s.b2 = Tensor::zeros({1});
    Tensor one = Tensor::create({1, 1, 1}, {1.0});
    CHECK(ffn(one, s).item() == doctest::Approx(2.0 * gelu_scalar(0.5)).epsilon(1e-14));

    CHECK(ffn(tokens, p).shape() == tokens.shape());
}

TEST_CASE("unfold/fold: bitwise round trip and token grouping") {
    Rng rng(20);
    Tensor x = Tensor::rand_uniform({2, 8, 4, 4}, rng, -1, 1);
    Tensor tok = unfold_tokens(x, 2, 2);
    CHECK(tok.shape() == std::vector<int64_t>{2, 4, 4, 8});
    Tensor back = fold_tokens(tok, 8, 4, 4, 2, 2);
    CHECK(back.data() == x.data());

    // pixels at the same intra-patch position form one sequence
    // token (p=0, t) holds x at even rows/cols
    CHECK(tok.at({0, 0, 0, 3}) == x.at({0, 3, 0, 0}));
    CHECK(tok.at({0, 0, 1, 3}) == x.at({0, 3, 0, 2}));
    CHECK(tok.at({0, 3, 3, 5}) == x.at({0, 5, 3, 3}));

    Tensor odd = Tensor::rand_uniform({1, 2, 5, 4}, rng, -1, 1);
    CHECK_THROWS_AS(unfold_tokens(odd, 2, 2), Error);

    CHECK(check_grad([&](const Tensor& t) {
              Tensor u = unfold_tokens(t, 2, 2);
              return sum_all(mul(u, u));
          }, x) <= 1e-4);
}

TEST_CASE("global_avg_pool2d and pixel_shuffle") {
    Tensor x = Tensor::create({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
    Tensor y = global_avg_pool2d(x);
    CHECK(y.at({0, 0}) == doctest::Approx(2.5).epsilon(1e-14));
    CHECK(y.at({0, 1}) == doctest::Approx(25.0).epsilon(1e-14));

    // r=2: channel block c*4+dy*2+dx scatters to (2i+dy, 2j+dx)
    Tensor p = Tensor::create({1, 4, 1, 1}, {1, 2, 3, 4});
    Tensor ps = pixel_shuffle(p, 2);
    CHECK(ps.shape() == std::vector<int64_t>{1, 1, 2, 2});
    CHECK(ps.data() == std::vector<double>{1, 2, 3, 4});

    Rng rng(21);
    Tensor xr = Tensor::rand_uniform({2, 8, 3, 3}, rng, -1, 1);
    CHECK(check_grad([](const Tensor& t) {
              Tensor s = pixel_shuffle(t, 2);
              return sum_all(mul(s, s));
          }, xr) <= 1e-4);
    CHECK(check_grad([](const Tensor& t) {
              Tensor s = global_avg_pool2d(t);
              return sum_all(mul(s, s));
          }, xr) <= 1e-4);
}

TEST_CASE("concat/slice: values and gradients") {
    Rng rng(22);
    Tensor a = Tensor::rand_uniform({1, 2, 2, 2}, rng, -1, 1);
    Tensor b = Tensor::rand_uniform({1, 3, 2, 2}, rng, -1, 1);
    Tensor c = concat({a, b}, 1);
    CHECK(c.shape() == std::vector<int64_t>{1, 5, 2, 2});
    CHECK(c.at({0, 0, 1, 1}) == a.at({0, 0, 1, 1}));
    CHECK(c.at({0, 4, 0, 1}) == b.at({0, 2, 0, 1}));
    Tensor s = slice(c, 1, 2, 3);
    CHECK(s.data() == b.data());

    CHECK(check_grad([&](const Tensor& t) {
              Tensor cc = concat({t, b}, 1);
              return sum_all(mul(cc, cc));
          }, a) <= 1e-4);
    CHECK(check_grad([&](const Tensor& t) {
              Tensor ss = slice(t, 1, 1, 2);
              return sum_all(mul(ss, ss));
          }, b) <= 1e-4);
}

TEST_CASE("activation gradient checks on random off-kink inputs") {
    Rng rng(23);
    Tensor x = rand_off_kinks({4, 4}, rng);
    CHECK(check_grad([](const Tensor& t) { return sum_all(mul(relu6(t), relu6(t))); }, x) <= 1e-4);
    CHECK(check_grad([](const Tensor& t) { return sum_all(mul(gelu(t), gelu(t))); }, x) <= 1e-4);
    CHECK(check_grad([](const Tensor& t) { return sum_all(mul(tanh_op(t), tanh_op(t))); }, x) <=
          1e-4);
    CHECK(check_grad([](const Tensor& t) { return sum_all(mul(sigmoid(t), sigmoid(t))); }, x) <=
          1e-4);
}

TEST_CASE("bmm and linear: values and gradients") {
    Rng rng(24);
    Tensor a = Tensor::rand_uniform({3, 2, 4}, rng, -1, 1);
    Tensor b = Tensor::rand_uniform({3, 4, 5}, rng, -1, 1);
    Tensor c = bmm(a, b);
    // reference via per-batch matmul
    for (int64_t t = 0; t < 3; ++t)
        for (int64_t i = 0; i < 2; ++i)
            for (int64_t j = 0; j < 5; ++j) {
                double acc = 0;
                for (int64_t e = 0; e < 4; ++e) acc += a.at({t, i, e}) * b.at({t, e, j});
                CHECK(c.at({t, i, j}) == doctest::Approx(acc).epsilon(1e-12));
            }
    Tensor bt = Tensor::rand_uniform({3, 5, 4}, rng, -1, 1);
    Tensor c2 = bmm(a, bt, true);
    for (int64_t t = 0; t < 3; ++t)
        for (int64_t i = 0; i < 2; ++i)
            for (int64_t j = 0; j < 5; ++j) {
                double acc = 0;
                for (int64_t e = 0; e < 4; ++e) acc += a.at({t, i, e}) * bt.at({t, j, e});
                CHECK(c2.at({t, i, j}) == doctest::Approx(acc).epsilon(1e-12));
            }

    for (bool trans : {false, true}) {
        const Tensor& bb = trans ? bt : b;
        CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(bmm(t, bb, trans),
                                                                   bmm(t, bb, trans))); },
                         a) <= 1e-4);
        CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(bmm(a, t, trans),
                                                                   bmm(a, t, trans))); },
                         bb) <= 1e-4);
    }

    Tensor x = Tensor::rand_uniform({2, 3, 4}, rng, -1, 1);
    Tensor w = Tensor::rand_uniform({4, 6}, rng, -1, 1);
    Tensor bias = Tensor::rand_uniform({6}, rng, -1, 1);
    Tensor y = linear(x, w, bias);
    CHECK(y.shape() == std::vector<int64_t>{2, 3, 6});
    CHECK(check_grad([&](const Tensor& t) { return sum_all(mul(linear(x, t, bias),
                                                               linear(x, t, bias))); },
                     w) <= 1e-4);
}

TEST_SUITE_END();
