#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>

#include <cmath>
#include <numeric>
#include <set>

#include "peftqa/errors.hpp"
#include "peftqa/ops.hpp"
#include "peftqa/quantization.hpp"
#include "support.hpp"

using namespace peftqa;
using peftqa::testing::gradcheck;

namespace {

Tensor rnd(Shape s, Rng& rng, float sd = 1.0f) { return Tensor::randn(std::move(s), sd, rng, true); }

const std::vector<std::vector<std::size_t>> kShapes = {{2, 3}, {4, 5}, {7, 3}};

}  // namespace

TEST_CASE("matmul values") {
    auto id = Tensor::from({2, 2}, {1, 0, 0, 1});
    auto b = Tensor::from({2, 1}, {3, 4});
    auto c = ops::matmul(id, b);
    CHECK(c.shape() == Shape{2, 1});
    CHECK(c.data()[0] == 3.0f);
    CHECK(c.data()[1] == 4.0f);
    auto d = ops::matmul(Tensor::from({1, 2}, {1, 2}), b);
    CHECK(d.data()[0] == 11.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    try {
        ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
        FAIL("no throw");
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3] x [2x3]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient") {
    Rng rng(1);
    auto a = rnd({5, 7}, rng), b = rnd({7, 3}, rng);
    auto r = gradcheck({a, b}, [&] { return ops::matmul(a, b); });
    CHECK(r.max_rel < 1e-3);
}

TEST_CASE("softmax rows") {
    auto s = ops::softmax_rows(Tensor::from({1, 3}, {0, 0, 0}));
    for (float v : s.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-6));
    auto big = ops::softmax_rows(Tensor::from({1, 3}, {1000, 0, 0}));
    CHECK(big.data()[0] == doctest::Approx(1.0));
    CHECK(big.data()[1] == doctest::Approx(0.0));
    CHECK(std::isfinite(big.data()[2]));

    Rng rng(2);
    auto x = rnd({6, 9}, rng, 3.0f);
    auto y = ops::softmax_rows(x);
    for (std::size_t r = 0; r < 6; ++r) {
        double s2 = 0;
        for (std::size_t c = 0; c < 9; ++c) s2 += y.data()[r * 9 + c];
        CHECK(std::abs(s2 - 1.0) < 1e-6);
    }
}

TEST_CASE("layer norm values") {
    auto g = Tensor::full({4}, 1.0f), b = Tensor::zeros({4});
    auto out = ops::layer_norm(Tensor::full({2, 4}, 3.5f), g, b);
    for (float v : out.data()) CHECK(v == 0.0f);

    // Already standardized: mean 0, population variance 1.
    auto x = Tensor::from({1, 4}, {-1, -1, 1, 1});
    auto y = ops::layer_norm(x, g, b);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-5));
}

TEST_CASE("cross entropy values and errors") {
    auto loss = ops::cross_entropy(Tensor::zeros({2, 4}), std::vector<std::size_t>{1, 3});
    CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    auto peaked = ops::cross_entropy(Tensor::from({1, 3}, {50, 0, 0}), std::vector<std::size_t>{0});
    CHECK(peaked.item() < 1e-6);
    CHECK_THROWS_AS(ops::cross_entropy(Tensor::zeros({1, 3}), std::vector<std::size_t>{3}), IndexError);
}

TEST_CASE("segment cross entropy matches per-segment cross entropy") {
    Rng rng(5);
    auto s = rnd({9}, rng);
    std::vector<std::size_t> lens = {4, 5}, targets = {2, 0};
    auto got = ops::segment_cross_entropy(s, lens, targets).item();
    double expect = 0;
    std::size_t off = 0;
    for (std::size_t k = 0; k < 2; ++k) {
        double mx = -1e30, z = 0;
        for (std::size_t i = 0; i < lens[k]; ++i) mx = std::max(mx, double(s.data()[off + i]));
        for (std::size_t i = 0; i < lens[k]; ++i) z += std::exp(s.data()[off + i] - mx);
        expect += -(s.data()[off + targets[k]] - mx - std::log(z));
        off += lens[k];
    }
    CHECK(got == doctest::Approx(expect / 2).epsilon(1e-6));
    CHECK_THROWS_AS(ops::segment_cross_entropy(s, lens, std::vector<std::size_t>{4, 0}), IndexError);
}

TEST_CASE("backward basics") {
    auto w = Tensor::from({3}, {1, 2, 3}, true);
    ops::sum(w).backward();
    for (float g : w.grad()) CHECK(g == 1.0f);

    auto v = Tensor::from({2}, {2, 5}, true);
    ops::sum(ops::mul(v, v)).backward();  // used twice: d/dv v^2 = 2v
    CHECK(v.grad()[0] == 4.0f);
    CHECK(v.grad()[1] == 10.0f);

    auto u = Tensor::from({2}, {1, 1}, true);
    CHECK_THROWS_AS(ops::scale(u, 2.0f).backward(), ContractError);
}

TEST_CASE("gradients accumulate across backward calls") {
    auto w = Tensor::from({2}, {1, 2}, true);
    ops::sum(w).backward();
    ops::sum(ops::scale(w, 3.0f)).backward();
    CHECK(w.grad()[0] == 4.0f);
    w.zero_grad();
    CHECK(w.grad()[0] == 0.0f);
}

TEST_CASE("tape is topological with each node once") {
    Rng rng(3);
    auto a = rnd({3, 4}, rng), b = rnd({4, 2}, rng);
    auto h = ops::matmul(a, b);
    auto loss = ops::sum(ops::add(ops::gelu(h), h));
    auto order = tape_order(loss);
    std::set<const detail::Node*> seen;
    for (const auto& n : order) {
        for (const auto& in : n->inputs) CHECK(seen.count(in.get()) == 1);
        CHECK(seen.insert(n.get()).second);
    }
    CHECK(order.back().get() == loss.node().get());
}

TEST_CASE("elementwise gradients on several shapes") {
    Rng rng(7);
    for (const auto& s : kShapes) {
        CAPTURE(shape_str(s));
        auto a = rnd(s, rng), b = rnd(s, rng);
        auto bias = rnd({s[1]}, rng);
        auto denom = Tensor::from(s, std::vector<float>(shape_numel(s), 0.0f), true);
        for (std::size_t i = 0; i < denom.numel(); ++i) denom.data()[i] = 1.5f + 0.5f * std::sin(float(i));
        CHECK(gradcheck({a, b}, [&] { return ops::add(a, b); }).max_rel < 1e-3);
        CHECK(gradcheck({a, bias}, [&] { return ops::add(a, bias); }).max_rel < 1e-3);
        CHECK(gradcheck({a, b}, [&] { return ops::sub(a, b); }).max_rel < 1e-3);
        CHECK(gradcheck({a, b}, [&] { return ops::mul(a, b); }).max_rel < 1e-3);
        CHECK(gradcheck({a, bias}, [&] { return ops::mul(a, bias); }).max_rel < 1e-3);
        CHECK(gradcheck({a, denom}, [&] { return ops::div(a, denom); }).max_rel < 1e-3);
        CHECK(gradcheck({a}, [&] { return ops::scale(a, -1.7f); }).max_rel < 1e-3);
        CHECK(gradcheck({a}, [&] { return ops::gelu(a); }).max_rel < 1e-3);
        CHECK(gradcheck({a}, [&] { return ops::sum(a); }).max_rel < 1e-3);
        CHECK(gradcheck({a}, [&] { return ops::mean(a); }).max_rel < 1e-3);
        CHECK(gradcheck({a}, [&] { return ops::transpose(a); }).max_rel < 1e-3);
        CHECK(gradcheck({a}, [&] { return ops::reshape(a, {s[0] * s[1]}); }).max_rel < 1e-3);
    }
}

TEST_CASE("matrix op gradients on several shapes") {
    Rng rng(11);
    for (const auto& s : kShapes) {
        CAPTURE(shape_str(s));
        const std::size_t n = s[0], k = s[1], d = 4;
        auto x = rnd({n, k}, rng), w = rnd({d, k}, rng), bias = rnd({d}, rng);
        CHECK(gradcheck({x, w, bias}, [&] { return ops::linear(x, w, bias); }).max_rel < 1e-3);
        auto b2 = rnd({k, 3}, rng);
        CHECK(gradcheck({x, b2}, [&] { return ops::matmul(x, b2); }).max_rel < 1e-3);
        CHECK(gradcheck({x}, [&] { return ops::softmax_rows(x); }).max_rel < 1e-3);
        auto g = rnd({k}, rng), be = rnd({k}, rng);
        CHECK(gradcheck({x, g, be}, [&] { return ops::layer_norm(x, g, be); }).max_rel < 1e-3);
        CHECK(gradcheck({w}, [&] { return ops::row_l2_norms(w, 1e-8f); }).max_rel < 1e-3);
        CHECK(gradcheck({x}, [&] { return ops::slice(x, 1, n); }).max_rel < 1e-3);
        CHECK(gradcheck({x}, [&] { return ops::select_column(x, k - 1); }).max_rel < 1e-3);
        std::vector<std::size_t> targets(n);
        for (std::size_t i = 0; i < n; ++i) targets[i] = (i * 2) % k;
        CHECK(gradcheck({x}, [&] { return ops::cross_entropy(x, targets); }).max_rel < 1e-3);
    }
}

TEST_CASE("quantized linear gradient reaches input and bias only") {
    Rng rng(4);
    auto w = Tensor::randn({6, 8}, 1.0f, rng);
    auto q = std::make_shared<const QuantizedTensor>(quantize_nf4(w));
    auto x = rnd({3, 8}, rng), bias = rnd({6}, rng);
    CHECK(gradcheck({x, bias}, [&] { return ops::quantized_linear(x, q, bias); }).max_rel < 1e-3);
    auto dense = ops::linear(x, dequantize(*q), bias);
    auto quant = ops::quantized_linear(x, q, bias);
    CHECK(testing::max_abs_diff(dense.data(), quant.data()) < 1e-6);
}

TEST_CASE("segment cross entropy gradient") {
    Rng rng(12);
    auto s = rnd({10}, rng, 2.0f);
    std::vector<std::size_t> lens = {3, 7}, targets = {1, 5};
    CHECK(gradcheck({s}, [&] { return ops::segment_cross_entropy(s, lens, targets); }).max_rel < 1e-3);
}

TEST_CASE("embedding gradient scatters into rows") {
    Rng rng(13);
    auto table = rnd({6, 4}, rng);
    std::vector<std::int32_t> ids = {0, 3, 3, 5};
    CHECK(gradcheck({table}, [&] { return ops::embedding(ids, table); }).max_rel < 1e-3);
    CHECK_THROWS_AS(ops::embedding(std::vector<std::int32_t>{6}, table), IndexError);
}

TEST_CASE("dropout gradient with a fixed mask") {
    Rng rng(14);
    auto x = rnd({5, 6}, rng);
    auto r = gradcheck({x}, [&] {
        Rng mask_rng(77);
        return ops::dropout(x, 0.3f, true, mask_rng);
    });
    CHECK(r.max_rel < 1e-3);
}

TEST_CASE("fused low-rank update") {
    Rng rng(17);
    for (auto [n, k, d, r] : {std::array<std::size_t, 4>{5, 6, 4, 2}, {1, 3, 3, 1}, {7, 4, 6, 3}}) {
        auto h = rnd({n, d}, rng), x = rnd({n, k}, rng), A = rnd({r, k}, rng), B = rnd({d, r}, rng);
        for (bool train : {false, true}) {
            auto g = gradcheck({h, x, A, B}, [&] {
                Rng mask_rng(78);
                return ops::lora_update(h, x, A, B, 1.5f, 0.25f, train, mask_rng);
            });
            CHECK(g.max_rel < 1e-3);
        }
        // Same values and mask as the unfused composition.
        Rng r1(5), r2(5);
        auto fused = ops::lora_update(h, x, A, B, 1.5f, 0.25f, true, r1);
        auto plain = ops::add(h, ops::scale(ops::linear(ops::linear(ops::dropout(x, 0.25f, true, r2), A), B), 1.5f));
        CHECK(testing::max_abs_diff(fused.data(), plain.data()) < 1e-5);
    }
    auto bad = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(ops::lora_update(bad, bad, Tensor::zeros({1, 4}), Tensor::zeros({3, 1}), 1.0f, 0.0f, false, rng),
                    DimensionError);
}

TEST_CASE("attention gradient including relative bias") {
    Rng rng(15);
    const std::size_t d = 8, heads = 2, radius = 2;
    std::vector<std::size_t> lens = {3, 5};
    auto q = rnd({8, d}, rng), k = rnd({8, d}, rng), v = rnd({8, d}, rng);
    auto bias = rnd({heads, 2 * radius + 1}, rng);
    auto r = gradcheck({q, k, v, bias}, [&] { return ops::multi_head_attention(q, k, v, lens, heads, bias); });
    CHECK(r.max_rel < 1e-3);
    auto r2 = gradcheck({q, k, v}, [&] { return ops::multi_head_attention(q, k, v, lens, heads); });
    CHECK(r2.max_rel < 1e-3);
}

TEST_CASE("attention matches a direct per-head computation") {
    Rng rng(16);
    const std::size_t d = 8, H = 2, dh = 4, R = 1;
    std::vector<std::size_t> lens = {3, 5};
    auto q = Tensor::randn({8, d}, 1, rng), k = Tensor::randn({8, d}, 1, rng), v = Tensor::randn({8, d}, 1, rng);
    auto bias = Tensor::randn({H, 2 * R + 1}, 1, rng);
    auto out = ops::multi_head_attention(q, k, v, lens, H, bias);
    double maxd = 0;
    std::size_t off = 0;
    for (auto L : lens) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < L; ++i) {
                std::vector<double> s(L);
                double mx = -1e30;
                for (std::size_t j = 0; j < L; ++j) {
                    double a = 0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        a += q.data()[(off + i) * d + h * dh + c] * k.data()[(off + j) * d + h * dh + c];
                    }
                    long rel = std::clamp<long>(long(j) - long(i), -long(R), long(R));
                    s[j] = a / std::sqrt(double(dh)) + bias.data()[h * (2 * R + 1) + std::size_t(rel + long(R))];
                    mx = std::max(mx, s[j]);
                }
                double z = 0;
                for (auto& x : s) z += (x = std::exp(x - mx));
                for (std::size_t c = 0; c < dh; ++c) {
                    double o = 0;
                    for (std::size_t j = 0; j < L; ++j) o += s[j] / z * v.data()[(off + j) * d + h * dh + c];
                    maxd = std::max(maxd, std::abs(o - out.data()[(off + i) * d + h * dh + c]));
                }
            }
        }
        off += L;
    }
    CHECK(maxd < 1e-5);
}

TEST_CASE("forward determinism") {
    auto run = [] {
        Rng rng(21);
        auto x = Tensor::randn({4, 6}, 1, rng), w = Tensor::randn({3, 6}, 1, rng);
        return ops::dropout(ops::gelu(ops::linear(x, w)), 0.2f, true, rng);
    };
    CHECK(testing::bit_identical(run().data(), run().data()));
}

TEST_CASE("dropout modes") {
    Rng rng(22);
    auto x = Tensor::randn({100, 100}, 1, rng);
    auto eval = ops::dropout(x, 0.1f, false, rng);
    CHECK(testing::bit_identical(eval.data(), x.data()));

    auto ones = Tensor::full({200, 100}, 1.0f);
    auto y = ops::dropout(ones, 0.1f, true, rng);
    double mean = std::accumulate(y.data().begin(), y.data().end(), 0.0) / y.numel();
    CHECK(std::abs(mean - 1.0) < 0.02);
    CHECK_THROWS_AS(ops::dropout(x, 1.0f, true, rng), ContractError);
}

TEST_CASE("row norms with epsilon") {
    auto w = Tensor::from({2, 2}, {3, 4, 0, 0});
    auto n = ops::row_l2_norms(w, 1e-8f);
    CHECK(n.data()[0] == doctest::Approx(5.0));
    CHECK(n.data()[1] == doctest::Approx(1e-4).epsilon(1e-3));
}
