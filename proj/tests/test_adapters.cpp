#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "peftqa/adapters.hpp"
#include "peftqa/errors.hpp"
#include "peftqa/ops.hpp"
#include "support.hpp"

using namespace peftqa;
using testing::max_abs_diff;

namespace {

// Dense y = W x for W [d x k], x [k], in double.
std::vector<double> matvec(std::span<const float> w, std::size_t d, std::size_t k, std::span<const float> x) {
    std::vector<double> y(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < k; ++j) y[i] += double(w[i * k + j]) * x[j];
    }
    return y;
}

// V = W0 + s * B A, in double.
std::vector<double> direction(const AdaptedLinear& l) {
    const auto& a = l.lora();
    const std::size_t d = l.out_features(), k = l.in_features(), r = a.rank;
    auto w0 = l.effective_base();
    std::vector<double> v(d * k);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            double ba = 0;
            for (std::size_t t = 0; t < r; ++t) ba += double(a.B.data()[i * r + t]) * a.A.data()[t * k + j];
            v[i * k + j] = w0.data()[i * k + j] + a.scaling() * ba;
        }
    }
    return v;
}

void randomize(Tensor t, Rng& rng, float sd) {
    std::normal_distribution<float> dist(0.0f, sd);
    for (auto& v : t.data()) v = dist(rng);
}

AdaptedLinear random_layer(std::size_t d, std::size_t k, Rng& rng, bool bias = false) {
    return AdaptedLinear(Tensor::randn({d, k}, 1.0f, rng), bias ? Tensor::randn({d}, 1.0f, rng) : Tensor{});
}

}  // namespace

TEST_CASE("fresh LoRA adapter is the identity") {
    Rng rng(1);
    auto layer = random_layer(8, 12, rng, true);
    AdaptedLinear plain(layer.weight().clone(), layer.bias().clone());
    layer.attach_lora(4, 8.0f, 0.0f, 3);
    for (int t = 0; t < 100; ++t) {
        auto x = Tensor::randn({12}, 1.0f, rng);
        CHECK(testing::bit_identical(layer.forward(x, false, rng).data(), plain.forward(x, false, rng).data()));
    }
}

TEST_CASE("rank 16 alpha 32 scales the adapter branch by 2") {
    Rng rng(2);
    auto layer = random_layer(32, 32, rng);
    layer.attach_lora(16, 32.0f, 0.0f, 1);
    CHECK(layer.lora().scaling() == 2.0f);
    randomize(layer.lora().B, rng, 0.1f);
    auto x = Tensor::randn({32}, 1.0f, rng);
    auto h = layer.forward(x, false, rng);
    auto base = matvec(layer.weight().data(), 32, 32, x.data());
    auto ax = matvec(layer.lora().A.data(), 16, 32, x.data());
    std::vector<float> axf(ax.begin(), ax.end());
    auto bax = matvec(layer.lora().B.data(), 32, 16, axf);
    for (std::size_t i = 0; i < 32; ++i) CHECK(h.data()[i] == doctest::Approx(base[i] + 2.0 * bax[i]).epsilon(1e-4));
}

TEST_CASE("LoRA forward matches a dense computation") {
    Rng rng(3);
    auto layer = random_layer(4, 6, rng);
    layer.attach_lora(2, 3.0f, 0.0f, 5);
    randomize(layer.lora().B, rng, 1.0f);
    auto x = Tensor::randn({6}, 1.0f, rng);
    auto v = direction(layer);
    std::vector<float> vf(v.begin(), v.end());
    auto expect = matvec(vf, 4, 6, x.data());
    auto h = lora_forward(layer, x, false, rng);
    for (std::size_t i = 0; i < 4; ++i) CHECK(h.data()[i] == doctest::Approx(expect[i]).epsilon(1e-5));
    CHECK_THROWS_AS(layer.forward(Tensor::zeros({5}), false, rng), DimensionError);
    CHECK_THROWS_AS(dora_forward(layer, x, false, rng), StateError);
}

TEST_CASE("fresh DoRA adapter is the identity") {
    Rng rng(4);
    auto layer = random_layer(8, 12, rng, true);
    AdaptedLinear plain(layer.weight().clone(), layer.bias().clone());
    layer.attach_dora(4, 8.0f, 0.0f, 3);
    for (int t = 0; t < 100; ++t) {
        auto x = Tensor::randn({3, 12}, 1.0f, rng);
        CHECK(max_abs_diff(layer.forward(x, false, rng).data(), plain.forward(x, false, rng).data()) < 1e-6);
    }
}

TEST_CASE("DoRA with unit-norm rows and unit magnitude keeps the base weight") {
    Rng rng(5);
    auto w = Tensor::randn({5, 7}, 1.0f, rng);
    for (std::size_t i = 0; i < 5; ++i) {
        double n = 0;
        for (std::size_t j = 0; j < 7; ++j) n += double(w.data()[i * 7 + j]) * w.data()[i * 7 + j];
        for (std::size_t j = 0; j < 7; ++j) w.data()[i * 7 + j] = float(w.data()[i * 7 + j] / std::sqrt(n));
    }
    AdaptedLinear layer(w.clone());
    layer.attach_dora(2, 4.0f, 0.0f, 1);
    for (auto& m : layer.magnitude().data()) m = 1.0f;
    CHECK(max_abs_diff(layer.dora_effective_weight().data(), w.data()) < 1e-6);
}

TEST_CASE("DoRA effective weight matches per-row oracle") {
    Rng rng(6);
    auto layer = random_layer(5, 7, rng);
    layer.attach_dora(3, 6.0f, 0.0f, 2);
    randomize(layer.lora().B, rng, 0.5f);
    randomize(layer.magnitude(), rng, 2.0f);
    auto v = direction(layer);
    auto eff = layer.dora_effective_weight();
    for (std::size_t i = 0; i < 5; ++i) {
        double n = 0;
        for (std::size_t j = 0; j < 7; ++j) n += v[i * 7 + j] * v[i * 7 + j];
        n = std::sqrt(n + kDoraNormEps);
        for (std::size_t j = 0; j < 7; ++j) {
            CHECK(eff.data()[i * 7 + j] == doctest::Approx(layer.magnitude().data()[i] * v[i * 7 + j] / n).epsilon(1e-5));
        }
    }
    // forward agrees with the effective weight
    auto x = Tensor::randn({2, 7}, 1.0f, rng);
    auto h = dora_forward(layer, x, false, rng);
    auto ref = ops::linear(x, eff);
    CHECK(max_abs_diff(h.data(), ref.data()) < 1e-5);
}

TEST_CASE("DoRA rejects zero-norm rows") {
    auto w = Tensor::from({2, 3}, {1, 2, 3, 0, 0, 0});
    AdaptedLinear layer(w);
    CHECK_THROWS_AS(layer.attach_dora(1, 1.0f, 0.0f, 1), NumericError);
}

TEST_CASE("init_adapter") {
    auto a = init_adapter(64, 80, 8, 16.0f, 42);
    auto b = init_adapter(64, 80, 8, 16.0f, 42);
    CHECK(testing::bit_identical(a.A.data(), b.A.data()));
    for (float v : a.B.data()) CHECK(v == 0.0f);
    CHECK_THROWS_AS(init_adapter(4, 6, 16, 32.0f, 1), ContractError);
    CHECK_THROWS_AS(init_adapter(4, 6, 0, 32.0f, 1), ContractError);

    auto big = init_adapter(1000, 1000, 100, 1.0f, 7);  // 1e5 entries
    double s = 0, s2 = 0;
    for (float v : big.A.data()) {
        s += v;
        s2 += double(v) * v;
    }
    const double n = double(big.A.numel());
    const double var = s2 / n - (s / n) * (s / n);
    CHECK(std::abs(var - 0.01) / 0.01 < 0.05);
}

TEST_CASE("merge equivalence") {
    Rng rng(7);
    auto layer = random_layer(16, 24, rng, true);
    layer.attach_lora(4, 8.0f, 0.1f, 9);
    CHECK(testing::bit_identical(merge_lora(layer).data(), layer.weight().data()));
    randomize(layer.lora().B, rng, 0.3f);
    auto merged = merge_lora(layer);
    AdaptedLinear plain(merged, layer.bias());
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
        auto x = Tensor::randn({24}, 1.0f, rng);
        worst = std::max(worst, max_abs_diff(layer.forward(x, false, rng).data(), plain.forward(x, false, rng).data()));
    }
    CHECK(worst < 1e-5);
    CHECK(plain.forward_macs() == 16u * 24u);
    CHECK(layer.forward_macs() > plain.forward_macs());
}

TEST_CASE("merge is rejected on quantized bases and DoRA") {
    Rng rng(8);
    auto layer = random_layer(8, 64, rng);
    layer.quantize_base();
    layer.attach_lora(2, 4.0f, 0.0f, 1);
    CHECK_THROWS_AS(merge_lora(layer), UnsupportedError);
    auto d = random_layer(8, 8, rng);
    d.attach_dora(2, 4.0f, 0.0f, 1);
    CHECK_THROWS_AS(merge_lora(d), StateError);
}

TEST_CASE("parameter counts") {
    AdaptedLinear big(Tensor::zeros({768, 768}));
    big.attach_lora(16, 32.0f, 0.1f, 1);
    auto r = big.param_counts();
    CHECK(r.trainable == 24576u);
    CHECK(r.frozen == 589824u);
    CHECK(r.trainable_fraction() == doctest::Approx(24576.0 / (24576 + 589824)));

    Rng rng(9);
    auto small = random_layer(4, 6, rng);
    CHECK_THROWS_AS(small.attach_lora(16, 32.0f, 0.0f, 1), ContractError);
    small.attach_lora(2, 4.0f, 0.0f, 1);
    CHECK(small.param_counts().trainable == 2u * 6u + 4u * 2u);

    auto dora = random_layer(4, 6, rng);
    dora.attach_dora(2, 4.0f, 0.0f, 1);
    CHECK(dora.param_counts().trainable == small.param_counts().trainable + 4u);

    const AdaptedLinear* layers[] = {&small, &dora};
    auto total = count_trainable(layers);
    CHECK(total.trainable == 20u + 24u);
    CHECK(total.frozen == 48u);
}

TEST_CASE("QLoRA forward decomposes into dequantized base plus adapter") {
    Rng rng(10);
    auto layer = random_layer(16, 64, rng, true);
    layer.quantize_base();
    layer.attach_lora(4, 8.0f, 0.0f, 3);
    randomize(layer.lora().B, rng, 0.2f);
    auto x = Tensor::randn({5, 64}, 1.0f, rng);
    auto h = layer.forward(x, false, rng);
    auto base = ops::linear(x, dequantize(layer.quantized_weight()), layer.bias());
    const auto& a = layer.lora();
    auto delta = ops::scale(ops::linear(ops::linear(x, a.A), a.B), a.scaling());
    auto ref = ops::add(base, delta);
    CHECK(max_abs_diff(h.data(), ref.data()) < 1e-5);
    CHECK(layer.frozen_bytes() == layer.quantized_weight().storage_bytes() + 16 * sizeof(float));
}

TEST_CASE("adapter gradients and frozen base") {
    Rng rng(11);
    for (bool dora : {false, true}) {
        for (bool quant : {false, true}) {
            CAPTURE(dora);
            CAPTURE(quant);
            // Small magnitudes keep float32 rounding in the forward pass well
            // below the finite-difference signal.
            AdaptedLinear layer(Tensor::randn({6, 64}, 0.1f, rng));
            if (quant) layer.quantize_base();
            dora ? layer.attach_dora(3, 6.0f, 0.0f, 4) : layer.attach_lora(3, 6.0f, 0.0f, 4);
            randomize(layer.lora().B, rng, 0.05f);
            auto x = Tensor::randn({4, 64}, 0.3f, rng);
            auto params = layer.trainable_parameters();
            CHECK(params.size() == (dora ? 3u : 2u));
            // LoRA output is bilinear in (A, B), so a wide central step is
            // exact; the DoRA norm needs a narrow one.
            auto r = testing::gradcheck(params, [&] { return layer.forward(x, false, rng); }, dora ? 1e-3 : 1e-2);
            CHECK(r.max_rel < 1e-3);
            if (!quant) CHECK_FALSE(layer.weight().has_grad());
        }
    }
}

TEST_CASE("state errors") {
    Rng rng(12);
    auto layer = random_layer(4, 64, rng);
    layer.attach_lora(2, 4.0f, 0.0f, 1);
    CHECK_THROWS_AS(layer.attach_lora(2, 4.0f, 0.0f, 1), StateError);
    CHECK_THROWS_AS(layer.set_base_trainable(true), StateError);
    auto q = random_layer(4, 64, rng);
    q.quantize_base();
    CHECK_THROWS_AS(q.quantize_base(), StateError);
    CHECK_THROWS_AS(q.weight(), StateError);
}
