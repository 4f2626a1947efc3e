#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include <json.hpp>

#include "peftqa/errors.hpp"
#include "peftqa/trainer.hpp"
#include "support.hpp"

using namespace peftqa;
using peftqa::testing::bit_identical;

namespace {

struct Fixture {
    std::vector<QaExample> train, dev;
    Vocabulary vocab;
};

const Fixture& small_data() {
    static const Fixture fx = [] {
        SyntheticSpec spec;
        spec.num_train = 48;
        spec.num_dev = 12;
        Fixture f;
        std::tie(f.train, f.dev) = generate_synthetic(spec);
        std::vector<std::string_view> texts;
        for (const auto& e : f.train) {
            texts.push_back(e.context);
            texts.push_back(e.question);
        }
        f.vocab = Vocabulary::build(texts);
        return f;
    }();
    return fx;
}

TrainData train_data() {
    const auto& fx = small_data();
    return {&fx.train, &fx.dev, &fx.vocab};
}

TrainConfig short_config() {
    TrainConfig c;
    c.epochs = 1;
    c.batch_size = 16;
    c.eval_each_epoch = false;
    return c;
}

EncoderModel make_model(const std::string& preset, Method method, std::uint64_t seed = 1) {
    auto m = build_model(ModelConfig::from_preset(preset, small_data().vocab.size()), seed);
    m.attach_adapters({method}, seed + 1000);
    return m;
}

// Straight scalar Adam with decoupled decay, written independently of AdamW.
struct ScalarAdamW {
    double p, m = 0.0, v = 0.0, lambda;
    int t = 0;
    void step(double g, double lr) {
        ++t;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1.0 - std::pow(0.9, t));
        const double vh = v / (1.0 - std::pow(0.999, t));
        p -= lr * (mh / (std::sqrt(vh) + 1e-8) + lambda * p);
    }
};

}  // namespace

TEST_CASE("AdamW: zero gradient is pure decoupled decay") {
    Tensor p = Tensor::from({3}, {1.0f, -2.0f, 0.5f}, true);
    AdamW opt({p}, AdamWConfig{0.9, 0.999, 1e-8, 0.01});
    p.mutable_grad();  // allocate zeros
    for (float& g : p.mutable_grad()) g = 0.0f;
    opt.step(0.1);
    CHECK(p.data()[0] == static_cast<float>(1.0 * (1.0 - 0.1 * 0.01)));
    CHECK(p.data()[1] == static_cast<float>(-2.0 * (1.0 - 0.1 * 0.01)));
    CHECK(p.data()[2] == static_cast<float>(0.5 * (1.0 - 0.1 * 0.01)));
    // |delta| = lr * lambda * |p| per coordinate
    CHECK(opt.last_update_norm() == doctest::Approx(0.1 * 0.01 * std::sqrt(1.0 + 4.0 + 0.25)).epsilon(1e-4));
}

TEST_CASE("AdamW: constant gradient settles at lr * sign(g)") {
    Tensor p = Tensor::from({2}, {0.0f, 0.0f}, true);
    AdamW opt({p}, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
    std::vector<float> prev(p.data().begin(), p.data().end());
    for (int s = 0; s < 200; ++s) {
        auto g = p.mutable_grad();
        g[0] = 3.0f;
        g[1] = -0.01f;
        opt.step(1e-3);
        const double d0 = p.data()[0] - prev[0], d1 = p.data()[1] - prev[1];
        CHECK(d0 == doctest::Approx(-1e-3).epsilon(1e-3));
        CHECK(d1 == doctest::Approx(1e-3).epsilon(1e-3));
        prev.assign(p.data().begin(), p.data().end());
    }
    CHECK(opt.step_count() == 200);
}

TEST_CASE("AdamW: quadratic bowl matches a scalar reference") {
    // f(p) = 0.5 * c * (p - t)^2 per coordinate
    const std::vector<double> c{1.0, 4.0, 0.25}, target{0.3, -1.0, 2.0};
    Tensor p = Tensor::from({3}, {1.0f, 1.0f, -1.0f}, true);
    AdamW opt({p}, AdamWConfig{0.9, 0.999, 1e-8, 0.01});
    std::vector<ScalarAdamW> ref;
    for (int i = 0; i < 3; ++i) ref.push_back({static_cast<double>(p.data()[i]), 0.0, 0.0, 0.01});
    for (int step = 0; step < 20; ++step) {
        auto g = p.mutable_grad();
        for (int i = 0; i < 3; ++i) {
            g[i] = static_cast<float>(c[i] * (p.data()[i] - target[i]));
            ref[i].step(c[i] * (ref[i].p - target[i]), 0.05);
        }
        opt.step(0.05);
        for (int i = 0; i < 3; ++i) CHECK(std::abs(p.data()[i] - ref[i].p) < 1e-6);
    }
}

TEST_CASE("AdamW: non-finite gradient aborts before any update") {
    Tensor a = Tensor::from({2}, {1.0f, 2.0f}, true);
    Tensor b = Tensor::from({1}, {3.0f}, true);
    AdamW opt({a, b});
    a.mutable_grad()[0] = 1.0f;
    b.mutable_grad()[0] = std::nanf("");
    try {
        opt.step(0.1);
        FAIL("no throw");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("parameter 1") != std::string::npos);
    }
    CHECK(a.data()[0] == 1.0f);
    CHECK(opt.step_count() == 0);
    CHECK(opt.first_moment(0)[0] == 0.0f);

    Tensor frozen = Tensor::from({1}, {1.0f});
    CHECK_THROWS_AS(AdamW({frozen}), ContractError);
}

TEST_CASE("AdamW: buffers track trainable parameters only") {
    auto m = make_model("micro-base", Method::kLoRA);
    auto params = m.trainable_parameters();
    AdamW opt(params);
    CHECK(opt.buffer_count() == 2 * params.size());
    CHECK(opt.state_bytes() == 2 * m.trainable_bytes());
}

TEST_CASE("clip_grad_norm") {
    Tensor a = Tensor::from({2}, {0.0f, 0.0f}, true);
    auto g = a.mutable_grad();
    g[0] = 1.2f;
    g[1] = 1.6f;  // norm 2
    std::vector<Tensor> ps{a};
    CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(0.5));
    CHECK(global_grad_norm(ps) == doctest::Approx(1.0).epsilon(1e-6));

    g[0] = 0.3f;
    g[1] = 0.4f;  // norm 0.5
    CHECK(clip_grad_norm(ps, 1.0) == 1.0);
    CHECK(a.grad()[0] == 0.3f);

    std::mt19937_64 gen(1);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<Tensor> many;
        const float spread = std::exp(nd(gen) * 2.0f);
        for (int k = 0; k < 1 + trial % 4; ++k) {
            Tensor t = Tensor::zeros({1 + gen() % 20}, true);
            for (float& v : t.mutable_grad()) v = spread * nd(gen);
            many.push_back(t);
        }
        double before = 0.0;
        for (const auto& t : many) {
            for (float v : t.grad()) before += static_cast<double>(v) * v;
        }
        before = std::sqrt(before);
        const double f = clip_grad_norm(many, 1.0);
        double after = 0.0;
        for (const auto& t : many) {
            for (float v : t.grad()) after += static_cast<double>(v) * v;
        }
        after = std::sqrt(after);
        REQUIRE(after <= 1.0 + 1e-6);
        if (before <= 1.0) REQUIRE(f == 1.0);
        else REQUIRE(f == doctest::Approx(1.0 / before));
    }
}

TEST_CASE("learning-rate schedule") {
    CHECK(learning_rate_at(0, 10, 2e-4, Schedule::kLinearDecay) == 2e-4);
    CHECK(learning_rate_at(5, 10, 2e-4, Schedule::kLinearDecay) == doctest::Approx(1e-4));
    CHECK(learning_rate_at(9, 10, 2e-4, Schedule::kLinearDecay) == doctest::Approx(2e-5));
    CHECK(learning_rate_at(7, 10, 2e-4, Schedule::kConstant) == 2e-4);
    CHECK(parse_schedule("constant") == Schedule::kConstant);
    CHECK_THROWS_AS(parse_schedule("cosine"), ConfigError);
    TrainConfig bad;
    bad.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = {};
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("memory ledger") {
    MemoryLedger l;
    l.allocate(MemoryCategory::kFrozen, 100);
    l.allocate(MemoryCategory::kActivations, 50);
    l.release(MemoryCategory::kActivations, 50);
    l.allocate(MemoryCategory::kGradients, 30);
    CHECK(l.current_total() == 130);
    CHECK(l.peak_total() == 150);
    CHECK(l.peak(MemoryCategory::kActivations) == 50);
    CHECK(l.peak_breakdown()[static_cast<std::size_t>(MemoryCategory::kActivations)] == 50);
    CHECK_THROWS_AS(l.release(MemoryCategory::kOptimizer, 1), StateError);
    CHECK(l.peak_total() >= l.current_total());
}

TEST_CASE("training is deterministic and conserves frozen weights") {
    auto data = train_data();
    auto cfg = short_config();
    auto a = make_model("micro-base", Method::kLoRA);
    auto b = make_model("micro-base", Method::kLoRA);

    std::vector<std::pair<std::string, std::vector<float>>> frozen;
    for (const auto& [name, t] : a.named_tensors()) {
        if (!t.requires_grad()) frozen.emplace_back(name, std::vector<float>(t.data().begin(), t.data().end()));
    }
    REQUIRE(!frozen.empty());

    std::ostringstream lines;
    auto ra = train_run(a, data, cfg, &lines);
    auto rb = train_run(b, data, cfg);
    CHECK(ra.status == RunStatus::kOk);
    CHECK(ra.loss_curve == rb.loss_curve);
    CHECK(ra.final_eval.f1 == rb.final_eval.f1);
    CHECK(ra.steps == 3);
    CHECK(lines.str().find("\"peak_bytes_by_category\"") != std::string::npos);

    std::size_t idx = 0;
    for (const auto& [name, t] : a.named_tensors()) {
        if (t.requires_grad()) continue;
        CAPTURE(name);
        REQUIRE(frozen[idx].first == name);
        CHECK(bit_identical(t.data(), frozen[idx].second));
        ++idx;
    }

    const auto& mem = ra.memory;
    const auto at = [&](MemoryCategory c) { return mem.peak_breakdown()[static_cast<std::size_t>(c)]; };
    CHECK(at(MemoryCategory::kOptimizer) == 2 * a.trainable_bytes());
    CHECK(at(MemoryCategory::kGradients) == a.trainable_bytes());
    CHECK(at(MemoryCategory::kTrainable) == a.trainable_bytes());
    CHECK(at(MemoryCategory::kFrozen) == a.frozen_bytes());
    CHECK(mem.current(MemoryCategory::kActivations) == 0);

    auto json = nlohmann::json::parse(ra.to_json());
    CHECK(json["status"] == "OK");
    CHECK(json["steps"] == 3);
}

TEST_CASE("full fine-tuning optimizer state covers every weight") {
    auto m = make_model("micro-base", Method::kFullFT);
    CHECK(m.frozen_bytes() == 0);
    CHECK(m.trainable_bytes() == m.parameter_count() * sizeof(float));
    auto r = train_run(m, train_data(), short_config());
    CHECK(r.memory.peak_breakdown()[static_cast<std::size_t>(MemoryCategory::kOptimizer)] ==
          2 * m.parameter_count() * sizeof(float));
}

TEST_CASE("a huge learning rate collapses instead of crashing") {
    auto m = make_model("micro-base", Method::kFullFT);
    auto cfg = short_config();
    cfg.lr = 10.0;
    cfg.epochs = 2;
    RunMetrics r;
    CHECK_NOTHROW(r = train_run(m, train_data(), cfg));
    CHECK(r.status == RunStatus::kCollapsed);
    CHECK(r.note.find("update norm") != std::string::npos);
    CHECK(status_name(r.status) == "COLLAPSED");
}

TEST_CASE("QLoRA stores projection bases at about 4.127 bits per weight") {
    auto m = make_model("micro-base", Method::kQLoRA);
    std::size_t quantized = 0, dense = 0;
    for (const auto& [name, p] : m.named_projections()) {
        REQUIRE(p->quantized());
        quantized += p->frozen_bytes() - p->out_features() * sizeof(float);  // minus the frozen bias
        dense += p->out_features() * p->in_features() * sizeof(float);
    }
    const double ratio = static_cast<double>(quantized) / static_cast<double>(dense);
    CHECK(ratio == doctest::Approx(4.127 / 32.0).epsilon(2e-3));
}

TEST_CASE("modeled peak memory ordering") {
    for (const std::string preset : {"micro-base", "micro-large"}) {
        CAPTURE(preset);
        auto cfg = short_config();
        cfg.batch_size = preset == "micro-large" ? 8 : 16;
        std::map<Method, std::size_t> peak;
        for (Method method : {Method::kFullFT, Method::kLoRA, Method::kQLoRA}) {
            auto m = make_model(preset, method);
            peak[method] = train_run(m, train_data(), cfg).memory.peak_total();
        }
        CHECK(peak[Method::kQLoRA] < peak[Method::kLoRA]);
        CHECK(peak[Method::kLoRA] < peak[Method::kFullFT]);
        MESSAGE("LoRA/FullFT peak ratio " << static_cast<double>(peak[Method::kLoRA]) / peak[Method::kFullFT]);
    }
}
