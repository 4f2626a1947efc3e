// peftqa command-line driver: train, eval, quantize, grid, report, fixtures-check.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "peftqa/bench.hpp"
#include "peftqa/checkpoint.hpp"
#include "peftqa/encoder.hpp"
#include "peftqa/errors.hpp"
#include "peftqa/evaluation.hpp"
#include "peftqa/quantization.hpp"
#include "peftqa/trainer.hpp"

namespace fs = std::filesystem;
using namespace peftqa;

namespace {

struct DataFlags {
    std::string data = "synthetic";
    std::string dev;
    std::size_t num_train = SyntheticSpec{}.num_train;
    std::size_t num_dev = SyntheticSpec{}.num_dev;
    std::uint64_t data_seed = SyntheticSpec{}.seed;

    void add_to(CLI::App* app) {
        app->add_option("--data", data, "'synthetic' or a SQuAD v1 JSON training file")->capture_default_str();
        app->add_option("--dev", dev, "SQuAD v1 JSON dev file (required with a --data file)");
        app->add_option("--num-train", num_train, "synthetic training examples")->capture_default_str();
        app->add_option("--num-dev", num_dev, "synthetic dev examples")->capture_default_str();
        app->add_option("--data-seed", data_seed, "synthetic generator seed")->capture_default_str();
    }

    DataConfig config() const {
        DataConfig dc;
        if (data != "synthetic") {
            if (dev.empty()) throw UsageError("--dev is required when --data names a file");
            dc.train_path = data;
            dc.dev_path = dev;
        }
        dc.synthetic.num_train = num_train;
        dc.synthetic.num_dev = num_dev;
        dc.synthetic.seed = data_seed;
        return dc;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    os << text;
}

// Blockwise absmax 4-bit integer grid, the baseline NF4 is compared against.
double uniform4_mse(std::span<const float> w, std::size_t block) {
    double se = 0.0;
    for (std::size_t b = 0; b < w.size(); b += block) {
        const std::size_t e = std::min(w.size(), b + block);
        float absmax = 0.0f;
        for (std::size_t i = b; i < e; ++i) absmax = std::max(absmax, std::abs(w[i]));
        UniformQuantConfig qc{4, absmax > 0.0f ? absmax / 7.0f : 1.0f, 0.0f};
        for (std::size_t i = b; i < e; ++i) {
            const double d = dequantize_uniform(quantize_uniform(w[i], qc), qc) - w[i];
            se += d * d;
        }
    }
    return w.empty() ? 0.0 : se / static_cast<double>(w.size());
}

int cmd_train(const std::string& method, double lr, std::size_t epochs, const std::string& preset, std::uint64_t seed,
              std::size_t batch_size, const std::string& schedule, std::size_t rank, float alpha, float dropout,
              const DataFlags& df, const fs::path& out) {
    auto ds = load_dataset(df.config());
    auto cfg = ModelConfig::from_preset(preset, ds.vocab.size());
    auto model = build_model(cfg, seed);
    AdapterSettings settings;
    settings.method = parse_method(method);
    settings.rank = rank;
    settings.alpha = alpha;
    settings.dropout = dropout;
    fs::create_directories(out);
    // Unadapted base, so adapter.pftf can be evaluated with --base.
    if (settings.method != Method::kFullFT) save_checkpoint(out / "base.pftf", model, ds.vocab, CheckpointKind::kFull);
    model.attach_adapters(settings, seed + 1000);

    TrainConfig tc;
    tc.lr = lr;
    tc.epochs = epochs;
    tc.batch_size = batch_size ? batch_size : default_batch_size(preset);
    tc.schedule = parse_schedule(schedule);
    tc.seed = seed;

    std::ofstream metrics(out / "metrics.jsonl");
    auto run = train_run(model, {&ds.train, &ds.dev, &ds.vocab}, tc, &metrics);
    write_text(out / "run.json", run.to_json());
    save_checkpoint(out / "model.pftf", model, ds.vocab, CheckpointKind::kFull);
    if (model.adapted()) save_checkpoint(out / "adapter.pftf", model, ds.vocab, CheckpointKind::kAdapter);

    std::cout << method_name(settings.method) << " " << preset << " lr=" << format_lr(lr) << " epochs=" << epochs
              << " status=" << status_name(run.status) << " f1=" << format_percent(run.final_eval.f1)
              << " em=" << format_percent(run.final_eval.exact_match) << " time=" << format_hms(run.wall_s)
              << " peak_mb=" << std::fixed << std::setprecision(1)
              << static_cast<double>(run.memory.peak_total()) / 1048576.0 << "\n";
    if (!run.note.empty()) std::cout << "note: " << run.note << "\n";
    return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& base, std::uint64_t seed, const DataFlags& df,
             const fs::path& out) {
    EncoderModel model;
    Vocabulary vocab;
    if (base.empty()) {
        auto loaded = load_checkpoint(checkpoint);
        if (loaded.kind != CheckpointKind::kFull) {
            throw UsageError("adapter checkpoint needs --base (a full checkpoint of the unadapted model)");
        }
        model = std::move(loaded.model);
        vocab = std::move(loaded.vocab);
    } else {
        auto loaded = load_checkpoint(base);
        model = std::move(loaded.model);
        vocab = apply_adapter_checkpoint(checkpoint, model);
    }
    (void)seed;
    std::vector<QaExample> dev;
    auto dc = df.config();
    if (dc.uses_files()) {
        dev = load_squad_file(dc.dev_path);
    } else if (df.data != "synthetic") {
        dev = load_squad_file(df.data);
    } else {
        dev = generate_synthetic(dc.synthetic).second;
    }
    auto preds = predict_dataset(model, dev, vocab);
    auto report = evaluate_dataset(preds, dev);
    if (!out.empty()) {
        fs::create_directories(out);
        write_text(out / "predictions.json", predictions_to_json(preds));
        write_text(out / "eval.json", report.to_json());
    }
    std::cout << report.to_json() << "\n";
    return 0;
}

int cmd_quantize(const fs::path& checkpoint, const std::string& preset, std::uint64_t seed, std::size_t block,
                 std::size_t dq_block, bool no_double, const fs::path& out) {
    EncoderModel model;
    if (!checkpoint.empty()) {
        model = load_checkpoint(checkpoint).model;
    } else {
        model = build_model(ModelConfig::from_preset(preset, 1000), seed);
    }
    QuantizationOptions opt{block, !no_double, dq_block};
    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    std::size_t dense_bytes = 0, nf4_bytes = 0;
    for (const auto& [name, proj] : model.named_projections()) {
        if (name.find(".ff") != std::string::npos) continue;
        auto w = proj->effective_base();
        auto q = quantize_nf4(w, opt);
        auto back = dequantize(q);
        double se = 0.0;
        for (std::size_t i = 0; i < w.numel(); ++i) {
            const double d = back.data()[i] - w.data()[i];
            se += d * d;
        }
        auto bits = bits_per_parameter(q);
        dense_bytes += w.numel() * sizeof(float);
        nf4_bytes += q.storage_bytes();
        layers.push_back({{"name", name},
                          {"numel", w.numel()},
                          {"nf4_mse", se / static_cast<double>(w.numel())},
                          {"uniform4_mse", uniform4_mse(w.data(), block)},
                          {"bits_per_param", bits.total},
                          {"storage_bytes", q.storage_bytes()}});
    }
    auto nominal = nominal_bits_per_parameter(block, dq_block, true);
    auto single = nominal_bits_per_parameter(block, dq_block, false);
    nlohmann::ordered_json report = {{"block_size", block},
                                     {"double_quant", !no_double},
                                     {"dq_block_size", dq_block},
                                     {"nominal_bits_per_param", nominal.total},
                                     {"double_quant_savings_bits", single.metadata - nominal.metadata},
                                     {"dense_bytes", dense_bytes},
                                     {"nf4_bytes", nf4_bytes},
                                     {"layers", layers}};
    const auto text = report.dump(2);
    if (!out.empty()) {
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        write_text(out, text + "\n");
    }
    std::cout << text << "\n";
    return 0;
}

int cmd_fixtures(const fs::path& fixture) {
    auto rows = read_grid_csv(fixture);
    int failures = 0;
    for (const auto& c : fixture_checks(rows)) {
        const bool ok = c.passed();
        failures += ok ? 0 : 1;
        char actual[32] = "absent";
        if (c.actual) std::snprintf(actual, sizeof actual, "%.2f", *c.actual);
        std::printf("%s %-32s expected %7.2f got %7s (%s)\n", ok ? "PASS" : "FAIL", c.label.c_str(), c.expected,
                    actual, c.basis.c_str());
    }
    return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Parameter-efficient fine-tuning of a micro encoder for extractive QA"};
    app.set_config("--config", "", "TOML/INI config; flags on the command line override it");
    app.require_subcommand(1);

    std::string method = "LoRA", preset = "micro-base", schedule = "linear";
    double lr = kHighLr;
    std::size_t epochs = 2, batch_size = 0, rank = 16;
    float alpha = 32.0f, dropout = 0.1f;
    std::uint64_t seed = 1;
    std::string out;
    DataFlags df;

    auto* train = app.add_subcommand("train", "train one configuration and save checkpoints");
    train->add_option("--method", method, "FullFT|LoRA|QLoRA|DoRA|QDoRA")->capture_default_str();
    train->add_option("--lr", lr, "learning rate")->capture_default_str();
    train->add_option("--epochs", epochs)->capture_default_str();
    train->add_option("--preset", preset, "micro-base|micro-large")->capture_default_str();
    train->add_option("--seed", seed)->capture_default_str();
    train->add_option("--batch-size", batch_size, "0 = preset default");
    train->add_option("--schedule", schedule, "constant|linear")->capture_default_str();
    train->add_option("--rank", rank)->capture_default_str();
    train->add_option("--alpha", alpha)->capture_default_str();
    train->add_option("--dropout", dropout)->capture_default_str();
    train->add_option("--out", out, "output directory")->required();
    df.add_to(train);

    std::string checkpoint, base;
    auto* eval = app.add_subcommand("eval", "score a checkpoint on a dev set");
    eval->add_option("--checkpoint", checkpoint, "full or adapter checkpoint")->required();
    eval->add_option("--base", base, "full checkpoint of the base model when --checkpoint is an adapter");
    eval->add_option("--seed", seed);
    eval->add_option("--out", out, "directory for predictions.json and eval.json");
    df.add_to(eval);

    std::size_t block = 64, dq_block = 256;
    bool no_double = false;
    auto* quant = app.add_subcommand("quantize", "NF4 error and storage report for a model's projections");
    quant->add_option("--checkpoint", checkpoint, "full checkpoint (default: fresh model from --preset/--seed)");
    quant->add_option("--preset", preset)->capture_default_str();
    quant->add_option("--seed", seed)->capture_default_str();
    quant->add_option("--block-size", block)->capture_default_str();
    quant->add_option("--dq-block-size", dq_block)->capture_default_str();
    quant->add_flag("--no-double-quant", no_double);
    quant->add_option("--out", out, "JSON report path");

    std::vector<std::string> g_methods = {"FullFT", "LoRA", "QLoRA", "DoRA", "QDoRA"};
    std::vector<double> g_lrs = {kStandardLr, kHighLr};
    std::vector<std::size_t> g_epochs = {2, 3};
    std::vector<std::string> g_presets = {"micro-base", "micro-large"};
    auto* grid = app.add_subcommand("grid", "run the experiment grid, resuming from <out>/results.csv");
    grid->add_option("--method", g_methods, "methods to run")->capture_default_str();
    grid->add_option("--lr", g_lrs, "learning rates")->capture_default_str();
    grid->add_option("--epochs", g_epochs)->capture_default_str();
    grid->add_option("--preset", g_presets)->capture_default_str();
    grid->add_option("--seed", seed)->capture_default_str();
    grid->add_option("--out", out, "output directory")->required();
    df.add_to(grid);

    std::string results, format = "markdown";
    auto* report = app.add_subcommand("report", "render tables, heatmap and analysis from a results CSV");
    report->add_option("--results", results, "GridResult CSV")->required();
    report->add_option("--format", format, "markdown|csv")->capture_default_str();
    report->add_option("--out", out, "output directory")->required();

    std::string fixture = "data/published_results.csv";
    auto* fixtures = app.add_subcommand("fixtures-check", "recompute the published derived numbers from the fixture");
    fixtures->add_option("--fixture", fixture)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            return cmd_train(method, lr, epochs, preset, seed, batch_size, schedule, rank, alpha, dropout, df, out);
        }
        if (*eval) return cmd_eval(checkpoint, base, seed, df, out);
        if (*quant) return cmd_quantize(checkpoint, preset, seed, block, dq_block, no_double, out);
        if (*grid) {
            ExperimentGrid g;
            g.methods.clear();
            for (const auto& m : g_methods) g.methods.push_back(parse_method(m));
            g.lrs = g_lrs;
            g.epochs = g_epochs;
            g.presets = g_presets;
            g.seed = seed;
            fs::create_directories(out);
            const auto csv = fs::path(out) / "results.csv";
            auto rows = run_grid(g, df.config(), csv);
            std::cout << rows.size() << " rows in " << csv.string() << "\n";
            return 0;
        }
        if (*report) {
            for (const auto& p : emit_report(read_grid_csv(fs::path(results)), format, out)) {
                std::cout << p.string() << "\n";
            }
            return 0;
        }
        if (*fixtures) return cmd_fixtures(fixture);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
