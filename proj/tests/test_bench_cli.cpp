#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>
#include <sstream>

#include "peftqa/bench.hpp"
#include "peftqa/errors.hpp"

using namespace peftqa;
namespace fs = std::filesystem;

namespace {

std::vector<GridRow> fixture() {
    static const auto rows = read_grid_csv(fs::path("data/published_results.csv"));
    return rows;
}

// Independent scan: highest F1 among OK rows of one method and preset.
double best_f1(const std::vector<GridRow>& rows, const std::string& method, const std::string& preset) {
    double best = -1.0;
    for (const auto& r : rows) {
        if (r.method == method && r.preset == preset && r.status == "OK") best = std::max(best, r.f1);
    }
    return best;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("peftqa_test_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

GridRow fake_row(const GridCell& c, double f1) {
    GridRow r;
    r.method = method_name(c.method);
    r.lr = c.lr;
    r.epochs = c.epochs;
    r.preset = c.preset;
    r.f1 = f1;
    r.em = f1 - 10.0;
    r.time_s = 61.0;
    r.peak_bytes = 1 << 20;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("fixture file") {
    const auto rows = fixture();
    CHECK(rows.size() == 40);
    std::set<std::string> keys;
    for (const auto& r : rows) keys.insert(r.key());
    CHECK(keys.size() == 40);
}

TEST_CASE("percent of baseline") {
    CHECK(percent_of_baseline(50.0, 100.0) == 50.0);
    CHECK(percent_of_baseline(78.01, 78.01) == 100.0);
    CHECK(percent_of_baseline(2.0, 3.0) == 66.7);
    CHECK_THROWS_AS(percent_of_baseline(10.0, 0.0), ContractError);

    const auto rows = fixture();
    for (const auto& [preset, expected] : {std::pair<std::string, double>{"large", 95.8}, {"base", 94.2}}) {
        const double oracle = std::round(1000.0 * best_f1(rows, "LoRA", preset) / best_f1(rows, "FullFT", preset)) / 10.0;
        CHECK(oracle == doctest::Approx(expected).epsilon(1e-9));
        CHECK(percent_of_baseline(best_row(rows, "LoRA", preset)->f1, best_row(rows, "FullFT", preset)->f1) == oracle);
    }
}

TEST_CASE("learning-rate sensitivity") {
    const auto rows = fixture();
    CHECK(*lr_sensitivity(rows, "QLoRA", "base") == doctest::Approx(73.23 - 53.52));
    CHECK(*lr_sensitivity(rows, "LoRA", "base") == doctest::Approx(78.01 - 71.81));
    CHECK(*lr_sensitivity(rows, "LoRA", "large") == doctest::Approx(81.32 - 75.65));
    CHECK(*lr_sensitivity(rows, "QLoRA", "large") == doctest::Approx(80.03 - 68.23));
    // best-of-epochs pairs QLoRA base 74.16 (3 ep) with 53.52 (2 ep)
    CHECK(*lr_sensitivity(rows, "QLoRA", "base", EpochMode::kBestOfEpochs) == doctest::Approx(74.16 - 53.52));

    // Missing pair is absent, not zero.
    std::vector<GridRow> only_high;
    for (const auto& r : rows) {
        if (r.lr == kHighLr) only_high.push_back(r);
    }
    CHECK_FALSE(lr_sensitivity(only_high, "LoRA", "base").has_value());

    // Identical rows at both rates give exactly zero.
    auto same = rows;
    for (auto& r : same) {
        if (r.lr == kStandardLr) r.f1 = find_row(rows, r.method, r.preset, kHighLr, r.epochs)->f1;
    }
    CHECK(*lr_sensitivity(same, "LoRA", "base") == 0.0);
}

TEST_CASE("quantization degradation") {
    const auto rows = fixture();
    CHECK(*quantization_degradation(rows, "large") == doctest::Approx(4.83).epsilon(1e-6));
    CHECK(*quantization_degradation(rows, "base") == doctest::Approx(9.56).epsilon(1e-6));
    // Oracle: best Full FT anywhere minus best QLoRA at 2 epochs.
    for (const std::string preset : {"base", "large"}) {
        double q = -1.0;
        for (const auto& r : rows) {
            if (r.method == "QLoRA" && r.preset == preset && r.epochs == 2) q = std::max(q, r.f1);
        }
        CHECK(*quantization_degradation(rows, preset) == doctest::Approx(best_f1(rows, "FullFT", preset) - q));
    }
    auto equal = rows;
    const double top = best_f1(rows, "FullFT", "base");
    for (auto& r : equal) {
        if (r.method == "QLoRA" && r.preset == "base") r.f1 = top;
    }
    CHECK(*quantization_degradation(equal, "base") == 0.0);

    std::vector<GridRow> no_q;
    for (const auto& r : rows) {
        if (r.method != "QLoRA") no_q.push_back(r);
    }
    CHECK_FALSE(quantization_degradation(no_q, "base").has_value());
    CHECK(*family_degradation(rows, "base", "LoRA", "QLoRA") == doctest::Approx(78.01 - 74.16 + 74.16 - 73.23));
}

TEST_CASE("fixture checks reproduce every published derived number") {
    const auto checks = fixture_checks(fixture());
    CHECK(checks.size() == 13);
    for (const auto& c : checks) {
        CAPTURE(c.label);
        REQUIRE(c.actual.has_value());
        CHECK(std::abs(*c.actual - c.expected) <= 0.05);
        CHECK(c.passed());
    }
}

TEST_CASE("time and number formatting") {
    CHECK(format_hms(5021.0) == "01:23:41");
    CHECK(format_hms(0.4) == "00:00:00");
    CHECK(format_hms(59.6) == "00:01:00");
    CHECK(parse_hms("01:23:41") == 5021.0);
    CHECK_THROWS(parse_hms("1:2"));
    CHECK(format_lr(2e-4) == "2e-04");
    CHECK(format_lr(4.25e-5) == "4.25e-05");
}

TEST_CASE("grid CSV round trip") {
    auto rows = fixture();
    rows[0].status = "COLLAPSED";
    rows[1].status = "FAILED";
    std::stringstream ss;
    write_grid_csv(ss, rows);
    CHECK(ss.str().rfind(kGridCsvHeader, 0) == 0);
    auto back = read_grid_csv(ss);
    REQUIRE(back.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(back[i].key() == rows[i].key());
        CHECK(back[i].f1 == rows[i].f1);
        CHECK(back[i].em == rows[i].em);
        CHECK(back[i].time_s == rows[i].time_s);
        CHECK(back[i].peak_bytes == rows[i].peak_bytes);
        CHECK(back[i].status == rows[i].status);
    }
    std::stringstream bad("method,lr\nLoRA,1\n");
    CHECK_THROWS_AS(read_grid_csv(bad), ParseError);
}

TEST_CASE("default grid has 40 cells") {
    ExperimentGrid g;
    CHECK(g.size() == 40);
    const auto cells = g.cells();
    CHECK(cells.size() == 40);
    std::set<std::string> keys;
    for (const auto& c : cells) keys.insert(c.key());
    CHECK(keys.size() == 40);
    ExperimentGrid empty;
    empty.methods.clear();
    CHECK_THROWS_AS(empty.validate(), UsageError);
}

TEST_CASE("grid runner: cardinality, resume and failures") {
    TempDir tmp;
    const auto csv = tmp.path / "results.csv";
    ExperimentGrid g;
    g.methods = {Method::kLoRA, Method::kQLoRA};
    g.lrs = {kHighLr};
    g.epochs = {2};
    g.presets = {"micro-base"};

    int calls = 0;
    auto rows = run_grid(g, csv, [&](const GridCell& c) {
        ++calls;
        return fake_row(c, 80.0);
    });
    CHECK(rows.size() == 2);
    CHECK(calls == 2);
    CHECK(read_grid_csv(csv).size() == 2);

    // Re-running skips the recorded cells; widening the grid runs only the new ones.
    calls = 0;
    CHECK(run_grid(g, csv, [&](const GridCell& c) { ++calls; return fake_row(c, 1.0); }).size() == 2);
    CHECK(calls == 0);
    g.methods.push_back(Method::kDoRA);
    rows = run_grid(g, csv, [&](const GridCell& c) {
        ++calls;
        if (c.method == Method::kDoRA) throw NumericError("boom");
        return fake_row(c, 1.0);
    });
    CHECK(calls == 1);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].f1 == 80.0);  // kept from the first run
    const auto dora = std::find_if(rows.begin(), rows.end(), [](const GridRow& r) { return r.method == "DoRA"; });
    REQUIRE(dora != rows.end());
    CHECK(dora->status == "FAILED");
    CHECK_FALSE(best_row(rows, "DoRA", "micro-base").has_value());
}

TEST_CASE("run_cell on a tiny synthetic set") {
    DataConfig dc;
    dc.synthetic.num_train = 32;
    dc.synthetic.num_dev = 8;
    const auto data = load_dataset(dc);
    GridCell cell{Method::kQLoRA, kHighLr, 1, "micro-base"};
    const auto row = run_cell(cell, data, 3);
    CHECK(row.method == "QLoRA");
    CHECK(row.preset == "micro-base");
    CHECK(row.epochs == 1);
    CHECK(row.status == "OK");
    CHECK(row.peak_bytes > 0);
    CHECK(row.time_s > 0.0);
    CHECK(row.f1 >= 0.0);
    CHECK(row.f1 <= 100.0);
    CHECK(row.em <= row.f1);
    CHECK(default_batch_size("micro-base") == 16);
    CHECK(default_batch_size("micro-large") == 8);
}

TEST_CASE("reports") {
    const auto rows = fixture();
    const auto md = render_markdown(rows);
    CHECK(md.find("| Method | Ep. | F1 | EM | Time |") != std::string::npos);
    CHECK(md.find("01:23:41") != std::string::npos);
    CHECK(md.find("86.9%") != std::string::npos);
    CHECK(md.find("FullFT (COLLAPSED)") != std::string::npos);
    CHECK(render_markdown(rows) == md);
    CHECK(render_heatmap_csv(rows) == render_heatmap_csv(rows));

    // Heatmap: one row per method, one column per preset x lr x epochs.
    std::istringstream heat(render_heatmap_csv(rows));
    std::string line;
    std::getline(heat, line);
    CHECK(std::count(line.begin(), line.end(), ',') == 8);
    int body = 0;
    while (std::getline(heat, line)) ++body;
    CHECK(body == 5);

    TempDir tmp;
    auto md_files = emit_report(rows, "markdown", tmp.path / "md");
    CHECK(md_files.size() == 2);
    CHECK(slurp(tmp.path / "md" / "report.md") == md);
    auto csv_files = emit_report(rows, "csv", tmp.path / "csv");
    CHECK(csv_files.size() == 3);
    CHECK(read_grid_csv(tmp.path / "csv" / "results.csv").size() == rows.size());

    // Byte-identical across two emissions.
    emit_report(rows, "markdown", tmp.path / "md2");
    CHECK(slurp(tmp.path / "md2" / "report.md") == slurp(tmp.path / "md" / "report.md"));
    CHECK(slurp(tmp.path / "md2" / "heatmap.csv") == slurp(tmp.path / "md" / "heatmap.csv"));

    CHECK_THROWS_AS(emit_report({}, "markdown", tmp.path / "none"), UsageError);
    CHECK_THROWS_AS(emit_report(rows, "pdf", tmp.path / "pdf"), UsageError);
    CHECK_THROWS_AS(render_markdown({}), UsageError);
}
