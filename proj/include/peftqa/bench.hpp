#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "peftqa/encoder.hpp"
#include "peftqa/squad.hpp"
#include "peftqa/trainer.hpp"

namespace peftqa {

struct GridCell {
    Method method = Method::kLoRA;
    double lr = kHighLr;
    std::size_t epochs = 2;
    std::string preset = "micro-base";

    /// "method,lr,epochs,preset" with the same number formatting as the CSV.
    std::string key() const;
};

struct ExperimentGrid {
    std::vector<Method> methods = {Method::kFullFT, Method::kLoRA, Method::kQLoRA, Method::kDoRA, Method::kQDoRA};
    std::vector<double> lrs = {kStandardLr, kHighLr};
    std::vector<std::size_t> epochs = {2, 3};
    std::vector<std::string> presets = {"micro-base", "micro-large"};
    std::uint64_t seed = 1;

    void validate() const;
    std::size_t size() const { return methods.size() * lrs.size() * epochs.size() * presets.size(); }
    /// Preset-major, then method, learning rate, epochs.
    std::vector<GridCell> cells() const;
};

struct GridRow {
    std::string method;
    double lr = 0.0;
    std::size_t epochs = 0;
    std::string preset;
    double f1 = 0.0;
    double em = 0.0;
    double time_s = 0.0;
    std::size_t peak_bytes = 0;
    std::string status = "OK";  // OK | COLLAPSED | FAILED

    std::string key() const;
};

inline constexpr const char* kGridCsvHeader = "method,lr,epochs,preset,f1,em,time_s,peak_bytes,status";

/// Shortest round-trip text for a learning rate, e.g. "2e-04".
std::string format_lr(double lr);
/// Seconds rounded to the nearest second as HH:MM:SS.
std::string format_hms(double seconds);
double parse_hms(const std::string& text);

void write_grid_csv(std::ostream& os, const std::vector<GridRow>& rows);
void write_grid_csv(const std::filesystem::path& path, const std::vector<GridRow>& rows);
std::vector<GridRow> read_grid_csv(std::istream& is);
std::vector<GridRow> read_grid_csv(const std::filesystem::path& path);

/// Dataset for grid cells: SQuAD files when both paths are set, otherwise the
/// synthetic generator.
struct DataConfig {
    std::filesystem::path train_path;
    std::filesystem::path dev_path;
    SyntheticSpec synthetic;

    bool uses_files() const { return !train_path.empty() && !dev_path.empty(); }
};

struct Dataset {
    std::vector<QaExample> train;
    std::vector<QaExample> dev;
    Vocabulary vocab;
};

/// Loads or generates the data and builds the vocabulary from the training split.
Dataset load_dataset(const DataConfig& data);

/// Batch size per preset: 16 for micro-base, 8 for micro-large.
std::size_t default_batch_size(const std::string& preset);

/// Builds the model for `cell`, attaches adapters and trains. Model
/// initialization uses `seed`; the adapter seed and data order derive from it.
GridRow run_cell(const GridCell& cell, const Dataset& data, std::uint64_t seed, std::ostream* metrics_out = nullptr);

using CellRunner = std::function<GridRow(const GridCell&)>;

/// Runs every cell not already recorded in `results_csv`, appending each
/// row as soon as it finishes. A throwing cell becomes a FAILED row. Returns
/// all rows (previous and new) in grid order.
std::vector<GridRow> run_grid(const ExperimentGrid& grid, const std::filesystem::path& results_csv,
                              const CellRunner& runner);
std::vector<GridRow> run_grid(const ExperimentGrid& grid, const DataConfig& data,
                              const std::filesystem::path& results_csv);

// ---- analysis -----------------------------------------------------------

/// 100 * cell / baseline rounded to one decimal.
double percent_of_baseline(double cell_f1, double baseline_f1);

std::optional<GridRow> find_row(const std::vector<GridRow>& rows, const std::string& method, const std::string& preset,
                                double lr, std::size_t epochs);
/// Highest-F1 row for a method and preset, optionally restricted to one LR
/// and/or one epoch count.
std::optional<GridRow> best_row(const std::vector<GridRow>& rows, const std::string& method, const std::string& preset,
                                std::optional<double> lr = {}, std::optional<std::size_t> epochs = {});

/// How rows are paired when a comparison mixes epoch settings.
enum class EpochMode { kMatched, kBestOfEpochs };

/// F1(high LR) - F1(standard LR), both at `epochs` (matched) or each at its
/// best epoch count. Absent when either row is missing.
std::optional<double> lr_sensitivity(const std::vector<GridRow>& rows, const std::string& method,
                                     const std::string& preset, EpochMode mode = EpochMode::kMatched,
                                     std::size_t epochs = 2, double high_lr = kHighLr,
                                     double standard_lr = kStandardLr);

/// Best Full FT F1 (any LR or epoch count) minus the quantized method's best
/// F1 over learning rates at `epochs`.
std::optional<double> quantization_degradation(const std::vector<GridRow>& rows, const std::string& preset,
                                               const std::string& quantized = "QLoRA", std::size_t epochs = 2);
/// Unquantized family member minus its quantized twin (LoRA-QLoRA,
/// DoRA-QDoRA), each best over learning rates at `epochs`.
std::optional<double> family_degradation(const std::vector<GridRow>& rows, const std::string& preset,
                                         const std::string& unquantized, const std::string& quantized,
                                         std::size_t epochs = 2);

/// 100 * (1 - time(method) / time(Full FT)) for one matched cell.
std::optional<double> time_reduction(const std::vector<GridRow>& rows, const std::string& method,
                                     const std::string& preset, double lr, std::size_t epochs);
/// 100 * (1 - peak(method) / peak(Full FT)), peaks taken over each method's rows.
std::optional<double> memory_reduction(const std::vector<GridRow>& rows, const std::string& method,
                                       const std::string& preset);

struct AnalysisLine {
    std::string label;
    std::optional<double> value;
    std::string unit;  // "%" or "pts"
    std::string basis;
};

/// Percent-of-baseline, LR sensitivity, quantization degradation, time and
/// memory reductions for every method and preset present.
std::vector<AnalysisLine> analyze(const std::vector<GridRow>& rows);

struct FixtureCheck {
    std::string label;
    double expected = 0.0;
    std::optional<double> actual;
    std::string basis;

    bool passed(double tolerance = 0.05) const;
};

/// Recomputes the published derived numbers from rows in the fixture layout
/// (presets "base" and "large", methods FullFT/LoRA/QLoRA/DoRA/QDoRA).
std::vector<FixtureCheck> fixture_checks(const std::vector<GridRow>& rows);

/// format: "markdown" writes report.md and heatmap.csv; "csv" writes
/// results.csv, analysis.csv and heatmap.csv. Returns the files written.
std::vector<std::filesystem::path> emit_report(const std::vector<GridRow>& rows, const std::string& format,
                                               const std::filesystem::path& out_dir);

std::string render_markdown(const std::vector<GridRow>& rows);
std::string render_heatmap_csv(const std::vector<GridRow>& rows);
std::string render_analysis_csv(const std::vector<GridRow>& rows);

}  // namespace peftqa
