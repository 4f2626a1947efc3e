#include "peftqa/bench.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "peftqa/errors.hpp"

namespace peftqa {

namespace {

bool same_lr(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(std::abs(a), std::abs(b)); }

std::string fmt(const char* pattern, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, v);
    return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

const std::vector<std::string>& canonical_methods() {
    static const std::vector<std::string> m = {"FullFT", "LoRA", "QLoRA", "DoRA", "QDoRA"};
    return m;
}

std::vector<std::string> methods_in(const std::vector<GridRow>& rows) {
    std::vector<std::string> out;
    for (const auto& m : canonical_methods()) {
        if (std::any_of(rows.begin(), rows.end(), [&](const GridRow& r) { return r.method == m; })) out.push_back(m);
    }
    for (const auto& r : rows) {
        if (std::find(out.begin(), out.end(), r.method) == out.end()) out.push_back(r.method);
    }
    return out;
}

std::vector<std::string> presets_in(const std::vector<GridRow>& rows) {
    std::vector<std::string> out;
    for (const auto& r : rows) {
        if (std::find(out.begin(), out.end(), r.preset) == out.end()) out.push_back(r.preset);
    }
    return out;
}

std::vector<double> lrs_in(const std::vector<GridRow>& rows) {
    std::vector<double> out;
    for (const auto& r : rows) {
        if (std::none_of(out.begin(), out.end(), [&](double l) { return same_lr(l, r.lr); })) out.push_back(r.lr);
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::size_t> epochs_in(const std::vector<GridRow>& rows) {
    std::set<std::size_t> s;
    for (const auto& r : rows) s.insert(r.epochs);
    return {s.begin(), s.end()};
}

std::string full_ft() { return method_name(Method::kFullFT); }

}  // namespace

std::string format_lr(double lr) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, lr);
    if (ec != std::errc()) throw ContractError("cannot format learning rate");
    return std::string(buf, end);
}

std::string format_hms(double seconds) {
    const auto total = static_cast<long long>(std::llround(std::max(0.0, seconds)));
    char buf[32];
    std::snprintf(buf, sizeof buf, "%02lld:%02lld:%02lld", total / 3600, (total / 60) % 60, total % 60);
    return buf;
}

double parse_hms(const std::string& text) {
    int h = 0, m = 0, s = 0;
    char c1 = 0, c2 = 0;
    std::istringstream ss(text);
    if (!(ss >> h >> c1 >> m >> c2 >> s) || c1 != ':' || c2 != ':' || m >= 60 || s >= 60 || h < 0 || m < 0 ||
        s < 0) {
        throw ParseError("bad HH:MM:SS time '" + text + "'");
    }
    return h * 3600.0 + m * 60.0 + s;
}

std::string GridCell::key() const {
    return method_name(method) + "," + format_lr(lr) + "," + std::to_string(epochs) + "," + preset;
}

std::string GridRow::key() const {
    return method + "," + format_lr(lr) + "," + std::to_string(epochs) + "," + preset;
}

void ExperimentGrid::validate() const {
    if (size() == 0) throw UsageError("experiment grid is empty");
    for (double lr : lrs) {
        if (!(lr > 0.0)) throw ConfigError("grid learning rates must be positive");
    }
    for (auto e : epochs) {
        if (e == 0) throw ConfigError("grid epochs must be positive");
    }
}

std::vector<GridCell> ExperimentGrid::cells() const {
    std::vector<GridCell> out;
    for (const auto& p : presets) {
        for (auto m : methods) {
            for (double lr : lrs) {
                for (auto e : epochs) out.push_back({m, lr, e, p});
            }
        }
    }
    return out;
}

void write_grid_csv(std::ostream& os, const std::vector<GridRow>& rows) {
    os << kGridCsvHeader << '\n';
    for (const auto& r : rows) {
        os << r.method << ',' << format_lr(r.lr) << ',' << r.epochs << ',' << r.preset << ',' << fmt("%.2f", r.f1) << ','
           << fmt("%.2f", r.em) << ',' << fmt("%.3f", r.time_s) << ',' << r.peak_bytes << ',' << r.status << '\n';
    }
}

void write_grid_csv(const std::filesystem::path& path, const std::vector<GridRow>& rows) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    write_grid_csv(os, rows);
}

std::vector<GridRow> read_grid_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw ParseError("results CSV is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kGridCsvHeader) throw ParseError("results CSV header must be '" + std::string(kGridCsvHeader) + "'");
    std::vector<GridRow> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line == "\r" || line[0] == '#') continue;
        auto f = split_csv_line(line);
        if (f.size() != 9) throw ParseError("results CSV line " + std::to_string(lineno) + ": expected 9 fields");
        GridRow r;
        try {
            r.method = f[0];
            r.lr = std::stod(f[1]);
            r.epochs = std::stoul(f[2]);
            r.preset = f[3];
            r.f1 = std::stod(f[4]);
            r.em = std::stod(f[5]);
            r.time_s = f[6].find(':') != std::string::npos ? parse_hms(f[6]) : std::stod(f[6]);
            r.peak_bytes = std::stoull(f[7]);
            r.status = f[8];
        } catch (const std::invalid_argument&) {
            throw ParseError("results CSV line " + std::to_string(lineno) + ": malformed number");
        } catch (const std::out_of_range&) {
            throw ParseError("results CSV line " + std::to_string(lineno) + ": number out of range");
        }
        if (r.status != "OK" && r.status != "COLLAPSED" && r.status != "FAILED") {
            throw ParseError("results CSV line " + std::to_string(lineno) + ": unknown status " + r.status);
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<GridRow> read_grid_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    return read_grid_csv(is);
}

Dataset load_dataset(const DataConfig& data) {
    Dataset ds;
    if (data.uses_files()) {
        ds.train = load_squad_file(data.train_path);
        ds.dev = load_squad_file(data.dev_path);
    } else {
        std::tie(ds.train, ds.dev) = generate_synthetic(data.synthetic);
    }
    std::vector<std::string_view> texts;
    for (const auto& ex : ds.train) {
        texts.push_back(ex.question);
        texts.push_back(ex.context);
    }
    ds.vocab = Vocabulary::build(texts);
    return ds;
}

std::size_t default_batch_size(const std::string& preset) { return preset == "micro-large" ? 8 : 16; }

GridRow run_cell(const GridCell& cell, const Dataset& data, std::uint64_t seed, std::ostream* metrics_out) {
    auto cfg = ModelConfig::from_preset(cell.preset, data.vocab.size());
    auto model = build_model(cfg, seed);
    AdapterSettings settings;
    settings.method = cell.method;
    model.attach_adapters(settings, seed + 1000);
    TrainConfig tc;
    tc.lr = cell.lr;
    tc.epochs = cell.epochs;
    tc.batch_size = default_batch_size(cell.preset);
    tc.seed = seed;
    tc.eval_each_epoch = false;
    auto metrics = train_run(model, {&data.train, &data.dev, &data.vocab}, tc, metrics_out);
    GridRow row;
    row.method = method_name(cell.method);
    row.lr = cell.lr;
    row.epochs = cell.epochs;
    row.preset = cell.preset;
    row.f1 = metrics.final_eval.f1;
    row.em = metrics.final_eval.exact_match;
    row.time_s = metrics.wall_s;
    row.peak_bytes = metrics.memory.peak_total();
    row.status = status_name(metrics.status);
    return row;
}

std::vector<GridRow> run_grid(const ExperimentGrid& grid, const std::filesystem::path& results_csv,
                              const CellRunner& runner) {
    grid.validate();
    std::map<std::string, GridRow> done;
    if (std::filesystem::exists(results_csv)) {
        for (auto& r : read_grid_csv(results_csv)) done[r.key()] = r;
    } else {
        std::ofstream os(results_csv);
        if (!os) throw DataError("cannot create " + results_csv.string());
        os << kGridCsvHeader << '\n';
    }
    std::vector<GridRow> rows;
    for (const auto& cell : grid.cells()) {
        if (auto it = done.find(cell.key()); it != done.end()) {
            rows.push_back(it->second);
            continue;
        }
        GridRow row;
        try {
            row = runner(cell);
        } catch (const std::exception& e) {
            std::cerr << "cell " << cell.key() << " failed: " << e.what() << '\n';
            row = GridRow{method_name(cell.method), cell.lr, cell.epochs, cell.preset, 0.0, 0.0, 0.0, 0, "FAILED"};
        }
        std::ofstream os(results_csv, std::ios::app);
        std::ostringstream line;
        write_grid_csv(line, {row});
        const auto text = line.str();
        os << text.substr(text.find('\n') + 1) << std::flush;
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<GridRow> run_grid(const ExperimentGrid& grid, const DataConfig& data,
                              const std::filesystem::path& results_csv) {
    std::optional<Dataset> ds;
    return run_grid(grid, results_csv, [&](const GridCell& cell) {
        if (!ds) ds = load_dataset(data);
        return run_cell(cell, *ds, grid.seed);
    });
}

double percent_of_baseline(double cell_f1, double baseline_f1) {
    if (!(baseline_f1 > 0.0)) throw ContractError("baseline F1 must be positive");
    return std::round(1000.0 * cell_f1 / baseline_f1) / 10.0;
}

std::optional<GridRow> find_row(const std::vector<GridRow>& rows, const std::string& method, const std::string& preset,
                                double lr, std::size_t epochs) {
    for (const auto& r : rows) {
        if (r.method == method && r.preset == preset && same_lr(r.lr, lr) && r.epochs == epochs) return r;
    }
    return std::nullopt;
}

std::optional<GridRow> best_row(const std::vector<GridRow>& rows, const std::string& method, const std::string& preset,
                                std::optional<double> lr, std::optional<std::size_t> epochs) {
    std::optional<GridRow> best;
    for (const auto& r : rows) {
        if (r.method != method || r.preset != preset || r.status == "FAILED") continue;
        if (lr && !same_lr(r.lr, *lr)) continue;
        if (epochs && r.epochs != *epochs) continue;
        if (!best || r.f1 > best->f1) best = r;
    }
    return best;
}

std::optional<double> lr_sensitivity(const std::vector<GridRow>& rows, const std::string& method,
                                     const std::string& preset, EpochMode mode, std::size_t epochs, double high_lr,
                                     double standard_lr) {
    std::optional<GridRow> hi, lo;
    if (mode == EpochMode::kMatched) {
        hi = find_row(rows, method, preset, high_lr, epochs);
        lo = find_row(rows, method, preset, standard_lr, epochs);
    } else {
        hi = best_row(rows, method, preset, high_lr);
        lo = best_row(rows, method, preset, standard_lr);
    }
    if (!hi || !lo) return std::nullopt;
    return hi->f1 - lo->f1;
}

std::optional<double> quantization_degradation(const std::vector<GridRow>& rows, const std::string& preset,
                                               const std::string& quantized, std::size_t epochs) {
    auto base = best_row(rows, full_ft(), preset);
    auto q = best_row(rows, quantized, preset, std::nullopt, epochs);
    if (!base || !q) return std::nullopt;
    return base->f1 - q->f1;
}

std::optional<double> family_degradation(const std::vector<GridRow>& rows, const std::string& preset,
                                         const std::string& unquantized, const std::string& quantized,
                                         std::size_t epochs) {
    auto u = best_row(rows, unquantized, preset, std::nullopt, epochs);
    auto q = best_row(rows, quantized, preset, std::nullopt, epochs);
    if (!u || !q) return std::nullopt;
    return u->f1 - q->f1;
}

std::optional<double> time_reduction(const std::vector<GridRow>& rows, const std::string& method,
                                     const std::string& preset, double lr, std::size_t epochs) {
    auto m = find_row(rows, method, preset, lr, epochs);
    auto f = find_row(rows, full_ft(), preset, lr, epochs);
    if (!m || !f || !(f->time_s > 0.0)) return std::nullopt;
    return 100.0 * (1.0 - m->time_s / f->time_s);
}

std::optional<double> memory_reduction(const std::vector<GridRow>& rows, const std::string& method,
                                       const std::string& preset) {
    auto peak = [&](const std::string& m) {
        std::size_t p = 0;
        for (const auto& r : rows) {
            if (r.method == m && r.preset == preset) p = std::max(p, r.peak_bytes);
        }
        return p;
    };
    const std::size_t mp = peak(method), fp = peak(full_ft());
    if (mp == 0 || fp == 0) return std::nullopt;
    return 100.0 * (1.0 - static_cast<double>(mp) / static_cast<double>(fp));
}

std::vector<AnalysisLine> analyze(const std::vector<GridRow>& rows) {
    std::vector<AnalysisLine> out;
    const auto methods = methods_in(rows);
    const auto lrs = lrs_in(rows);
    const auto epochs = epochs_in(rows);
    const std::size_t match_ep =
        std::find(epochs.begin(), epochs.end(), 2) != epochs.end() ? 2 : (epochs.empty() ? 2 : epochs.front());
    for (const auto& preset : presets_in(rows)) {
        auto base = best_row(rows, full_ft(), preset);
        for (const auto& m : methods) {
            if (m == full_ft()) continue;
            auto b = best_row(rows, m, preset);
            if (base && b && base->f1 > 0.0) {
                out.push_back({m + " " + preset + " best F1 vs Full FT best", percent_of_baseline(b->f1, base->f1), "%",
                               "best of all LR/epochs"});
            }
        }
        if (lrs.size() >= 2) {
            for (const auto& m : methods) {
                out.push_back({m + " " + preset + " LR sensitivity",
                               lr_sensitivity(rows, m, preset, EpochMode::kMatched, match_ep, lrs.back(), lrs.front()),
                               "pts", "F1(lr " + format_lr(lrs.back()) + ") - F1(lr " + format_lr(lrs.front()) +
                                          "), " + std::to_string(match_ep) + " epochs"});
            }
        }
        for (const auto& q : {std::string("QLoRA"), std::string("QDoRA")}) {
            if (std::find(methods.begin(), methods.end(), q) == methods.end()) continue;
            out.push_back({q + " " + preset + " degradation vs Full FT", quantization_degradation(rows, preset, q, match_ep),
                           "pts", "best Full FT - best " + q + " over LR at " + std::to_string(match_ep) + " epochs"});
        }
        for (const auto& [u, q] : {std::pair<std::string, std::string>{"LoRA", "QLoRA"}, {"DoRA", "QDoRA"}}) {
            auto v = family_degradation(rows, preset, u, q, match_ep);
            if (v) out.push_back({u + "-" + q + " " + preset, v, "pts", "best over LR at " + std::to_string(match_ep) + " epochs"});
        }
        for (const auto& m : methods) {
            if (m == full_ft()) continue;
            for (double lr : lrs) {
                for (auto e : epochs) {
                    auto v = time_reduction(rows, m, preset, lr, e);
                    if (v) {
                        out.push_back({m + " " + preset + " time reduction", v, "%",
                                       "lr " + format_lr(lr) + ", " + std::to_string(e) + " epochs"});
                    }
                }
            }
            out.push_back({m + " " + preset + " memory reduction", memory_reduction(rows, m, preset), "%", "peak"});
        }
    }
    return out;
}

bool FixtureCheck::passed(double tolerance) const { return actual && std::abs(*actual - expected) <= tolerance; }

std::vector<FixtureCheck> fixture_checks(const std::vector<GridRow>& rows) {
    std::vector<FixtureCheck> out;
    auto pct = [&](const std::string& m, const std::string& p) -> std::optional<double> {
        auto b = best_row(rows, m, p);
        auto f = best_row(rows, full_ft(), p);
        if (!b || !f) return std::nullopt;
        return percent_of_baseline(b->f1, f->f1);
    };
    auto round1 = [](std::optional<double> v) -> std::optional<double> {
        if (!v) return v;
        return std::round(*v * 10.0) / 10.0;
    };
    out.push_back({"LoRA large % of Full FT", 95.8, pct("LoRA", "large"), "best LoRA / best Full FT"});
    out.push_back({"LoRA base % of Full FT", 94.2, pct("LoRA", "base"), "best LoRA / best Full FT"});
    out.push_back({"QLoRA base LR sensitivity", 19.71, lr_sensitivity(rows, "QLoRA", "base"), "matched 2 epochs"});
    out.push_back({"LoRA base LR sensitivity", 6.20, lr_sensitivity(rows, "LoRA", "base"), "matched 2 epochs"});
    out.push_back({"LoRA large LR sensitivity", 5.67, lr_sensitivity(rows, "LoRA", "large"), "matched 2 epochs"});
    out.push_back({"QLoRA large LR sensitivity", 11.80, lr_sensitivity(rows, "QLoRA", "large"), "matched 2 epochs"});
    out.push_back({"QLoRA large degradation", 4.83, quantization_degradation(rows, "large"),
                   "best Full FT - best QLoRA over LR at 2 epochs"});
    out.push_back({"QLoRA base degradation", 9.56, quantization_degradation(rows, "base"),
                   "best Full FT - best QLoRA over LR at 2 epochs"});
    out.push_back({"QLoRA base memory reduction", 86.9, round1(memory_reduction(rows, "QLoRA", "base")), "peak"});
    out.push_back({"QLoRA large memory reduction", 81.9, round1(memory_reduction(rows, "QLoRA", "large")), "peak"});
    out.push_back({"LoRA large memory reduction", 50.2, round1(memory_reduction(rows, "LoRA", "large")), "peak"});
    out.push_back({"LoRA large time reduction", 73.5, round1(time_reduction(rows, "LoRA", "large", kHighLr, 2)),
                   "lr 2e-4, 2 epochs"});
    out.push_back({"LoRA base time reduction", 68.6, round1(time_reduction(rows, "LoRA", "base", kHighLr, 3)),
                   "lr 2e-4, 3 epochs"});
    return out;
}

std::string render_markdown(const std::vector<GridRow>& rows) {
    if (rows.empty()) throw UsageError("no results to report");
    std::ostringstream md;
    md << "# Results\n";
    const auto methods = methods_in(rows);
    const auto presets = presets_in(rows);
    const auto epochs = epochs_in(rows);
    for (const auto& preset : presets) {
        for (double lr : lrs_in(rows)) {
            md << "\n## " << preset << ", lr " << format_lr(lr) << "\n\n";
            md << "| Method | Ep. | F1 | EM | Time |\n|---|---|---|---|---|\n";
            for (auto e : epochs) {
                for (const auto& m : methods) {
                    auto r = find_row(rows, m, preset, lr, e);
                    if (!r) continue;
                    std::string name = r->method;
                    if (r->status != "OK") name += " (" + r->status + ")";
                    md << "| " << name << " | " << e << " | " << fmt("%.2f", r->f1) << " | " << fmt("%.2f", r->em)
                       << " | " << format_hms(r->time_s) << " |\n";
                }
            }
        }
    }
    md << "\n## Peak memory (MB)\n\n| Method |";
    for (const auto& p : presets) md << ' ' << p << " |";
    md << "\n|---|";
    for (std::size_t i = 0; i < presets.size(); ++i) md << "---|";
    md << '\n';
    for (const auto& m : methods) {
        md << "| " << m << " |";
        for (const auto& p : presets) {
            std::size_t peak = 0;
            for (const auto& r : rows) {
                if (r.method == m && r.preset == p) peak = std::max(peak, r.peak_bytes);
            }
            md << ' ' << (peak ? fmt("%.1f", static_cast<double>(peak) / 1048576.0) : std::string("-")) << " |";
        }
        md << '\n';
    }
    md << "\n## Analysis\n\n";
    for (const auto& line : analyze(rows)) {
        md << "- " << line.label << ": "
           << (line.value ? fmt(line.unit == "%" ? "%.1f" : "%+.2f", *line.value) + (line.unit == "%" ? "%" : " pts")
                          : std::string("absent"))
           << " (" << line.basis << ")\n";
    }
    return md.str();
}

std::string render_heatmap_csv(const std::vector<GridRow>& rows) {
    if (rows.empty()) throw UsageError("no results to report");
    std::ostringstream os;
    struct Col {
        std::string preset;
        double lr;
        std::size_t epochs;
    };
    std::vector<Col> cols;
    for (const auto& p : presets_in(rows)) {
        for (double lr : lrs_in(rows)) {
            for (auto e : epochs_in(rows)) cols.push_back({p, lr, e});
        }
    }
    os << "method";
    for (const auto& c : cols) os << ',' << c.preset << "/lr=" << format_lr(c.lr) << "/ep=" << c.epochs;
    os << '\n';
    for (const auto& m : methods_in(rows)) {
        os << m;
        for (const auto& c : cols) {
            auto r = find_row(rows, m, c.preset, c.lr, c.epochs);
            os << ',' << (r ? fmt("%.2f", r->f1) : std::string());
        }
        os << '\n';
    }
    return os.str();
}

std::string render_analysis_csv(const std::vector<GridRow>& rows) {
    if (rows.empty()) throw UsageError("no results to report");
    std::ostringstream os;
    os << "label,value,unit,basis\n";
    for (const auto& line : analyze(rows)) {
        os << line.label << ',' << (line.value ? fmt("%.2f", *line.value) : std::string()) << ',' << line.unit << ','
           << line.basis << '\n';
    }
    return os.str();
}

std::vector<std::filesystem::path> emit_report(const std::vector<GridRow>& rows, const std::string& format,
                                               const std::filesystem::path& out_dir) {
    if (format != "markdown" && format != "csv") {
        throw UsageError("unsupported report format '" + format + "' (expected markdown or csv)");
    }
    if (rows.empty()) throw UsageError("no results to report");
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> written;
    auto write = [&](const std::string& name, const std::string& text) {
        auto path = out_dir / name;
        std::ofstream os(path, std::ios::binary);
        if (!os) throw DataError("cannot write " + path.string());
        os << text;
        written.push_back(path);
    };
    if (format == "markdown") {
        write("report.md", render_markdown(rows));
    } else {
        std::ostringstream csv;
        write_grid_csv(csv, rows);
        write("results.csv", csv.str());
        write("analysis.csv", render_analysis_csv(rows));
    }
    write("heatmap.csv", render_heatmap_csv(rows));
    return written;
}

}  // namespace peftqa
