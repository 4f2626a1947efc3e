#include "peftqa/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "peftqa/errors.hpp"

namespace peftqa {

std::string schedule_name(Schedule s) { return s == Schedule::kConstant ? "constant" : "linear-decay"; }

Schedule parse_schedule(std::string_view name) {
    if (name == "constant") return Schedule::kConstant;
    if (name == "linear-decay" || name == "linear") return Schedule::kLinearDecay;
    throw ConfigError("unknown schedule '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
    if (!(max_update_ratio > 0.0)) throw ConfigError("max update ratio must be positive");
}

double learning_rate_at(std::size_t step, std::size_t total_steps, double base_lr, Schedule schedule) {
    if (schedule == Schedule::kConstant || total_steps == 0) return base_lr;
    const double remaining = static_cast<double>(total_steps - std::min(step, total_steps));
    return base_lr * remaining / static_cast<double>(total_steps);
}

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
        if (!p.requires_grad()) throw ContractError("AdamW given a parameter that does not require grad");
        m_.emplace_back(p.numel(), 0.0f);
        v_.emplace_back(p.numel(), 0.0f);
    }
}

std::size_t AdamW::state_bytes() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < m_.size(); ++i) n += (m_[i].size() + v_[i].size()) * sizeof(float);
    return n;
}

void AdamW::step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!params_[i].has_grad()) continue;
        for (float g : params_[i].grad()) {
            if (!std::isfinite(g)) {
                throw NumericError("non-finite gradient in parameter " + std::to_string(i) + " " +
                                   shape_str(params_[i].shape()) + " at step " + std::to_string(t_ + 1));
            }
        }
    }
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    double moved = 0.0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto p = params_[i].data();
        const bool has = params_[i].has_grad();
        auto g = has ? params_[i].grad() : std::span<const float>();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = has ? g[j] : 0.0;
            const double mj = b1 * m[j] + (1.0 - b1) * gj;
            const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
            m[j] = static_cast<float>(mj);
            v[j] = static_cast<float>(vj);
            const double update = (mj / c1) / (std::sqrt(vj / c2) + cfg_.eps) + cfg_.weight_decay * p[j];
            const float next = static_cast<float>(p[j] - lr * update);
            moved += (static_cast<double>(next) - p[j]) * (static_cast<double>(next) - p[j]);
            p[j] = next;
        }
    }
    last_update_norm_ = std::sqrt(moved);
}

double global_grad_norm(std::span<const Tensor> params) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p.has_grad()) continue;
        for (float g : p.grad()) sq += static_cast<double>(g) * g;
    }
    return std::sqrt(sq);
}

double global_param_norm(std::span<const Tensor> params) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (float v : p.data()) sq += static_cast<double>(v) * v;
    }
    return std::sqrt(sq);
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (!(norm > max_norm)) return 1.0;
    const double factor = max_norm / norm;
    for (auto& p : params) {
        if (!p.has_grad()) continue;
        for (float& g : p.mutable_grad()) g = static_cast<float>(g * factor);
    }
    return factor;
}

std::string category_name(MemoryCategory c) {
    switch (c) {
        case MemoryCategory::kFrozen: return "frozen";
        case MemoryCategory::kTrainable: return "trainable";
        case MemoryCategory::kGradients: return "gradients";
        case MemoryCategory::kOptimizer: return "optimizer";
        case MemoryCategory::kActivations: return "activations";
    }
    return "?";
}

void MemoryLedger::allocate(MemoryCategory c, std::size_t bytes) {
    current_[index(c)] += bytes;
    peak_[index(c)] = std::max(peak_[index(c)], current_[index(c)]);
    const std::size_t total = current_total();
    if (total > peak_total_) {
        peak_total_ = total;
        at_peak_ = current_;
    }
}

void MemoryLedger::release(MemoryCategory c, std::size_t bytes) {
    if (bytes > current_[index(c)]) {
        throw StateError("memory accounting bug: releasing " + std::to_string(bytes) + " bytes of " + category_name(c) +
                         " with only " + std::to_string(current_[index(c)]) + " held");
    }
    current_[index(c)] -= bytes;
}

std::size_t MemoryLedger::current_total() const { return std::accumulate(current_.begin(), current_.end(), std::size_t{0}); }

std::string status_name(RunStatus s) { return s == RunStatus::kOk ? "OK" : "COLLAPSED"; }

namespace {

nlohmann::ordered_json breakdown_json(const MemoryLedger& ledger) {
    nlohmann::ordered_json j;
    for (std::size_t c = 0; c < kMemoryCategories; ++c) {
        j[category_name(static_cast<MemoryCategory>(c))] = ledger.peak_breakdown()[c];
    }
    return j;
}

}  // namespace

std::string EpochRecord::to_json_line(const MemoryLedger& ledger) const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["loss"] = loss;
    j["f1"] = f1;
    j["em"] = em;
    j["elapsed_s"] = elapsed_s;
    j["peak_bytes_by_category"] = breakdown_json(ledger);
    return j.dump();
}

std::string RunMetrics::to_json() const {
    nlohmann::ordered_json j;
    j["status"] = status_name(status);
    if (!note.empty()) j["note"] = note;
    j["wall_s"] = wall_s;
    j["steps"] = steps;
    j["peak_bytes"] = memory.peak_total();
    j["peak_bytes_by_category"] = breakdown_json(memory);
    j["f1"] = final_eval.f1;
    j["exact_match"] = final_eval.exact_match;
    j["loss_curve"] = loss_curve;
    return j.dump(2);
}

std::size_t dequant_scratch_bytes(const EncoderModel& model) {
    std::size_t largest = 0;
    for (const auto& [name, p] : model.named_projections()) {
        if (p->quantized()) largest = std::max(largest, p->out_features() * p->in_features() * sizeof(float));
    }
    return largest;
}

RunMetrics train_run(EncoderModel& model, const TrainData& data, const TrainConfig& cfg, std::ostream* metrics_out) {
    cfg.validate();
    if (!data.train || !data.dev || !data.vocab) throw ContractError("train_run needs train, dev and vocabulary");
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - t0).count(); };

    const auto features = encode_examples(*data.train, *data.vocab, model.config(), true);
    if (features.empty()) throw DataError("training set is empty");
    auto params = model.trainable_parameters();
    AdamW opt(params, AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
    Rng rng(cfg.seed);

    RunMetrics metrics;
    auto& ledger = metrics.memory;
    ledger.allocate(MemoryCategory::kFrozen, model.frozen_bytes());
    ledger.allocate(MemoryCategory::kTrainable, model.trainable_bytes());
    const std::size_t scratch = dequant_scratch_bytes(model);

    const std::size_t per_epoch = (features.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = per_epoch * cfg.epochs;
    std::vector<std::size_t> order(features.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    double first_loss = 0.0;
    bool buffers_live = false;

    auto evaluate = [&] {
        auto preds = predict_dataset(model, *data.dev, *data.vocab);
        return evaluate_dataset(preds, *data.dev);
    };

    for (std::size_t epoch = 1; epoch <= cfg.epochs && metrics.status == RunStatus::kOk; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        std::size_t epoch_steps = 0;
        for (std::size_t b = 0; b < per_epoch; ++b) {
            std::vector<const EncodedFeature*> batch;
            for (std::size_t i = b * cfg.batch_size; i < std::min(features.size(), (b + 1) * cfg.batch_size); ++i) {
                batch.push_back(&features[order[i]]);
            }
            for (auto& p : params) p.zero_grad();
            Tensor loss = model.qa_loss(batch, true, rng);
            const double value = loss.item();
            const std::size_t act = activation_bytes(loss) + scratch;
            ledger.allocate(MemoryCategory::kActivations, act);
            if (!buffers_live) {
                // Gradient and moment buffers persist from the first step on.
                ledger.allocate(MemoryCategory::kGradients, model.trainable_bytes());
                ledger.allocate(MemoryCategory::kOptimizer, opt.state_bytes());
                buffers_live = true;
            }
            if (metrics.steps == 0) first_loss = value;
            if (!std::isfinite(value) || value > cfg.divergence_factor * first_loss) {
                metrics.status = RunStatus::kCollapsed;
                metrics.note = "loss " + std::to_string(value) + " at step " + std::to_string(metrics.steps + 1);
                ledger.release(MemoryCategory::kActivations, act);
                break;
            }
            loss.backward();
            ledger.release(MemoryCategory::kActivations, act);
            clip_grad_norm(params, cfg.clip_norm);
            const double weight_norm = global_param_norm(params);
            try {
                opt.step(learning_rate_at(metrics.steps, total_steps, cfg.lr, cfg.schedule));
            } catch (const NumericError& e) {
                metrics.status = RunStatus::kCollapsed;
                metrics.note = e.what();
                break;
            }
            if (opt.last_update_norm() > cfg.max_update_ratio * weight_norm) {
                metrics.status = RunStatus::kCollapsed;
                metrics.note = "update norm " + std::to_string(opt.last_update_norm()) + " exceeds weight norm " +
                               std::to_string(weight_norm) + " at step " + std::to_string(metrics.steps + 1);
                metrics.loss_curve.push_back(value);
                ++metrics.steps;
                break;
            }
            metrics.loss_curve.push_back(value);
            ++metrics.steps;
            epoch_loss += value;
            ++epoch_steps;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
        if (cfg.eval_each_epoch || epoch == cfg.epochs || metrics.status != RunStatus::kOk) {
            metrics.final_eval = evaluate();
            rec.f1 = metrics.final_eval.f1;
            rec.em = metrics.final_eval.exact_match;
        }
        rec.elapsed_s = elapsed();
        if (metrics_out) *metrics_out << rec.to_json_line(ledger) << '\n' << std::flush;
        metrics.epochs.push_back(rec);
    }
    for (auto& p : params) p.zero_grad();
    metrics.wall_s = elapsed();
    return metrics;
}

}  // namespace peftqa
