#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "peftqa/encoder.hpp"
#include "peftqa/evaluation.hpp"
#include "peftqa/tensor.hpp"

namespace peftqa {

inline constexpr double kStandardLr = 4.25e-5;
inline constexpr double kHighLr = 2e-4;

enum class Schedule { kConstant, kLinearDecay };

std::string schedule_name(Schedule s);
Schedule parse_schedule(std::string_view name);

struct TrainConfig {
    double lr = kHighLr;
    std::size_t epochs = 2;
    std::size_t batch_size = 16;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    Schedule schedule = Schedule::kLinearDecay;
    std::uint64_t seed = 1;
    /// Loss above this multiple of the first step's loss counts as divergence.
    double divergence_factor = 10.0;
    /// So does a step whose update norm exceeds this multiple of the weight norm.
    double max_update_ratio = 1.0;
    bool eval_each_epoch = true;

    void validate() const;
};

/// Learning rate for 0-based `step` out of `total_steps`.
double learning_rate_at(std::size_t step, std::size_t total_steps, double base_lr, Schedule schedule);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam. Holds one pair of moment buffers per
/// parameter it was constructed with.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg = {});

    /// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + lambda * p). Parameters
    /// without a gradient are treated as having a zero gradient. Throws
    /// NumericError on a non-finite gradient before touching any state.
    void step(double lr);

    std::size_t step_count() const { return t_; }
    /// Global L2 norm of the change applied by the last step.
    double last_update_norm() const { return last_update_norm_; }
    std::size_t state_bytes() const;
    std::size_t buffer_count() const { return m_.size() + v_.size(); }
    const std::vector<Tensor>& params() const { return params_; }
    std::span<const float> first_moment(std::size_t i) const { return m_.at(i); }
    std::span<const float> second_moment(std::size_t i) const { return v_.at(i); }

private:
    std::vector<Tensor> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<float>> m_, v_;
    std::size_t t_ = 0;
    double last_update_norm_ = 0.0;
};

double global_grad_norm(std::span<const Tensor> params);
double global_param_norm(std::span<const Tensor> params);
/// Scales all gradients by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the factor applied (1 when untouched).
double clip_grad_norm(std::span<Tensor> params, double max_norm = 1.0);

enum class MemoryCategory { kFrozen, kTrainable, kGradients, kOptimizer, kActivations };
inline constexpr std::size_t kMemoryCategories = 5;
std::string category_name(MemoryCategory c);

/// Byte accounting fed by allocate/release events.
class MemoryLedger {
public:
    void allocate(MemoryCategory c, std::size_t bytes);
    /// Throws StateError when a category would go negative.
    void release(MemoryCategory c, std::size_t bytes);

    std::size_t current(MemoryCategory c) const { return current_[index(c)]; }
    std::size_t current_total() const;
    std::size_t peak_total() const { return peak_total_; }
    /// Per-category split at the moment the total peaked.
    const std::array<std::size_t, kMemoryCategories>& peak_breakdown() const { return at_peak_; }
    /// Per-category high-water marks.
    std::size_t peak(MemoryCategory c) const { return peak_[index(c)]; }

private:
    static std::size_t index(MemoryCategory c) { return static_cast<std::size_t>(c); }

    std::array<std::size_t, kMemoryCategories> current_{};
    std::array<std::size_t, kMemoryCategories> peak_{};
    std::array<std::size_t, kMemoryCategories> at_peak_{};
    std::size_t peak_total_ = 0;
};

enum class RunStatus { kOk, kCollapsed };
std::string status_name(RunStatus s);

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;
    double f1 = 0.0;
    double em = 0.0;
    double elapsed_s = 0.0;

    std::string to_json_line(const MemoryLedger& ledger) const;
};

struct RunMetrics {
    RunStatus status = RunStatus::kOk;
    std::string note;  // reason for a collapse
    double wall_s = 0.0;
    std::size_t steps = 0;
    std::vector<double> loss_curve;  // one entry per optimizer step
    std::vector<EpochRecord> epochs;
    MemoryLedger memory;
    EvalReport final_eval;

    std::string to_json() const;
};

struct TrainData {
    const std::vector<QaExample>* train = nullptr;
    const std::vector<QaExample>* dev = nullptr;
    const Vocabulary* vocab = nullptr;
};

/// Transient dense buffer needed to run a quantized projection (largest
/// dequantized weight of the model), 0 when nothing is quantized.
std::size_t dequant_scratch_bytes(const EncoderModel& model);

/// Shuffled mini-batch training with clipping, AdamW and the LR schedule;
/// dev evaluation after each epoch (and always at the end). A non-finite or
/// diverging loss ends the run as COLLAPSED. Epoch lines go to `metrics_out`
/// when given.
RunMetrics train_run(EncoderModel& model, const TrainData& data, const TrainConfig& cfg,
                     std::ostream* metrics_out = nullptr);

}  // namespace peftqa
