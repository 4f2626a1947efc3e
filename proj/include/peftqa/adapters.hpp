#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "peftqa/quantization.hpp"
#include "peftqa/tensor.hpp"

namespace peftqa {

/// Low-rank pair added to a frozen weight: delta W = (alpha / rank) * B A.
struct LoraAdapter {
    Tensor A;  // [rank x k]
    Tensor B;  // [d x rank]
    std::size_t rank = 0;
    float alpha = 0.0f;
    float dropout_p = 0.0f;

    float scaling() const { return alpha / static_cast<float>(rank); }
};

/// LoRA pair plus one trainable magnitude per output unit.
struct DoraAdapter {
    LoraAdapter lora;
    Tensor magnitude;  // [d]
};

enum class AdapterKind { kNone, kLora, kDora };

struct ParamCountReport {
    std::size_t trainable = 0;
    std::size_t frozen = 0;

    std::size_t total() const { return trainable + frozen; }
    double trainable_fraction() const {
        return total() == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total());
    }
    ParamCountReport& operator+=(const ParamCountReport& o) {
        trainable += o.trainable;
        frozen += o.frozen;
        return *this;
    }
};

/// A ~ N(0, 1/r), B = 0. Same seed, same A.
LoraAdapter init_adapter(std::size_t d, std::size_t k, std::size_t rank, float alpha, std::uint64_t seed,
                         float dropout_p = 0.0f);

/// Guard added under the square root of every DoRA direction norm.
inline constexpr float kDoraNormEps = 1e-8f;

/// Linear map whose base weight is frozen dense float32 or NF4, optionally
/// carrying a LoRA or DoRA adapter.
class AdaptedLinear {
public:
    AdaptedLinear() = default;
    explicit AdaptedLinear(Tensor weight, Tensor bias = {});
    /// Frozen NF4 base, e.g. restored from a checkpoint.
    explicit AdaptedLinear(std::shared_ptr<const QuantizedTensor> weight, Tensor bias = {});

    std::size_t out_features() const;
    std::size_t in_features() const;

    bool quantized() const { return qweight_ != nullptr; }
    /// Dense base weight; throws StateError when the base is quantized.
    const Tensor& weight() const;
    Tensor& weight();
    const QuantizedTensor& quantized_weight() const;
    std::shared_ptr<const QuantizedTensor> quantized_weight_ptr() const { return qweight_; }
    const Tensor& bias() const { return bias_; }
    Tensor& bias() { return bias_; }

    /// Base weight as dense float32 (dequantized when needed).
    Tensor effective_base() const;

    /// Replaces the dense base with its NF4 encoding. The base becomes frozen.
    void quantize_base(const QuantizationOptions& options = {});

    void attach_lora(std::size_t rank, float alpha, float dropout_p, std::uint64_t seed);
    void attach_dora(std::size_t rank, float alpha, float dropout_p, std::uint64_t seed);
    /// Restores an adapter from saved tensors (checkpoint loading).
    void set_adapter(AdapterKind kind, LoraAdapter lora, Tensor magnitude = {});

    AdapterKind adapter_kind() const { return kind_; }
    const LoraAdapter& lora() const;
    LoraAdapter& lora();
    const Tensor& magnitude() const;
    Tensor& magnitude();

    /// Marks the dense base (and bias) trainable; only valid without an adapter.
    void set_base_trainable(bool trainable);

    /// x is [n x k] (or [k]); returns [n x d] (or [d]).
    Tensor forward(const Tensor& x, bool training, Rng& rng) const;

    /// W0 + (alpha/r) B A. Rejects quantized bases and non-LoRA layers.
    Tensor merged_weight() const;

    /// DoRA effective weight m * V / ||V|| with V = W0 + (alpha/r) B A.
    Tensor dora_effective_weight() const;

    /// Multiply-accumulates per input row in the forward pass.
    std::size_t forward_macs() const;

    std::vector<Tensor> trainable_parameters() const;
    ParamCountReport param_counts() const;
    /// Bytes of frozen storage (dense float32 or quantized codes + scales).
    std::size_t frozen_bytes() const;

private:
    Tensor base_product(const Tensor& x2d, const Tensor& bias = {}) const;
    void require_unadapted() const;

    Tensor weight_;
    std::shared_ptr<const QuantizedTensor> qweight_;
    Tensor bias_;
    std::size_t out_ = 0;
    std::size_t in_ = 0;
    AdapterKind kind_ = AdapterKind::kNone;
    std::optional<LoraAdapter> lora_;
    Tensor magnitude_;
};

/// h = W0 x + (alpha/r) B A dropout(x). Requires a LoRA adapter.
Tensor lora_forward(const AdaptedLinear& layer, const Tensor& x, bool training, Rng& rng);
/// h = m * (V / ||V||) x with V = W0 + (alpha/r) B A. Requires a DoRA adapter.
Tensor dora_forward(const AdaptedLinear& layer, const Tensor& x, bool training, Rng& rng);
Tensor merge_lora(const AdaptedLinear& layer);

ParamCountReport count_trainable(std::span<const AdaptedLinear* const> layers);

}  // namespace peftqa
