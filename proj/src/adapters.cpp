#include "peftqa/adapters.hpp"

#include <cmath>

#include "peftqa/errors.hpp"
#include "peftqa/ops.hpp"

namespace peftqa {

LoraAdapter init_adapter(std::size_t d, std::size_t k, std::size_t rank, float alpha, std::uint64_t seed,
                         float dropout_p) {
    if (rank == 0 || rank > std::min(d, k)) {
        throw ContractError("adapter rank " + std::to_string(rank) + " invalid for a " + std::to_string(d) + "x" +
                            std::to_string(k) + " weight");
    }
    if (!(alpha > 0.0f)) throw ContractError("adapter alpha must be positive");
    if (dropout_p < 0.0f || dropout_p >= 1.0f) throw ContractError("adapter dropout must lie in [0, 1)");
    Rng rng(seed);
    LoraAdapter a;
    a.A = Tensor::randn({rank, k}, 1.0f / std::sqrt(static_cast<float>(rank)), rng, true);
    a.B = Tensor::zeros({d, rank}, true);
    a.rank = rank;
    a.alpha = alpha;
    a.dropout_p = dropout_p;
    return a;
}

AdaptedLinear::AdaptedLinear(Tensor weight, Tensor bias) : weight_(std::move(weight)), bias_(std::move(bias)) {
    if (!weight_.defined() || weight_.rank() != 2) throw DimensionError("adapted linear weight must be rank 2");
    out_ = weight_.dim(0);
    in_ = weight_.dim(1);
    if (bias_.defined() && bias_.shape() != Shape{out_}) {
        throw DimensionError("bias " + shape_str(bias_.shape()) + " does not match weight " +
                             shape_str(weight_.shape()));
    }
}

AdaptedLinear::AdaptedLinear(std::shared_ptr<const QuantizedTensor> weight, Tensor bias)
    : qweight_(std::move(weight)), bias_(std::move(bias)) {
    if (!qweight_ || qweight_->shape().size() != 2) throw DimensionError("adapted linear weight must be rank 2");
    out_ = qweight_->shape()[0];
    in_ = qweight_->shape()[1];
    if (bias_.defined()) {
        if (bias_.shape() != Shape{out_}) throw DimensionError("bias does not match quantized weight");
        bias_.set_requires_grad(false);
    }
}

std::size_t AdaptedLinear::out_features() const { return out_; }
std::size_t AdaptedLinear::in_features() const { return in_; }

const Tensor& AdaptedLinear::weight() const {
    if (quantized()) throw StateError("base weight is quantized");
    return weight_;
}

Tensor& AdaptedLinear::weight() {
    if (quantized()) throw StateError("base weight is quantized");
    return weight_;
}

const QuantizedTensor& AdaptedLinear::quantized_weight() const {
    if (!quantized()) throw StateError("base weight is not quantized");
    return *qweight_;
}

Tensor AdaptedLinear::effective_base() const { return quantized() ? dequantize(*qweight_) : weight_.detach(); }

void AdaptedLinear::quantize_base(const QuantizationOptions& options) {
    if (quantized()) throw StateError("base weight is already quantized");
    qweight_ = std::make_shared<const QuantizedTensor>(quantize_nf4(weight_, options));
    weight_ = Tensor();
    if (bias_.defined()) bias_.set_requires_grad(false);
}

void AdaptedLinear::require_unadapted() const {
    if (kind_ != AdapterKind::kNone) throw StateError("layer already carries an adapter");
}

void AdaptedLinear::attach_lora(std::size_t rank, float alpha, float dropout_p, std::uint64_t seed) {
    require_unadapted();
    lora_ = init_adapter(out_, in_, rank, alpha, seed, dropout_p);
    kind_ = AdapterKind::kLora;
    if (weight_.defined()) weight_.set_requires_grad(false);
    if (bias_.defined()) bias_.set_requires_grad(false);
}

void AdaptedLinear::attach_dora(std::size_t rank, float alpha, float dropout_p, std::uint64_t seed) {
    require_unadapted();
    NoGradGuard no_grad;
    auto norms = ops::row_l2_norms(effective_base(), kDoraNormEps);
    for (float v : norms.data()) {
        if (v * v <= kDoraNormEps) throw NumericError("DoRA: base weight has an all-zero output row");
    }
    lora_ = init_adapter(out_, in_, rank, alpha, seed, dropout_p);
    magnitude_ = Tensor::from({out_}, std::vector<float>(norms.data().begin(), norms.data().end()), true);
    kind_ = AdapterKind::kDora;
    if (weight_.defined()) weight_.set_requires_grad(false);
    if (bias_.defined()) bias_.set_requires_grad(false);
}

void AdaptedLinear::set_adapter(AdapterKind kind, LoraAdapter lora, Tensor magnitude) {
    require_unadapted();
    if (kind == AdapterKind::kNone) return;
    if (lora.A.shape() != Shape{lora.rank, in_} || lora.B.shape() != Shape{out_, lora.rank}) {
        throw DimensionError("adapter tensors do not match layer " + std::to_string(out_) + "x" +
                             std::to_string(in_));
    }
    if (kind == AdapterKind::kDora && magnitude.shape() != Shape{out_}) {
        throw DimensionError("DoRA magnitude does not match layer outputs");
    }
    lora.A.set_requires_grad(true);
    lora.B.set_requires_grad(true);
    lora_ = std::move(lora);
    if (kind == AdapterKind::kDora) {
        magnitude_ = std::move(magnitude);
        magnitude_.set_requires_grad(true);
    }
    kind_ = kind;
    if (weight_.defined()) weight_.set_requires_grad(false);
    if (bias_.defined()) bias_.set_requires_grad(false);
}

const LoraAdapter& AdaptedLinear::lora() const {
    if (!lora_) throw StateError("layer carries no adapter");
    return *lora_;
}

LoraAdapter& AdaptedLinear::lora() {
    if (!lora_) throw StateError("layer carries no adapter");
    return *lora_;
}

const Tensor& AdaptedLinear::magnitude() const {
    if (kind_ != AdapterKind::kDora) throw StateError("layer carries no DoRA adapter");
    return magnitude_;
}

Tensor& AdaptedLinear::magnitude() {
    if (kind_ != AdapterKind::kDora) throw StateError("layer carries no DoRA adapter");
    return magnitude_;
}

void AdaptedLinear::set_base_trainable(bool trainable) {
    if (trainable && kind_ != AdapterKind::kNone) throw StateError("base stays frozen while an adapter is attached");
    if (trainable && quantized()) throw StateError("a quantized base cannot be trained");
    if (weight_.defined()) weight_.set_requires_grad(trainable);
    if (bias_.defined()) bias_.set_requires_grad(trainable);
}

Tensor AdaptedLinear::base_product(const Tensor& x2d, const Tensor& bias) const {
    return quantized() ? ops::quantized_linear(x2d, qweight_, bias) : ops::linear(x2d, weight_, bias);
}

Tensor AdaptedLinear::forward(const Tensor& x, bool training, Rng& rng) const {
    const bool vector_input = x.rank() == 1;
    Tensor x2d = vector_input ? ops::reshape(x, {1, x.dim(0)}) : x;
    if (x2d.rank() != 2 || x2d.dim(1) != in_) {
        throw DimensionError("input " + shape_str(x.shape()) + " does not match layer input width " +
                             std::to_string(in_));
    }
    Tensor h;
    if (kind_ == AdapterKind::kDora) {
        // The bias sits outside the magnitude rescaling.
        const auto& a = *lora_;
        h = ops::lora_update(base_product(x2d), x2d, a.A, a.B, a.scaling(), a.dropout_p, training, rng);
        Tensor base = quantized() ? dequantize(*qweight_) : weight_;
        Tensor direction = ops::add(base, ops::scale(ops::matmul(a.B, a.A), a.scaling()));
        Tensor norms = ops::row_l2_norms(direction, kDoraNormEps);
        for (float v : norms.data()) {
            if (v * v <= kDoraNormEps) throw NumericError("DoRA: direction has a zero-norm output row");
        }
        h = ops::mul(h, ops::div(magnitude_, norms));
        if (bias_.defined()) h = ops::add(h, bias_);
    } else {
        h = base_product(x2d, bias_);
        if (kind_ == AdapterKind::kLora) {
            const auto& a = *lora_;
            h = ops::lora_update(h, x2d, a.A, a.B, a.scaling(), a.dropout_p, training, rng);
        }
    }
    return vector_input ? ops::reshape(h, {out_}) : h;
}

Tensor AdaptedLinear::merged_weight() const {
    if (kind_ != AdapterKind::kLora) throw StateError("merge requires a LoRA adapter");
    if (quantized()) {
        throw UnsupportedError("cannot merge into a quantized base without requantizing it");
    }
    NoGradGuard no_grad;
    const auto& a = *lora_;
    return ops::add(weight_, ops::scale(ops::matmul(a.B, a.A), a.scaling())).detach();
}

Tensor AdaptedLinear::dora_effective_weight() const {
    if (kind_ != AdapterKind::kDora) throw StateError("layer carries no DoRA adapter");
    NoGradGuard no_grad;
    const auto& a = *lora_;
    Tensor direction = ops::add(effective_base(), ops::scale(ops::matmul(a.B, a.A), a.scaling()));
    Tensor norms = ops::row_l2_norms(direction, kDoraNormEps);
    Tensor factor = ops::div(magnitude_, norms);
    Tensor out = direction.clone();
    auto od = out.data();
    for (std::size_t i = 0; i < out_; ++i) {
        for (std::size_t j = 0; j < in_; ++j) od[i * in_ + j] *= factor.data()[i];
    }
    return out.detach();
}

std::size_t AdaptedLinear::forward_macs() const {
    std::size_t macs = out_ * in_;
    if (kind_ != AdapterKind::kNone) macs += lora_->rank * (in_ + out_);
    return macs;
}

std::vector<Tensor> AdaptedLinear::trainable_parameters() const {
    std::vector<Tensor> params;
    if (weight_.defined() && weight_.requires_grad()) params.push_back(weight_);
    if (bias_.defined() && bias_.requires_grad()) params.push_back(bias_);
    if (lora_) {
        params.push_back(lora_->A);
        params.push_back(lora_->B);
    }
    if (kind_ == AdapterKind::kDora) params.push_back(magnitude_);
    return params;
}

ParamCountReport AdaptedLinear::param_counts() const {
    ParamCountReport r;
    const std::size_t base = out_ * in_;
    const bool base_trainable = weight_.defined() && weight_.requires_grad();
    (base_trainable ? r.trainable : r.frozen) += base;
    if (bias_.defined()) (bias_.requires_grad() ? r.trainable : r.frozen) += out_;
    if (lora_) r.trainable += lora_->A.numel() + lora_->B.numel();
    if (kind_ == AdapterKind::kDora) r.trainable += magnitude_.numel();
    return r;
}

std::size_t AdaptedLinear::frozen_bytes() const {
    std::size_t bytes = 0;
    if (quantized()) {
        bytes += qweight_->storage_bytes();
    } else if (!weight_.requires_grad()) {
        bytes += weight_.numel() * sizeof(float);
    }
    if (bias_.defined() && !bias_.requires_grad()) bytes += bias_.numel() * sizeof(float);
    return bytes;
}

Tensor lora_forward(const AdaptedLinear& layer, const Tensor& x, bool training, Rng& rng) {
    if (layer.adapter_kind() != AdapterKind::kLora) throw StateError("lora_forward requires a LoRA adapter");
    return layer.forward(x, training, rng);
}

Tensor dora_forward(const AdaptedLinear& layer, const Tensor& x, bool training, Rng& rng) {
    if (layer.adapter_kind() != AdapterKind::kDora) throw StateError("dora_forward requires a DoRA adapter");
    return layer.forward(x, training, rng);
}

Tensor merge_lora(const AdaptedLinear& layer) { return layer.merged_weight(); }

ParamCountReport count_trainable(std::span<const AdaptedLinear* const> layers) {
    ParamCountReport total;
    for (const auto* layer : layers) total += layer->param_counts();
    return total;
}

}  // namespace peftqa
