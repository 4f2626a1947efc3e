#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "peftqa/adapters.hpp"
#include "peftqa/squad.hpp"
#include "peftqa/tensor.hpp"
#include "peftqa/tokenizer.hpp"

namespace peftqa {

enum class Method { kFullFT, kLoRA, kQLoRA, kDoRA, kQDoRA };

std::string method_name(Method m);
/// Accepts the canonical names ("FullFT", "LoRA", ...) case-insensitively.
Method parse_method(std::string_view name);
bool is_quantized_method(Method m);

struct ModelConfig {
    std::string preset = "custom";
    std::size_t layers = 4;
    std::size_t d_model = 128;
    std::size_t heads = 4;
    std::size_t intermediate = 512;
    std::size_t vocab_size = 0;
    std::size_t max_seq_len = 384;
    std::size_t doc_stride = 128;
    /// Attention offsets beyond +-R share one learned bias per head.
    std::size_t relative_radius = 8;

    void validate() const;

    static ModelConfig micro_base(std::size_t vocab_size);
    static ModelConfig micro_large(std::size_t vocab_size);
    /// "micro-base" or "micro-large".
    static ModelConfig from_preset(std::string_view preset, std::size_t vocab_size);

    bool operator==(const ModelConfig&) const = default;
};

/// Parameters of a freshly built model for `cfg`, counted in closed form.
std::size_t expected_parameter_count(const ModelConfig& cfg);

struct AdapterSettings {
    Method method = Method::kFullFT;
    std::size_t rank = 16;
    float alpha = 32.0f;
    float dropout = 0.1f;
    QuantizationOptions quant{};

    bool operator==(const AdapterSettings&) const = default;
};

struct EncodedFeature {
    std::string example_id;
    std::size_t window = 0;
    std::vector<std::int32_t> input_ids;
    std::vector<std::uint8_t> attention_mask;
    /// Byte span in the context for context tokens; (npos, npos) elsewhere.
    std::vector<std::pair<std::size_t, std::size_t>> offsets;
    /// Token positions [context_begin, context_end) hold the context window.
    std::size_t context_begin = 0;
    std::size_t context_end = 0;
    /// Gold token positions; absent when the answer is not inside this window
    /// or the feature was built for evaluation.
    std::optional<std::size_t> gold_start;
    std::optional<std::size_t> gold_end;

    std::size_t size() const { return input_ids.size(); }
    bool in_context(std::size_t pos) const { return pos >= context_begin && pos < context_end; }
};

/// [CLS] question [SEP] context-window [SEP], one feature per window. Windows
/// advance by `doc_stride` context tokens. `answer` (byte start, text) marks
/// gold positions when given.
std::vector<EncodedFeature> tokenize_and_encode(std::string_view context, std::string_view question,
                                                const Vocabulary& vocab, std::size_t max_len, std::size_t doc_stride,
                                                std::optional<std::pair<std::size_t, std::string_view>> answer = {});

/// Encodes a dataset. Training features carry the first gold answer.
std::vector<EncodedFeature> encode_examples(const std::vector<QaExample>& examples, const Vocabulary& vocab,
                                            const ModelConfig& cfg, bool with_answers);

/// Token+position embeddings, post-LN transformer blocks with a per-head
/// relative-offset attention bias, linear QA head.
class EncoderModel {
public:
    struct Block {
        AdaptedLinear q, k, v, o;
        Tensor rel_bias;  // [heads x (2R+1)]
        AdaptedLinear ff1, ff2;
        Tensor ln1_gamma, ln1_beta;
        Tensor ln2_gamma, ln2_beta;
    };

    EncoderModel() = default;

    const ModelConfig& config() const { return cfg_; }
    const AdapterSettings& adapter_settings() const { return adapters_; }
    bool adapted() const { return adapted_; }

    /// Wraps every Q/K/V/O projection. Quantized methods convert those bases
    /// to NF4 first. Everything except adapters and the QA head is frozen.
    void attach_adapters(const AdapterSettings& settings, std::uint64_t seed);
    /// Records adapter settings for a model whose projections were restored by
    /// hand, freezing the backbone again for adapter methods.
    void restore_adapter_settings(const AdapterSettings& settings);

    /// Packed logits [sum(len) x 2] for a batch of features.
    Tensor forward(const std::vector<const EncodedFeature*>& batch, bool training, Rng& rng) const;

    /// Mean of start and end cross-entropy over the batch. Features without a
    /// gold span train towards position 0.
    Tensor qa_loss(const std::vector<const EncodedFeature*>& batch, bool training, Rng& rng) const;

    struct QaLogits {
        std::vector<float> start;
        std::vector<float> end;
    };
    /// Eval-mode logits with non-context positions set to -inf.
    QaLogits forward_qa(const EncodedFeature& feature) const;
    std::vector<QaLogits> forward_qa_batch(const std::vector<const EncodedFeature*>& batch) const;

    std::vector<Tensor> trainable_parameters() const;
    /// Every dense tensor with a stable name. Quantized projection bases are
    /// reached through `named_projections`.
    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
    std::vector<std::pair<std::string, const AdaptedLinear*>> named_projections() const;
    std::vector<std::pair<std::string, AdaptedLinear*>> named_projections();

    ParamCountReport param_counts() const;
    std::size_t parameter_count() const { return param_counts().total(); }
    std::size_t trainable_bytes() const;
    std::size_t frozen_bytes() const;

    Tensor& token_embedding() { return tok_emb_; }
    Tensor& position_embedding() { return pos_emb_; }
    std::vector<Block>& blocks() { return blocks_; }
    const std::vector<Block>& blocks() const { return blocks_; }
    Tensor& head_weight() { return head_w_; }
    Tensor& head_bias() { return head_b_; }

private:
    void freeze_backbone();

    friend EncoderModel build_model(const ModelConfig& cfg, std::uint64_t seed);
    friend EncoderModel restore_model_shell(const ModelConfig& cfg);

    ModelConfig cfg_;
    AdapterSettings adapters_;
    bool adapted_ = false;
    Tensor tok_emb_, pos_emb_;
    Tensor emb_ln_gamma_, emb_ln_beta_;
    std::vector<Block> blocks_;
    Tensor head_w_, head_b_;
};

/// Deterministic per seed. Every parameter starts trainable (full fine-tuning).
EncoderModel build_model(const ModelConfig& cfg, std::uint64_t seed);

/// Same geometry with zero-filled parameters; checkpoint loading overwrites them.
EncoderModel restore_model_shell(const ModelConfig& cfg);

}  // namespace peftqa
