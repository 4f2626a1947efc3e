#include "peftqa/encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iterator>
#include <limits>

#include "peftqa/errors.hpp"
#include "peftqa/ops.hpp"

namespace peftqa {

namespace {

constexpr float kInitStd = 0.02f;
constexpr std::size_t kNoOffset = std::numeric_limits<std::size_t>::max();

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

// Each head starts focused on one relative offset, cycling through this list
// with a per-layer shift. A random encoder has no local structure for adapters
// to build on; pretrained encoders do, and this stands in for it.
constexpr int kHeadOffsets[] = {-1, -2, 1, 2, 0, -3, 3, -4};
constexpr float kHeadOffsetBias = 6.0f;

Tensor local_offset_prior(std::size_t heads, std::size_t radius, std::size_t layer) {
    const std::size_t width = 2 * radius + 1;
    std::vector<float> bias(heads * width, 0.0f);
    constexpr std::size_t n = std::size(kHeadOffsets);
    for (std::size_t h = 0; h < heads; ++h) {
        const long offset = std::clamp<long>(kHeadOffsets[(h + layer) % n], -static_cast<long>(radius),
                                             static_cast<long>(radius));
        bias[h * width + static_cast<std::size_t>(offset + static_cast<long>(radius))] = kHeadOffsetBias;
    }
    return Tensor::from({heads, width}, std::move(bias), true);
}

AdaptedLinear make_linear(std::size_t out, std::size_t in, Rng& rng) {
    return AdaptedLinear(Tensor::randn({out, in}, kInitStd, rng, true), Tensor::zeros({out}, true));
}

}  // namespace

std::string method_name(Method m) {
    switch (m) {
        case Method::kFullFT: return "FullFT";
        case Method::kLoRA: return "LoRA";
        case Method::kQLoRA: return "QLoRA";
        case Method::kDoRA: return "DoRA";
        case Method::kQDoRA: return "QDoRA";
    }
    throw ContractError("unknown method");
}

Method parse_method(std::string_view name) {
    const std::string n = lower(name);
    for (Method m : {Method::kFullFT, Method::kLoRA, Method::kQLoRA, Method::kDoRA, Method::kQDoRA}) {
        if (lower(method_name(m)) == n) return m;
    }
    if (n == "full" || n == "full-ft" || n == "full_ft" || n == "fullft") return Method::kFullFT;
    throw ConfigError("unknown method '" + std::string(name) + "' (expected FullFT, LoRA, QLoRA, DoRA or QDoRA)");
}

bool is_quantized_method(Method m) { return m == Method::kQLoRA || m == Method::kQDoRA; }

void ModelConfig::validate() const {
    if (layers == 0 || d_model == 0 || heads == 0 || intermediate == 0) {
        throw ConfigError("model geometry must be positive");
    }
    if (d_model % heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " + std::to_string(heads) +
                          " heads");
    }
    if (vocab_size < 4) throw ConfigError("vocabulary must hold at least the four special tokens");
    if (max_seq_len < 4) throw ConfigError("max_seq_len too small");
    if (doc_stride == 0) throw ConfigError("doc_stride must be positive");
    if (relative_radius == 0) throw ConfigError("relative_radius must be positive");
}

ModelConfig ModelConfig::micro_base(std::size_t vocab_size) {
    ModelConfig c;
    c.preset = "micro-base";
    c.layers = 4;
    c.d_model = 128;
    c.heads = 4;
    c.intermediate = 512;
    c.vocab_size = vocab_size;
    return c;
}

ModelConfig ModelConfig::micro_large(std::size_t vocab_size) {
    ModelConfig c;
    c.preset = "micro-large";
    c.layers = 8;
    c.d_model = 192;
    c.heads = 6;
    c.intermediate = 768;
    c.vocab_size = vocab_size;
    return c;
}

ModelConfig ModelConfig::from_preset(std::string_view preset, std::size_t vocab_size) {
    if (preset == "micro-base") return micro_base(vocab_size);
    if (preset == "micro-large") return micro_large(vocab_size);
    throw ConfigError("unknown preset '" + std::string(preset) + "'");
}

std::size_t expected_parameter_count(const ModelConfig& c) {
    const std::size_t d = c.d_model, f = c.intermediate;
    const std::size_t embeddings = c.vocab_size * d + c.max_seq_len * d + 2 * d;
    const std::size_t block =
        4 * (d * d + d) + c.heads * (2 * c.relative_radius + 1) + (f * d + f) + (d * f + d) + 4 * d;
    const std::size_t head = 2 * d + 2;
    return embeddings + c.layers * block + head;
}

std::vector<EncodedFeature> tokenize_and_encode(std::string_view context, std::string_view question,
                                                const Vocabulary& vocab, std::size_t max_len, std::size_t doc_stride,
                                                std::optional<std::pair<std::size_t, std::string_view>> answer) {
    const auto q_tokens = basic_tokenize(question);
    if (q_tokens.empty()) throw DataError("empty question");
    const auto c_tokens = basic_tokenize(context);
    if (c_tokens.empty()) throw DataError("empty context");
    if (doc_stride == 0) throw ConfigError("doc_stride must be positive");
    if (q_tokens.size() + 4 > max_len) {
        throw DataError("question of " + std::to_string(q_tokens.size()) + " tokens leaves no room in " +
                        std::to_string(max_len));
    }
    const std::size_t window = max_len - q_tokens.size() - 3;

    // Gold answer as an inclusive context-token range.
    std::optional<std::pair<std::size_t, std::size_t>> gold;
    if (answer) {
        const std::size_t a_begin = answer->first;
        const std::size_t a_end = a_begin + answer->second.size();
        std::size_t s = c_tokens.size(), e = c_tokens.size();
        for (std::size_t i = 0; i < c_tokens.size(); ++i) {
            if (s == c_tokens.size() && c_tokens[i].end > a_begin) s = i;
            if (c_tokens[i].begin < a_end) e = i;
        }
        if (s < c_tokens.size() && e < c_tokens.size() && s <= e) gold = std::make_pair(s, e);
    }

    std::vector<EncodedFeature> features;
    std::size_t start = 0;
    for (std::size_t w = 0;; ++w) {
        const std::size_t length = std::min(c_tokens.size() - start, window);
        EncodedFeature f;
        f.window = w;
        f.input_ids.push_back(Vocabulary::kCls);
        for (const auto& t : q_tokens) f.input_ids.push_back(vocab.id(t.text));
        f.input_ids.push_back(Vocabulary::kSep);
        f.offsets.assign(f.input_ids.size(), {kNoOffset, kNoOffset});
        f.context_begin = f.input_ids.size();
        for (std::size_t i = start; i < start + length; ++i) {
            f.input_ids.push_back(vocab.id(c_tokens[i].text));
            f.offsets.emplace_back(c_tokens[i].begin, c_tokens[i].end);
        }
        f.context_end = f.input_ids.size();
        f.input_ids.push_back(Vocabulary::kSep);
        f.offsets.emplace_back(kNoOffset, kNoOffset);
        f.attention_mask.assign(f.input_ids.size(), 1);
        if (gold && gold->first >= start && gold->second < start + length) {
            f.gold_start = f.context_begin + gold->first - start;
            f.gold_end = f.context_begin + gold->second - start;
        }
        features.push_back(std::move(f));
        if (start + length >= c_tokens.size()) break;
        start += std::min(length, doc_stride);
    }
    return features;
}

std::vector<EncodedFeature> encode_examples(const std::vector<QaExample>& examples, const Vocabulary& vocab,
                                            const ModelConfig& cfg, bool with_answers) {
    std::vector<EncodedFeature> out;
    for (const auto& ex : examples) {
        std::optional<std::pair<std::size_t, std::string_view>> answer;
        if (with_answers && !ex.answers.empty()) {
            answer = std::make_pair(ex.answers.front().byte_start, std::string_view(ex.answers.front().text));
        }
        for (auto& f : tokenize_and_encode(ex.context, ex.question, vocab, cfg.max_seq_len, cfg.doc_stride, answer)) {
            f.example_id = ex.id;
            out.push_back(std::move(f));
        }
    }
    return out;
}

EncoderModel build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    EncoderModel m;
    m.cfg_ = cfg;
    const std::size_t d = cfg.d_model;
    m.tok_emb_ = Tensor::randn({cfg.vocab_size, d}, kInitStd, rng, true);
    // Sinusoidal table scaled to the token-embedding RMS.
    std::vector<float> pos(cfg.max_seq_len * d);
    const float amp = kInitStd * std::sqrt(2.0f);
    for (std::size_t p = 0; p < cfg.max_seq_len; ++p) {
        for (std::size_t i = 0; i < d; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
            pos[p * d + i] = amp * static_cast<float>(std::sin(static_cast<double>(p) * freq));
            if (i + 1 < d) pos[p * d + i + 1] = amp * static_cast<float>(std::cos(static_cast<double>(p) * freq));
        }
    }
    m.pos_emb_ = Tensor::from({cfg.max_seq_len, d}, std::move(pos), true);
    m.emb_ln_gamma_ = Tensor::full({d}, 1.0f, true);
    m.emb_ln_beta_ = Tensor::zeros({d}, true);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        EncoderModel::Block b;
        b.q = make_linear(d, d, rng);
        b.k = make_linear(d, d, rng);
        b.v = make_linear(d, d, rng);
        b.o = make_linear(d, d, rng);
        b.rel_bias = local_offset_prior(cfg.heads, cfg.relative_radius, l);
        b.ff1 = make_linear(cfg.intermediate, d, rng);
        b.ff2 = make_linear(d, cfg.intermediate, rng);
        b.ln1_gamma = Tensor::full({d}, 1.0f, true);
        b.ln1_beta = Tensor::zeros({d}, true);
        b.ln2_gamma = Tensor::full({d}, 1.0f, true);
        b.ln2_beta = Tensor::zeros({d}, true);
        m.blocks_.push_back(std::move(b));
    }
    m.head_w_ = Tensor::randn({2, d}, kInitStd, rng, true);
    m.head_b_ = Tensor::zeros({2}, true);
    return m;
}

EncoderModel restore_model_shell(const ModelConfig& cfg) {
    cfg.validate();
    EncoderModel m;
    m.cfg_ = cfg;
    const std::size_t d = cfg.d_model;
    auto lin = [](std::size_t out, std::size_t in) {
        return AdaptedLinear(Tensor::zeros({out, in}, true), Tensor::zeros({out}, true));
    };
    m.tok_emb_ = Tensor::zeros({cfg.vocab_size, d}, true);
    m.pos_emb_ = Tensor::zeros({cfg.max_seq_len, d}, true);
    m.emb_ln_gamma_ = Tensor::zeros({d}, true);
    m.emb_ln_beta_ = Tensor::zeros({d}, true);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        EncoderModel::Block b{lin(d, d),
                              lin(d, d),
                              lin(d, d),
                              lin(d, d),
                              Tensor::zeros({cfg.heads, 2 * cfg.relative_radius + 1}, true),
                              lin(cfg.intermediate, d),
                              lin(d, cfg.intermediate),
                              Tensor::zeros({d}, true),
                              Tensor::zeros({d}, true),
                              Tensor::zeros({d}, true),
                              Tensor::zeros({d}, true)};
        m.blocks_.push_back(std::move(b));
    }
    m.head_w_ = Tensor::zeros({2, d}, true);
    m.head_b_ = Tensor::zeros({2}, true);
    return m;
}

void EncoderModel::attach_adapters(const AdapterSettings& settings, std::uint64_t seed) {
    if (adapted_) throw StateError("model already carries adapters");
    if (settings.method == Method::kFullFT) {
        adapters_ = settings;
        return;
    }
    freeze_backbone();
    const bool dora = settings.method == Method::kDoRA || settings.method == Method::kQDoRA;
    std::uint64_t layer_seed = seed;
    for (auto& [name, proj] : named_projections()) {
        if (is_quantized_method(settings.method)) proj->quantize_base(settings.quant);
        if (dora) {
            proj->attach_dora(settings.rank, settings.alpha, settings.dropout, layer_seed++);
        } else {
            proj->attach_lora(settings.rank, settings.alpha, settings.dropout, layer_seed++);
        }
    }
    adapters_ = settings;
    adapted_ = true;
}

void EncoderModel::freeze_backbone() {
    std::vector<Tensor> frozen = {tok_emb_, pos_emb_, emb_ln_gamma_, emb_ln_beta_};
    for (auto& b : blocks_) {
        for (Tensor* t : {&b.rel_bias, &b.ln1_gamma, &b.ln1_beta, &b.ln2_gamma, &b.ln2_beta}) frozen.push_back(*t);
        b.ff1.set_base_trainable(false);
        b.ff2.set_base_trainable(false);
    }
    for (auto& t : frozen) t.set_requires_grad(false);
}

void EncoderModel::restore_adapter_settings(const AdapterSettings& settings) {
    adapters_ = settings;
    adapted_ = settings.method != Method::kFullFT;
    if (adapted_) freeze_backbone();
}

Tensor EncoderModel::forward(const std::vector<const EncodedFeature*>& batch, bool training, Rng& rng) const {
    if (batch.empty()) throw ContractError("empty batch");
    std::vector<std::int32_t> ids, positions;
    std::vector<std::size_t> lengths;
    for (const auto* f : batch) {
        if (f->size() > cfg_.max_seq_len) {
            throw DimensionError("feature of " + std::to_string(f->size()) + " tokens exceeds max_seq_len " +
                                 std::to_string(cfg_.max_seq_len));
        }
        ids.insert(ids.end(), f->input_ids.begin(), f->input_ids.end());
        for (std::size_t p = 0; p < f->size(); ++p) positions.push_back(static_cast<std::int32_t>(p));
        lengths.push_back(f->size());
    }
    Tensor h = ops::add(ops::embedding(ids, tok_emb_), ops::embedding(positions, pos_emb_));
    h = ops::layer_norm(h, emb_ln_gamma_, emb_ln_beta_);
    for (const auto& b : blocks_) {
        Tensor q = b.q.forward(h, training, rng);
        Tensor k = b.k.forward(h, training, rng);
        Tensor v = b.v.forward(h, training, rng);
        Tensor attn = b.o.forward(ops::multi_head_attention(q, k, v, lengths, cfg_.heads, b.rel_bias), training, rng);
        h = ops::layer_norm(ops::add(h, attn), b.ln1_gamma, b.ln1_beta);
        Tensor ff = b.ff2.forward(ops::gelu(b.ff1.forward(h, training, rng)), training, rng);
        h = ops::layer_norm(ops::add(h, ff), b.ln2_gamma, b.ln2_beta);
    }
    return ops::linear(h, head_w_, head_b_);
}

Tensor EncoderModel::qa_loss(const std::vector<const EncodedFeature*>& batch, bool training, Rng& rng) const {
    Tensor logits = forward(batch, training, rng);
    std::vector<std::size_t> lengths, starts, ends;
    for (const auto* f : batch) {
        lengths.push_back(f->size());
        starts.push_back(f->gold_start.value_or(0));
        ends.push_back(f->gold_end.value_or(0));
    }
    Tensor ls = ops::segment_cross_entropy(ops::select_column(logits, 0), lengths, starts);
    Tensor le = ops::segment_cross_entropy(ops::select_column(logits, 1), lengths, ends);
    return ops::scale(ops::add(ls, le), 0.5f);
}

std::vector<EncoderModel::QaLogits> EncoderModel::forward_qa_batch(
    const std::vector<const EncodedFeature*>& batch) const {
    NoGradGuard no_grad;
    Rng unused(0);
    Tensor logits = forward(batch, false, unused);
    auto data = logits.data();
    const float neg_inf = -std::numeric_limits<float>::infinity();
    std::vector<QaLogits> out;
    std::size_t row = 0;
    for (const auto* f : batch) {
        QaLogits q;
        q.start.resize(f->size());
        q.end.resize(f->size());
        for (std::size_t p = 0; p < f->size(); ++p, ++row) {
            q.start[p] = f->in_context(p) ? data[row * 2] : neg_inf;
            q.end[p] = f->in_context(p) ? data[row * 2 + 1] : neg_inf;
        }
        out.push_back(std::move(q));
    }
    return out;
}

EncoderModel::QaLogits EncoderModel::forward_qa(const EncodedFeature& feature) const {
    return forward_qa_batch({&feature}).front();
}

std::vector<std::pair<std::string, const AdaptedLinear*>> EncoderModel::named_projections() const {
    std::vector<std::pair<std::string, const AdaptedLinear*>> out;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        out.emplace_back(p + "q", &blocks_[l].q);
        out.emplace_back(p + "k", &blocks_[l].k);
        out.emplace_back(p + "v", &blocks_[l].v);
        out.emplace_back(p + "o", &blocks_[l].o);
    }
    return out;
}

std::vector<std::pair<std::string, AdaptedLinear*>> EncoderModel::named_projections() {
    std::vector<std::pair<std::string, AdaptedLinear*>> out;
    for (auto& [name, p] : std::as_const(*this).named_projections()) {
        out.emplace_back(name, const_cast<AdaptedLinear*>(p));
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> EncoderModel::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out = {{"embeddings.token", tok_emb_},
                                                       {"embeddings.position", pos_emb_},
                                                       {"embeddings.ln.gamma", emb_ln_gamma_},
                                                       {"embeddings.ln.beta", emb_ln_beta_}};
    auto add_linear = [&out](const std::string& name, const AdaptedLinear& lin) {
        if (!lin.quantized()) out.emplace_back(name + ".weight", lin.weight());
        if (lin.bias().defined()) out.emplace_back(name + ".bias", lin.bias());
        if (lin.adapter_kind() != AdapterKind::kNone) {
            out.emplace_back(name + ".lora_A", lin.lora().A);
            out.emplace_back(name + ".lora_B", lin.lora().B);
        }
        if (lin.adapter_kind() == AdapterKind::kDora) out.emplace_back(name + ".magnitude", lin.magnitude());
    };
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const auto& b = blocks_[l];
        const std::string p = "blocks." + std::to_string(l) + ".";
        add_linear(p + "q", b.q);
        add_linear(p + "k", b.k);
        add_linear(p + "v", b.v);
        add_linear(p + "o", b.o);
        out.emplace_back(p + "attn.rel_bias", b.rel_bias);
        add_linear(p + "ff1", b.ff1);
        add_linear(p + "ff2", b.ff2);
        out.emplace_back(p + "ln1.gamma", b.ln1_gamma);
        out.emplace_back(p + "ln1.beta", b.ln1_beta);
        out.emplace_back(p + "ln2.gamma", b.ln2_gamma);
        out.emplace_back(p + "ln2.beta", b.ln2_beta);
    }
    out.emplace_back("head.weight", head_w_);
    out.emplace_back("head.bias", head_b_);
    return out;
}

std::vector<Tensor> EncoderModel::trainable_parameters() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : named_tensors()) {
        if (t.requires_grad()) out.push_back(t);
    }
    return out;
}

ParamCountReport EncoderModel::param_counts() const {
    ParamCountReport r;
    for (const auto& [name, t] : named_tensors()) (t.requires_grad() ? r.trainable : r.frozen) += t.numel();
    for (const auto& [name, p] : named_projections()) {
        if (p->quantized()) r.frozen += p->out_features() * p->in_features();
    }
    return r;
}

std::size_t EncoderModel::trainable_bytes() const { return param_counts().trainable * sizeof(float); }

std::size_t EncoderModel::frozen_bytes() const {
    std::size_t bytes = 0;
    for (const auto& [name, t] : named_tensors()) {
        if (!t.requires_grad()) bytes += t.numel() * sizeof(float);
    }
    for (const auto& [name, p] : named_projections()) {
        if (p->quantized()) bytes += p->quantized_weight().storage_bytes();
    }
    return bytes;
}

}  // namespace peftqa
