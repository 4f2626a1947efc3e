#include "peftqa/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <memory>

#include <json.hpp>

#include "peftqa/binary_io.hpp"
#include "peftqa/errors.hpp"

namespace peftqa {

using json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[4] = {'P', 'F', 'T', 'F'};
constexpr std::uint8_t kTagF32 = 0;
constexpr std::uint8_t kTagNf4 = 1;

json config_json(const ModelConfig& c) {
    return {{"preset", c.preset},         {"layers", c.layers},
            {"d_model", c.d_model},       {"heads", c.heads},
            {"intermediate", c.intermediate}, {"vocab_size", c.vocab_size},
            {"max_seq_len", c.max_seq_len}, {"doc_stride", c.doc_stride},
            {"relative_radius", c.relative_radius}};
}

ModelConfig config_from(const json& j) {
    ModelConfig c;
    try {
        c.preset = j.at("preset").get<std::string>();
        c.layers = j.at("layers").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.heads = j.at("heads").get<std::size_t>();
        c.intermediate = j.at("intermediate").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        c.doc_stride = j.at("doc_stride").get<std::size_t>();
        c.relative_radius = j.at("relative_radius").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

json adapter_json(const AdapterSettings& a) {
    return {{"method", method_name(a.method)},
            {"rank", a.rank},
            {"alpha", a.alpha},
            {"dropout", a.dropout},
            {"block_size", a.quant.block_size},
            {"double_quant", a.quant.double_quant},
            {"dq_block_size", a.quant.dq_block_size}};
}

AdapterSettings adapter_from(const json& j) {
    AdapterSettings a;
    try {
        a.method = parse_method(j.at("method").get<std::string>());
        a.rank = j.at("rank").get<std::size_t>();
        a.alpha = j.at("alpha").get<float>();
        a.dropout = j.at("dropout").get<float>();
        a.quant.block_size = j.at("block_size").get<std::size_t>();
        a.quant.double_quant = j.at("double_quant").get<bool>();
        a.quant.dq_block_size = j.at("dq_block_size").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("adapter config: ") + e.what());
    }
    return a;
}

struct Record {
    Tensor dense;
    std::shared_ptr<const QuantizedTensor> quantized;
};

struct Header {
    ModelConfig cfg;
    AdapterSettings adapters;
    Vocabulary vocab;
    CheckpointKind kind = CheckpointKind::kFull;
};

void write_dense(std::ostream& os, const std::string& name, const Tensor& t) {
    io::write_string(os, name);
    io::write_le<std::uint8_t>(os, kTagF32);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) io::write_le<std::uint64_t>(os, d);
    io::write_le<std::uint64_t>(os, t.numel());
    for (float v : t.data()) io::write_le<float>(os, v);
}

Header read_header(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) throw DataError("not a checkpoint (bad magic)");
    const auto version = io::read_le<std::uint16_t>(is);
    if (version != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    json j;
    try {
        j = json::parse(io::read_string(is));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("checkpoint config: ") + e.what());
    }
    Header h;
    h.cfg = config_from(j.at("model"));
    h.adapters = adapter_from(j.at("adapter"));
    h.vocab = Vocabulary::from_tokens(j.at("vocab").get<std::vector<std::string>>());
    const auto kind = j.at("kind").get<std::string>();
    if (kind != "full" && kind != "adapter") throw DataError("unknown checkpoint kind '" + kind + "'");
    h.kind = kind == "full" ? CheckpointKind::kFull : CheckpointKind::kAdapter;
    if (h.vocab.size() != h.cfg.vocab_size) throw DataError("checkpoint vocabulary does not match model config");
    return h;
}

std::map<std::string, Record> read_records(std::istream& is) {
    std::map<std::string, Record> records;
    const auto count = io::read_le<std::uint32_t>(is);
    for (std::uint32_t r = 0; r < count; ++r) {
        const auto name = io::read_string(is);
        const auto tag = io::read_le<std::uint8_t>(is);
        Record rec;
        if (tag == kTagF32) {
            const auto rank = io::read_le<std::uint32_t>(is);
            if (rank > 8) throw DataError("record " + name + ": rank " + std::to_string(rank) + " too large");
            Shape shape(rank);
            for (auto& d : shape) d = static_cast<std::size_t>(io::read_le<std::uint64_t>(is));
            auto values = io::read_array<float>(is);
            if (values.size() != shape_numel(shape)) throw DataError("record " + name + ": payload size mismatch");
            rec.dense = Tensor::from(shape, std::move(values));
        } else if (tag == kTagNf4) {
            rec.quantized = std::make_shared<const QuantizedTensor>(read_quantized(is));
        } else {
            throw DataError("record " + name + ": unknown dtype tag " + std::to_string(tag));
        }
        if (!records.emplace(name, std::move(rec)).second) throw DataError("duplicate record " + name);
    }
    return records;
}

Tensor take_dense(std::map<std::string, Record>& records, const std::string& name) {
    auto it = records.find(name);
    if (it == records.end()) throw DataError("checkpoint lacks record " + name);
    if (!it->second.dense.defined()) throw DataError("record " + name + " is not float32");
    Tensor t = it->second.dense;
    records.erase(it);
    return t;
}

void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
    if (dst.shape() != src.shape()) {
        throw DimensionError("record " + name + " has shape " + shape_str(src.shape()) + ", model expects " +
                             shape_str(dst.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
}

bool is_adapter_record(const std::string& name) {
    auto ends = [&name](std::string_view suffix) {
        return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    return ends(".lora_A") || ends(".lora_B") || ends(".magnitude") || name.rfind("head.", 0) == 0;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
    try {
        return config_from(json::parse(text));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
}

void save_checkpoint(std::ostream& os, const EncoderModel& model, const Vocabulary& vocab, CheckpointKind kind) {
    if (vocab.size() != model.config().vocab_size) throw ContractError("vocabulary does not match the model");
    if (kind == CheckpointKind::kAdapter && !model.adapted()) {
        throw StateError("adapter checkpoint requested for a model without adapters");
    }
    json header = {{"kind", kind == CheckpointKind::kFull ? "full" : "adapter"},
                   {"model", config_json(model.config())},
                   {"adapter", adapter_json(model.adapter_settings())},
                   {"vocab", vocab.tokens()}};
    os.write(kMagic, 4);
    io::write_le<std::uint16_t>(os, kCheckpointVersion);
    io::write_string(os, header.dump());

    std::vector<std::pair<std::string, Tensor>> dense;
    for (auto& [name, t] : model.named_tensors()) {
        if (kind == CheckpointKind::kFull || is_adapter_record(name)) dense.emplace_back(name, t);
    }
    std::vector<std::pair<std::string, const QuantizedTensor*>> quantized;
    if (kind == CheckpointKind::kFull) {
        for (auto& [name, p] : model.named_projections()) {
            if (p->quantized()) quantized.emplace_back(name + ".weight", &p->quantized_weight());
        }
    }
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(dense.size() + quantized.size()));
    for (auto& [name, t] : dense) write_dense(os, name, t);
    for (auto& [name, q] : quantized) {
        io::write_string(os, name);
        io::write_le<std::uint8_t>(os, kTagNf4);
        write_quantized(os, *q);
    }
    if (!os) throw DataError("failed to write checkpoint");
}

void save_checkpoint(const std::filesystem::path& path, const EncoderModel& model, const Vocabulary& vocab,
                     CheckpointKind kind) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    save_checkpoint(os, model, vocab, kind);
}

LoadedCheckpoint load_checkpoint(std::istream& is) {
    Header h = read_header(is);
    if (h.kind != CheckpointKind::kFull) {
        throw StateError("adapter checkpoint needs a base model; use apply_adapter_checkpoint");
    }
    auto records = read_records(is);
    LoadedCheckpoint out{restore_model_shell(h.cfg), std::move(h.vocab), CheckpointKind::kFull};
    auto& model = out.model;
    const bool dora = h.adapters.method == Method::kDoRA || h.adapters.method == Method::kQDoRA;

    for (auto& [name, proj] : model.named_projections()) {
        Tensor bias = take_dense(records, name + ".bias");
        auto wit = records.find(name + ".weight");
        if (wit == records.end()) throw DataError("checkpoint lacks record " + name + ".weight");
        if (wit->second.quantized) {
            if (wit->second.quantized->shape() != Shape{proj->out_features(), proj->in_features()}) {
                throw DimensionError("record " + name + ".weight has the wrong shape");
            }
            *proj = AdaptedLinear(wit->second.quantized, bias);
        } else {
            copy_into(proj->weight(), wit->second.dense, name + ".weight");
            copy_into(proj->bias(), bias, name + ".bias");
        }
        records.erase(wit);
        if (records.contains(name + ".lora_A")) {
            LoraAdapter lora;
            lora.A = take_dense(records, name + ".lora_A");
            lora.B = take_dense(records, name + ".lora_B");
            lora.rank = lora.A.dim(0);
            lora.alpha = h.adapters.alpha;
            lora.dropout_p = h.adapters.dropout;
            Tensor magnitude = dora ? take_dense(records, name + ".magnitude") : Tensor();
            proj->set_adapter(dora ? AdapterKind::kDora : AdapterKind::kLora, std::move(lora), std::move(magnitude));
        }
    }
    for (auto& [name, t] : model.named_tensors()) {
        auto it = records.find(name);
        if (it == records.end()) continue;  // already consumed above
        Tensor src = take_dense(records, name);
        Tensor dst = t;
        copy_into(dst, src, name);
    }
    if (!records.empty()) throw DataError("checkpoint holds unknown record " + records.begin()->first);
    model.restore_adapter_settings(h.adapters);
    return out;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    return load_checkpoint(is);
}

Vocabulary apply_adapter_checkpoint(std::istream& is, EncoderModel& base) {
    Header h = read_header(is);
    if (h.kind != CheckpointKind::kAdapter) throw StateError("not an adapter checkpoint");
    if (base.adapted()) throw StateError("base model already carries adapters");
    ModelConfig expected = h.cfg;
    expected.preset = base.config().preset;
    if (!(expected == base.config())) throw DimensionError("adapter checkpoint was saved for a different geometry");
    auto records = read_records(is);
    base.attach_adapters(h.adapters, 0);
    for (auto& [name, t] : base.named_tensors()) {
        if (!is_adapter_record(name)) continue;
        Tensor src = take_dense(records, name);
        Tensor dst = t;
        copy_into(dst, src, name);
    }
    if (!records.empty()) throw DataError("adapter checkpoint holds unknown record " + records.begin()->first);
    return std::move(h.vocab);
}

Vocabulary apply_adapter_checkpoint(const std::filesystem::path& path, EncoderModel& base) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    return apply_adapter_checkpoint(is, base);
}

}  // namespace peftqa
