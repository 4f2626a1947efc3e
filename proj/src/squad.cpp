#include "peftqa/squad.hpp"

#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "peftqa/errors.hpp"

namespace peftqa {

using json = nlohmann::json;

namespace {

bool is_continuation(unsigned char c) { return (c & 0xC0) == 0x80; }

const json& member(const json& obj, const char* key, const std::string& path) {
    if (!obj.is_object()) throw ParseError(path + ": expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) throw ParseError(path + "." + key + ": missing");
    return *it;
}

std::string string_member(const json& obj, const char* key, const std::string& path) {
    const auto& v = member(obj, key, path);
    if (!v.is_string()) throw ParseError(path + "." + key + ": expected a string");
    return v.get<std::string>();
}

const json& array_member(const json& obj, const char* key, const std::string& path) {
    const auto& v = member(obj, key, path);
    if (!v.is_array()) throw ParseError(path + "." + key + ": expected an array");
    return v;
}

}  // namespace

std::size_t utf8_byte_offset(std::string_view text, std::size_t chars) {
    std::size_t seen = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (is_continuation(static_cast<unsigned char>(text[i]))) continue;
        if (seen == chars) return i;
        ++seen;
    }
    return seen == chars ? text.size() : std::string_view::npos;
}

std::size_t utf8_length(std::string_view text) {
    std::size_t n = 0;
    for (char c : text) n += is_continuation(static_cast<unsigned char>(c)) ? 0 : 1;
    return n;
}

void validate_example(const QaExample& ex) {
    if (ex.question.empty()) throw DataError("example " + ex.id + ": empty question");
    for (const auto& a : ex.answers) {
        if (a.byte_start > ex.context.size() || ex.context.compare(a.byte_start, a.text.size(), a.text) != 0) {
            throw DataError("example " + ex.id + ": answer \"" + a.text + "\" not found at offset " +
                            std::to_string(a.answer_start));
        }
        if (utf8_byte_offset(ex.context, a.answer_start) != a.byte_start) {
            throw DataError("example " + ex.id + ": character and byte offsets disagree");
        }
    }
}

std::vector<QaExample> parse_squad_json(std::string_view bytes) {
    json root;
    try {
        root = json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("$: ") + e.what());
    }
    std::vector<QaExample> out;
    const auto& data = array_member(root, "data", "$");
    for (std::size_t ai = 0; ai < data.size(); ++ai) {
        const std::string apath = "$.data[" + std::to_string(ai) + "]";
        const auto& paragraphs = array_member(data[ai], "paragraphs", apath);
        for (std::size_t pi = 0; pi < paragraphs.size(); ++pi) {
            const std::string ppath = apath + ".paragraphs[" + std::to_string(pi) + "]";
            const std::string context = string_member(paragraphs[pi], "context", ppath);
            const auto& qas = array_member(paragraphs[pi], "qas", ppath);
            for (std::size_t qi = 0; qi < qas.size(); ++qi) {
                const std::string qpath = ppath + ".qas[" + std::to_string(qi) + "]";
                QaExample ex;
                ex.id = string_member(qas[qi], "id", qpath);
                ex.question = string_member(qas[qi], "question", qpath);
                ex.context = context;
                const auto& answers = array_member(qas[qi], "answers", qpath);
                for (std::size_t k = 0; k < answers.size(); ++k) {
                    const std::string kpath = qpath + ".answers[" + std::to_string(k) + "]";
                    Answer a;
                    a.text = string_member(answers[k], "text", kpath);
                    const auto& start = member(answers[k], "answer_start", kpath);
                    if (!start.is_number_unsigned() && !(start.is_number_integer() && start.get<long long>() >= 0)) {
                        throw ParseError(kpath + ".answer_start: expected a non-negative integer");
                    }
                    a.answer_start = start.get<std::size_t>();
                    a.byte_start = utf8_byte_offset(context, a.answer_start);
                    if (a.byte_start == std::string_view::npos) {
                        throw DataError("example " + ex.id + ": answer_start " + std::to_string(a.answer_start) +
                                        " is past the end of the context");
                    }
                    ex.answers.push_back(std::move(a));
                }
                validate_example(ex);
                out.push_back(std::move(ex));
            }
        }
    }
    return out;
}

std::vector<QaExample> load_squad_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_squad_json(ss.str());
}

std::string serialize_squad_json(const std::vector<QaExample>& examples) {
    json paragraphs = json::array();
    for (const auto& ex : examples) {
        if (paragraphs.empty() || paragraphs.back()["context"] != ex.context) {
            paragraphs.push_back({{"context", ex.context}, {"qas", json::array()}});
        }
        json answers = json::array();
        for (const auto& a : ex.answers) answers.push_back({{"text", a.text}, {"answer_start", a.answer_start}});
        paragraphs.back()["qas"].push_back({{"id", ex.id}, {"question", ex.question}, {"answers", answers}});
    }
    json root = {{"version", "1.1"}, {"data", json::array({{{"title", "dataset"}, {"paragraphs", paragraphs}}})}};
    return root.dump();
}

void SyntheticSpec::validate() const {
    if (vocab_size < 2 || num_keys < 1) throw ConfigError("synthetic spec needs at least 2 filler words and 1 key");
    if (answer_len < 1) throw ConfigError("synthetic answer length must be positive");
    if (min_context_len < answer_len + 1 || max_context_len < min_context_len) {
        throw ConfigError("synthetic context length range cannot hold the key and its answer");
    }
}

namespace {

std::vector<QaExample> generate_split(const SyntheticSpec& spec, std::size_t count, std::uint64_t stream,
                                      const std::string& prefix) {
    std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ULL + stream);
    std::uniform_int_distribution<std::size_t> len_dist(spec.min_context_len, spec.max_context_len);
    std::uniform_int_distribution<std::size_t> word_dist(0, spec.vocab_size - 1);
    std::uniform_int_distribution<std::size_t> key_dist(0, spec.num_keys - 1);
    std::vector<QaExample> out;
    out.reserve(count);
    for (std::size_t n = 0; n < count; ++n) {
        const std::size_t len = len_dist(rng);
        std::uniform_int_distribution<std::size_t> pos_dist(0, len - spec.answer_len - 1);
        const std::size_t key_pos = pos_dist(rng);
        const std::string key = "k" + std::to_string(key_dist(rng));

        QaExample ex;
        ex.id = prefix + std::to_string(n);
        ex.question = "what follows " + key + " ?";
        std::size_t answer_begin = 0;
        std::size_t answer_end = 0;
        for (std::size_t i = 0; i < len; ++i) {
            if (i > 0) ex.context += ' ';
            if (i == key_pos + 1) answer_begin = ex.context.size();
            ex.context += i == key_pos ? key : "w" + std::to_string(word_dist(rng));
            if (i == key_pos + spec.answer_len) answer_end = ex.context.size();
        }
        Answer a;
        a.text = ex.context.substr(answer_begin, answer_end - answer_begin);
        a.answer_start = answer_begin;  // contexts are ASCII
        a.byte_start = answer_begin;
        ex.answers.push_back(std::move(a));
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace

std::pair<std::vector<QaExample>, std::vector<QaExample>> generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    return {generate_split(spec, spec.num_train, 0, "syn-train-"), generate_split(spec, spec.num_dev, 1, "syn-dev-")};
}

}  // namespace peftqa
