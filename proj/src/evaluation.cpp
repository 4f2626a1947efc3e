#include "peftqa/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <limits>
#include <unordered_map>

#include <json.hpp>

#include "peftqa/errors.hpp"

namespace peftqa {

namespace {

std::vector<std::string> split_ws(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        std::size_t j = i;
        while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
        if (j > i) out.emplace_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

double f1_single(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
    if (pred.empty() && gold.empty()) return 1.0;
    if (pred.empty() || gold.empty()) return 0.0;
    std::unordered_map<std::string, int> counts;
    for (const auto& t : gold) ++counts[t];
    std::size_t common = 0;
    for (const auto& t : pred) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++common;
        }
    }
    if (common == 0) return 0.0;
    const double precision = static_cast<double>(common) / static_cast<double>(pred.size());
    const double recall = static_cast<double>(common) / static_cast<double>(gold.size());
    return 2.0 * precision * recall / (precision + recall);
}

}  // namespace

const std::vector<std::string>& default_articles() {
    static const std::vector<std::string> articles = {"o", "a", "os", "as", "um", "uma", "uns", "umas"};
    return articles;
}

std::string normalize_answer(std::string_view text, const std::vector<std::string>& articles) {
    std::string cleaned;
    cleaned.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        auto c = static_cast<unsigned char>(text[i]);
        if (c < 128) {
            if (std::ispunct(c)) continue;
            cleaned.push_back(static_cast<char>(std::tolower(c)));
        } else if (c == 0xC3 && i + 1 < text.size()) {
            auto d = static_cast<unsigned char>(text[i + 1]);
            cleaned.push_back(static_cast<char>(c));
            cleaned.push_back(static_cast<char>(d >= 0x80 && d <= 0x9E && d != 0x97 ? d + 0x20 : d));
            ++i;
        } else {
            cleaned.push_back(static_cast<char>(c));
        }
    }
    std::string out;
    for (const auto& tok : split_ws(cleaned)) {
        if (std::find(articles.begin(), articles.end(), tok) != articles.end()) continue;
        if (!out.empty()) out.push_back(' ');
        out += tok;
    }
    return out;
}

double token_f1(std::string_view pred, std::span<const std::string> golds, const std::vector<std::string>& articles) {
    const auto p = split_ws(normalize_answer(pred, articles));
    if (golds.empty()) return p.empty() ? 1.0 : 0.0;
    double best = 0.0;
    for (const auto& g : golds) best = std::max(best, f1_single(p, split_ws(normalize_answer(g, articles))));
    return best;
}

int exact_match(std::string_view pred, std::span<const std::string> golds, const std::vector<std::string>& articles) {
    const auto p = normalize_answer(pred, articles);
    if (golds.empty()) return p.empty() ? 1 : 0;
    for (const auto& g : golds) {
        if (normalize_answer(g, articles) == p) return 1;
    }
    return 0;
}

Prediction decode_span(std::span<const float> start_logits, std::span<const float> end_logits,
                       const EncodedFeature& feature, std::string_view context, std::size_t max_answer_len) {
    const std::size_t n = feature.size();
    if (start_logits.size() != n || end_logits.size() != n) {
        throw DimensionError("decode_span: logits do not match feature length " + std::to_string(n));
    }
    if (max_answer_len == 0) throw ContractError("max_answer_len must be positive");
    float best = -std::numeric_limits<float>::infinity();
    std::size_t bi = 0, bj = 0;
    bool found = false;
    for (std::size_t i = feature.context_begin; i < feature.context_end; ++i) {
        if (!std::isfinite(start_logits[i])) continue;
        const std::size_t last = std::min(feature.context_end, i + max_answer_len);
        for (std::size_t j = i; j < last; ++j) {
            if (!std::isfinite(end_logits[j])) continue;
            const float s = start_logits[i] + end_logits[j];
            if (!found || s > best) {
                best = s;
                bi = i;
                bj = j;
                found = true;
            }
        }
    }
    if (!found) throw DecodeError("no valid answer span in window " + std::to_string(feature.window));
    Prediction p;
    p.example_id = feature.example_id;
    p.window = feature.window;
    p.start = bi;
    p.end = bj;
    p.score = best;
    const std::size_t b = feature.offsets[bi].first, e = feature.offsets[bj].second;
    if (b > context.size() || e > context.size() || b > e) throw DecodeError("answer offsets fall outside the context");
    p.text = std::string(context.substr(b, e - b));
    return p;
}

Prediction decode_windows(const std::vector<EncoderModel::QaLogits>& logits,
                          const std::vector<const EncodedFeature*>& features, std::string_view context,
                          std::size_t max_answer_len) {
    if (logits.size() != features.size() || features.empty()) {
        throw ContractError("decode_windows needs one logit pair per feature");
    }
    std::optional<Prediction> best;
    for (std::size_t w = 0; w < features.size(); ++w) {
        Prediction p;
        try {
            p = decode_span(logits[w].start, logits[w].end, *features[w], context, max_answer_len);
        } catch (const DecodeError&) {
            continue;
        }
        if (!best || p.score > best->score) best = std::move(p);
    }
    if (!best) throw DecodeError("no window of " + features.front()->example_id + " yields a valid span");
    return *best;
}

std::string format_percent(double value) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", value);
    return buf;
}

std::string EvalReport::to_json() const {
    // Values go through the 2-decimal string so the JSON matches printed tables.
    nlohmann::ordered_json j;
    j["f1"] = std::stod(format_percent(f1));
    j["exact_match"] = std::stod(format_percent(exact_match));
    j["config"] = {{"articles", articles}, {"examples", per_example.size()}};
    return j.dump(2);
}

EvalReport evaluate_dataset(const std::map<std::string, std::string>& predictions,
                            const std::vector<QaExample>& examples, const std::vector<std::string>& articles) {
    std::vector<std::string> missing;
    for (const auto& ex : examples) {
        if (!predictions.contains(ex.id)) missing.push_back(ex.id);
    }
    if (!missing.empty()) {
        std::string list;
        for (std::size_t i = 0; i < missing.size() && i < 20; ++i) list += (i ? ", " : "") + missing[i];
        if (missing.size() > 20) list += ", ...";
        throw CoverageError(std::to_string(missing.size()) + " examples lack predictions: " + list);
    }
    EvalReport r;
    r.articles = articles;
    double f1_sum = 0.0, em_sum = 0.0;
    for (const auto& ex : examples) {
        std::vector<std::string> golds;
        for (const auto& a : ex.answers) golds.push_back(a.text);
        const auto& pred = predictions.at(ex.id);
        ExampleScore s{ex.id, token_f1(pred, golds, articles), exact_match(pred, golds, articles)};
        f1_sum += s.f1;
        em_sum += s.em;
        r.per_example.push_back(std::move(s));
    }
    if (!examples.empty()) {
        r.f1 = 100.0 * f1_sum / static_cast<double>(examples.size());
        r.exact_match = 100.0 * em_sum / static_cast<double>(examples.size());
    }
    return r;
}

std::map<std::string, std::string> predict_dataset(const EncoderModel& model, const std::vector<QaExample>& examples,
                                                   const Vocabulary& vocab, std::size_t batch_size,
                                                   std::size_t max_answer_len) {
    if (batch_size == 0) throw ContractError("batch_size must be positive");
    const auto features = encode_examples(examples, vocab, model.config(), false);
    std::vector<EncoderModel::QaLogits> logits;
    logits.reserve(features.size());
    for (std::size_t i = 0; i < features.size(); i += batch_size) {
        std::vector<const EncodedFeature*> batch;
        for (std::size_t j = i; j < std::min(features.size(), i + batch_size); ++j) batch.push_back(&features[j]);
        for (auto& l : model.forward_qa_batch(batch)) logits.push_back(std::move(l));
    }
    std::map<std::string, std::string> out;
    std::size_t f = 0;
    for (const auto& ex : examples) {
        std::vector<const EncodedFeature*> windows;
        std::vector<EncoderModel::QaLogits> wl;
        while (f < features.size() && features[f].example_id == ex.id) {
            windows.push_back(&features[f]);
            wl.push_back(logits[f]);
            ++f;
        }
        // A model with non-finite logits has no valid span; it answers "" and scores 0.
        try {
            out[ex.id] = decode_windows(wl, windows, ex.context, max_answer_len).text;
        } catch (const DecodeError&) {
            out[ex.id] = "";
        }
    }
    return out;
}

std::string predictions_to_json(const std::map<std::string, std::string>& predictions) {
    nlohmann::json j(predictions);
    return j.dump(2);
}

std::map<std::string, std::string> predictions_from_json(std::string_view json_text) {
    try {
        auto j = nlohmann::json::parse(json_text.begin(), json_text.end());
        if (!j.is_object()) throw ParseError("predictions file must be a JSON object");
        return j.get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("predictions: ") + e.what());
    }
}

}  // namespace peftqa
