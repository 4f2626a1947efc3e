#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "peftqa/encoder.hpp"
#include "peftqa/squad.hpp"

namespace peftqa {

/// Portuguese articles: o, a, os, as, um, uma, uns, umas.
const std::vector<std::string>& default_articles();

std::string normalize_answer(std::string_view text, const std::vector<std::string>& articles = default_articles());

double token_f1(std::string_view pred, std::span<const std::string> golds,
                const std::vector<std::string>& articles = default_articles());
int exact_match(std::string_view pred, std::span<const std::string> golds,
                const std::vector<std::string>& articles = default_articles());

struct Prediction {
    std::string example_id;
    std::string text;
    std::size_t window = 0;
    std::size_t start = 0;  // token positions within the window
    std::size_t end = 0;
    float score = 0.0f;
};

inline constexpr std::size_t kDefaultMaxAnswerLen = 30;

/// Best (i, j) with i <= j < i + max_answer_len maximising start[i] + end[j].
/// Ties keep the earliest i, then the earliest j. Throws DecodeError when no
/// finite pair exists.
Prediction decode_span(std::span<const float> start_logits, std::span<const float> end_logits,
                       const EncodedFeature& feature, std::string_view context,
                       std::size_t max_answer_len = kDefaultMaxAnswerLen);

/// Highest-scoring span over all windows of one question (earliest window on ties).
Prediction decode_windows(const std::vector<EncoderModel::QaLogits>& logits,
                          const std::vector<const EncodedFeature*>& features, std::string_view context,
                          std::size_t max_answer_len = kDefaultMaxAnswerLen);

struct ExampleScore {
    std::string id;
    double f1 = 0.0;
    int em = 0;
};

struct EvalReport {
    double f1 = 0.0;  // percentages
    double exact_match = 0.0;
    std::vector<std::string> articles;
    std::vector<ExampleScore> per_example;

    /// {"f1": .., "exact_match": .., "config": {...}} with 2-decimal values.
    std::string to_json() const;
};

/// Percentage rounded to two decimals, e.g. "78.01".
std::string format_percent(double value);

/// Throws CoverageError naming every example without a prediction.
EvalReport evaluate_dataset(const std::map<std::string, std::string>& predictions,
                            const std::vector<QaExample>& examples,
                            const std::vector<std::string>& articles = default_articles());

/// Runs the model over every example and decodes one answer each.
std::map<std::string, std::string> predict_dataset(const EncoderModel& model, const std::vector<QaExample>& examples,
                                                   const Vocabulary& vocab, std::size_t batch_size = 32,
                                                   std::size_t max_answer_len = kDefaultMaxAnswerLen);

std::string predictions_to_json(const std::map<std::string, std::string>& predictions);
std::map<std::string, std::string> predictions_from_json(std::string_view json_text);

}  // namespace peftqa
