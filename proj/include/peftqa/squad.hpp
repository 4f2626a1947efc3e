#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace peftqa {

struct Answer {
    std::string text;
    /// Offset in Unicode code points, as in the SQuAD files.
    std::size_t answer_start = 0;
    /// Same offset in UTF-8 bytes of the context.
    std::size_t byte_start = 0;

    bool operator==(const Answer&) const = default;
};

struct QaExample {
    std::string id;
    std::string context;
    std::string question;
    std::vector<Answer> answers;

    bool operator==(const QaExample&) const = default;
};

/// Byte offset of code point `chars` in a UTF-8 string; npos when past the end.
std::size_t utf8_byte_offset(std::string_view text, std::size_t chars);
std::size_t utf8_length(std::string_view text);

/// Throws DataError naming the id when an answer does not match the context.
void validate_example(const QaExample& ex);

/// SQuAD v1 JSON. Schema problems raise ParseError with a JSON path; offset
/// mismatches raise DataError with the example id.
std::vector<QaExample> parse_squad_json(std::string_view bytes);
std::vector<QaExample> load_squad_file(const std::filesystem::path& path);

/// Consecutive examples sharing a context become one paragraph.
std::string serialize_squad_json(const std::vector<QaExample>& examples);

struct SyntheticSpec {
    std::size_t vocab_size = 200;       // filler words w0..w{n-1}
    std::size_t num_keys = 20;          // key words k0..k{n-1}
    std::size_t min_context_len = 10;   // words per context
    std::size_t max_context_len = 20;
    std::size_t answer_len = 2;         // words copied after the key
    std::size_t num_train = 4000;
    std::size_t num_dev = 300;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Each context holds exactly one key word; the question names it and the
/// answer is the `answer_len` words that follow it.
std::pair<std::vector<QaExample>, std::vector<QaExample>> generate_synthetic(const SyntheticSpec& spec);

}  // namespace peftqa
