#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace peftqa {

/// A token with its byte span [begin, end) in the source text.
struct Token {
    std::string text;
    std::size_t begin = 0;
    std::size_t end = 0;
};

/// Lowercases ASCII (and Latin-1 letters in UTF-8), splits on whitespace and
/// emits each ASCII punctuation character as its own token.
std::vector<Token> basic_tokenize(std::string_view text);

/// Word-level vocabulary with the four reserved ids below.
class Vocabulary {
public:
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kUnk = 1;
    static constexpr std::int32_t kCls = 2;
    static constexpr std::int32_t kSep = 3;

    Vocabulary();
    /// Words of every text in first-seen order.
    static Vocabulary build(const std::vector<std::string_view>& texts);
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    std::int32_t id(std::string_view token) const;
    const std::string& token(std::int32_t id) const;
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    void add(const std::string& token);

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> index_;
};

}  // namespace peftqa
