#include "peftqa/tokenizer.hpp"

#include <cctype>

#include "peftqa/errors.hpp"

namespace peftqa {

namespace {

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
bool is_punct(unsigned char c) { return c < 128 && std::ispunct(c); }

// Appends the lowercase form of the UTF-8 character starting at text[i] and
// returns its byte length.
std::size_t append_lower(std::string_view text, std::size_t i, std::string& out) {
    auto c = static_cast<unsigned char>(text[i]);
    if (c < 128) {
        out.push_back(static_cast<char>(std::tolower(c)));
        return 1;
    }
    // U+00C0..U+00DE (except U+00D7) lowercase to +0x20 within the C3 lead byte.
    if (c == 0xC3 && i + 1 < text.size()) {
        auto d = static_cast<unsigned char>(text[i + 1]);
        out.push_back(static_cast<char>(c));
        out.push_back(static_cast<char>(d >= 0x80 && d <= 0x9E && d != 0x97 ? d + 0x20 : d));
        return 2;
    }
    out.push_back(static_cast<char>(c));
    return 1;
}

}  // namespace

std::vector<Token> basic_tokenize(std::string_view text) {
    std::vector<Token> tokens;
    std::size_t i = 0;
    while (i < text.size()) {
        auto c = static_cast<unsigned char>(text[i]);
        if (is_space(c)) {
            ++i;
            continue;
        }
        if (is_punct(c)) {
            tokens.push_back({std::string(1, static_cast<char>(c)), i, i + 1});
            ++i;
            continue;
        }
        Token tok;
        tok.begin = i;
        while (i < text.size()) {
            auto ch = static_cast<unsigned char>(text[i]);
            if (is_space(ch) || is_punct(ch)) break;
            i += append_lower(text, i, tok.text);
        }
        tok.end = i;
        tokens.push_back(std::move(tok));
    }
    return tokens;
}

Vocabulary::Vocabulary() {
    for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]"}) add(s);
}

void Vocabulary::add(const std::string& token) {
    if (index_.contains(token)) return;
    index_.emplace(token, static_cast<std::int32_t>(tokens_.size()));
    tokens_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<std::string_view>& texts) {
    Vocabulary v;
    for (auto text : texts) {
        for (const auto& tok : basic_tokenize(text)) v.add(tok.text);
    }
    return v;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 4 || tokens[0] != "[PAD]" || tokens[1] != "[UNK]" || tokens[2] != "[CLS]" ||
        tokens[3] != "[SEP]") {
        throw DataError("vocabulary must start with [PAD] [UNK] [CLS] [SEP]");
    }
    Vocabulary v;
    for (std::size_t i = 4; i < tokens.size(); ++i) v.add(tokens[i]);
    if (v.size() != tokens.size()) throw DataError("vocabulary contains duplicate tokens");
    return v;
}

std::int32_t Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

}  // namespace peftqa
