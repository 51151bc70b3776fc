#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace memoir {

enum class TokenRole : uint8_t { prompt, target };

// Byte-level token sequence. Ids are raw byte values; the model reserves
// id 0 as an internal begin-of-sequence marker, which never appears in
// encoded text (inputs are validated as printable-range UTF-8 bytes).
struct TokenSequence {
    std::vector<int> ids;
    TokenRole role = TokenRole::prompt;

    bool empty() const { return ids.empty(); }
    int size() const { return static_cast<int>(ids.size()); }

    bool operator==(const TokenSequence& o) const { return ids == o.ids; }
};

constexpr int kBosToken = 0;

inline TokenSequence encode(const std::string& text, TokenRole role = TokenRole::prompt) {
    TokenSequence t;
    t.role = role;
    t.ids.reserve(text.size());
    for (unsigned char c : text) {
        if (c == 0) throw std::invalid_argument("tokenize: NUL byte in text");
        t.ids.push_back(static_cast<int>(c));
    }
    return t;
}

inline std::string decode(const std::vector<int>& ids) {
    std::string s;
    s.reserve(ids.size());
    for (int id : ids) {
        if (id > 0 && id < 256) s.push_back(static_cast<char>(id));
    }
    return s;
}

inline std::string decode(const TokenSequence& t) { return decode(t.ids); }

inline void validate_tokens(const TokenSequence& t, int vocab_size) {
    if (t.empty()) throw std::invalid_argument("tokens: empty sequence");
    for (int id : t.ids) {
        if (id < 0 || id >= vocab_size) throw std::invalid_argument("tokens: id out of vocab range");
    }
}

}  // namespace memoir
