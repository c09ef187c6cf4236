#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace wsclip {

// Word-level vocabulary with single-character fallback. Ids: 0 = pad,
// 1 = begin, 2 = end, then words, then characters.
struct Vocab {
    std::vector<std::string> words;
    std::vector<char> chars;

    static constexpr std::int64_t kPad = 0;
    static constexpr std::int64_t kBegin = 1;
    static constexpr std::int64_t kEnd = 2;

    std::int64_t size() const {
        return 3 + static_cast<std::int64_t>(words.size() + chars.size());
    }
    std::int64_t word_base() const { return 3; }
    std::int64_t char_base() const { return 3 + static_cast<std::int64_t>(words.size()); }
    bool is_char_id(std::int64_t id) const { return id >= char_base() && id < size(); }

    std::int64_t word_id(const std::string& w) const;  // -1 when unknown
    std::int64_t char_id(char c) const;                // -1 when unknown

    // Deduplicates, sorts, and appends the default character set (a-z, 0-9
    // and basic punctuation).
    static Vocab build(std::vector<std::string> word_list);

    void save(const std::string& path) const;
    static Vocab load(const std::string& path);
};

// Lowercases, splits into [a-z0-9]+ runs and single punctuation characters;
// known words map to word ids, unknown words fall back to per-character
// ids. Output is begin + body + end, padded / truncated to context_length
// with the end token always present.
std::vector<std::int64_t> tokenize(const std::string& text, const Vocab& vocab,
                                   std::int64_t context_length);

// Inverse presentation: spaces between tokens except inside character runs.
std::string detokenize(const std::vector<std::int64_t>& ids, const Vocab& vocab);

// Untruncated token count including begin/end; used to detect context
// overflow before tokenize() silently truncates.
std::int64_t token_count(const std::string& text, const Vocab& vocab);

}  // namespace wsclip
