#include "wsclip/tokenizer.hpp"

#include <algorithm>
#include <cctype>

#include "wsclip/config.hpp"
#include "wsclip/errors.hpp"

namespace wsclip {

namespace {
const char* kDefaultChars = "abcdefghijklmnopqrstuvwxyz0123456789.,-'!?";
}

std::int64_t Vocab::word_id(const std::string& w) const {
    auto it = std::lower_bound(words.begin(), words.end(), w);
    if (it == words.end() || *it != w) return -1;
    return word_base() + (it - words.begin());
}

std::int64_t Vocab::char_id(char c) const {
    auto it = std::find(chars.begin(), chars.end(), c);
    if (it == chars.end()) return -1;
    return char_base() + (it - chars.begin());
}

Vocab Vocab::build(std::vector<std::string> word_list) {
    Vocab v;
    for (auto& w : word_list) {
        std::string lw;
        for (char c : w) lw += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (!lw.empty()) v.words.push_back(lw);
    }
    std::sort(v.words.begin(), v.words.end());
    v.words.erase(std::unique(v.words.begin(), v.words.end()), v.words.end());
    for (const char* c = kDefaultChars; *c; ++c) v.chars.push_back(*c);
    return v;
}

void Vocab::save(const std::string& path) const {
    std::string text = "# wsclip vocab v1: 'w <word>' and 'c <char>' entries in id order\n";
    for (const auto& w : words) text += "w " + w + "\n";
    for (char c : chars) text += std::string("c ") + c + "\n";
    write_text_file(path, text);
}

Vocab Vocab::load(const std::string& path) {
    Vocab v;
    const std::string text = read_text_file(path);
    size_t pos = 0;
    while (pos < text.size()) {
        size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty() || line[0] == '#') continue;
        if (line.size() < 3 || line[1] != ' ')
            throw FormatError("vocab: malformed line '" + line + "'");
        if (line[0] == 'w')
            v.words.push_back(line.substr(2));
        else if (line[0] == 'c')
            v.chars.push_back(line[2]);
        else
            throw FormatError("vocab: unknown entry kind '" + line.substr(0, 1) + "'");
    }
    if (!std::is_sorted(v.words.begin(), v.words.end()))
        throw FormatError("vocab: word list is not sorted");
    return v;
}

namespace {

std::vector<std::int64_t> body_ids(const std::string& text, const Vocab& vocab) {
    std::vector<std::int64_t> body;
    std::string word;
    auto flush_word = [&] {
        if (word.empty()) return;
        const std::int64_t id = vocab.word_id(word);
        if (id >= 0) {
            body.push_back(id);
        } else {
            for (char c : word) {
                const std::int64_t cid = vocab.char_id(c);
                if (cid >= 0) body.push_back(cid);
            }
        }
        word.clear();
    };
    for (char raw : text) {
        const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
        if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
            word += c;
        } else {
            flush_word();
            if (!std::isspace(static_cast<unsigned char>(c))) {
                const std::int64_t cid = vocab.char_id(c);
                if (cid >= 0) body.push_back(cid);
            }
        }
    }
    flush_word();
    return body;
}

}  // namespace

std::int64_t token_count(const std::string& text, const Vocab& vocab) {
    return static_cast<std::int64_t>(body_ids(text, vocab).size()) + 2;
}

std::vector<std::int64_t> tokenize(const std::string& text, const Vocab& vocab,
                                   std::int64_t context_length) {
    if (context_length < 3)
        throw ConfigError("tokenize: context_length must be >= 3, got " +
                          std::to_string(context_length));

    std::vector<std::int64_t> body = body_ids(text, vocab);
    const size_t max_body = static_cast<size_t>(context_length - 2);
    if (body.size() > max_body) body.resize(max_body);
    std::vector<std::int64_t> out;
    out.reserve(static_cast<size_t>(context_length));
    out.push_back(Vocab::kBegin);
    out.insert(out.end(), body.begin(), body.end());
    out.push_back(Vocab::kEnd);
    out.resize(static_cast<size_t>(context_length), Vocab::kPad);
    return out;
}

std::string detokenize(const std::vector<std::int64_t>& ids, const Vocab& vocab) {
    std::string out;
    bool prev_was_char = false;
    bool first = true;
    for (std::int64_t id : ids) {
        if (id == Vocab::kPad || id == Vocab::kBegin) continue;
        if (id == Vocab::kEnd) break;
        if (id < 0 || id >= vocab.size())
            throw ContractError("detokenize: id " + std::to_string(id) + " out of range");
        const bool is_char = vocab.is_char_id(id);
        if (!first && !(prev_was_char && is_char)) out += ' ';
        if (is_char)
            out += vocab.chars[static_cast<size_t>(id - vocab.char_base())];
        else
            out += vocab.words[static_cast<size_t>(id - vocab.word_base())];
        prev_was_char = is_char;
        first = false;
    }
    return out;
}

}  // namespace wsclip
