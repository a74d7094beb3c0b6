#include "btlab/vocab.hpp"

#include "btlab/countdown.hpp"

namespace btlab::lm {

namespace {

constexpr std::string_view kPad = "<pad>";
constexpr std::string_view kBos = "<bos>";
constexpr std::string_view kEos = "<eos>";

// Every character the canonical grammar can produce: digits, structural
// punctuation, and the letters of "Target", "Numbers", "Goal" and "left".
constexpr std::string_view kAlphabet = "\n ()*+-/0123456789:=GNT|abefglmorstu";

}  // namespace

const Vocab& Vocab::canonical() {
    static const Vocab instance = [] {
        std::vector<std::string> symbols;
        symbols.emplace_back(kPad);
        symbols.emplace_back(kBos);
        symbols.emplace_back(kEos);
        symbols.emplace_back(countdown::kBacktrackToken);
        for (char c : kAlphabet) {
            symbols.emplace_back(1, c);
        }
        return Vocab(std::move(symbols));
    }();
    return instance;
}

Vocab::Vocab(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
    for (int id = 0; id < static_cast<int>(symbols_.size()); ++id) {
        const std::string& s = symbols_[id];
        if (s == kPad) {
            pad_id_ = id;
        } else if (s == kBos) {
            bos_id_ = id;
        } else if (s == kEos) {
            eos_id_ = id;
        } else if (s == countdown::kBacktrackToken) {
            backtrack_id_ = id;
        } else if (s.size() == 1) {
            char_to_id_.emplace(s[0], id);
        } else {
            throw std::invalid_argument("vocab symbol must be a single char or a special token: " + s);
        }
    }
    if (pad_id_ < 0 || bos_id_ < 0 || eos_id_ < 0 || backtrack_id_ < 0) {
        throw std::invalid_argument("vocab is missing a required special token");
    }
}

std::vector<int> Vocab::encode(std::string_view text, std::vector<int>* offsets) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    if (offsets) {
        offsets->clear();
    }
    std::size_t pos = 0;
    while (pos < text.size()) {
        if (text.compare(pos, countdown::kBacktrackToken.size(), countdown::kBacktrackToken) == 0) {
            ids.push_back(backtrack_id_);
            if (offsets) {
                offsets->push_back(static_cast<int>(pos));
            }
            pos += countdown::kBacktrackToken.size();
            continue;
        }
        auto it = char_to_id_.find(text[pos]);
        if (it == char_to_id_.end()) {
            throw UnknownSymbolError("character not in vocabulary at position " +
                                     std::to_string(pos) + ": '" + std::string(1, text[pos]) + "'");
        }
        ids.push_back(it->second);
        if (offsets) {
            offsets->push_back(static_cast<int>(pos));
        }
        ++pos;
    }
    return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::string text;
    for (int id : ids) {
        if (id < 0 || id >= size()) {
            throw std::out_of_range("token id out of range: " + std::to_string(id));
        }
        if (id == pad_id_ || id == bos_id_ || id == eos_id_) {
            continue;
        }
        text += symbols_[id];
    }
    return text;
}

}  // namespace btlab::lm
