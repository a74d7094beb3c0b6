#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace btlab::lm {

class UnknownSymbolError : public std::runtime_error {
public:
    explicit UnknownSymbolError(const std::string& what) : std::runtime_error(what) {}
};

// Character-level vocabulary over the canonical task alphabet plus four
// special tokens. The backtrack marker is a single token even though it
// renders as an eleven-character string.
class Vocab {
public:
    // The fixed vocabulary covering the canonical text format.
    static const Vocab& canonical();

    explicit Vocab(std::vector<std::string> symbols);

    int size() const { return static_cast<int>(symbols_.size()); }

    int pad_id() const { return pad_id_; }
    int bos_id() const { return bos_id_; }
    int eos_id() const { return eos_id_; }
    int backtrack_id() const { return backtrack_id_; }

    const std::vector<std::string>& symbols() const { return symbols_; }

    // Encodes text to ids. Throws UnknownSymbolError on characters outside
    // the alphabet. If `offsets` is given it receives the starting character
    // position of each emitted token.
    std::vector<int> encode(std::string_view text,
                            std::vector<int>* offsets = nullptr) const;

    // Concatenates token strings. PAD/BOS/EOS render as empty; the backtrack
    // token renders as its literal text, so decode(encode(s)) == s.
    std::string decode(const std::vector<int>& ids) const;

private:
    std::vector<std::string> symbols_;
    std::unordered_map<char, int> char_to_id_;
    int pad_id_{-1};
    int bos_id_{-1};
    int eos_id_{-1};
    int backtrack_id_{-1};
};

}  // namespace btlab::lm
