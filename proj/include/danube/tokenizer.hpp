#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace danube {

/// SentencePiece token types as stored in tokenizer.ggml.token_type.
enum class TokenType : int32_t {
    undefined = 0,
    normal = 1,
    unknown = 2,
    control = 3,
    user_defined = 4,
    unused = 5,
    byte = 6,
};

struct Vocabulary {
    std::vector<std::string> tokens;
    std::vector<float> scores;
    std::vector<TokenType> types;
    int32_t bos_id = 1;
    int32_t eos_id = 2;
    int32_t unk_id = 0;
    bool add_bos = true;
    bool add_space_prefix = true;

    std::size_t size() const { return tokens.size(); }

    /// Checks array lengths, id ranges, and that exactly 256 byte tokens
    /// <0x00>..<0xFF> exist. expected_size < 0 skips the size check.
    void validate(int64_t expected_size = -1) const;
};

/// SentencePiece-style BPE with byte fallback.
///
/// Encoding: a single leading space is prepended, spaces become U+2581, the
/// text is split into UTF-8 characters, and the adjacent pair whose
/// concatenation is the highest-scoring normal token is merged repeatedly
/// (leftmost on ties). Characters left without a token are emitted as their
/// UTF-8 byte tokens. Control tokens are never produced from text.
class Tokenizer {
public:
    explicit Tokenizer(Vocabulary vocab);

    const Vocabulary & vocab() const { return vocab_; }
    int32_t bos() const { return vocab_.bos_id; }
    int32_t eos() const { return vocab_.eos_id; }
    std::size_t size() const { return vocab_.size(); }

    std::vector<int32_t> encode(std::string_view text, bool add_bos) const;

    /// Like encode, but occurrences of control / user-defined token strings
    /// (e.g. "</s>") become those ids. Used only for template literals.
    std::vector<int32_t> encode_with_special(std::string_view text, bool add_bos) const;

    /// A piece of text to encode; special-token strings are recognised only
    /// in fragments with allow_special. Plain text is merged across fragment
    /// boundaries as if the fragments were one string.
    struct Fragment {
        std::string_view text;
        bool allow_special = false;
    };
    std::vector<int32_t> encode_fragments(std::span<const Fragment> fragments, bool add_bos) const;

    std::string decode(std::span<const int32_t> ids, bool render_special = false) const;

    /// Raw bytes a single token contributes to decoded text (no leading
    /// space stripping, no UTF-8 repair).
    std::string token_bytes(int32_t id, bool render_special = false) const;

    std::optional<int32_t> find(std::string_view piece) const;
    bool is_special(int32_t id) const;

private:
    std::vector<int32_t> encode_plain(std::string_view text, bool prefix_space) const;

    Vocabulary vocab_;
    std::unordered_map<std::string, int32_t> mergeable_; // normal pieces
    std::unordered_map<std::string, int32_t> all_;
    std::vector<std::pair<std::string, int32_t>> specials_; // longest first
    int32_t byte_ids_[256];
};

/// Incremental decoder: push ids one at a time and receive the text that is
/// complete so far. Incomplete UTF-8 sequences are held back until the next
/// token (or flush). The concatenation of all outputs equals
/// Tokenizer::decode of the whole sequence.
class StreamingDecoder {
public:
    explicit StreamingDecoder(const Tokenizer & tok, bool render_special = false)
        : tok_(&tok), render_special_(render_special) {}

    std::string push(int32_t id);
    std::string flush();

private:
    const Tokenizer * tok_;
    bool render_special_;
    bool at_start_ = true;
    std::string pending_;
};

namespace utf8 {

/// True if s is well-formed UTF-8.
bool valid(std::string_view s);

/// Replaces each maximal ill-formed subsequence with U+FFFD.
std::string sanitize(std::string_view s);

/// Splits s into characters (ill-formed bytes become single-byte units).
std::vector<std::string_view> chars(std::string_view s);

} // namespace utf8

} // namespace danube
