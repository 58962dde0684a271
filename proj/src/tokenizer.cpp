#include "danube/tokenizer.hpp"

#include <algorithm>
#include <cstdio>
#include <queue>

#include "danube/error.hpp"

namespace danube {

namespace utf8 {

namespace {

enum class Step { ok, invalid, incomplete };

struct StepResult {
    Step status;
    std::size_t len; // bytes consumed (ok) or replaced (invalid)
};

// Decodes one sequence at pos following the maximal-subpart rule.
StepResult step(std::string_view s, std::size_t pos) {
    const auto b0 = static_cast<unsigned char>(s[pos]);
    if (b0 < 0x80) {
        return {Step::ok, 1};
    }
    std::size_t need;
    unsigned char lo = 0x80, hi = 0xbf; // range of the second byte
    if (b0 >= 0xc2 && b0 <= 0xdf) {
        need = 1;
    } else if (b0 >= 0xe0 && b0 <= 0xef) {
        need = 2;
        if (b0 == 0xe0) lo = 0xa0;
        if (b0 == 0xed) hi = 0x9f;
    } else if (b0 >= 0xf0 && b0 <= 0xf4) {
        need = 3;
        if (b0 == 0xf0) lo = 0x90;
        if (b0 == 0xf4) hi = 0x8f;
    } else {
        return {Step::invalid, 1};
    }
    for (std::size_t k = 1; k <= need; ++k) {
        if (pos + k >= s.size()) {
            return {Step::incomplete, k};
        }
        const auto b = static_cast<unsigned char>(s[pos + k]);
        const bool in_range = k == 1 ? (b >= lo && b <= hi) : (b >= 0x80 && b <= 0xbf);
        if (!in_range) {
            return {Step::invalid, k};
        }
    }
    return {Step::ok, need + 1};
}

constexpr std::string_view kReplacement = "\xef\xbf\xbd";

// Appends the repaired form of s[0..) to out; stops before a trailing
// incomplete sequence when hold_tail is set and returns its start.
std::size_t repair_into(std::string_view s, bool hold_tail, std::string & out) {
    std::size_t pos = 0;
    while (pos < s.size()) {
        const auto r = step(s, pos);
        if (r.status == Step::ok) {
            out.append(s.substr(pos, r.len));
            pos += r.len;
        } else if (r.status == Step::incomplete) {
            if (hold_tail) {
                return pos;
            }
            out.append(kReplacement);
            pos += r.len;
        } else {
            out.append(kReplacement);
            pos += r.len;
        }
    }
    return pos;
}

} // namespace

bool valid(std::string_view s) {
    std::size_t pos = 0;
    while (pos < s.size()) {
        const auto r = step(s, pos);
        if (r.status != Step::ok) {
            return false;
        }
        pos += r.len;
    }
    return true;
}

std::string sanitize(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    repair_into(s, false, out);
    return out;
}

std::vector<std::string_view> chars(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (pos < s.size()) {
        const auto r = step(s, pos);
        const std::size_t len = r.status == Step::ok ? r.len : 1;
        out.push_back(s.substr(pos, len));
        pos += len;
    }
    return out;
}

} // namespace utf8

namespace {

constexpr std::string_view kSpaceMarker = "\xe2\x96\x81"; // U+2581

// Parses "<0xHH>"; returns -1 otherwise.
int parse_byte_piece(std::string_view piece) {
    if (piece.size() != 6 || piece.substr(0, 3) != "<0x" || piece[5] != '>') {
        return -1;
    }
    int v = 0;
    for (char c : piece.substr(3, 2)) {
        v <<= 4;
        if (c >= '0' && c <= '9') v |= c - '0';
        else if (c >= 'A' && c <= 'F') v |= c - 'A' + 10;
        else if (c >= 'a' && c <= 'f') v |= c - 'a' + 10;
        else return -1;
    }
    return v;
}

std::string replace_all(std::string_view s, std::string_view from, std::string_view to) {
    std::string out;
    out.reserve(s.size());
    std::size_t pos = 0;
    for (;;) {
        const std::size_t hit = s.find(from, pos);
        if (hit == std::string_view::npos) {
            out.append(s.substr(pos));
            return out;
        }
        out.append(s.substr(pos, hit - pos));
        out.append(to);
        pos = hit + from.size();
    }
}

} // namespace

void Vocabulary::validate(int64_t expected_size) const {
    if (tokens.empty()) {
        fail(ErrorKind::validation, "vocabulary is empty");
    }
    if (scores.size() != tokens.size() || types.size() != tokens.size()) {
        fail(ErrorKind::validation, "vocabulary arrays (tokens, scores, token_type) differ in length");
    }
    if (expected_size >= 0 && static_cast<int64_t>(tokens.size()) != expected_size) {
        fail(ErrorKind::validation, "vocabulary has " + std::to_string(tokens.size()) + " tokens, model expects " +
                                        std::to_string(expected_size));
    }
    const auto n = static_cast<int32_t>(tokens.size());
    for (int32_t id : {bos_id, eos_id}) {
        if (id < 0 || id >= n) {
            fail(ErrorKind::validation, "special token id " + std::to_string(id) + " out of range");
        }
    }
    bool seen[256] = {};
    int n_bytes = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (types[i] != TokenType::byte) {
            continue;
        }
        const int b = parse_byte_piece(tokens[i]);
        if (b < 0 || seen[b]) {
            fail(ErrorKind::validation, "malformed or duplicate byte token '" + tokens[i] + "'");
        }
        seen[b] = true;
        ++n_bytes;
    }
    if (n_bytes != 256) {
        fail(ErrorKind::validation, "vocabulary must contain exactly 256 byte tokens, found " + std::to_string(n_bytes));
    }
}

Tokenizer::Tokenizer(Vocabulary vocab) : vocab_(std::move(vocab)) {
    vocab_.validate();
    std::fill(std::begin(byte_ids_), std::end(byte_ids_), -1);
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
        const auto id = static_cast<int32_t>(i);
        const auto & piece = vocab_.tokens[i];
        all_.emplace(piece, id);
        switch (vocab_.types[i]) {
            case TokenType::normal:
            case TokenType::undefined:
                mergeable_.emplace(piece, id);
                break;
            case TokenType::byte:
                byte_ids_[parse_byte_piece(piece)] = id;
                break;
            case TokenType::control:
            case TokenType::user_defined:
                if (!piece.empty()) {
                    specials_.emplace_back(piece, id);
                }
                break;
            default:
                break;
        }
    }
    std::stable_sort(specials_.begin(), specials_.end(),
                     [](const auto & a, const auto & b) { return a.first.size() > b.first.size(); });
}

std::optional<int32_t> Tokenizer::find(std::string_view piece) const {
    auto it = all_.find(std::string(piece));
    if (it == all_.end()) {
        return std::nullopt;
    }
    return it->second;
}

bool Tokenizer::is_special(int32_t id) const {
    const auto t = vocab_.types.at(static_cast<std::size_t>(id));
    return t == TokenType::control || t == TokenType::user_defined || t == TokenType::unknown;
}

std::vector<int32_t> Tokenizer::encode_plain(std::string_view text, bool prefix_space) const {
    std::vector<int32_t> out;
    if (text.empty()) {
        return out;
    }
    std::string normalized = prefix_space ? " " : "";
    normalized.append(text);
    normalized = replace_all(normalized, " ", kSpaceMarker);

    // Doubly linked list of symbols over the normalized string.
    struct Symbol {
        int prev;
        int next;
        std::size_t start;
        std::size_t len;
    };
    std::vector<Symbol> syms;
    {
        std::size_t pos = 0;
        for (auto ch : utf8::chars(normalized)) {
            const int idx = static_cast<int>(syms.size());
            syms.push_back({idx - 1, idx + 1, pos, ch.size()});
            pos += ch.size();
        }
        syms.back().next = -1;
    }

    struct Bigram {
        int left;
        int right;
        float score;
        std::size_t size;
    };
    auto worse = [](const Bigram & a, const Bigram & b) {
        return a.score < b.score || (a.score == b.score && a.left > b.left);
    };
    std::priority_queue<Bigram, std::vector<Bigram>, decltype(worse)> queue(worse);
    const std::string_view norm(normalized);

    auto try_add = [&](int left, int right) {
        if (left < 0 || right < 0) {
            return;
        }
        const std::size_t size = syms[left].len + syms[right].len;
        const auto it = mergeable_.find(std::string(norm.substr(syms[left].start, size)));
        if (it == mergeable_.end()) {
            return;
        }
        queue.push({left, right, vocab_.scores[static_cast<std::size_t>(it->second)], size});
    };

    for (std::size_t i = 1; i < syms.size(); ++i) {
        try_add(static_cast<int>(i) - 1, static_cast<int>(i));
    }

    while (!queue.empty()) {
        const Bigram bg = queue.top();
        queue.pop();
        auto & left = syms[bg.left];
        auto & right = syms[bg.right];
        // stale: one side already merged into something else
        if (left.len == 0 || right.len == 0 || left.len + right.len != bg.size || left.next != bg.right) {
            continue;
        }
        left.len += right.len;
        right.len = 0;
        left.next = right.next;
        if (right.next >= 0) {
            syms[right.next].prev = bg.left;
        }
        try_add(left.prev, bg.left);
        try_add(bg.left, left.next);
    }

    for (int i = 0; i >= 0; i = syms[i].next) {
        const auto & s = syms[i];
        const std::string piece(norm.substr(s.start, s.len));
        if (auto it = mergeable_.find(piece); it != mergeable_.end()) {
            out.push_back(it->second);
            continue;
        }
        for (unsigned char b : piece) {
            out.push_back(byte_ids_[b] >= 0 ? byte_ids_[b] : vocab_.unk_id);
        }
    }
    return out;
}

std::vector<int32_t> Tokenizer::encode(std::string_view text, bool add_bos) const {
    if (!utf8::valid(text)) {
        fail(ErrorKind::input, "encode: input is not valid UTF-8");
    }
    std::vector<int32_t> out;
    if (add_bos) {
        out.push_back(vocab_.bos_id);
    }
    const auto body = encode_plain(text, vocab_.add_space_prefix);
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

std::vector<int32_t> Tokenizer::encode_with_special(std::string_view text, bool add_bos) const {
    const Fragment f{text, true};
    return encode_fragments(std::span(&f, 1), add_bos);
}

std::vector<int32_t> Tokenizer::encode_fragments(std::span<const Fragment> fragments, bool add_bos) const {
    for (const auto & f : fragments) {
        if (!utf8::valid(f.text)) {
            fail(ErrorKind::input, "encode: input is not valid UTF-8");
        }
    }
    std::vector<int32_t> out;
    if (add_bos) {
        out.push_back(vocab_.bos_id);
    }
    // The space prefix applies to text at the start and right after a special.
    bool after_special = true;
    std::string run;
    auto flush_run = [&] {
        if (!run.empty()) {
            const auto ids = encode_plain(run, vocab_.add_space_prefix && after_special);
            out.insert(out.end(), ids.begin(), ids.end());
            after_special = false;
            run.clear();
        }
    };
    for (const auto & f : fragments) {
        if (!f.allow_special) {
            run.append(f.text);
            continue;
        }
        std::size_t pos = 0;
        std::size_t run_start = 0;
        while (pos < f.text.size()) {
            bool matched = false;
            for (const auto & [piece, id] : specials_) {
                if (f.text.compare(pos, piece.size(), piece) == 0) {
                    run.append(f.text.substr(run_start, pos - run_start));
                    flush_run();
                    out.push_back(id);
                    after_special = true;
                    pos += piece.size();
                    run_start = pos;
                    matched = true;
                    break;
                }
            }
            if (!matched) {
                ++pos;
            }
        }
        run.append(f.text.substr(run_start));
    }
    flush_run();
    return out;
}

std::string Tokenizer::token_bytes(int32_t id, bool render_special) const {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
        fail(ErrorKind::input, "token id " + std::to_string(id) + " out of range");
    }
    const auto & piece = vocab_.tokens[static_cast<std::size_t>(id)];
    switch (vocab_.types[static_cast<std::size_t>(id)]) {
        case TokenType::byte:
            return std::string(1, static_cast<char>(parse_byte_piece(piece)));
        case TokenType::control:
            return render_special ? piece : std::string();
        case TokenType::unknown:
            return " \xe2\x81\x87 "; // " ⁇ ", as SentencePiece renders <unk>
        case TokenType::unused:
            return std::string();
        default:
            return replace_all(piece, kSpaceMarker, " ");
    }
}

std::string Tokenizer::decode(std::span<const int32_t> ids, bool render_special) const {
    std::string raw;
    bool at_start = true;
    for (int32_t id : ids) {
        std::string part = token_bytes(id, render_special);
        if (part.empty()) {
            continue;
        }
        const auto type = vocab_.types[static_cast<std::size_t>(id)];
        if (type == TokenType::control) {
            raw += part;
            continue;
        }
        if (at_start && vocab_.add_space_prefix && type != TokenType::byte && part.front() == ' ') {
            part.erase(0, 1);
        }
        at_start = false;
        raw += part;
    }
    return utf8::sanitize(raw);
}

std::string StreamingDecoder::push(int32_t id) {
    std::string part = tok_->token_bytes(id, render_special_);
    if (part.empty()) {
        return {};
    }
    const auto & v = tok_->vocab();
    const auto type = v.types[static_cast<std::size_t>(id)];
    if (type != TokenType::control) {
        if (at_start_ && v.add_space_prefix && type != TokenType::byte && part.front() == ' ') {
            part.erase(0, 1);
        }
        at_start_ = false;
    }
    pending_ += part;
    std::string out;
    const std::size_t consumed = utf8::repair_into(pending_, true, out);
    pending_.erase(0, consumed);
    return out;
}

std::string StreamingDecoder::flush() {
    std::string out = utf8::sanitize(pending_);
    pending_.clear();
    return out;
}

} // namespace danube
