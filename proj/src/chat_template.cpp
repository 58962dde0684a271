#include "danube/chat_template.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <map>
#include <unordered_map>
#include <variant>

#include "danube/error.hpp"

namespace danube {
namespace jinja {

// ---------------------------------------------------------------- values

struct Value;
using List = std::vector<Value>;
using ListPtr = std::shared_ptr<List>;
struct Dict;
using DictPtr = std::shared_ptr<Dict>;

struct Undefined {};
struct NoneT {};

struct Str {
    std::vector<TextSegment> segs;

    std::string flat() const {
        std::string s;
        for (const auto & seg : segs) {
            s += seg.text;
        }
        return s;
    }
    void append(const TextSegment & seg) {
        if (seg.text.empty()) {
            return;
        }
        if (!segs.empty() && segs.back().literal == seg.literal) {
            segs.back().text += seg.text;
        } else {
            segs.push_back(seg);
        }
    }
    void append(const Str & other) {
        for (const auto & seg : other.segs) {
            append(seg);
        }
    }
    bool uniform_literal() const {
        return std::all_of(segs.begin(), segs.end(), [](const TextSegment & s) { return s.literal; });
    }
};

struct Value {
    std::variant<Undefined, NoneT, bool, int64_t, Str, ListPtr, DictPtr> v;

    Value() = default;
    Value(NoneT n) : v(n) {}
    Value(bool b) : v(b) {}
    Value(int64_t i) : v(i) {}
    Value(Str s) : v(std::move(s)) {}
    Value(ListPtr l) : v(std::move(l)) {}
    Value(DictPtr d) : v(std::move(d)) {}

    static Value text(std::string s, bool literal) {
        Str st;
        st.append(TextSegment{std::move(s), literal});
        return Value(std::move(st));
    }

    bool is_undefined() const { return std::holds_alternative<Undefined>(v); }
    bool is_none() const { return std::holds_alternative<NoneT>(v); }
    bool is_bool() const { return std::holds_alternative<bool>(v); }
    bool is_int() const { return std::holds_alternative<int64_t>(v); }
    bool is_str() const { return std::holds_alternative<Str>(v); }
    bool is_list() const { return std::holds_alternative<ListPtr>(v); }
    bool is_dict() const { return std::holds_alternative<DictPtr>(v); }

    const Str & str() const { return std::get<Str>(v); }
    const ListPtr & list() const { return std::get<ListPtr>(v); }
    const DictPtr & dict() const { return std::get<DictPtr>(v); }
};

struct Dict {
    std::vector<std::pair<std::string, Value>> items;

    const Value * find(std::string_view key) const {
        for (const auto & [k, v] : items) {
            if (k == key) {
                return &v;
            }
        }
        return nullptr;
    }
    void set(const std::string & key, Value value) {
        for (auto & [k, v] : items) {
            if (k == key) {
                v = std::move(value);
                return;
            }
        }
        items.emplace_back(key, std::move(value));
    }
};

[[noreturn]] void syntax_error(const std::string & msg) {
    fail(ErrorKind::config, "chat template: " + msg);
}

[[noreturn]] void render_error(const std::string & msg) {
    fail(ErrorKind::config, "chat template render: " + msg);
}

bool truthy(const Value & v) {
    return std::visit(
        [](const auto & x) -> bool {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, Undefined> || std::is_same_v<T, NoneT>) {
                return false;
            } else if constexpr (std::is_same_v<T, bool>) {
                return x;
            } else if constexpr (std::is_same_v<T, int64_t>) {
                return x != 0;
            } else if constexpr (std::is_same_v<T, Str>) {
                return !x.flat().empty();
            } else if constexpr (std::is_same_v<T, ListPtr>) {
                return !x->empty();
            } else {
                return !x->items.empty();
            }
        },
        v.v);
}

std::string repr(const Value & v);

std::string to_plain(const Value & v) {
    return std::visit(
        [&](const auto & x) -> std::string {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, Undefined>) {
                return "";
            } else if constexpr (std::is_same_v<T, NoneT>) {
                return "None";
            } else if constexpr (std::is_same_v<T, bool>) {
                return x ? "True" : "False";
            } else if constexpr (std::is_same_v<T, int64_t>) {
                return std::to_string(x);
            } else if constexpr (std::is_same_v<T, Str>) {
                return x.flat();
            } else {
                return repr(v);
            }
        },
        v.v);
}

std::string repr(const Value & v) {
    if (v.is_str()) {
        return "'" + v.str().flat() + "'";
    }
    if (v.is_list()) {
        std::string s = "[";
        for (std::size_t i = 0; i < v.list()->size(); ++i) {
            s += (i ? ", " : "") + repr((*v.list())[i]);
        }
        return s + "]";
    }
    if (v.is_dict()) {
        std::string s = "{";
        bool first = true;
        for (const auto & [k, x] : v.dict()->items) {
            s += (first ? "'" : ", '") + k + "': " + repr(x);
            first = false;
        }
        return s + "}";
    }
    return to_plain(v);
}

// Rendering keeps segment provenance only for strings; other values print as
// non-literal text.
Str to_str(const Value & v) {
    if (v.is_str()) {
        return v.str();
    }
    Str s;
    s.append(TextSegment{to_plain(v), false});
    return s;
}

bool equal(const Value & a, const Value & b) {
    if (a.is_str() && b.is_str()) {
        return a.str().flat() == b.str().flat();
    }
    if ((a.is_int() || a.is_bool()) && (b.is_int() || b.is_bool())) {
        auto num = [](const Value & x) { return x.is_int() ? std::get<int64_t>(x.v) : int64_t{std::get<bool>(x.v)}; };
        return num(a) == num(b);
    }
    if (a.is_none() && b.is_none()) {
        return true;
    }
    if (a.is_undefined() && b.is_undefined()) {
        return true;
    }
    if (a.is_list() && b.is_list()) {
        const auto & x = *a.list();
        const auto & y = *b.list();
        if (x.size() != y.size()) {
            return false;
        }
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (!equal(x[i], y[i])) {
                return false;
            }
        }
        return true;
    }
    if (a.is_dict() && b.is_dict()) {
        return a.dict() == b.dict();
    }
    return false;
}

int64_t as_int(const Value & v, const char * what) {
    if (v.is_int()) {
        return std::get<int64_t>(v.v);
    }
    if (v.is_bool()) {
        return std::get<bool>(v.v) ? 1 : 0;
    }
    render_error(std::string(what) + " expects an integer");
}

int compare(const Value & a, const Value & b) {
    if (a.is_str() && b.is_str()) {
        const auto x = a.str().flat();
        const auto y = b.str().flat();
        return x < y ? -1 : (x > y ? 1 : 0);
    }
    const int64_t x = as_int(a, "comparison");
    const int64_t y = as_int(b, "comparison");
    return x < y ? -1 : (x > y ? 1 : 0);
}

// ---------------------------------------------------------------- context

struct Context {
    std::vector<std::unordered_map<std::string, Value>> scopes;
    Str out;

    Value lookup(const std::string & name) const {
        for (auto it = scopes.rbegin(); it != scopes.rend(); ++it) {
            if (auto f = it->find(name); f != it->end()) {
                return f->second;
            }
        }
        return {};
    }
    void assign(const std::string & name, Value v) { scopes.back()[name] = std::move(v); }
};

// ---------------------------------------------------------------- expressions

struct Expr {
    virtual ~Expr() = default;
    virtual Value eval(Context & ctx) const = 0;
};
using ExprPtr = std::unique_ptr<Expr>;

struct Literal : Expr {
    Value value;
    explicit Literal(Value v) : value(std::move(v)) {}
    Value eval(Context &) const override { return value; }
};

struct Var : Expr {
    std::string name;
    explicit Var(std::string n) : name(std::move(n)) {}
    Value eval(Context & ctx) const override { return ctx.lookup(name); }
};

Value get_attr(const Value & obj, const std::string & name) {
    if (obj.is_dict()) {
        if (const Value * f = obj.dict()->find(name)) {
            return *f;
        }
    }
    return {};
}

// Strings index by code point, like Python.
std::vector<std::string> code_points(const std::string & s) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < s.size();) {
        std::size_t n = 1;
        while (i + n < s.size() && (static_cast<unsigned char>(s[i + n]) & 0xC0) == 0x80) {
            ++n;
        }
        out.push_back(s.substr(i, n));
        i += n;
    }
    return out;
}

Value get_item(const Value & obj, const Value & key) {
    if (obj.is_dict() && key.is_str()) {
        if (const Value * f = obj.dict()->find(key.str().flat())) {
            return *f;
        }
        return {};
    }
    if (obj.is_list() || obj.is_str()) {
        int64_t i = as_int(key, "subscript");
        if (obj.is_list()) {
            const auto & l = *obj.list();
            if (i < 0) {
                i += static_cast<int64_t>(l.size());
            }
            if (i < 0 || i >= static_cast<int64_t>(l.size())) {
                return {};
            }
            return l[static_cast<std::size_t>(i)];
        }
        const auto cps = code_points(obj.str().flat());
        if (i < 0) {
            i += static_cast<int64_t>(cps.size());
        }
        if (i < 0 || i >= static_cast<int64_t>(cps.size())) {
            return {};
        }
        return Value::text(cps[static_cast<std::size_t>(i)], obj.str().uniform_literal());
    }
    return {};
}

struct Attr : Expr {
    ExprPtr obj;
    std::string name;
    Value eval(Context & ctx) const override { return get_attr(obj->eval(ctx), name); }
};

struct Index : Expr {
    ExprPtr obj, key;
    Value eval(Context & ctx) const override { return get_item(obj->eval(ctx), key->eval(ctx)); }
};

struct Slice : Expr {
    ExprPtr obj, start, stop, step;
    Value eval(Context & ctx) const override {
        const Value o = obj->eval(ctx);
        int64_t n = 0;
        std::vector<std::string> cps;
        if (o.is_list()) {
            n = static_cast<int64_t>(o.list()->size());
        } else if (o.is_str()) {
            cps = code_points(o.str().flat());
            n = static_cast<int64_t>(cps.size());
        } else {
            render_error("slice of a non-sequence");
        }
        const int64_t st = step ? as_int(step->eval(ctx), "slice") : 1;
        if (st == 0) {
            render_error("slice step cannot be zero");
        }
        auto norm = [&](const ExprPtr & e, int64_t dflt) {
            if (!e) {
                return dflt;
            }
            const Value v = e->eval(ctx);
            if (v.is_none()) {
                return dflt;
            }
            int64_t i = as_int(v, "slice");
            if (i < 0) {
                i += n;
            }
            return st > 0 ? std::clamp<int64_t>(i, 0, n) : std::clamp<int64_t>(i, -1, n - 1);
        };
        const int64_t a = norm(start, st > 0 ? 0 : n - 1);
        const int64_t b = norm(stop, st > 0 ? n : -1);
        std::vector<int64_t> idx;
        for (int64_t i = a; st > 0 ? i < b : i > b; i += st) {
            idx.push_back(i);
        }
        if (o.is_list()) {
            auto l = std::make_shared<List>();
            for (auto i : idx) {
                l->push_back((*o.list())[static_cast<std::size_t>(i)]);
            }
            return Value(l);
        }
        std::string r;
        for (auto i : idx) {
            r += cps[static_cast<std::size_t>(i)];
        }
        return Value::text(r, o.str().uniform_literal());
    }
};

struct Unary : Expr {
    std::string op;
    ExprPtr e;
    Value eval(Context & ctx) const override {
        const Value v = e->eval(ctx);
        if (op == "not") {
            return Value(!truthy(v));
        }
        if (op == "-") {
            return Value(-as_int(v, "unary minus"));
        }
        return Value(as_int(v, "unary plus"));
    }
};

Value concat(const Value & a, const Value & b) {
    Str s = to_str(a);
    s.append(to_str(b));
    return Value(std::move(s));
}

bool contains(const Value & hay, const Value & needle) {
    if (hay.is_str()) {
        return hay.str().flat().find(to_plain(needle)) != std::string::npos;
    }
    if (hay.is_list()) {
        return std::any_of(hay.list()->begin(), hay.list()->end(), [&](const Value & x) { return equal(x, needle); });
    }
    if (hay.is_dict()) {
        return needle.is_str() && hay.dict()->find(needle.str().flat()) != nullptr;
    }
    if (hay.is_undefined()) {
        render_error("'in' on an undefined value");
    }
    return false;
}

struct Binary : Expr {
    std::string op;
    ExprPtr l, r;
    Value eval(Context & ctx) const override {
        if (op == "and") {
            Value a = l->eval(ctx);
            return truthy(a) ? r->eval(ctx) : a;
        }
        if (op == "or") {
            Value a = l->eval(ctx);
            return truthy(a) ? a : r->eval(ctx);
        }
        const Value a = l->eval(ctx);
        const Value b = r->eval(ctx);
        if (op == "~") {
            return concat(a, b);
        }
        if (op == "==") {
            return Value(equal(a, b));
        }
        if (op == "!=") {
            return Value(!equal(a, b));
        }
        if (op == "<") {
            return Value(compare(a, b) < 0);
        }
        if (op == "<=") {
            return Value(compare(a, b) <= 0);
        }
        if (op == ">") {
            return Value(compare(a, b) > 0);
        }
        if (op == ">=") {
            return Value(compare(a, b) >= 0);
        }
        if (op == "in") {
            return Value(contains(b, a));
        }
        if (op == "not in") {
            return Value(!contains(b, a));
        }
        if (op == "+") {
            if (a.is_str() && b.is_str()) {
                return concat(a, b);
            }
            if (a.is_list() && b.is_list()) {
                auto out = std::make_shared<List>(*a.list());
                out->insert(out->end(), b.list()->begin(), b.list()->end());
                return Value(out);
            }
            return Value(as_int(a, "+") + as_int(b, "+"));
        }
        if (op == "*" && a.is_str()) {
            Str s;
            for (int64_t i = 0, n = as_int(b, "*"); i < n; ++i) {
                s.append(a.str());
            }
            return Value(std::move(s));
        }
        const int64_t x = as_int(a, op.c_str());
        const int64_t y = as_int(b, op.c_str());
        if (op == "-") {
            return Value(x - y);
        }
        if (op == "*") {
            return Value(x * y);
        }
        if (y == 0) {
            render_error("division by zero");
        }
        // floor semantics like Python
        if (op == "//" || op == "/") {
            int64_t q = x / y;
            if ((x % y != 0) && ((x < 0) != (y < 0))) {
                --q;
            }
            return Value(q);
        }
        int64_t m = x % y;
        if (m != 0 && ((m < 0) != (y < 0))) {
            m += y;
        }
        return Value(m);
    }
};

struct Cond : Expr {
    ExprPtr then, cond, otherwise;
    Value eval(Context & ctx) const override {
        if (truthy(cond->eval(ctx))) {
            return then->eval(ctx);
        }
        return otherwise ? otherwise->eval(ctx) : Value{};
    }
};

struct ListLit : Expr {
    std::vector<ExprPtr> items;
    Value eval(Context & ctx) const override {
        auto l = std::make_shared<List>();
        for (const auto & e : items) {
            l->push_back(e->eval(ctx));
        }
        return Value(l);
    }
};

struct DictLit : Expr {
    std::vector<std::pair<ExprPtr, ExprPtr>> items;
    Value eval(Context & ctx) const override {
        auto d = std::make_shared<Dict>();
        for (const auto & [k, v] : items) {
            d->set(to_plain(k->eval(ctx)), v->eval(ctx));
        }
        return Value(d);
    }
};

struct Args {
    std::vector<ExprPtr> positional;
    std::vector<std::pair<std::string, ExprPtr>> named;
};

struct Evaluated {
    std::vector<Value> pos;
    std::vector<std::pair<std::string, Value>> named;
};

Evaluated eval_args(const Args & a, Context & ctx) {
    Evaluated e;
    for (const auto & x : a.positional) {
        e.pos.push_back(x->eval(ctx));
    }
    for (const auto & [k, x] : a.named) {
        e.named.emplace_back(k, x->eval(ctx));
    }
    return e;
}

Value arg(const Evaluated & a, std::size_t i, std::string_view name, Value dflt = {}) {
    if (i < a.pos.size()) {
        return a.pos[i];
    }
    for (const auto & [k, v] : a.named) {
        if (k == name) {
            return v;
        }
    }
    return dflt;
}

std::string_view kWhitespace = " \t\n\r\f\v";

Str strip_str(const Str & s, const std::string & chars, bool left, bool right) {
    std::string flat = s.flat();
    std::size_t a = 0;
    std::size_t b = flat.size();
    if (left) {
        while (a < b && chars.find(flat[a]) != std::string::npos) {
            ++a;
        }
    }
    if (right) {
        while (b > a && chars.find(flat[b - 1]) != std::string::npos) {
            --b;
        }
    }
    // Cut [a, b) out of the segments, preserving provenance.
    Str out;
    std::size_t pos = 0;
    for (const auto & seg : s.segs) {
        const std::size_t s0 = pos;
        const std::size_t s1 = pos + seg.text.size();
        pos = s1;
        const std::size_t lo = std::max(s0, a);
        const std::size_t hi = std::min(s1, b);
        if (lo < hi) {
            out.append(TextSegment{seg.text.substr(lo - s0, hi - lo), seg.literal});
        }
    }
    return out;
}

// Simple case mapping for ASCII, Latin-1, Latin Extended-A, Greek and
// Cyrillic; other characters pass through.
char32_t case_map(char32_t c, bool upper) {
    auto shift = [&](char32_t lo_first, char32_t lo_last, int32_t delta) -> std::optional<char32_t> {
        if (upper && c >= lo_first && c <= lo_last) {
            return c - delta;
        }
        if (!upper && c >= lo_first - delta && c <= lo_last - delta) {
            return c + delta;
        }
        return std::nullopt;
    };
    if (c < 0x80) {
        return upper ? static_cast<char32_t>(std::toupper(static_cast<int>(c)))
                     : static_cast<char32_t>(std::tolower(static_cast<int>(c)));
    }
    if (c == 0xF7 || c == 0xD7) {
        return c;
    }
    if (auto r = shift(0xE0, 0xFE, 0x20)) {
        return *r;
    }
    if (c >= 0x100 && c <= 0x17F && c != 0x130 && c != 0x131 && c != 0x138 && c != 0x149 && c != 0x17F) {
        // Pairs alternate upper/lower; the parity flips at U+0139 and U+0179.
        const bool odd_upper = (c >= 0x139 && c <= 0x148) || (c >= 0x179 && c <= 0x17E);
        const bool is_upper = odd_upper ? (c % 2 == 1) : (c % 2 == 0);
        if (upper && !is_upper) {
            return c - 1;
        }
        if (!upper && is_upper) {
            return c + 1;
        }
        return c;
    }
    if (c == 0x3C2) {
        return upper ? 0x3A3 : c;
    }
    if (c != 0x3A2) {
        if (auto r = shift(0x3B1, 0x3C9, 0x20)) {
            return *r;
        }
    }
    if (auto r = shift(0x430, 0x44F, 0x20)) {
        return *r;
    }
    if (auto r = shift(0x450, 0x45F, 0x50)) {
        return *r;
    }
    return c;
}

std::string case_map(const std::string & s, bool upper) {
    std::string out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size();) {
        const auto b0 = static_cast<unsigned char>(s[i]);
        const std::size_t n = b0 < 0x80 ? 1 : b0 < 0xE0 ? 2 : b0 < 0xF0 ? 3 : 4;
        if (i + n > s.size() || n == 4) {
            out.append(s, i, std::min(n, s.size() - i));
            i += n;
            continue;
        }
        char32_t c = n == 1 ? b0 : (b0 & (n == 2 ? 0x1F : 0x0F));
        for (std::size_t k = 1; k < n; ++k) {
            c = (c << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
        }
        const char32_t m = case_map(c, upper);
        if (m < 0x80) {
            out += static_cast<char>(m);
        } else if (m < 0x800) {
            out += static_cast<char>(0xC0 | (m >> 6));
            out += static_cast<char>(0x80 | (m & 0x3F));
        } else {
            out += static_cast<char>(0xE0 | (m >> 12));
            out += static_cast<char>(0x80 | ((m >> 6) & 0x3F));
            out += static_cast<char>(0x80 | (m & 0x3F));
        }
        i += n;
    }
    return out;
}

Str map_case(const Str & s, bool upper) {
    Str out;
    for (const auto & seg : s.segs) {
        out.append(TextSegment{case_map(seg.text, upper), seg.literal});
    }
    return out;
}

Value call_method(const Value & obj, const std::string & name, const Evaluated & a) {
    if (obj.is_str()) {
        const Str & s = obj.str();
        const bool lit = s.uniform_literal();
        auto chars_arg = [&] {
            const Value c = arg(a, 0, "chars");
            return c.is_str() ? c.str().flat() : std::string(kWhitespace);
        };
        if (name == "strip") {
            return Value(strip_str(s, chars_arg(), true, true));
        }
        if (name == "lstrip") {
            return Value(strip_str(s, chars_arg(), true, false));
        }
        if (name == "rstrip") {
            return Value(strip_str(s, chars_arg(), false, true));
        }
        if (name == "upper") {
            return Value(map_case(s, true));
        }
        if (name == "lower") {
            return Value(map_case(s, false));
        }
        if (name == "startswith" || name == "endswith") {
            const std::string flat = s.flat();
            const std::string p = to_plain(arg(a, 0, "prefix"));
            const bool ok = p.size() <= flat.size() &&
                            (name == "startswith" ? flat.compare(0, p.size(), p) == 0
                                                  : flat.compare(flat.size() - p.size(), p.size(), p) == 0);
            return Value(ok);
        }
        if (name == "replace") {
            const std::string from = to_plain(arg(a, 0, "old"));
            const std::string to = to_plain(arg(a, 1, "new"));
            std::string flat = s.flat();
            if (from.empty()) {
                return obj;
            }
            std::string r;
            std::size_t pos = 0;
            for (std::size_t f; (f = flat.find(from, pos)) != std::string::npos; pos = f + from.size()) {
                r += flat.substr(pos, f - pos) + to;
            }
            r += flat.substr(pos);
            return Value::text(r, lit);
        }
        if (name == "split") {
            const Value sep = arg(a, 0, "sep");
            const std::string flat = s.flat();
            auto l = std::make_shared<List>();
            if (sep.is_str()) {
                const std::string d = sep.str().flat();
                if (d.empty()) {
                    render_error("split with empty separator");
                }
                std::size_t pos = 0;
                for (std::size_t f; (f = flat.find(d, pos)) != std::string::npos; pos = f + d.size()) {
                    l->push_back(Value::text(flat.substr(pos, f - pos), lit));
                }
                l->push_back(Value::text(flat.substr(pos), lit));
            } else {
                std::size_t i = 0;
                while (i < flat.size()) {
                    while (i < flat.size() && kWhitespace.find(flat[i]) != std::string_view::npos) {
                        ++i;
                    }
                    std::size_t j = i;
                    while (j < flat.size() && kWhitespace.find(flat[j]) == std::string_view::npos) {
                        ++j;
                    }
                    if (j > i) {
                        l->push_back(Value::text(flat.substr(i, j - i), lit));
                    }
                    i = j;
                }
            }
            return Value(l);
        }
    }
    if (obj.is_dict()) {
        const auto & d = *obj.dict();
        if (name == "get") {
            const Value * f = d.find(to_plain(arg(a, 0, "key")));
            return f ? *f : arg(a, 1, "default", Value(NoneT{}));
        }
        if (name == "items" || name == "keys" || name == "values") {
            auto l = std::make_shared<List>();
            for (const auto & [k, v] : d.items) {
                if (name == "keys") {
                    l->push_back(Value::text(k, false));
                } else if (name == "values") {
                    l->push_back(v);
                } else {
                    l->push_back(Value(std::make_shared<List>(List{Value::text(k, false), v})));
                }
            }
            return Value(l);
        }
    }
    render_error("unknown method '" + name + "'");
}

struct RaiseException : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Call : Expr {
    ExprPtr callee;
    Args args;
    Value eval(Context & ctx) const override {
        if (auto * v = dynamic_cast<const Var *>(callee.get())) {
            const Evaluated a = eval_args(args, ctx);
            if (v->name == "raise_exception") {
                fail(ErrorKind::input, "chat template: " + to_plain(arg(a, 0, "message")));
            }
            if (v->name == "namespace") {
                auto d = std::make_shared<Dict>();
                for (const auto & [k, x] : a.named) {
                    d->set(k, x);
                }
                return Value(d);
            }
            if (v->name == "range") {
                int64_t start = 0;
                int64_t stop = 0;
                int64_t step = 1;
                if (a.pos.size() == 1) {
                    stop = as_int(a.pos[0], "range");
                } else if (a.pos.size() >= 2) {
                    start = as_int(a.pos[0], "range");
                    stop = as_int(a.pos[1], "range");
                    if (a.pos.size() == 3) {
                        step = as_int(a.pos[2], "range");
                    }
                }
                if (step == 0) {
                    render_error("range step cannot be zero");
                }
                auto l = std::make_shared<List>();
                for (int64_t i = start; step > 0 ? i < stop : i > stop; i += step) {
                    l->push_back(Value(i));
                }
                return Value(l);
            }
            render_error("unknown function '" + v->name + "'");
        }
        if (auto * at = dynamic_cast<const Attr *>(callee.get())) {
            const Value obj = at->obj->eval(ctx);
            return call_method(obj, at->name, eval_args(args, ctx));
        }
        render_error("unsupported call expression");
    }
};

int64_t length_of(const Value & v) {
    if (v.is_str()) {
        // Characters, not bytes.
        int64_t n = 0;
        for (unsigned char c : v.str().flat()) {
            n += (c & 0xC0) != 0x80;
        }
        return n;
    }
    if (v.is_list()) {
        return static_cast<int64_t>(v.list()->size());
    }
    if (v.is_dict()) {
        return static_cast<int64_t>(v.dict()->items.size());
    }
    render_error("length of a non-sequence");
}

struct Filter : Expr {
    ExprPtr obj;
    std::string name;
    Args args;
    Value eval(Context & ctx) const override {
        const Value v = obj->eval(ctx);
        const Evaluated a = eval_args(args, ctx);
        if (name == "trim") {
            return Value(strip_str(to_str(v), std::string(kWhitespace), true, true));
        }
        if (name == "length" || name == "count") {
            return Value(length_of(v));
        }
        if (name == "upper") {
            return Value(map_case(to_str(v), true));
        }
        if (name == "lower") {
            return Value(map_case(to_str(v), false));
        }
        if (name == "default" || name == "d") {
            const bool boolean = truthy(arg(a, 1, "boolean", Value(false)));
            if (v.is_undefined() || (boolean && !truthy(v))) {
                return arg(a, 0, "default_value", Value::text("", false));
            }
            return v;
        }
        if (name == "string") {
            return Value(to_str(v));
        }
        if (name == "int") {
            if (v.is_str()) {
                try {
                    return Value(static_cast<int64_t>(std::stoll(v.str().flat())));
                } catch (const std::exception &) {
                    return Value(int64_t{0});
                }
            }
            return Value(as_int(v, "int"));
        }
        if (name == "join") {
            if (!v.is_list()) {
                render_error("join of a non-list");
            }
            const Value sep = arg(a, 0, "d", Value::text("", false));
            Str s;
            for (std::size_t i = 0; i < v.list()->size(); ++i) {
                if (i) {
                    s.append(to_str(sep));
                }
                s.append(to_str((*v.list())[i]));
            }
            return Value(std::move(s));
        }
        if (name == "first" || name == "last") {
            if (v.is_list()) {
                if (v.list()->empty()) {
                    return {};
                }
                return name == "first" ? v.list()->front() : v.list()->back();
            }
            if (v.is_str()) {
                return get_item(v, Value(int64_t{name == "first" ? 0 : -1}));
            }
            render_error(name + " of a non-sequence");
        }
        if (name == "list") {
            if (v.is_list()) {
                return v;
            }
            render_error("list of a non-list");
        }
        if (name == "tojson") {
            return Value::text(repr(v), false);
        }
        render_error("unknown filter '" + name + "'");
    }
};

struct Test : Expr {
    ExprPtr obj;
    std::string name;
    bool negate = false;
    Args args;
    Value eval(Context & ctx) const override {
        const Value v = obj->eval(ctx);
        const Evaluated a = eval_args(args, ctx);
        bool r = false;
        if (name == "defined") {
            r = !v.is_undefined();
        } else if (name == "undefined") {
            r = v.is_undefined();
        } else if (name == "none") {
            r = v.is_none();
        } else if (name == "string") {
            r = v.is_str();
        } else if (name == "number" || name == "integer") {
            r = v.is_int();
        } else if (name == "boolean") {
            r = v.is_bool();
        } else if (name == "mapping") {
            r = v.is_dict();
        } else if (name == "sequence" || name == "iterable") {
            r = v.is_list() || v.is_str() || v.is_dict();
        } else if (name == "true") {
            r = v.is_bool() && std::get<bool>(v.v);
        } else if (name == "false") {
            r = v.is_bool() && !std::get<bool>(v.v);
        } else if (name == "even" || name == "odd") {
            const int64_t n = as_int(v, "even/odd");
            r = (n % 2 == 0) == (name == "even");
        } else if (name == "divisibleby") {
            const int64_t d = as_int(arg(a, 0, "num"), "divisibleby");
            r = d != 0 && as_int(v, "divisibleby") % d == 0;
        } else if (name == "eq" || name == "equalto" || name == "sameas") {
            r = equal(v, arg(a, 0, "other"));
        } else if (name == "in") {
            r = contains(arg(a, 0, "seq"), v);
        } else {
            render_error("unknown test '" + name + "'");
        }
        return Value(r != negate);
    }
};

// ---------------------------------------------------------------- statements

struct Node {
    virtual ~Node() = default;
    virtual void render(Context & ctx) const = 0;
};

using NodePtr = std::unique_ptr<Node>;
using Body = std::vector<NodePtr>;

void render_body(const Body & body, Context & ctx) {
    for (const auto & n : body) {
        n->render(ctx);
    }
}

struct TextNode : Node {
    std::string text;
    void render(Context & ctx) const override { ctx.out.append(TextSegment{text, true}); }
};

struct OutputNode : Node {
    ExprPtr e;
    void render(Context & ctx) const override { ctx.out.append(to_str(e->eval(ctx))); }
};

struct IfNode : Node {
    std::vector<std::pair<ExprPtr, Body>> branches;
    Body otherwise;
    void render(Context & ctx) const override {
        for (const auto & [cond, body] : branches) {
            if (truthy(cond->eval(ctx))) {
                render_body(body, ctx);
                return;
            }
        }
        render_body(otherwise, ctx);
    }
};

struct ForNode : Node {
    std::vector<std::string> vars;
    ExprPtr iterable;
    ExprPtr filter;
    Body body;
    Body otherwise;

    void render(Context & ctx) const override {
        const Value seq = iterable->eval(ctx);
        List items;
        if (seq.is_list()) {
            items = *seq.list();
        } else if (seq.is_dict()) {
            for (const auto & [k, v] : seq.dict()->items) {
                items.push_back(Value::text(k, false));
            }
        } else if (seq.is_str()) {
            for (auto & cp : code_points(seq.str().flat())) {
                items.push_back(Value::text(std::move(cp), seq.str().uniform_literal()));
            }
        } else if (!seq.is_undefined() && !seq.is_none()) {
            render_error("for over a non-iterable value");
        } else if (seq.is_none()) {
            render_error("for over None");
        }

        // Scope for loop variables; sets inside a for body do not leak out.
        ctx.scopes.emplace_back();
        if (filter) {
            List kept;
            for (const auto & it : items) {
                bind(ctx, it);
                if (truthy(filter->eval(ctx))) {
                    kept.push_back(it);
                }
            }
            items = std::move(kept);
        }
        const auto n = static_cast<int64_t>(items.size());
        for (int64_t i = 0; i < n; ++i) {
            auto loop = std::make_shared<Dict>();
            loop->set("index", Value(i + 1));
            loop->set("index0", Value(i));
            loop->set("revindex", Value(n - i));
            loop->set("revindex0", Value(n - i - 1));
            loop->set("first", Value(i == 0));
            loop->set("last", Value(i == n - 1));
            loop->set("length", Value(n));
            loop->set("previtem", i > 0 ? items[static_cast<std::size_t>(i - 1)] : Value{});
            loop->set("nextitem", i + 1 < n ? items[static_cast<std::size_t>(i + 1)] : Value{});
            ctx.assign("loop", Value(loop));
            bind(ctx, items[static_cast<std::size_t>(i)]);
            render_body(body, ctx);
        }
        ctx.scopes.pop_back();
        if (n == 0) {
            render_body(otherwise, ctx);
        }
    }

    void bind(Context & ctx, const Value & item) const {
        if (vars.size() == 1) {
            ctx.assign(vars[0], item);
            return;
        }
        if (!item.is_list() || item.list()->size() != vars.size()) {
            render_error("cannot unpack loop item");
        }
        for (std::size_t k = 0; k < vars.size(); ++k) {
            ctx.assign(vars[k], (*item.list())[k]);
        }
    }
};

struct SetNode : Node {
    std::string name;
    std::string attr; // namespace attribute when non-empty
    ExprPtr e;
    void render(Context & ctx) const override {
        Value v = e->eval(ctx);
        if (attr.empty()) {
            ctx.assign(name, std::move(v));
            return;
        }
        const Value ns = ctx.lookup(name);
        if (!ns.is_dict()) {
            render_error("cannot set attribute on '" + name + "'");
        }
        ns.dict()->set(attr, std::move(v));
    }
};

struct BlockNode : Node {
    Body body;
    void render(Context & ctx) const override { render_body(body, ctx); }
};

// ---------------------------------------------------------------- lexing

enum class ChunkKind { text, output, statement };

struct Chunk {
    ChunkKind kind;
    std::string text;
};

bool is_space(char c) {
    return kWhitespace.find(c) != std::string_view::npos;
}

// Finds the closing delimiter of a tag, skipping over string literals.
std::size_t find_tag_end(std::string_view src, std::size_t from, std::string_view close) {
    char quote = 0;
    for (std::size_t i = from; i < src.size(); ++i) {
        const char c = src[i];
        if (quote) {
            if (c == '\\') {
                ++i;
            } else if (c == quote) {
                quote = 0;
            }
        } else if (c == '\'' || c == '"') {
            quote = c;
        } else if (src.compare(i, close.size(), close) == 0) {
            return i;
        }
    }
    return std::string_view::npos;
}

// Splits the source into text / {{ }} / {% %} chunks with whitespace
// control, trim_blocks and lstrip_blocks applied.
std::vector<Chunk> split_chunks(std::string_view src) {
    std::vector<Chunk> chunks;
    std::size_t pos = 0;
    bool strip_leading = false;  // previous tag ended with -
    bool trim_newline = false;   // previous tag was a block/comment
    while (pos <= src.size()) {
        std::size_t open = std::string_view::npos;
        for (std::size_t i = pos; i + 1 < src.size(); ++i) {
            if (src[i] == '{' && (src[i + 1] == '{' || src[i + 1] == '%' || src[i + 1] == '#')) {
                open = i;
                break;
            }
        }
        std::string text(src.substr(pos, open == std::string_view::npos ? std::string_view::npos : open - pos));
        if (strip_leading) {
            std::size_t k = 0;
            while (k < text.size() && is_space(text[k])) {
                ++k;
            }
            text.erase(0, k);
        } else if (trim_newline) {
            if (text.starts_with("\r\n")) {
                text.erase(0, 2);
            } else if (text.starts_with("\n")) {
                text.erase(0, 1);
            }
        }
        strip_leading = trim_newline = false;

        if (open == std::string_view::npos) {
            if (!text.empty()) {
                chunks.push_back({ChunkKind::text, std::move(text)});
            }
            break;
        }

        const char kind = src[open + 1];
        const std::string_view close = kind == '{' ? "}}" : (kind == '%' ? "%}" : "#}");
        std::size_t inner_begin = open + 2;
        const bool minus_left = inner_begin < src.size() && src[inner_begin] == '-';
        const bool plus_left = inner_begin < src.size() && src[inner_begin] == '+';
        if (minus_left || plus_left) {
            ++inner_begin;
        }
        const std::size_t close_at =
            kind == '#' ? src.find(close, inner_begin) : find_tag_end(src, inner_begin, close);
        if (close_at == std::string_view::npos) {
            syntax_error("unterminated tag at offset " + std::to_string(open));
        }
        std::size_t inner_end = close_at;
        const bool minus_right = inner_end > inner_begin && src[inner_end - 1] == '-';
        const bool plus_right = inner_end > inner_begin && src[inner_end - 1] == '+';
        if (minus_right || plus_right) {
            --inner_end;
        }

        if (minus_left) {
            while (!text.empty() && is_space(text.back())) {
                text.pop_back();
            }
        } else if (kind != '{' && !plus_left) {
            // lstrip_blocks: drop spaces/tabs between line start and the tag.
            std::size_t k = text.size();
            while (k > 0 && (text[k - 1] == ' ' || text[k - 1] == '\t')) {
                --k;
            }
            const std::size_t ws_at = open - (text.size() - k);
            const bool line_start = k > 0 ? text[k - 1] == '\n' : (ws_at == 0 || src[ws_at - 1] == '\n');
            if (line_start) {
                text.erase(k);
            }
        }
        if (!text.empty()) {
            chunks.push_back({ChunkKind::text, std::move(text)});
        }
        if (kind != '#') {
            chunks.push_back({kind == '{' ? ChunkKind::output : ChunkKind::statement,
                              std::string(src.substr(inner_begin, inner_end - inner_begin))});
        }
        strip_leading = minus_right;
        trim_newline = !minus_right && !plus_right && kind != '{';
        pos = close_at + 2;
    }
    return chunks;
}

enum class TokKind { ident, string, integer, op, end };

struct Tok {
    TokKind kind;
    std::string text;
};

std::vector<Tok> lex_expr(std::string_view s) {
    std::vector<Tok> toks;
    std::size_t i = 0;
    while (i < s.size()) {
        const char c = s[i];
        if (is_space(c)) {
            ++i;
            continue;
        }
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::size_t j = i;
            while (j < s.size() && (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '_')) {
                ++j;
            }
            toks.push_back({TokKind::ident, std::string(s.substr(i, j - i))});
            i = j;
            continue;
        }
        if (std::isdigit(static_cast<unsigned char>(c))) {
            std::size_t j = i;
            while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) {
                ++j;
            }
            if (j < s.size() && s[j] == '.' && j + 1 < s.size() && std::isdigit(static_cast<unsigned char>(s[j + 1]))) {
                syntax_error("floating-point literals are not supported");
            }
            toks.push_back({TokKind::integer, std::string(s.substr(i, j - i))});
            i = j;
            continue;
        }
        if (c == '\'' || c == '"') {
            std::string val;
            std::size_t j = i + 1;
            for (; j < s.size() && s[j] != c; ++j) {
                if (s[j] == '\\' && j + 1 < s.size()) {
                    const char e = s[++j];
                    switch (e) {
                    case 'n': val += '\n'; break;
                    case 't': val += '\t'; break;
                    case 'r': val += '\r'; break;
                    case '\\': val += '\\'; break;
                    case '\'': val += '\''; break;
                    case '"': val += '"'; break;
                    default: val += '\\'; val += e; break;
                    }
                } else {
                    val += s[j];
                }
            }
            if (j >= s.size()) {
                syntax_error("unterminated string literal");
            }
            toks.push_back({TokKind::string, std::move(val)});
            i = j + 1;
            continue;
        }
        static constexpr std::string_view two[] = {"==", "!=", "<=", ">=", "//"};
        bool matched = false;
        for (auto op : two) {
            if (s.compare(i, 2, op) == 0) {
                toks.push_back({TokKind::op, std::string(op)});
                i += 2;
                matched = true;
                break;
            }
        }
        if (matched) {
            continue;
        }
        if (std::string_view("+-*/%~<>=()[]{}.,:|!").find(c) != std::string_view::npos) {
            toks.push_back({TokKind::op, std::string(1, c)});
            ++i;
            continue;
        }
        syntax_error(std::string("unexpected character '") + c + "'");
    }
    toks.push_back({TokKind::end, ""});
    return toks;
}

// ---------------------------------------------------------------- parsing

class ExprParser {
public:
    explicit ExprParser(std::vector<Tok> toks) : toks_(std::move(toks)) {}

    const Tok & peek(std::size_t k = 0) const { return toks_[std::min(pos_ + k, toks_.size() - 1)]; }
    bool at_end() const { return peek().kind == TokKind::end; }
    bool is_op(std::string_view op) const { return peek().kind == TokKind::op && peek().text == op; }
    bool is_kw(std::string_view kw) const { return peek().kind == TokKind::ident && peek().text == kw; }

    bool accept_op(std::string_view op) {
        if (is_op(op)) {
            ++pos_;
            return true;
        }
        return false;
    }
    bool accept_kw(std::string_view kw) {
        if (is_kw(kw)) {
            ++pos_;
            return true;
        }
        return false;
    }
    void expect_op(std::string_view op) {
        if (!accept_op(op)) {
            syntax_error("expected '" + std::string(op) + "' but found '" + peek().text + "'");
        }
    }
    std::string expect_ident() {
        if (peek().kind != TokKind::ident) {
            syntax_error("expected a name but found '" + peek().text + "'");
        }
        return toks_[pos_++].text;
    }
    void expect_end() {
        if (!at_end()) {
            syntax_error("unexpected '" + peek().text + "'");
        }
    }

    // with_ternary is off inside a for-loop header, where `if` starts a filter.
    ExprPtr expression(bool with_ternary = true) {
        ExprPtr e = or_expr();
        if (with_ternary && is_kw("if")) {
            ++pos_;
            auto c = std::make_unique<Cond>();
            c->then = std::move(e);
            c->cond = or_expr();
            if (accept_kw("else")) {
                c->otherwise = expression();
            }
            return c;
        }
        return e;
    }

private:
    template <typename Next>
    ExprPtr binary_chain(Next next, std::initializer_list<std::string_view> ops, bool keyword) {
        ExprPtr l = (this->*next)();
        for (;;) {
            std::string op;
            for (auto o : ops) {
                if (keyword ? is_kw(o) : is_op(o)) {
                    op = o;
                    break;
                }
            }
            if (op.empty()) {
                return l;
            }
            ++pos_;
            auto b = std::make_unique<Binary>();
            b->op = op;
            b->l = std::move(l);
            b->r = (this->*next)();
            l = std::move(b);
        }
    }

    ExprPtr or_expr() { return binary_chain(&ExprParser::and_expr, {"or"}, true); }
    ExprPtr and_expr() { return binary_chain(&ExprParser::not_expr, {"and"}, true); }

    ExprPtr not_expr() {
        if (accept_kw("not")) {
            auto u = std::make_unique<Unary>();
            u->op = "not";
            u->e = not_expr();
            return u;
        }
        return comparison();
    }

    ExprPtr comparison() {
        ExprPtr l = concat_expr();
        for (;;) {
            std::string op;
            if (is_op("==") || is_op("!=") || is_op("<") || is_op("<=") || is_op(">") || is_op(">=")) {
                op = toks_[pos_++].text;
            } else if (is_kw("in")) {
                ++pos_;
                op = "in";
            } else if (is_kw("not") && peek(1).kind == TokKind::ident && peek(1).text == "in") {
                pos_ += 2;
                op = "not in";
            } else {
                return l;
            }
            auto b = std::make_unique<Binary>();
            b->op = op;
            b->l = std::move(l);
            b->r = concat_expr();
            l = std::move(b);
        }
    }

    ExprPtr concat_expr() { return binary_chain(&ExprParser::additive, {"~"}, false); }
    ExprPtr additive() { return binary_chain(&ExprParser::multiplicative, {"+", "-"}, false); }
    ExprPtr multiplicative() { return binary_chain(&ExprParser::unary, {"*", "//", "/", "%"}, false); }

    ExprPtr unary() {
        if (is_op("-") || is_op("+")) {
            auto u = std::make_unique<Unary>();
            u->op = toks_[pos_++].text;
            u->e = unary();
            return u;
        }
        return postfix_with_tests();
    }

    // Filters bind tighter than tests; `x is defined` applies to the filtered value.
    ExprPtr postfix_with_tests() {
        ExprPtr e = filtered();
        if (accept_kw("is")) {
            auto t = std::make_unique<Test>();
            t->negate = accept_kw("not");
            t->obj = std::move(e);
            t->name = expect_ident();
            if (is_op("(")) {
                ++pos_;
                t->args = call_args();
            } else if (peek().kind == TokKind::string || peek().kind == TokKind::integer) {
                t->args.positional.push_back(primary());
            }
            return t;
        }
        return e;
    }

    ExprPtr filtered() {
        ExprPtr e = postfix();
        while (accept_op("|")) {
            auto f = std::make_unique<Filter>();
            f->obj = std::move(e);
            f->name = expect_ident();
            if (accept_op("(")) {
                f->args = call_args();
            }
            e = std::move(f);
        }
        return e;
    }

    Args call_args() {
        Args a;
        if (accept_op(")")) {
            return a;
        }
        for (;;) {
            if (peek().kind == TokKind::ident && peek(1).kind == TokKind::op && peek(1).text == "=") {
                std::string name = toks_[pos_].text;
                pos_ += 2;
                a.named.emplace_back(std::move(name), expression());
            } else {
                if (!a.named.empty()) {
                    syntax_error("positional argument after keyword argument");
                }
                a.positional.push_back(expression());
            }
            if (accept_op(")")) {
                return a;
            }
            expect_op(",");
        }
    }

    ExprPtr postfix() {
        ExprPtr e = primary();
        for (;;) {
            if (accept_op(".")) {
                auto a = std::make_unique<Attr>();
                a->obj = std::move(e);
                a->name = expect_ident();
                e = std::move(a);
            } else if (accept_op("[")) {
                ExprPtr first;
                if (!is_op(":")) {
                    first = expression();
                }
                if (accept_op(":")) {
                    auto s = std::make_unique<Slice>();
                    s->obj = std::move(e);
                    s->start = std::move(first);
                    if (!is_op("]") && !is_op(":")) {
                        s->stop = expression();
                    }
                    if (accept_op(":") && !is_op("]")) {
                        s->step = expression();
                    }
                    expect_op("]");
                    e = std::move(s);
                } else {
                    expect_op("]");
                    auto ix = std::make_unique<Index>();
                    ix->obj = std::move(e);
                    ix->key = std::move(first);
                    e = std::move(ix);
                }
            } else if (accept_op("(")) {
                auto c = std::make_unique<Call>();
                c->callee = std::move(e);
                c->args = call_args();
                e = std::move(c);
            } else {
                return e;
            }
        }
    }

    ExprPtr primary() {
        const Tok t = peek();
        switch (t.kind) {
        case TokKind::string: {
            ++pos_;
            std::string s = t.text;
            // Adjacent string literals concatenate.
            while (peek().kind == TokKind::string) {
                s += toks_[pos_++].text;
            }
            return std::make_unique<Literal>(Value::text(s, true));
        }
        case TokKind::integer:
            ++pos_;
            try {
                return std::make_unique<Literal>(Value(static_cast<int64_t>(std::stoll(t.text))));
            } catch (const std::out_of_range &) {
                syntax_error("integer literal out of range");
            }
        case TokKind::ident:
            ++pos_;
            if (t.text == "true" || t.text == "True") {
                return std::make_unique<Literal>(Value(true));
            }
            if (t.text == "false" || t.text == "False") {
                return std::make_unique<Literal>(Value(false));
            }
            if (t.text == "none" || t.text == "None") {
                return std::make_unique<Literal>(Value(NoneT{}));
            }
            return std::make_unique<Var>(t.text);
        case TokKind::op:
            if (t.text == "(") {
                ++pos_;
                ExprPtr e = expression();
                expect_op(")");
                return e;
            }
            if (t.text == "[") {
                ++pos_;
                auto l = std::make_unique<ListLit>();
                if (!accept_op("]")) {
                    for (;;) {
                        l->items.push_back(expression());
                        if (accept_op("]")) {
                            break;
                        }
                        expect_op(",");
                        if (accept_op("]")) {
                            break;
                        }
                    }
                }
                return l;
            }
            if (t.text == "{") {
                ++pos_;
                auto d = std::make_unique<DictLit>();
                if (!accept_op("}")) {
                    for (;;) {
                        ExprPtr k = expression();
                        expect_op(":");
                        d->items.emplace_back(std::move(k), expression());
                        if (accept_op("}")) {
                            break;
                        }
                        expect_op(",");
                    }
                }
                return d;
            }
            break;
        case TokKind::end:
            syntax_error("unexpected end of expression");
        }
        syntax_error("unexpected '" + t.text + "'");
    }

    std::vector<Tok> toks_;
    std::size_t pos_ = 0;
};

class TemplateParser {
public:
    explicit TemplateParser(std::vector<Chunk> chunks) : chunks_(std::move(chunks)) {}

    std::unique_ptr<BlockNode> parse() {
        auto root = std::make_unique<BlockNode>();
        std::string stop;
        root->body = body({}, stop);
        if (!stop.empty()) {
            syntax_error("unexpected '" + stop + "'");
        }
        return root;
    }

private:
    // Parses until one of the terminators; its keyword goes to `stop` and
    // the parser is left holding the rest of that tag.
    Body body(std::initializer_list<std::string_view> terminators, std::string & stop) {
        Body out;
        stop.clear();
        while (pos_ < chunks_.size()) {
            const Chunk & c = chunks_[pos_++];
            if (c.kind == ChunkKind::text) {
                auto t = std::make_unique<TextNode>();
                t->text = c.text;
                out.push_back(std::move(t));
                continue;
            }
            ExprParser p(lex_expr(c.text));
            if (c.kind == ChunkKind::output) {
                auto o = std::make_unique<OutputNode>();
                o->e = p.expression();
                p.expect_end();
                out.push_back(std::move(o));
                continue;
            }
            const std::string kw = p.expect_ident();
            if (std::find(terminators.begin(), terminators.end(), kw) != terminators.end()) {
                stop = kw;
                pending_ = std::make_unique<ExprParser>(std::move(p));
                return out;
            }
            if (kw == "if") {
                out.push_back(parse_if(p));
            } else if (kw == "for") {
                out.push_back(parse_for(p));
            } else if (kw == "set") {
                out.push_back(parse_set(p));
            } else if (kw == "generation" || kw == "endgeneration") {
                p.expect_end(); // HF marker for assistant masks; no output effect
            } else {
                syntax_error("unknown or misplaced tag '" + kw + "'");
            }
        }
        if (terminators.size() != 0) {
            syntax_error("missing '" + std::string(*(terminators.end() - 1)) + "'");
        }
        return out;
    }

    NodePtr parse_if(ExprParser & p) {
        auto node = std::make_unique<IfNode>();
        ExprPtr cond = p.expression();
        p.expect_end();
        std::string stop;
        for (;;) {
            Body b = body({"elif", "else", "endif"}, stop);
            node->branches.emplace_back(std::move(cond), std::move(b));
            if (stop == "elif") {
                cond = pending_->expression();
                pending_->expect_end();
                continue;
            }
            break;
        }
        if (stop == "else") {
            pending_->expect_end();
            node->otherwise = body({"endif"}, stop);
        }
        pending_->expect_end();
        return node;
    }

    NodePtr parse_for(ExprParser & p) {
        auto node = std::make_unique<ForNode>();
        node->vars.push_back(p.expect_ident());
        while (p.accept_op(",")) {
            node->vars.push_back(p.expect_ident());
        }
        if (!p.accept_kw("in")) {
            syntax_error("expected 'in' in for loop");
        }
        node->iterable = p.expression(false);
        if (p.accept_kw("if")) {
            node->filter = p.expression(false);
        }
        p.accept_kw("recursive");
        p.expect_end();
        std::string stop;
        node->body = body({"else", "endfor"}, stop);
        if (stop == "else") {
            pending_->expect_end();
            node->otherwise = body({"endfor"}, stop);
        }
        pending_->expect_end();
        return node;
    }

    NodePtr parse_set(ExprParser & p) {
        auto node = std::make_unique<SetNode>();
        node->name = p.expect_ident();
        if (p.accept_op(".")) {
            node->attr = p.expect_ident();
        }
        if (!p.accept_op("=")) {
            syntax_error("block set is not supported");
        }
        node->e = p.expression();
        p.expect_end();
        return node;
    }

    std::vector<Chunk> chunks_;
    std::size_t pos_ = 0;
    std::unique_ptr<ExprParser> pending_;
};

} // namespace jinja

// ---------------------------------------------------------------- public API

ChatTemplate ChatTemplate::parse(std::string_view source, TemplateSource origin) {
    ChatTemplate t;
    t.source_ = std::string(source);
    t.origin_ = origin;
    jinja::TemplateParser parser(jinja::split_chunks(source));
    t.root_ = parser.parse();
    return t;
}

std::vector<TextSegment> ChatTemplate::render(std::span<const ChatMessage> messages,
                                              const RenderOptions & options) const {
    using namespace jinja;
    if (!root_) {
        fail(ErrorKind::config, "chat template: not initialised");
    }
    auto list = std::make_shared<List>();
    for (const auto & m : messages) {
        auto d = std::make_shared<Dict>();
        d->set("role", Value::text(m.role, false));
        d->set("content", Value::text(m.content, false));
        list->push_back(Value(d));
    }
    Context ctx;
    ctx.scopes.emplace_back();
    ctx.assign("messages", Value(list));
    ctx.assign("add_generation_prompt", Value(options.add_generation_prompt));
    ctx.assign("bos_token", Value::text(options.bos_token, true));
    ctx.assign("eos_token", Value::text(options.eos_token, true));
    root_->render(ctx);
    return ctx.out.segs;
}

std::string ChatTemplate::render_text(std::span<const ChatMessage> messages, const RenderOptions & options) const {
    std::string s;
    for (const auto & seg : render(messages, options)) {
        s += seg.text;
    }
    return s;
}

ChatTemplate select_template(const std::optional<std::string> & checkpoint_template,
                             const std::optional<std::string> & user_template) {
    if (checkpoint_template && !checkpoint_template->empty()) {
        return ChatTemplate::parse(*checkpoint_template, TemplateSource::checkpoint);
    }
    if (user_template && !user_template->empty()) {
        return ChatTemplate::parse(*user_template, TemplateSource::user_config);
    }
    fail(ErrorKind::config, "no chat template: the checkpoint has none and none was configured");
}

std::vector<int32_t> render_chat(std::span<const ChatMessage> turns, const ChatTemplate & tmpl,
                                 const Tokenizer & tokenizer, bool add_generation_prompt) {
    for (const auto & m : turns) {
        if (m.role != "system" && m.role != "user" && m.role != "assistant") {
            fail(ErrorKind::input, "chat: unknown role '" + m.role + "'");
        }
    }
    const Vocabulary & vocab = tokenizer.vocab();
    RenderOptions opts;
    opts.add_generation_prompt = add_generation_prompt;
    opts.bos_token = vocab.tokens.at(static_cast<std::size_t>(vocab.bos_id));
    opts.eos_token = vocab.tokens.at(static_cast<std::size_t>(vocab.eos_id));
    const auto segs = tmpl.render(turns, opts);

    std::vector<Tokenizer::Fragment> frags;
    frags.reserve(segs.size());
    for (const auto & s : segs) {
        frags.push_back({s.text, s.literal});
    }
    auto ids = tokenizer.encode_fragments(frags, false);
    if (vocab.add_bos && (ids.empty() || ids.front() != vocab.bos_id)) {
        ids.insert(ids.begin(), vocab.bos_id);
    }
    return ids;
}

} // namespace danube
