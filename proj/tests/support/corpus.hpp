#pragma once

#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace danube::testing {

inline void append_utf8(std::string & s, char32_t cp) {
    if (cp < 0x80) {
        s += static_cast<char>(cp);
    } else if (cp < 0x800) {
        s += static_cast<char>(0xc0 | (cp >> 6));
        s += static_cast<char>(0x80 | (cp & 0x3f));
    } else if (cp < 0x10000) {
        s += static_cast<char>(0xe0 | (cp >> 12));
        s += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
        s += static_cast<char>(0x80 | (cp & 0x3f));
    } else {
        s += static_cast<char>(0xf0 | (cp >> 18));
        s += static_cast<char>(0x80 | ((cp >> 12) & 0x3f));
        s += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
        s += static_cast<char>(0x80 | (cp & 0x3f));
    }
}

// Random well-formed UTF-8 strings mixing ASCII words, whitespace runs,
// accented Latin, CJK, emoji and rare code points (which exercise byte
// fallback). U+2581 is excluded: it is the tokenizer's space marker.
inline std::vector<std::string> random_utf8_strings(uint32_t seed, std::size_t n) {
    std::mt19937 rng(seed);
    const char * words[] = {"the", "model", "quant", "ization", "data", "train", "ing", "Hello", "world"};
    auto pick_cp = [&]() -> char32_t {
        switch (rng() % 8) {
            case 0: return U' ';
            case 1: return static_cast<char32_t>(0x21 + rng() % 94);
            case 2: return U"\t\n\r  "[rng() % 5];
            case 3: return static_cast<char32_t>(0xc0 + rng() % 0x140);
            case 4: return static_cast<char32_t>(0x4e00 + rng() % 0x5000);
            case 5: return static_cast<char32_t>(0x1f300 + rng() % 0x300);
            case 6: {
                char32_t cp;
                do {
                    cp = static_cast<char32_t>(1 + rng() % 0x10ffff);
                } while ((cp >= 0xd800 && cp <= 0xdfff) || cp == 0x2581);
                return cp;
            }
            default: return static_cast<char32_t>('a' + rng() % 26);
        }
    };
    std::vector<std::string> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::string s;
        const int parts = static_cast<int>(rng() % 16);
        for (int p = 0; p < parts; ++p) {
            if (rng() % 3 == 0) {
                s += words[rng() % 9];
            } else {
                append_utf8(s, pick_cp());
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

inline std::string read_text_file(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::vector<std::string> lines_of(const std::string & text) {
    std::vector<std::string> out;
    std::istringstream ss(text);
    for (std::string line; std::getline(ss, line);) {
        out.push_back(line);
    }
    return out;
}

} // namespace danube::testing
