#include "danube/generation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "danube/error.hpp"

namespace danube {

void GenerationParams::validate() const {
    auto bad = [](const std::string & what) { fail(ErrorKind::config, "generation: " + what); };
    if (!(temperature >= 0.0f) || !std::isfinite(temperature)) {
        bad("temperature must be >= 0");
    }
    if (top_k < 0) {
        bad("top_k must be >= 0");
    }
    if (!(top_p > 0.0f && top_p <= 1.0f)) {
        bad("top_p must be in (0, 1]");
    }
    if (!(repeat_penalty >= 1.0f) || !std::isfinite(repeat_penalty)) {
        bad("repeat_penalty must be >= 1");
    }
    if (repeat_window < 0) {
        bad("repeat_window must be >= 0");
    }
    if (max_new_tokens < 0) {
        bad("max_new_tokens must be >= 0");
    }
    for (const auto & s : stop_sequences) {
        if (s.empty()) {
            bad("stop sequences must be non-empty");
        }
    }
}

std::string_view to_string(FinishReason r) {
    switch (r) {
        case FinishReason::eos: return "eos";
        case FinishReason::stop_sequence: return "stop_sequence";
        case FinishReason::length: return "length";
        case FinishReason::capacity: return "capacity";
        case FinishReason::cancelled: return "cancelled";
    }
    return "?";
}

int32_t sample_next(std::span<const float> logits, const GenerationParams & params,
                    std::span<const int32_t> history, std::mt19937_64 & rng) {
    const auto n = static_cast<int32_t>(logits.size());
    if (n == 0) {
        fail(ErrorKind::degenerate, "sample: empty logits");
    }
    std::vector<double> z(logits.begin(), logits.end());
    bool any_finite = false;
    for (double v : z) {
        if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
            fail(ErrorKind::numeric, "sample: logits contain NaN or +inf");
        }
        any_finite |= std::isfinite(v);
    }
    if (!any_finite) {
        fail(ErrorKind::degenerate, "sample: every logit is -inf");
    }

    if (params.repeat_penalty != 1.0f && params.repeat_window > 0) {
        const std::size_t w = std::min<std::size_t>(history.size(), static_cast<std::size_t>(params.repeat_window));
        std::unordered_set<int32_t> seen(history.end() - static_cast<std::ptrdiff_t>(w), history.end());
        for (int32_t id : seen) {
            if (id < 0 || id >= n) {
                continue;
            }
            double & v = z[static_cast<std::size_t>(id)];
            v = v > 0 ? v / params.repeat_penalty : v * params.repeat_penalty;
        }
    }

    auto argmax = [&] {
        return static_cast<int32_t>(std::max_element(z.begin(), z.end()) - z.begin());
    };
    if (params.temperature == 0.0f || params.top_k == 1) {
        return argmax();
    }

    std::vector<int32_t> order;
    order.reserve(z.size());
    for (int32_t i = 0; i < n; ++i) {
        if (std::isfinite(z[static_cast<std::size_t>(i)])) {
            order.push_back(i);
        }
    }
    auto by_logit = [&](int32_t a, int32_t b) {
        const double za = z[static_cast<std::size_t>(a)];
        const double zb = z[static_cast<std::size_t>(b)];
        return za != zb ? za > zb : a < b;
    };
    if (params.top_k > 0 && static_cast<std::size_t>(params.top_k) < order.size()) {
        std::partial_sort(order.begin(), order.begin() + params.top_k, order.end(), by_logit);
        order.resize(static_cast<std::size_t>(params.top_k));
    } else {
        std::sort(order.begin(), order.end(), by_logit);
    }

    const double inv_t = 1.0 / params.temperature;
    const double top = z[static_cast<std::size_t>(order.front())] * inv_t;
    std::vector<double> p(order.size());
    double total = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        p[i] = std::exp(z[static_cast<std::size_t>(order[i])] * inv_t - top);
        total += p[i];
    }

    std::size_t keep = order.size();
    if (params.top_p < 1.0f) {
        double cum = 0.0;
        for (std::size_t i = 0; i < order.size(); ++i) {
            cum += p[i] / total;
            if (cum >= params.top_p) {
                keep = i + 1;
                break;
            }
        }
    }
    const double mass = std::accumulate(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(keep), 0.0);
    const double u = uniform01(rng) * mass;
    double cum = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
        cum += p[i];
        if (u < cum) {
            return order[i];
        }
    }
    return order[keep - 1];
}

namespace {

// Longest suffix of text that is a proper prefix of some stop sequence.
std::size_t stop_prefix_overlap(std::string_view text, const std::vector<std::string> & stops) {
    std::size_t best = 0;
    for (const auto & s : stops) {
        if (s.empty()) {
            continue;
        }
        for (std::size_t len = std::min(s.size() - 1, text.size()); len > best; --len) {
            if (text.substr(text.size() - len) == std::string_view(s).substr(0, len)) {
                best = len;
                break;
            }
        }
    }
    return best;
}

// Moves cut back so it does not split a UTF-8 sequence.
std::size_t char_boundary(std::string_view s, std::size_t cut) {
    while (cut > 0 && cut < s.size() && (static_cast<unsigned char>(s[cut]) & 0xC0) == 0x80) {
        --cut;
    }
    return cut;
}

} // namespace

GenerationResult generate(const Model & model, KvCache & cache, const Tokenizer & tokenizer,
                          std::span<const int32_t> prompt, const GenerationParams & params,
                          const TokenCallback & on_token, int n_threads) {
    params.validate();
    if (prompt.empty()) {
        fail(ErrorKind::input, "generate: empty prompt");
    }
    if (static_cast<int>(prompt.size()) > cache.capacity()) {
        fail(ErrorKind::capacity, "generate: prompt of " + std::to_string(prompt.size()) +
                                      " tokens exceeds the context of " + std::to_string(cache.capacity()));
    }

    GenerationResult result;
    result.prompt_tokens = static_cast<int>(prompt.size());
    if (params.max_new_tokens == 0) {
        result.finish = FinishReason::length;
        return result;
    }

    const auto & cached = cache.tokens();
    std::size_t common = 0;
    while (common < cached.size() && common < prompt.size() && cached[common] == prompt[common]) {
        ++common;
    }
    common = std::min(common, prompt.size() - 1);
    cache.truncate(static_cast<int>(common));
    result.reused_tokens = static_cast<int>(common);

    std::vector<float> logits = model.forward(prompt.subspan(common), cache, LogitsMode::last, n_threads);

    std::vector<int32_t> history(prompt.begin(), prompt.end());
    std::mt19937_64 rng(params.seed);
    StreamingDecoder decoder(tokenizer);
    std::string pending; // decoded but not yet released
    auto release = [&](std::size_t upto, int32_t id) {
        const std::string chunk = pending.substr(0, upto);
        pending.erase(0, upto);
        result.text += chunk;
        return on_token ? on_token(id, chunk) : true;
    };

    for (;;) {
        const int32_t id = sample_next(logits, params, history, rng);
        if (id == tokenizer.eos()) {
            pending += decoder.flush();
            if (!pending.empty()) {
                release(pending.size(), id);
            }
            result.finish = FinishReason::eos;
            return result;
        }
        result.tokens.push_back(id);
        history.push_back(id);

        const std::size_t scan_from = pending.size();
        pending += decoder.push(id);
        const bool last = static_cast<int>(result.tokens.size()) >= params.max_new_tokens ||
                          cache.remaining() == 0;
        if (last) {
            pending += decoder.flush();
        }

        // A stop sequence can start inside the held-back tail.
        std::size_t stop_at = std::string::npos;
        for (const auto & s : params.stop_sequences) {
            const std::size_t from = scan_from >= s.size() ? scan_from - s.size() + 1 : 0;
            const std::size_t at = pending.find(s, from);
            stop_at = std::min(stop_at, at);
        }
        if (stop_at != std::string::npos) {
            release(stop_at, id);
            result.finish = FinishReason::stop_sequence;
            return result;
        }

        const std::size_t hold = last ? 0 : stop_prefix_overlap(pending, params.stop_sequences);
        if (!release(char_boundary(pending, pending.size() - hold), id)) {
            result.finish = FinishReason::cancelled;
            return result;
        }
        if (static_cast<int>(result.tokens.size()) >= params.max_new_tokens) {
            result.finish = FinishReason::length;
            return result;
        }
        if (cache.remaining() == 0) {
            result.finish = FinishReason::capacity;
            return result;
        }
        logits = model.forward(std::span(&id, 1), cache, LogitsMode::last, n_threads);
    }
}

} // namespace danube
