#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "danube/model.hpp"
#include "danube/tokenizer.hpp"

namespace danube {

struct GenerationParams {
    float temperature = 0.7f;   // 0 = argmax
    int top_k = 40;             // 0 = off
    float top_p = 0.95f;        // (0, 1]
    float repeat_penalty = 1.1f; // >= 1
    int repeat_window = 64;     // most recent ids the penalty looks at
    int max_new_tokens = 256;
    uint64_t seed = 0;
    std::vector<std::string> stop_sequences;

    /// Throws a config error for out-of-range values.
    void validate() const;
};

/// Uniform double in [0, 1) from the top 53 bits of one draw.
inline double uniform01(std::mt19937_64 & rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Picks the next token from one row of logits.
///
/// Order: repeat penalty over distinct ids in the last repeat_window entries
/// of history (positive logits divided, negative multiplied), then argmax if
/// temperature is 0, else temperature scaling, top_k, top_p (smallest prefix
/// reaching the mass), and a draw from the renormalised distribution.
/// -inf logits are allowed; NaN/+inf are a numeric error and an all -inf row
/// is a degenerate-distribution error.
int32_t sample_next(std::span<const float> logits, const GenerationParams & params,
                    std::span<const int32_t> history, std::mt19937_64 & rng);

enum class FinishReason { eos, stop_sequence, length, capacity, cancelled };

std::string_view to_string(FinishReason r);

struct GenerationResult {
    std::vector<int32_t> tokens; // sampled ids (EOS excluded)
    std::string text;            // decoded output, cut before a stop sequence
    FinishReason finish = FinishReason::length;
    int prompt_tokens = 0;
    int reused_tokens = 0; // prompt prefix already in the cache
};

/// Receives each sampled id with the text released by it (possibly empty
/// while a stop-sequence prefix is held back). Text still held when EOS is
/// sampled arrives in one last call carrying the EOS id. Return false to
/// cancel.
using TokenCallback = std::function<bool(int32_t id, std::string_view text)>;

/// Runs prompt + sampling loop on cache. The longest common prefix of the
/// cache's tokens and the prompt is reused (at least one prompt token is
/// always re-fed). Stops on EOS, a stop sequence in the decoded text,
/// max_new_tokens, cache capacity, or cancellation.
///
/// Throws: config (bad params), input (empty prompt), capacity (prompt
/// does not fit).
GenerationResult generate(const Model & model, KvCache & cache, const Tokenizer & tokenizer,
                          std::span<const int32_t> prompt, const GenerationParams & params,
                          const TokenCallback & on_token = {}, int n_threads = 0);

} // namespace danube
