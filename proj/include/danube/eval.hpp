#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "danube/gguf.hpp"
#include "danube/model.hpp"
#include "danube/quant.hpp"
#include "danube/tokenizer.hpp"

namespace danube {

/// Anything that maps a token window to next-token logits (seq x vocab).
class LogitSource {
public:
    virtual ~LogitSource() = default;
    virtual int32_t vocab_size() const = 0;
    /// Logits for every position of a fresh pass over window.
    virtual std::vector<float> logits(std::span<const int32_t> window) = 0;
};

/// Full forward pass of a model, with a new cache per window.
class ModelLogitSource : public LogitSource {
public:
    explicit ModelLogitSource(const Model & model, int n_threads = 0) : model_(&model), n_threads_(n_threads) {}
    int32_t vocab_size() const override { return model_->config().vocab_size; }
    std::vector<float> logits(std::span<const int32_t> window) override;

private:
    const Model * model_;
    int n_threads_;
};

struct WindowScore {
    int index = 0;
    int scored = 0;
    double nll_sum = 0.0; // nats
};

struct PerplexityReport {
    std::string corpus;
    int window = 0;
    int64_t tokens_scored = 0;
    double mean_nll = 0.0;
    double perplexity = 0.0;
    std::vector<WindowScore> windows;

    /// Line-oriented summary followed by one line per window.
    std::string to_text() const;
    /// {"corpus", "window", "tokens_scored", "mean_nll", "perplexity",
    ///  "windows": [{"index", "scored", "nll_sum"}]}
    std::string to_json() const;
    static PerplexityReport from_json(std::string_view json);
};

struct PerplexityOptions {
    int window = 512;
    /// Replaces the first token of every window (llama.cpp style) when set.
    std::optional<int32_t> bos_id;
    std::string corpus = "corpus";
};

/// Splits tokens into floor(n / W) non-overlapping windows and scores, in
/// each, the predictions made at positions [W/2, W-1) of the true next
/// token, using a float64 log-softmax. Windows are summed in index order.
/// Throws input if fewer than W tokens, config if W < 4.
PerplexityReport perplexity(LogitSource & source, std::span<const int32_t> tokens, const PerplexityOptions & options);

/// Tokenizes text (no BOS) and scores it; BOS replaces each window's first
/// token when the vocabulary asks for BOS.
PerplexityReport perplexity(const Model & model, const Tokenizer & tokenizer, std::string_view text,
                            PerplexityOptions options = {}, int n_threads = 0);

/// Mean over rows of KL(softmax(p) || softmax(q)) in nats; p and q are
/// rows x vocab.
double mean_kl_divergence(std::span<const float> p, std::span<const float> q, int32_t vocab);

struct SizeQualityRow {
    QuantType method;
    uint64_t bytes = 0;
    bool accounting_only = false;      // size predicted, nothing encoded
    std::optional<double> perplexity;  // measured rows only
};

/// For each encodable target: re-encode the file's weights, measure the
/// serialized size, reload and score text. K-quant targets become
/// accounting-only rows sized by the mixed policy.
std::vector<SizeQualityRow> size_quality_table(const gguf::GgufFile & source, std::span<const QuantType> targets,
                                               std::string_view text, const PerplexityOptions & options,
                                               int n_threads = 0);

/// Rows in the shape of the published size/quality table.
std::string format_size_quality(std::span<const SizeQualityRow> rows);

} // namespace danube
