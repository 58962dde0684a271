#include "danube/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <json.hpp>

#include "danube/error.hpp"
#include "danube/loader.hpp"

namespace danube {

std::vector<float> ModelLogitSource::logits(std::span<const int32_t> window) {
    KvCache cache(model_->config(), static_cast<int>(window.size()));
    return model_->forward(window, cache, LogitsMode::all, n_threads_);
}

namespace {

// log-sum-exp of a row in double.
double log_sum_exp(std::span<const float> row) {
    double mx = -std::numeric_limits<double>::infinity();
    for (float v : row) {
        mx = std::max(mx, static_cast<double>(v));
    }
    if (!std::isfinite(mx)) {
        return mx;
    }
    double s = 0.0;
    for (float v : row) {
        s += std::exp(static_cast<double>(v) - mx);
    }
    return mx + std::log(s);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

PerplexityReport perplexity(LogitSource & source, std::span<const int32_t> tokens, const PerplexityOptions & options) {
    const int W = options.window;
    if (W < 4) {
        fail(ErrorKind::config, "perplexity: window must be at least 4 tokens");
    }
    if (tokens.size() < static_cast<std::size_t>(W)) {
        fail(ErrorKind::input, "perplexity: corpus has " + std::to_string(tokens.size()) +
                                   " tokens, fewer than one window of " + std::to_string(W));
    }
    const int32_t V = source.vocab_size();
    const std::size_t n_windows = tokens.size() / static_cast<std::size_t>(W);
    const int first = W / 2;

    PerplexityReport report;
    report.corpus = options.corpus;
    report.window = W;
    double total = 0.0;
    std::vector<int32_t> window(static_cast<std::size_t>(W));
    for (std::size_t k = 0; k < n_windows; ++k) {
        std::copy_n(tokens.begin() + static_cast<std::ptrdiff_t>(k * W), W, window.begin());
        if (options.bos_id) {
            window[0] = *options.bos_id;
        }
        const auto logits = source.logits(window);
        if (logits.size() != static_cast<std::size_t>(W) * V) {
            fail(ErrorKind::shape, "perplexity: logit source returned the wrong shape");
        }
        WindowScore ws;
        ws.index = static_cast<int>(k);
        for (int j = first; j < W - 1; ++j) {
            const std::span<const float> row(logits.data() + static_cast<std::size_t>(j) * V, static_cast<std::size_t>(V));
            const int32_t target = window[static_cast<std::size_t>(j + 1)];
            ws.nll_sum += log_sum_exp(row) - static_cast<double>(row[static_cast<std::size_t>(target)]);
            ++ws.scored;
        }
        total += ws.nll_sum;
        report.tokens_scored += ws.scored;
        report.windows.push_back(ws);
    }
    report.mean_nll = total / static_cast<double>(report.tokens_scored);
    report.perplexity = std::exp(report.mean_nll);
    return report;
}

PerplexityReport perplexity(const Model & model, const Tokenizer & tokenizer, std::string_view text,
                            PerplexityOptions options, int n_threads) {
    if (options.window > model.config().max_context) {
        fail(ErrorKind::config, "perplexity: window exceeds the model context");
    }
    if (!options.bos_id && tokenizer.vocab().add_bos) {
        options.bos_id = tokenizer.bos();
    }
    const auto tokens = tokenizer.encode(text, false);
    ModelLogitSource source(model, n_threads);
    return perplexity(source, tokens, options);
}

std::string PerplexityReport::to_text() const {
    std::string s;
    s += "corpus: " + corpus + "\n";
    s += "window: " + std::to_string(window) + "\n";
    s += "windows: " + std::to_string(windows.size()) + "\n";
    s += "tokens_scored: " + std::to_string(tokens_scored) + "\n";
    s += "mean_nll: " + fmt_double(mean_nll) + "\n";
    s += "perplexity: " + fmt_double(perplexity) + "\n";
    for (const auto & w : windows) {
        s += "window " + std::to_string(w.index) + ": scored=" + std::to_string(w.scored) +
             " nll_sum=" + fmt_double(w.nll_sum) + "\n";
    }
    return s;
}

std::string PerplexityReport::to_json() const {
    nlohmann::ordered_json j;
    j["corpus"] = corpus;
    j["window"] = window;
    j["tokens_scored"] = tokens_scored;
    j["mean_nll"] = mean_nll;
    j["perplexity"] = perplexity;
    j["windows"] = nlohmann::ordered_json::array();
    for (const auto & w : windows) {
        j["windows"].push_back({{"index", w.index}, {"scored", w.scored}, {"nll_sum", w.nll_sum}});
    }
    return j.dump(2);
}

PerplexityReport PerplexityReport::from_json(std::string_view text) {
    try {
        const auto j = nlohmann::json::parse(text);
        PerplexityReport r;
        r.corpus = j.at("corpus").get<std::string>();
        r.window = j.at("window").get<int>();
        r.tokens_scored = j.at("tokens_scored").get<int64_t>();
        r.mean_nll = j.at("mean_nll").get<double>();
        r.perplexity = j.at("perplexity").get<double>();
        for (const auto & w : j.at("windows")) {
            r.windows.push_back({w.at("index").get<int>(), w.at("scored").get<int>(), w.at("nll_sum").get<double>()});
        }
        return r;
    } catch (const nlohmann::json::exception & e) {
        fail(ErrorKind::format, std::string("perplexity report: ") + e.what());
    }
}

double mean_kl_divergence(std::span<const float> p, std::span<const float> q, int32_t vocab) {
    if (vocab <= 0 || p.size() != q.size() || p.size() % static_cast<std::size_t>(vocab) != 0 || p.empty()) {
        fail(ErrorKind::shape, "kl: logits must be equal-sized rows x vocab");
    }
    const std::size_t rows = p.size() / static_cast<std::size_t>(vocab);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const auto pr = p.subspan(r * vocab, static_cast<std::size_t>(vocab));
        const auto qr = q.subspan(r * vocab, static_cast<std::size_t>(vocab));
        const double lp = log_sum_exp(pr);
        const double lq = log_sum_exp(qr);
        double kl = 0.0;
        for (std::size_t i = 0; i < pr.size(); ++i) {
            const double a = pr[i] - lp;
            if (std::isfinite(a)) {
                kl += std::exp(a) * (a - (qr[i] - lq));
            }
        }
        total += kl;
    }
    return total / static_cast<double>(rows);
}

std::vector<SizeQualityRow> size_quality_table(const gguf::GgufFile & source, std::span<const QuantType> targets,
                                               std::string_view text, const PerplexityOptions & options,
                                               int n_threads) {
    const ModelConfig config = config_from_metadata(source.metadata);
    std::vector<SizeQualityRow> rows;
    for (QuantType t : targets) {
        SizeQualityRow row;
        row.method = t;
        if (!is_encodable(t)) {
            row.accounting_only = true;
            row.bytes = predict_model_size(config, t, QuantPolicy::mixed);
            rows.push_back(row);
            continue;
        }
        const auto encoded = requantize(source, to_dtype(t));
        auto bytes = std::make_shared<std::vector<std::byte>>(gguf::serialize(encoded));
        row.bytes = bytes->size();
        const auto loaded = load_model(gguf::GgufFile::parse(*bytes, bytes));
        if (!loaded.vocab) {
            fail(ErrorKind::schema, "size/quality: the model file has no tokenizer");
        }
        const Tokenizer tok(*loaded.vocab);
        row.perplexity = perplexity(loaded.model, tok, text, options, n_threads).perplexity;
        rows.push_back(row);
    }
    return rows;
}

std::string format_size_quality(std::span<const SizeQualityRow> rows) {
    std::string s = "Method    Model size    Perplexity\n";
    for (const auto & r : rows) {
        char line[128];
        char size[32];
        if (r.bytes >= 100'000'000) {
            std::snprintf(size, sizeof size, "%.2f GB", static_cast<double>(r.bytes) / 1e9);
        } else {
            std::snprintf(size, sizeof size, "%.1f kB", static_cast<double>(r.bytes) / 1e3);
        }
        std::string ppl = "-";
        if (r.perplexity) {
            char b[32];
            std::snprintf(b, sizeof b, "%.4f", *r.perplexity);
            ppl = b;
        } else if (r.accounting_only) {
            ppl = "(size only)";
        }
        std::snprintf(line, sizeof line, "%-8s  %12s  %s\n", std::string(to_string(r.method)).c_str(), size,
                      ppl.c_str());
        s += line;
    }
    return s;
}

} // namespace danube
