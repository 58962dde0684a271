#include "danube/model.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "danube/quant.hpp"
#include "danube/threading.hpp"

namespace danube {

KvCache::KvCache(const ModelConfig & config, int capacity)
    : n_layers_(config.n_layers),
      n_kv_heads_(config.n_kv_heads),
      head_size_(config.head_size),
      capacity_(capacity) {
    if (capacity < 1 || capacity > config.max_context) {
        fail(ErrorKind::config, "cache capacity must be in [1, " + std::to_string(config.max_context) + "], got " +
                                    std::to_string(capacity));
    }
    const std::size_t n = static_cast<std::size_t>(n_layers_) * n_kv_heads_ * capacity_ * head_size_;
    k_.assign(n, 0.0f);
    v_.assign(n, 0.0f);
}

std::size_t KvCache::index(int layer, int kv_head, int pos) const {
    return ((static_cast<std::size_t>(layer) * n_kv_heads_ + kv_head) * capacity_ + pos) * head_size_;
}

std::span<float> KvCache::key(int layer, int kv_head, int pos) {
    return {k_.data() + index(layer, kv_head, pos), static_cast<std::size_t>(head_size_)};
}
std::span<float> KvCache::value(int layer, int kv_head, int pos) {
    return {v_.data() + index(layer, kv_head, pos), static_cast<std::size_t>(head_size_)};
}
std::span<const float> KvCache::key(int layer, int kv_head, int pos) const {
    return {k_.data() + index(layer, kv_head, pos), static_cast<std::size_t>(head_size_)};
}
std::span<const float> KvCache::value(int layer, int kv_head, int pos) const {
    return {v_.data() + index(layer, kv_head, pos), static_cast<std::size_t>(head_size_)};
}

void KvCache::truncate(int n) {
    if (n < 0 || n > length_) {
        fail(ErrorKind::validation, "cannot truncate cache of length " + std::to_string(length_) + " to " +
                                        std::to_string(n));
    }
    length_ = n;
    tokens_.resize(static_cast<std::size_t>(n));
}

void KvCache::commit(std::span<const int32_t> tokens) {
    if (static_cast<int>(tokens.size()) > remaining()) {
        fail(ErrorKind::capacity, "context window exhausted");
    }
    length_ += static_cast<int>(tokens.size());
    tokens_.insert(tokens_.end(), tokens.begin(), tokens.end());
}

namespace {

void check_shape(const Tensor & t, std::initializer_list<int64_t> expected, const char * what) {
    if (t.shape() != Shape(expected)) {
        std::string want;
        for (auto d : expected) {
            want += (want.empty() ? "" : "x") + std::to_string(d);
        }
        fail(ErrorKind::validation, std::string(what) + " must have shape " + want);
    }
}

std::vector<float> norm_rows(std::span<const float> x, int seq, const Tensor & weight, float eps) {
    const auto w = weight.dtype() == DType::f32 ? weight : weight.to_f32();
    const std::size_t h = static_cast<std::size_t>(w.numel());
    std::vector<float> out(x.size());
    for (int i = 0; i < seq; ++i) {
        rms_norm_row(x.subspan(i * h, h), w.f32(), eps, std::span(out).subspan(i * h, h));
    }
    return out;
}

} // namespace

std::vector<float> attention_block(std::span<const float> x, int seq, const LayerWeights & w,
                                   const ModelConfig & c, KvCache & cache, int layer, int n_threads) {
    const int H = c.hidden_size;
    const int hs = c.head_size;
    const int Q = c.q_width();
    const int KV = c.kv_width();
    const int start = cache.length();
    if (seq > cache.remaining()) {
        fail(ErrorKind::capacity, "context window exhausted: " + std::to_string(start) + " cached + " +
                                      std::to_string(seq) + " new > " + std::to_string(cache.capacity()));
    }
    if (static_cast<int64_t>(x.size()) != int64_t{seq} * H) {
        fail(ErrorKind::shape, "attention_block: input must be seq x hidden");
    }

    const auto xn = norm_rows(x, seq, w.attn_norm, c.rms_eps);
    std::vector<float> q(static_cast<std::size_t>(seq) * Q);
    std::vector<float> k(static_cast<std::size_t>(seq) * KV);
    std::vector<float> v(static_cast<std::size_t>(seq) * KV);
    matmul(xn, seq, H, w.wq, q, n_threads);
    matmul(xn, seq, H, w.wk, k, n_threads);
    matmul(xn, seq, H, w.wv, v, n_threads);

    const RopeParams rope{c.rope_theta, hs};
    for (int i = 0; i < seq; ++i) {
        for (int h = 0; h < c.n_heads; ++h) {
            rope_rotate(std::span(q).subspan(static_cast<std::size_t>(i) * Q + h * hs, hs), start + i, rope);
        }
        for (int h = 0; h < c.n_kv_heads; ++h) {
            auto kh = std::span(k).subspan(static_cast<std::size_t>(i) * KV + h * hs, hs);
            rope_rotate(kh, start + i, rope);
            std::copy(kh.begin(), kh.end(), cache.key(layer, h, start + i).begin());
            const auto vh = std::span(v).subspan(static_cast<std::size_t>(i) * KV + h * hs, hs);
            std::copy(vh.begin(), vh.end(), cache.value(layer, h, start + i).begin());
        }
    }

    const int group = c.group_size();
    const float scale = 1.0f / std::sqrt(static_cast<float>(hs));
    std::vector<float> attn(static_cast<std::size_t>(seq) * Q, 0.0f);
    const KvCache & kv = cache;
    // One task per (query position, head); each owns its output slice.
    parallel_for(static_cast<std::size_t>(seq) * c.n_heads, n_threads, [&](std::size_t begin, std::size_t end) {
        std::vector<float> scores;
        for (std::size_t task = begin; task < end; ++task) {
            const int i = static_cast<int>(task / c.n_heads);
            const int h = static_cast<int>(task % c.n_heads);
            const int kvh = h / group;
            const int n_ctx = start + i + 1; // causal: keys 0..start+i
            const float * qh = q.data() + static_cast<std::size_t>(i) * Q + h * hs;
            scores.resize(static_cast<std::size_t>(n_ctx));
            for (int j = 0; j < n_ctx; ++j) {
                const auto kj = kv.key(layer, kvh, j);
                float dot = 0.0f;
                for (int d = 0; d < hs; ++d) {
                    dot += qh[d] * kj[d];
                }
                scores[j] = dot * scale;
            }
            softmax_inplace(scores);
            float * out = attn.data() + static_cast<std::size_t>(i) * Q + h * hs;
            for (int j = 0; j < n_ctx; ++j) {
                const auto vj = kv.value(layer, kvh, j);
                const float p = scores[j];
                for (int d = 0; d < hs; ++d) {
                    out[d] += p * vj[d];
                }
            }
        }
    });

    std::vector<float> o(static_cast<std::size_t>(seq) * H);
    matmul(attn, seq, Q, w.wo, o, n_threads);
    return o;
}

std::vector<float> mlp_block(std::span<const float> x, int seq, const LayerWeights & w, const ModelConfig & c,
                             int n_threads) {
    const int H = c.hidden_size;
    const int I = c.intermediate_size;
    if (static_cast<int64_t>(x.size()) != int64_t{seq} * H) {
        fail(ErrorKind::shape, "mlp_block: input must be seq x hidden");
    }
    if (w.w_gate.shape() != Shape{I, H} || w.w_up.shape() != Shape{I, H} || w.w_down.shape() != Shape{H, I}) {
        fail(ErrorKind::shape, "mlp_block: gate/up must be intermediate x hidden and down hidden x intermediate");
    }
    const auto xn = norm_rows(x, seq, w.ffn_norm, c.rms_eps);
    std::vector<float> g(static_cast<std::size_t>(seq) * I);
    std::vector<float> u(static_cast<std::size_t>(seq) * I);
    matmul(xn, seq, H, w.w_gate, g, n_threads);
    matmul(xn, seq, H, w.w_up, u, n_threads);
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = silu(g[i]) * u[i];
    }
    std::vector<float> out(static_cast<std::size_t>(seq) * H);
    matmul(g, seq, I, w.w_down, out, n_threads);
    return out;
}

Model::Model(ModelConfig config, ModelWeights weights) : config_(config), weights_(std::move(weights)) {
    config_.validate();
    validate_weights();
}

void Model::validate_weights() const {
    const int64_t H = config_.hidden_size;
    const int64_t V = config_.vocab_size;
    const int64_t I = config_.intermediate_size;
    const int64_t Q = config_.q_width();
    const int64_t KV = config_.kv_width();
    check_shape(weights_.token_embd, {V, H}, "token_embd");
    check_shape(weights_.output_norm, {H}, "output_norm");
    if (config_.tied_embeddings != weights_.output.empty()) {
        fail(ErrorKind::validation, "output weight must be present iff embeddings are untied");
    }
    if (!config_.tied_embeddings) {
        check_shape(weights_.output, {V, H}, "output");
    }
    if (static_cast<int>(weights_.layers.size()) != config_.n_layers) {
        fail(ErrorKind::validation, "expected " + std::to_string(config_.n_layers) + " layers, got " +
                                        std::to_string(weights_.layers.size()));
    }
    for (const auto & l : weights_.layers) {
        check_shape(l.attn_norm, {H}, "attn_norm");
        check_shape(l.ffn_norm, {H}, "ffn_norm");
        check_shape(l.wq, {Q, H}, "attn_q");
        check_shape(l.wk, {KV, H}, "attn_k");
        check_shape(l.wv, {KV, H}, "attn_v");
        check_shape(l.wo, {H, Q}, "attn_output");
        check_shape(l.w_gate, {I, H}, "ffn_gate");
        check_shape(l.w_up, {I, H}, "ffn_up");
        check_shape(l.w_down, {H, I}, "ffn_down");
    }
}

DType Model::weight_dtype() const { return weights_.layers.front().wq.dtype(); }

std::size_t Model::weight_bytes() const {
    std::size_t n = weights_.token_embd.bytes().size() + weights_.output_norm.bytes().size() +
                    (weights_.output.empty() ? 0 : weights_.output.bytes().size());
    for (const auto & l : weights_.layers) {
        for (const Tensor * t : {&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w_gate, &l.w_up,
                                 &l.w_down}) {
            n += t->bytes().size();
        }
    }
    return n;
}

std::vector<float> Model::forward(std::span<const int32_t> tokens, KvCache & cache, LogitsMode mode,
                                  int n_threads) const {
    const int seq = static_cast<int>(tokens.size());
    const int H = config_.hidden_size;
    const int V = config_.vocab_size;
    if (seq == 0) {
        return {};
    }
    if (seq > cache.remaining()) {
        fail(ErrorKind::capacity, "context window exhausted: " + std::to_string(cache.length()) + " cached + " +
                                      std::to_string(seq) + " new > " + std::to_string(cache.capacity()));
    }
    for (int32_t t : tokens) {
        if (t < 0 || t >= V) {
            fail(ErrorKind::input, "token id " + std::to_string(t) + " out of range [0, " + std::to_string(V) + ")");
        }
    }

    std::vector<float> x(static_cast<std::size_t>(seq) * H);
    for (int i = 0; i < seq; ++i) {
        dequantize_row(weights_.token_embd.row(tokens[i]), weights_.token_embd.dtype(),
                       std::span(x).subspan(static_cast<std::size_t>(i) * H, H));
    }

    for (int l = 0; l < config_.n_layers; ++l) {
        const auto & w = weights_.layers[l];
        const auto a = attention_block(x, seq, w, config_, cache, l, n_threads);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] += a[i];
        }
        const auto m = mlp_block(x, seq, w, config_, n_threads);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] += m[i];
        }
    }
    cache.commit(tokens);

    const int first = mode == LogitsMode::last ? seq - 1 : 0;
    const int rows = seq - first;
    const auto xs = std::span<const float>(x).subspan(static_cast<std::size_t>(first) * H);
    const auto xn = norm_rows(xs, rows, weights_.output_norm, config_.rms_eps);
    std::vector<float> logits(static_cast<std::size_t>(rows) * V);
    const Tensor & head = config_.tied_embeddings ? weights_.token_embd : weights_.output;
    matmul(xn, rows, H, head, logits, n_threads);
    return logits;
}

Model make_random_model(const ModelConfig & c, uint64_t seed, DType dtype) {
    c.validate();
    std::mt19937_64 rng(seed);
    auto matrix = [&](int64_t rows, int64_t cols) {
        std::normal_distribution<float> dist(0.0f, 1.0f / std::sqrt(static_cast<float>(cols)));
        std::vector<float> v(static_cast<std::size_t>(rows * cols));
        for (auto & e : v) {
            e = dist(rng);
        }
        auto t = Tensor::from_f32({rows, cols}, std::move(v));
        return dtype == DType::f32 ? t : quantize_tensor(t, dtype);
    };
    auto norm = [&](int64_t n) {
        std::uniform_real_distribution<float> dist(0.8f, 1.2f);
        std::vector<float> v(static_cast<std::size_t>(n));
        for (auto & e : v) {
            e = dist(rng);
        }
        return Tensor::from_f32({n}, std::move(v));
    };
    const int64_t H = c.hidden_size;
    ModelWeights w;
    w.token_embd = matrix(c.vocab_size, H);
    for (int l = 0; l < c.n_layers; ++l) {
        LayerWeights lw;
        lw.attn_norm = norm(H);
        lw.wq = matrix(c.q_width(), H);
        lw.wk = matrix(c.kv_width(), H);
        lw.wv = matrix(c.kv_width(), H);
        lw.wo = matrix(H, c.q_width());
        lw.ffn_norm = norm(H);
        lw.w_gate = matrix(c.intermediate_size, H);
        lw.w_up = matrix(c.intermediate_size, H);
        lw.w_down = matrix(H, c.intermediate_size);
        w.layers.push_back(std::move(lw));
    }
    w.output_norm = norm(H);
    if (!c.tied_embeddings) {
        w.output = matrix(c.vocab_size, H);
    }
    return Model(c, std::move(w));
}

Model quantize_model(const Model & model, DType dtype) {
    ModelWeights w = model.weights();
    auto q = [&](Tensor & t) { t = quantize_tensor(t, dtype); };
    q(w.token_embd);
    if (!w.output.empty()) {
        q(w.output);
    }
    for (auto & l : w.layers) {
        for (Tensor * t : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down}) {
            q(*t);
        }
    }
    return Model(model.config(), std::move(w));
}

} // namespace danube
