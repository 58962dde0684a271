#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "danube/config.hpp"
#include "danube/tensor.hpp"

namespace danube {

/// Weights of one decoder block. Projection matrices are stored as
/// (out_features x in_features), i.e. one row per output.
struct LayerWeights {
    Tensor attn_norm; // [H]
    Tensor wq;        // [n_heads*hs, H]
    Tensor wk;        // [n_kv_heads*hs, H]
    Tensor wv;        // [n_kv_heads*hs, H]
    Tensor wo;        // [H, n_heads*hs]
    Tensor ffn_norm;  // [H]
    Tensor w_gate;    // [I, H]
    Tensor w_up;      // [I, H]
    Tensor w_down;    // [H, I]
};

struct ModelWeights {
    Tensor token_embd;  // [V, H]
    std::vector<LayerWeights> layers;
    Tensor output_norm; // [H]
    Tensor output;      // [V, H]; empty when embeddings are tied
};

/// Per-session key/value store, linear (no eviction).
///
/// Layout per layer: [n_kv_heads][capacity][head_size] for K and for V.
/// Positions [0, length) are valid. Tokens are remembered so a later prompt
/// can reuse the common prefix.
class KvCache {
public:
    KvCache() = default;
    KvCache(const ModelConfig & config, int capacity);

    int length() const noexcept { return length_; }
    int capacity() const noexcept { return capacity_; }
    int remaining() const noexcept { return capacity_ - length_; }
    const std::vector<int32_t> & tokens() const noexcept { return tokens_; }

    /// Drops positions >= n.
    void truncate(int n);
    void clear() { truncate(0); }

    std::span<float> key(int layer, int kv_head, int pos);
    std::span<float> value(int layer, int kv_head, int pos);
    std::span<const float> key(int layer, int kv_head, int pos) const;
    std::span<const float> value(int layer, int kv_head, int pos) const;

    /// Marks seq new positions (already written by every layer) as valid.
    void commit(std::span<const int32_t> tokens);

    std::size_t memory_bytes() const { return (k_.size() + v_.size()) * sizeof(float); }

private:
    std::size_t index(int layer, int kv_head, int pos) const;

    int n_layers_ = 0;
    int n_kv_heads_ = 0;
    int head_size_ = 0;
    int capacity_ = 0;
    int length_ = 0;
    std::vector<float> k_;
    std::vector<float> v_;
    std::vector<int32_t> tokens_;
};

enum class LogitsMode { all, last };

class Model {
public:
    Model(ModelConfig config, ModelWeights weights);

    const ModelConfig & config() const noexcept { return config_; }
    const ModelWeights & weights() const noexcept { return weights_; }

    /// Runs the decoder over tokens appended after the cache contents.
    /// Returns seq x vocab logits (or 1 x vocab for LogitsMode::last).
    std::vector<float> forward(std::span<const int32_t> tokens, KvCache & cache,
                               LogitsMode mode = LogitsMode::all, int n_threads = 0) const;

    /// Storage type of the projection weights (the first layer's wq).
    DType weight_dtype() const;

    std::size_t weight_bytes() const;

private:
    void validate_weights() const;

    ModelConfig config_;
    ModelWeights weights_;
};

/// Grouped-query self-attention with RoPE over x (seq x H). New keys and
/// values are written at positions cache.length() .. + seq for this layer;
/// the caller commits them once every layer ran. Returns seq x H.
std::vector<float> attention_block(std::span<const float> x, int seq, const LayerWeights & w,
                                   const ModelConfig & config, KvCache & cache, int layer, int n_threads = 0);

/// down(silu(x Wg) * (x Wu)); x is seq x H.
std::vector<float> mlp_block(std::span<const float> x, int seq, const LayerWeights & w,
                             const ModelConfig & config, int n_threads = 0);

/// Random weights (deterministic in seed), stored as dtype.
Model make_random_model(const ModelConfig & config, uint64_t seed, DType dtype = DType::f32);

/// Re-encodes every 2-D weight to dtype; norms stay F32.
Model quantize_model(const Model & model, DType dtype);

} // namespace danube
