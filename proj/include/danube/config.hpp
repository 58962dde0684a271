#pragma once

#include <cstdint>
#include <string>

namespace danube {

/// Architecture hyperparameters of a Danube3-family decoder.
struct ModelConfig {
    int n_layers = 0;
    int hidden_size = 0;
    int intermediate_size = 0;
    int n_heads = 0;
    int n_kv_heads = 0;
    int head_size = 0;
    int vocab_size = 0;
    double rope_theta = 100000.0;
    int max_context = 8192;
    float rms_eps = 1e-5f;
    bool tied_embeddings = false;

    int group_size() const { return n_heads / n_kv_heads; }
    int q_width() const { return n_heads * head_size; }
    int kv_width() const { return n_kv_heads * head_size; }

    /// Throws config error describing the first violated constraint.
    void validate() const;

    bool operator==(const ModelConfig &) const = default;
};

ModelConfig danube3_4b();
ModelConfig danube3_500m();

/// Trainable parameter count (embeddings, projections, MLP, norms, LM head).
int64_t count_parameters(const ModelConfig & config);

std::string describe(const ModelConfig & config);

} // namespace danube
