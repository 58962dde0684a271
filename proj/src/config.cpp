#include "danube/config.hpp"

#include <sstream>

#include "danube/error.hpp"

namespace danube {

void ModelConfig::validate() const {
    auto require = [](bool ok, const std::string & what) {
        if (!ok) {
            fail(ErrorKind::config, what);
        }
    };
    require(n_layers >= 1, "n_layers must be >= 1");
    require(hidden_size >= 1, "hidden_size must be >= 1");
    require(intermediate_size >= 1, "intermediate_size must be >= 1");
    require(n_heads >= 1 && n_kv_heads >= 1, "head counts must be >= 1");
    require(n_kv_heads <= n_heads, "n_kv_heads (" + std::to_string(n_kv_heads) + ") cannot exceed n_heads (" +
                                       std::to_string(n_heads) + ")");
    require(n_heads % n_kv_heads == 0, "n_heads must be a multiple of n_kv_heads");
    require(head_size >= 2 && head_size % 2 == 0, "head_size must be a positive even number");
    require(vocab_size >= 1, "vocab_size must be >= 1");
    require(rope_theta > 0.0, "rope_theta must be positive");
    require(max_context >= 1, "max_context must be >= 1");
    require(rms_eps >= 0.0f, "rms_eps must be non-negative");
}

ModelConfig danube3_4b() {
    ModelConfig c;
    c.n_layers = 24;
    c.hidden_size = 3840;
    c.intermediate_size = 10240;
    c.n_heads = 32;
    c.n_kv_heads = 8;
    c.head_size = 120;
    c.vocab_size = 32000;
    c.rope_theta = 100000.0;
    c.max_context = 8192;
    return c;
}

ModelConfig danube3_500m() {
    ModelConfig c;
    c.n_layers = 16;
    c.hidden_size = 1536;
    c.intermediate_size = 4096;
    c.n_heads = 16;
    c.n_kv_heads = 8;
    c.head_size = 96;
    c.vocab_size = 32000;
    c.rope_theta = 100000.0;
    c.max_context = 8192;
    return c;
}

int64_t count_parameters(const ModelConfig & c) {
    c.validate();
    const int64_t V = c.vocab_size;
    const int64_t H = c.hidden_size;
    const int64_t I = c.intermediate_size;
    const int64_t Q = c.q_width();
    const int64_t KV = c.kv_width();
    const int64_t per_layer = H * Q + 2 * H * KV + Q * H + 3 * H * I + 2 * H;
    return V * H * (c.tied_embeddings ? 1 : 2) + c.n_layers * per_layer + H;
}

std::string describe(const ModelConfig & c) {
    std::ostringstream os;
    os << "layers: " << c.n_layers << ", hidden: " << c.hidden_size << ", intermediate: " << c.intermediate_size
       << ", heads: " << c.n_heads << "/" << c.n_kv_heads << ", head size: " << c.head_size
       << ", vocab: " << c.vocab_size << ", rope theta: " << c.rope_theta << ", context: " << c.max_context
       << ", tied embeddings: " << (c.tied_embeddings ? "yes" : "no");
    return os.str();
}

} // namespace danube
