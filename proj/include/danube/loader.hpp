#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "danube/config.hpp"
#include "danube/gguf.hpp"
#include "danube/model.hpp"
#include "danube/quant.hpp"
#include "danube/tokenizer.hpp"

namespace danube {

/// Everything needed to run a checkpoint.
struct LoadedModel {
    Model model;
    std::optional<Vocabulary> vocab;
    std::optional<std::string> chat_template; // tokenizer.chat_template
    std::string name;                         // general.name (or file stem)
    std::string architecture;                 // general.architecture
    bool permuted_qk = false;                 // Q/K rows were un-permuted on load
    std::vector<std::string> ignored_tensors; // present in the file but unused

    const ModelConfig & config() const { return model.config(); }
};

struct LoadOptions {
    bool require_tokenizer = true;
};

/// Reads the architecture keys. Missing required keys raise a schema error.
ModelConfig config_from_metadata(const gguf::Metadata & md);

/// Tokenizer arrays from metadata; nullopt when tokenizer.ggml.tokens is absent.
std::optional<Vocabulary> vocab_from_metadata(const gguf::Metadata & md);

/// Maps llama-named tensors to model slots. The file must outlive nothing:
/// tensors keep the file's storage alive.
LoadedModel load_model(const gguf::GgufFile & file, const LoadOptions & options = {});
LoadedModel load_model(const std::filesystem::path & path, const LoadOptions & options = {});

/// Row permutation applied by the standard HF->GGUF converter to Q and K:
/// within each head, row j*half + i moves to row 2*i + j (interleaved RoPE
/// pairs). unpermute_qk is its inverse.
Tensor permute_qk(const Tensor & w, int n_heads);
Tensor unpermute_qk(const Tensor & w, int n_heads);

struct ExportOptions {
    std::string name = "danube";
    std::optional<std::string> chat_template;
};

/// Builds a llama-architecture GGUF (Q/K permuted like the standard converter).
gguf::GgufFile export_gguf(const Model & model, const Vocabulary * vocab, const ExportOptions & options = {});

struct QuantizeSummary {
    uint64_t input_bytes = 0;
    uint64_t output_bytes = 0;
    int quantized_tensors = 0;
    int kept_tensors = 0; // stored unchanged (norms and other 1-D tensors)
};

/// Re-encodes every 2-D weight tensor to target; 1-D tensors stay as they
/// are (F32 norms). Metadata is preserved except general.file_type.
gguf::GgufFile requantize(const gguf::GgufFile & in, DType target, QuantizeSummary * summary = nullptr);

/// llama.cpp's general.file_type value for a uniform dtype.
uint32_t file_type_for(DType t);

} // namespace danube
