#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "danube/config.hpp"
#include "danube/tensor.hpp"

namespace danube {

inline constexpr int kQuantBlock = 32;

/// Weight storage formats. The K-quant entries are accounting-only: they can
/// be sized, but not encoded or decoded.
enum class QuantType { f32, f16, q8_0, q4_0, q6_k, q5_k_m, q4_k_m, q3_k_m, q2_k };

std::string_view to_string(QuantType t);
std::optional<QuantType> parse_quant_type(std::string_view name);

/// True for the formats this engine can encode and decode.
bool is_encodable(QuantType t);
DType to_dtype(QuantType t); // throws unsupported for K-quants
QuantType to_quant_type(DType t);

/// {bytes per block, elements per block} of the base storage format.
DTypeTraits quant_traits(QuantType t);
double bits_per_weight(QuantType t);

struct BlockQ8_0 {
    uint16_t d = 0; // F16 scale
    std::array<int8_t, kQuantBlock> qs{};
};

struct BlockQ4_0 {
    uint16_t d = 0; // F16 scale
    std::array<uint8_t, kQuantBlock / 2> qs{}; // low nibble: i, high nibble: i + 16
};

inline constexpr std::size_t kBlockQ8_0Bytes = 34;
inline constexpr std::size_t kBlockQ4_0Bytes = 18;

BlockQ8_0 quantize_block_q8_0(std::span<const float, kQuantBlock> x);
BlockQ4_0 quantize_block_q4_0(std::span<const float, kQuantBlock> x);

void decode_block(const BlockQ8_0 & b, std::span<float, kQuantBlock> out);
void decode_block(const BlockQ4_0 & b, std::span<float, kQuantBlock> out);

// Wire layout: little-endian F16 scale followed by the codes.
void serialize(const BlockQ8_0 & b, std::span<std::byte, kBlockQ8_0Bytes> out);
void serialize(const BlockQ4_0 & b, std::span<std::byte, kBlockQ4_0Bytes> out);
BlockQ8_0 parse_q8_0(std::span<const std::byte, kBlockQ8_0Bytes> in);
BlockQ4_0 parse_q4_0(std::span<const std::byte, kBlockQ4_0Bytes> in);

/// Encodes an F32 row into dtype (F32, F16, Q8_0 or Q4_0).
std::vector<std::byte> quantize_row(std::span<const float> src, DType dtype);

/// Decodes a row of dtype into out (out.size() elements).
void dequantize_row(std::span<const std::byte> src, DType dtype, std::span<float> out);
/// Overload taking the full type tag; K-quants raise unsupported.
void dequantize_row(std::span<const std::byte> src, QuantType type, std::span<float> out);

/// dot(a, dequantize_row(b)) accumulated in F32, element order ascending.
float vec_dot(std::span<const float> a, std::span<const std::byte> b, DType dtype);

/// Re-encodes a tensor (of any supported dtype) into dtype.
Tensor quantize_tensor(const Tensor & t, DType dtype);

/// Which tensors keep higher precision when a model is quantized.
enum class QuantPolicy {
    uniform,     // every tensor stored at the target type
    keep_norms,  // 1-D tensors (norm weights) stay F32
    mixed,       // keep_norms plus the per-tensor upgrades llama.cpp applies for K-quant mixes
};

std::string_view to_string(QuantPolicy p);

/// Storage type chosen for one weight tensor under a policy.
QuantType tensor_quant_type(std::string_view tensor_name, int layer, const ModelConfig & config,
                            QuantType target, QuantPolicy policy);

struct SizeEstimate {
    uint64_t payload_bytes = 0;
    uint64_t overhead_bytes = 0;
    uint64_t total() const { return payload_bytes + overhead_bytes; }
};

SizeEstimate estimate_model_size(const ModelConfig & config, QuantType type, QuantPolicy policy);

/// Predicted file size in bytes (payload + container overhead).
uint64_t predict_model_size(const ModelConfig & config, QuantType type, QuantPolicy policy);

} // namespace danube
