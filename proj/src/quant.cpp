#include "danube/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "danube/f16.hpp"

namespace danube {

namespace {

const float * f16_table() {
    static const std::vector<float> table = [] {
        std::vector<float> t(65536);
        for (uint32_t i = 0; i < 65536; ++i) {
            t[i] = f16_to_f32(static_cast<uint16_t>(i));
        }
        return t;
    }();
    return table.data();
}

uint16_t load_u16(const std::byte * p) {
    return static_cast<uint16_t>(std::to_integer<uint16_t>(p[0]) |
                                 (std::to_integer<uint16_t>(p[1]) << 8));
}

void store_u16(std::byte * p, uint16_t v) {
    p[0] = std::byte(v & 0xff);
    p[1] = std::byte(v >> 8);
}

void check_finite(std::span<const float> x) {
    for (float v : x) {
        if (!std::isfinite(v)) {
            fail(ErrorKind::numeric, "cannot quantize non-finite value");
        }
    }
}

// Q4_0 codes are nibbles with zero point 8.
constexpr int kQ4Zero = 8;

} // namespace

std::string_view to_string(QuantType t) {
    switch (t) {
        case QuantType::f32: return "F32";
        case QuantType::f16: return "F16";
        case QuantType::q8_0: return "Q8_0";
        case QuantType::q4_0: return "Q4_0";
        case QuantType::q6_k: return "Q6_K";
        case QuantType::q5_k_m: return "Q5_K_M";
        case QuantType::q4_k_m: return "Q4_K_M";
        case QuantType::q3_k_m: return "Q3_K_M";
        case QuantType::q2_k: return "Q2_K";
    }
    return "?";
}

std::optional<QuantType> parse_quant_type(std::string_view name) {
    std::string upper(name);
    std::transform(upper.begin(), upper.end(), upper.begin(),
                   [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    for (auto t : {QuantType::f32, QuantType::f16, QuantType::q8_0, QuantType::q4_0, QuantType::q6_k,
                   QuantType::q5_k_m, QuantType::q4_k_m, QuantType::q3_k_m, QuantType::q2_k}) {
        if (upper == to_string(t)) {
            return t;
        }
    }
    return std::nullopt;
}

bool is_encodable(QuantType t) {
    return t == QuantType::f32 || t == QuantType::f16 || t == QuantType::q8_0 || t == QuantType::q4_0;
}

DType to_dtype(QuantType t) {
    switch (t) {
        case QuantType::f32: return DType::f32;
        case QuantType::f16: return DType::f16;
        case QuantType::q8_0: return DType::q8_0;
        case QuantType::q4_0: return DType::q4_0;
        default:
            fail(ErrorKind::unsupported,
                 std::string(to_string(t)) + " is accounting-only; supported: F32, F16, Q8_0, Q4_0");
    }
}

QuantType to_quant_type(DType t) {
    switch (t) {
        case DType::f32: return QuantType::f32;
        case DType::f16: return QuantType::f16;
        case DType::q8_0: return QuantType::q8_0;
        case DType::q4_0: return QuantType::q4_0;
    }
    return QuantType::f32;
}

DTypeTraits quant_traits(QuantType t) {
    // K-quant super-blocks hold 256 weights.
    switch (t) {
        case QuantType::q6_k: return {210, 256};
        case QuantType::q5_k_m: return {176, 256};
        case QuantType::q4_k_m: return {144, 256};
        case QuantType::q3_k_m: return {110, 256};
        case QuantType::q2_k: return {84, 256};
        default: return traits(to_dtype(t));
    }
}

double bits_per_weight(QuantType t) {
    const auto tr = quant_traits(t);
    return 8.0 * static_cast<double>(tr.block_bytes) / static_cast<double>(tr.block_elems);
}

// Largest finite F16; bigger blocks saturate instead of producing inf scales.
constexpr float kMaxScale = 65504.0f;

BlockQ8_0 quantize_block_q8_0(std::span<const float, kQuantBlock> x) {
    check_finite(x);
    float amax = 0.0f;
    for (float v : x) {
        amax = std::max(amax, std::fabs(v));
    }
    BlockQ8_0 b;
    b.d = f32_to_f16(std::min(amax / 127.0f, kMaxScale));
    const float d = f16_to_f32(b.d);
    if (d != 0.0f) {
        for (int i = 0; i < kQuantBlock; ++i) {
            const float q = std::round(x[i] / d);
            b.qs[i] = static_cast<int8_t>(std::clamp(q, -127.0f, 127.0f));
        }
    }
    return b;
}

BlockQ4_0 quantize_block_q4_0(std::span<const float, kQuantBlock> x) {
    check_finite(x);
    float amax = 0.0f;
    float max = 0.0f;
    for (float v : x) {
        if (std::fabs(v) > amax) {
            amax = std::fabs(v);
            max = v;
        }
    }
    BlockQ4_0 b;
    b.d = max == 0.0f ? 0 : f32_to_f16(std::clamp(max / -8.0f, -kMaxScale, kMaxScale));
    const float d = f16_to_f32(b.d);
    std::array<uint8_t, kQuantBlock> codes;
    codes.fill(kQ4Zero);
    if (d != 0.0f) {
        for (int i = 0; i < kQuantBlock; ++i) {
            const float q = std::round(x[i] / d) + kQ4Zero;
            codes[i] = static_cast<uint8_t>(std::clamp(q, 0.0f, 15.0f));
        }
    }
    for (int i = 0; i < kQuantBlock / 2; ++i) {
        b.qs[i] = static_cast<uint8_t>(codes[i] | (codes[i + kQuantBlock / 2] << 4));
    }
    return b;
}

void decode_block(const BlockQ8_0 & b, std::span<float, kQuantBlock> out) {
    const float d = f16_table()[b.d];
    for (int i = 0; i < kQuantBlock; ++i) {
        out[i] = static_cast<float>(b.qs[i]) * d;
    }
}

void decode_block(const BlockQ4_0 & b, std::span<float, kQuantBlock> out) {
    const float d = f16_table()[b.d];
    for (int i = 0; i < kQuantBlock / 2; ++i) {
        out[i] = static_cast<float>((b.qs[i] & 0x0f) - kQ4Zero) * d;
        out[i + kQuantBlock / 2] = static_cast<float>((b.qs[i] >> 4) - kQ4Zero) * d;
    }
}

void serialize(const BlockQ8_0 & b, std::span<std::byte, kBlockQ8_0Bytes> out) {
    store_u16(out.data(), b.d);
    std::memcpy(out.data() + 2, b.qs.data(), kQuantBlock);
}

void serialize(const BlockQ4_0 & b, std::span<std::byte, kBlockQ4_0Bytes> out) {
    store_u16(out.data(), b.d);
    std::memcpy(out.data() + 2, b.qs.data(), kQuantBlock / 2);
}

BlockQ8_0 parse_q8_0(std::span<const std::byte, kBlockQ8_0Bytes> in) {
    BlockQ8_0 b;
    b.d = load_u16(in.data());
    std::memcpy(b.qs.data(), in.data() + 2, kQuantBlock);
    return b;
}

BlockQ4_0 parse_q4_0(std::span<const std::byte, kBlockQ4_0Bytes> in) {
    BlockQ4_0 b;
    b.d = load_u16(in.data());
    std::memcpy(b.qs.data(), in.data() + 2, kQuantBlock / 2);
    return b;
}

std::vector<std::byte> quantize_row(std::span<const float> src, DType dtype) {
    const int64_t n = static_cast<int64_t>(src.size());
    std::vector<std::byte> out(row_bytes(dtype, n));
    switch (dtype) {
        case DType::f32:
            check_finite(src);
            std::memcpy(out.data(), src.data(), out.size());
            break;
        case DType::f16:
            for (int64_t i = 0; i < n; ++i) {
                store_u16(out.data() + 2 * i, f32_to_f16(src[i]));
            }
            break;
        case DType::q8_0:
            for (int64_t blk = 0; blk < n / kQuantBlock; ++blk) {
                const auto b = quantize_block_q8_0(src.subspan(blk * kQuantBlock).first<kQuantBlock>());
                serialize(b, std::span(out).subspan(blk * kBlockQ8_0Bytes).first<kBlockQ8_0Bytes>());
            }
            break;
        case DType::q4_0:
            for (int64_t blk = 0; blk < n / kQuantBlock; ++blk) {
                const auto b = quantize_block_q4_0(src.subspan(blk * kQuantBlock).first<kQuantBlock>());
                serialize(b, std::span(out).subspan(blk * kBlockQ4_0Bytes).first<kBlockQ4_0Bytes>());
            }
            break;
    }
    return out;
}

void dequantize_row(std::span<const std::byte> src, DType dtype, std::span<float> out) {
    const int64_t n = static_cast<int64_t>(out.size());
    if (src.size() != row_bytes(dtype, n)) {
        fail(ErrorKind::shape, "dequantize_row: byte length does not match element count");
    }
    const float * table = f16_table();
    switch (dtype) {
        case DType::f32:
            std::memcpy(out.data(), src.data(), src.size());
            break;
        case DType::f16:
            for (int64_t i = 0; i < n; ++i) {
                out[i] = table[load_u16(src.data() + 2 * i)];
            }
            break;
        case DType::q8_0:
            for (int64_t blk = 0; blk < n / kQuantBlock; ++blk) {
                const auto b = parse_q8_0(src.subspan(blk * kBlockQ8_0Bytes).first<kBlockQ8_0Bytes>());
                decode_block(b, out.subspan(blk * kQuantBlock).first<kQuantBlock>());
            }
            break;
        case DType::q4_0:
            for (int64_t blk = 0; blk < n / kQuantBlock; ++blk) {
                const auto b = parse_q4_0(src.subspan(blk * kBlockQ4_0Bytes).first<kBlockQ4_0Bytes>());
                decode_block(b, out.subspan(blk * kQuantBlock).first<kQuantBlock>());
            }
            break;
    }
}

void dequantize_row(std::span<const std::byte> src, QuantType type, std::span<float> out) {
    dequantize_row(src, to_dtype(type), out);
}

float vec_dot(std::span<const float> a, std::span<const std::byte> b, DType dtype) {
    const int64_t n = static_cast<int64_t>(a.size());
    if (b.size() != row_bytes(dtype, n)) {
        fail(ErrorKind::shape, "vec_dot: operand lengths differ");
    }
    const float * table = f16_table();
    float acc = 0.0f;
    switch (dtype) {
        case DType::f32: {
            const float * w = reinterpret_cast<const float *>(b.data());
            for (int64_t i = 0; i < n; ++i) {
                acc += a[i] * w[i];
            }
            break;
        }
        case DType::f16: {
            const std::byte * p = b.data();
            for (int64_t i = 0; i < n; ++i) {
                acc += a[i] * table[load_u16(p + 2 * i)];
            }
            break;
        }
        case DType::q8_0: {
            for (int64_t blk = 0; blk < n / kQuantBlock; ++blk) {
                const std::byte * p = b.data() + blk * kBlockQ8_0Bytes;
                const float d = table[load_u16(p)];
                const auto * qs = reinterpret_cast<const int8_t *>(p + 2);
                const float * x = a.data() + blk * kQuantBlock;
                for (int i = 0; i < kQuantBlock; ++i) {
                    acc += x[i] * (static_cast<float>(qs[i]) * d);
                }
            }
            break;
        }
        case DType::q4_0: {
            for (int64_t blk = 0; blk < n / kQuantBlock; ++blk) {
                const std::byte * p = b.data() + blk * kBlockQ4_0Bytes;
                const float d = table[load_u16(p)];
                const auto * qs = reinterpret_cast<const uint8_t *>(p + 2);
                const float * x = a.data() + blk * kQuantBlock;
                for (int i = 0; i < kQuantBlock / 2; ++i) {
                    acc += x[i] * (static_cast<float>((qs[i] & 0x0f) - kQ4Zero) * d);
                }
                for (int i = 0; i < kQuantBlock / 2; ++i) {
                    acc += x[i + kQuantBlock / 2] * (static_cast<float>((qs[i] >> 4) - kQ4Zero) * d);
                }
            }
            break;
        }
    }
    return acc;
}

Tensor quantize_tensor(const Tensor & t, DType dtype) {
    if (t.dtype() == dtype) {
        return t;
    }
    const int64_t cols = t.cols();
    const int64_t rows = t.rows();
    validate_layout(t.shape(), dtype);
    const std::size_t rb = row_bytes(dtype, cols);
    std::vector<std::byte> out(rb * static_cast<std::size_t>(rows));
    std::vector<float> buf(static_cast<std::size_t>(cols));
    for (int64_t r = 0; r < rows; ++r) {
        dequantize_row(t.row(r), t.dtype(), buf);
        const auto enc = quantize_row(buf, dtype);
        std::memcpy(out.data() + r * rb, enc.data(), rb);
    }
    return Tensor::from_bytes(t.shape(), dtype, std::move(out));
}

std::string_view to_string(QuantPolicy p) {
    switch (p) {
        case QuantPolicy::uniform: return "uniform";
        case QuantPolicy::keep_norms: return "keep-norms";
        case QuantPolicy::mixed: return "mixed";
    }
    return "?";
}

namespace {

// llama.cpp's layer selector for the "_M" mixes: first and last eighth of the
// stack plus every third layer in between.
bool use_more_bits(int layer, int n_layers) {
    return layer < n_layers / 8 || layer >= 7 * n_layers / 8 || (layer - n_layers / 8) % 3 == 2;
}

bool is_norm(std::string_view name) { return name.find("norm") != std::string_view::npos; }

// "blk.3.attn_v.weight" -> "attn_v"
std::string_view base_name(std::string_view name) {
    if (name.starts_with("blk.")) {
        const auto dot = name.find('.', 4);
        name = dot == std::string_view::npos ? name : name.substr(dot + 1);
    }
    if (name.ends_with(".weight")) {
        name.remove_suffix(7);
    }
    return name;
}

} // namespace

QuantType tensor_quant_type(std::string_view name, int layer, const ModelConfig & config,
                            QuantType target, QuantPolicy policy) {
    if (policy == QuantPolicy::uniform) {
        return target;
    }
    name = base_name(name);
    if (is_norm(name)) {
        return QuantType::f32;
    }
    if (policy == QuantPolicy::keep_norms) {
        return target;
    }
    const bool k_quant = !is_encodable(target);
    if (!k_quant) {
        return target;
    }
    if (name == "output") {
        return QuantType::q6_k;
    }
    const int n = config.n_layers;
    switch (target) {
        case QuantType::q5_k_m:
        case QuantType::q4_k_m: {
            const QuantType base = target == QuantType::q5_k_m ? QuantType::q5_k_m : QuantType::q4_k_m;
            if ((name == "attn_v" || name == "ffn_down") && use_more_bits(layer, n)) {
                return QuantType::q6_k;
            }
            return base;
        }
        case QuantType::q3_k_m:
            if (name == "attn_v") {
                return layer < 2 ? QuantType::q5_k_m : QuantType::q4_k_m;
            }
            if (name == "ffn_down") {
                return layer < n / 16 ? QuantType::q5_k_m : QuantType::q4_k_m;
            }
            if (name == "attn_output") {
                return QuantType::q4_k_m;
            }
            return target;
        case QuantType::q2_k:
            if (name == "attn_v") {
                return config.group_size() >= 4 ? QuantType::q4_k_m : QuantType::q3_k_m;
            }
            if (name == "ffn_down" || name == "attn_output") {
                return QuantType::q3_k_m;
            }
            return target;
        default:
            return target;
    }
}

SizeEstimate estimate_model_size(const ModelConfig & config, QuantType type, QuantPolicy policy) {
    config.validate();
    SizeEstimate est;
    int n_tensors = 0;
    auto add = [&](std::string_view name, int layer, uint64_t elems) {
        const QuantType t = tensor_quant_type(name, layer, config, type, policy);
        const auto tr = quant_traits(t);
        est.payload_bytes += elems / tr.block_elems * tr.block_bytes;
        ++n_tensors;
    };
    const uint64_t H = config.hidden_size;
    const uint64_t V = config.vocab_size;
    const uint64_t I = config.intermediate_size;
    const uint64_t Q = config.q_width();
    const uint64_t KV = config.kv_width();
    add("token_embd", -1, V * H);
    for (int l = 0; l < config.n_layers; ++l) {
        add("attn_norm", l, H);
        add("attn_q", l, H * Q);
        add("attn_k", l, H * KV);
        add("attn_v", l, H * KV);
        add("attn_output", l, Q * H);
        add("ffn_norm", l, H);
        add("ffn_gate", l, H * I);
        add("ffn_up", l, H * I);
        add("ffn_down", l, I * H);
    }
    add("output_norm", -1, H);
    if (!config.tied_embeddings) {
        add("output", -1, V * H);
    }
    // Header, ~40 architecture keys, tokenizer arrays (length-prefixed piece,
    // score, type per token), tensor directory, and worst-case alignment
    // padding of 32 bytes per tensor.
    constexpr uint64_t kHeader = 24;
    constexpr uint64_t kArchKeys = 40 * 64;
    constexpr uint64_t kPerToken = 8 + 8 + 4 + 4;
    constexpr uint64_t kPerTensorInfo = 8 + 24 + 4 + 2 * 8 + 4 + 8;
    est.overhead_bytes = kHeader + kArchKeys + V * kPerToken +
                         static_cast<uint64_t>(n_tensors) * (kPerTensorInfo + 32);
    return est;
}

uint64_t predict_model_size(const ModelConfig & config, QuantType type, QuantPolicy policy) {
    return estimate_model_size(config, type, policy).total();
}

} // namespace danube
