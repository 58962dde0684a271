#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "danube/error.hpp"

namespace danube {

/// Element type of a tensor. Quantized types pack 32 elements per block.
enum class DType : uint8_t { f32, f16, q8_0, q4_0 };

std::string_view to_string(DType t);

struct DTypeTraits {
    std::size_t block_bytes;
    std::size_t block_elems;
};

constexpr DTypeTraits traits(DType t) {
    switch (t) {
        case DType::f32: return {4, 1};
        case DType::f16: return {2, 1};
        case DType::q8_0: return {34, 32};
        case DType::q4_0: return {18, 32};
    }
    return {0, 1};
}

constexpr bool is_quantized(DType t) { return traits(t).block_elems > 1; }

/// Bytes needed for a row of n elements; throws format error if a quantized
/// row is not a whole number of blocks.
std::size_t row_bytes(DType t, int64_t n);

using Shape = std::vector<int64_t>;

int64_t numel(const Shape & shape);

/// Dense row-major array (innermost dimension last).
///
/// Owns its bytes, or views bytes kept alive by an external owner (used for
/// memory-mapped weights). Views are read-only.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, DType dtype = DType::f32);
    static Tensor from_f32(Shape shape, std::vector<float> values);
    static Tensor from_bytes(Shape shape, DType dtype, std::vector<std::byte> bytes);
    static Tensor view(Shape shape, DType dtype, std::span<const std::byte> bytes,
                       std::shared_ptr<const void> keepalive);

    const Shape & shape() const noexcept { return shape_; }
    DType dtype() const noexcept { return dtype_; }
    int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t ndim() const noexcept { return shape_.size(); }
    int64_t numel() const { return danube::numel(shape_); }
    /// Innermost dimension.
    int64_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
    /// Product of all but the innermost dimension.
    int64_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }
    bool empty() const noexcept { return shape_.empty(); }
    bool is_view() const noexcept { return keepalive_ != nullptr; }

    std::span<const std::byte> bytes() const;
    std::span<std::byte> mutable_bytes();

    std::span<const float> f32() const;
    std::span<float> f32();

    /// Bytes of row r (r < rows()).
    std::span<const std::byte> row(int64_t r) const;

    /// Same bytes, different shape with equal element count.
    Tensor reshaped(Shape shape) const;

    /// Owned F32 copy (dequantized if needed).
    Tensor to_f32() const;

private:
    Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {}
    void check_f32() const;

    Shape shape_;
    DType dtype_ = DType::f32;
    std::vector<std::byte> owned_;
    std::span<const std::byte> view_;
    std::shared_ptr<const void> keepalive_;
};

/// Validates shape (all dims >= 1) and that a quantized innermost dimension
/// is divisible by the block size. Returns the byte size.
std::size_t validate_layout(const Shape & shape, DType dtype);

// ---------------------------------------------------------------------------
// Kernels. Activations are always F32. Every output element is reduced in a
// fixed sequential order, so results do not depend on the thread count.

/// out[i][j] = sum_t a[i][t] * deq(w[j][t]); a is m x k F32, w is n x k.
/// n_threads = 0 uses the process default.
Tensor matmul(const Tensor & a, const Tensor & w, int n_threads = 0);

/// Span form used by the forward pass: a is m x k, out is m x n.
void matmul(std::span<const float> a, int64_t m, int64_t k, const Tensor & w,
            std::span<float> out, int n_threads = 0);

Tensor rms_norm(const Tensor & x, const Tensor & weight, float eps = 1e-5f);
void rms_norm_row(std::span<const float> x, std::span<const float> weight, float eps,
                  std::span<float> out);

Tensor softmax_rows(const Tensor & x);
void softmax_inplace(std::span<float> row);

Tensor silu(const Tensor & x);
inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

struct RopeParams {
    double theta = 100000.0;
    int head_size = 0;

    void validate() const;
};

/// Rotates each (i, i + h/2) pair of a vector by pos * theta^(-2i/h).
void rope_rotate(std::span<float> vec, int64_t pos, const RopeParams & params);

/// x is heads x seq x head_size; positions has length seq.
Tensor rope_apply(const Tensor & x, std::span<const int64_t> positions, const RopeParams & params);

} // namespace danube
