#include "danube/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <numeric>
#include <string>

#include "danube/quant.hpp"
#include "danube/threading.hpp"

namespace danube {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::shape: return "shape";
        case ErrorKind::format: return "format";
        case ErrorKind::version: return "version";
        case ErrorKind::corruption: return "corruption";
        case ErrorKind::config: return "config";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::unsupported: return "unsupported-format";
        case ErrorKind::schema: return "schema";
        case ErrorKind::validation: return "validation";
        case ErrorKind::capacity: return "capacity";
        case ErrorKind::input: return "input";
        case ErrorKind::degenerate: return "degenerate-distribution";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

std::string_view to_string(DType t) {
    switch (t) {
        case DType::f32: return "F32";
        case DType::f16: return "F16";
        case DType::q8_0: return "Q8_0";
        case DType::q4_0: return "Q4_0";
    }
    return "?";
}

std::size_t row_bytes(DType t, int64_t n) {
    const auto tr = traits(t);
    if (n < 0 || n % static_cast<int64_t>(tr.block_elems) != 0) {
        fail(ErrorKind::format, "row of " + std::to_string(n) + " elements is not a whole number of " +
                                    std::string(to_string(t)) + " blocks");
    }
    return static_cast<std::size_t>(n) / tr.block_elems * tr.block_bytes;
}

int64_t numel(const Shape & shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        n *= d;
    }
    return shape.empty() ? 0 : n;
}

std::size_t validate_layout(const Shape & shape, DType dtype) {
    if (shape.empty()) {
        fail(ErrorKind::shape, "tensor must have at least one dimension");
    }
    for (int64_t d : shape) {
        if (d < 1) {
            fail(ErrorKind::shape, "tensor dimensions must be >= 1");
        }
    }
    const int64_t cols = shape.back();
    return row_bytes(dtype, cols) * static_cast<std::size_t>(numel(shape) / cols);
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
    const std::size_t nbytes = validate_layout(shape, dtype);
    Tensor t(std::move(shape), dtype);
    t.owned_.assign(nbytes, std::byte{0});
    return t;
}

Tensor Tensor::from_f32(Shape shape, std::vector<float> values) {
    const std::size_t nbytes = validate_layout(shape, DType::f32);
    if (values.size() * sizeof(float) != nbytes) {
        fail(ErrorKind::shape, "value count does not match shape");
    }
    Tensor t(std::move(shape), DType::f32);
    t.owned_.resize(nbytes);
    std::memcpy(t.owned_.data(), values.data(), nbytes);
    return t;
}

Tensor Tensor::from_bytes(Shape shape, DType dtype, std::vector<std::byte> bytes) {
    const std::size_t nbytes = validate_layout(shape, dtype);
    if (bytes.size() != nbytes) {
        fail(ErrorKind::shape, "byte length " + std::to_string(bytes.size()) + " does not match shape (" +
                                   std::to_string(nbytes) + ")");
    }
    Tensor t(std::move(shape), dtype);
    t.owned_ = std::move(bytes);
    return t;
}

Tensor Tensor::view(Shape shape, DType dtype, std::span<const std::byte> bytes,
                    std::shared_ptr<const void> keepalive) {
    const std::size_t nbytes = validate_layout(shape, dtype);
    if (bytes.size() != nbytes) {
        fail(ErrorKind::shape, "view length does not match shape");
    }
    Tensor t(std::move(shape), dtype);
    t.view_ = bytes;
    t.keepalive_ = keepalive ? std::move(keepalive) : std::make_shared<int>(0);
    return t;
}

std::span<const std::byte> Tensor::bytes() const {
    if (keepalive_) {
        return view_;
    }
    return owned_;
}

std::span<std::byte> Tensor::mutable_bytes() {
    if (keepalive_) {
        fail(ErrorKind::validation, "tensor view is read-only");
    }
    return owned_;
}

void Tensor::check_f32() const {
    if (dtype_ != DType::f32) {
        fail(ErrorKind::format, "expected F32 tensor, got " + std::string(to_string(dtype_)));
    }
}

std::span<const float> Tensor::f32() const {
    check_f32();
    const auto b = bytes();
    return {reinterpret_cast<const float *>(b.data()), b.size() / sizeof(float)};
}

std::span<float> Tensor::f32() {
    check_f32();
    auto b = mutable_bytes();
    return {reinterpret_cast<float *>(b.data()), b.size() / sizeof(float)};
}

std::span<const std::byte> Tensor::row(int64_t r) const {
    const std::size_t rb = row_bytes(dtype_, cols());
    return bytes().subspan(static_cast<std::size_t>(r) * rb, rb);
}

Tensor Tensor::reshaped(Shape shape) const {
    if (danube::numel(shape) != numel()) {
        fail(ErrorKind::shape, "reshape must preserve element count");
    }
    Tensor t = *this;
    validate_layout(shape, dtype_);
    t.shape_ = std::move(shape);
    return t;
}

Tensor Tensor::to_f32() const {
    if (dtype_ == DType::f32) {
        const auto b = bytes();
        return from_bytes(shape_, DType::f32, {b.begin(), b.end()});
    }
    Tensor out = zeros(shape_, DType::f32);
    auto dst = out.f32();
    const int64_t c = cols();
    for (int64_t r = 0; r < rows(); ++r) {
        dequantize_row(row(r), dtype_, dst.subspan(static_cast<std::size_t>(r * c), static_cast<std::size_t>(c)));
    }
    return out;
}

void matmul(std::span<const float> a, int64_t m, int64_t k, const Tensor & w, std::span<float> out,
            int n_threads) {
    if (w.ndim() != 2) {
        fail(ErrorKind::shape, "matmul weight must be 2-D");
    }
    const int64_t n = w.dim(0);
    if (w.dim(1) != k) {
        fail(ErrorKind::shape, "matmul inner dimensions differ: " + std::to_string(k) + " vs " +
                                   std::to_string(w.dim(1)));
    }
    row_bytes(w.dtype(), k);
    if (static_cast<int64_t>(a.size()) != m * k || static_cast<int64_t>(out.size()) != m * n) {
        fail(ErrorKind::shape, "matmul buffer sizes do not match dimensions");
    }
    const DType dt = w.dtype();
    const std::size_t rb = row_bytes(dt, k);
    const auto wb = w.bytes();
    // Split over weight rows; each output element is one sequential vec_dot.
    parallel_for(static_cast<std::size_t>(n), n_threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t j = begin; j < end; ++j) {
            const auto wrow = wb.subspan(j * rb, rb);
            for (int64_t i = 0; i < m; ++i) {
                out[i * n + j] = vec_dot(a.subspan(i * k, k), wrow, dt);
            }
        }
    });
}

Tensor matmul(const Tensor & a, const Tensor & w, int n_threads) {
    if (a.dtype() != DType::f32) {
        fail(ErrorKind::format, "matmul activations must be F32");
    }
    if (a.ndim() != 2 || w.ndim() != 2) {
        fail(ErrorKind::shape, "matmul expects 2-D operands");
    }
    if (a.dim(1) != w.dim(1)) {
        fail(ErrorKind::shape, "matmul inner dimensions differ: " + std::to_string(a.dim(1)) + " vs " +
                                   std::to_string(w.dim(1)));
    }
    Tensor out = Tensor::zeros({a.dim(0), w.dim(0)});
    matmul(a.f32(), a.dim(0), a.dim(1), w, out.f32(), n_threads);
    return out;
}

void rms_norm_row(std::span<const float> x, std::span<const float> weight, float eps, std::span<float> out) {
    if (x.size() != weight.size() || out.size() != x.size()) {
        fail(ErrorKind::shape, "rms_norm: length mismatch");
    }
    float ss = 0.0f;
    for (float v : x) {
        ss += v * v;
    }
    const float scale = 1.0f / std::sqrt(ss / static_cast<float>(x.size()) + eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * scale * weight[i];
    }
}

Tensor rms_norm(const Tensor & x, const Tensor & weight, float eps) {
    if (weight.ndim() != 1 || weight.dim(0) != x.cols()) {
        fail(ErrorKind::shape, "rms_norm: weight length must equal the last dimension of x");
    }
    const auto w = weight.to_f32();
    Tensor out = Tensor::zeros(x.shape());
    const auto src = x.f32();
    auto dst = out.f32();
    const std::size_t h = static_cast<std::size_t>(x.cols());
    for (int64_t r = 0; r < x.rows(); ++r) {
        rms_norm_row(src.subspan(r * h, h), w.f32(), eps, dst.subspan(r * h, h));
    }
    return out;
}

void softmax_inplace(std::span<float> row) {
    if (row.empty()) {
        return;
    }
    const float mx = *std::max_element(row.begin(), row.end());
    if (mx == -std::numeric_limits<float>::infinity()) {
        // fully masked row: define as uniform zero mass
        std::fill(row.begin(), row.end(), 0.0f);
        return;
    }
    float sum = 0.0f;
    for (float & v : row) {
        v = std::exp(v - mx);
        sum += v;
    }
    const float inv = 1.0f / sum;
    for (float & v : row) {
        v *= inv;
    }
}

Tensor softmax_rows(const Tensor & x) {
    Tensor out = x.to_f32();
    auto d = out.f32();
    const std::size_t n = static_cast<std::size_t>(x.cols());
    for (int64_t r = 0; r < x.rows(); ++r) {
        softmax_inplace(d.subspan(r * n, n));
    }
    return out;
}

Tensor silu(const Tensor & x) {
    Tensor out = Tensor::zeros(x.shape());
    const auto src = x.f32();
    auto dst = out.f32();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = silu(src[i]);
    }
    return out;
}

void RopeParams::validate() const {
    if (!(theta > 0.0)) {
        fail(ErrorKind::config, "rope theta must be positive");
    }
    if (head_size <= 0 || head_size % 2 != 0) {
        fail(ErrorKind::config, "rope head size must be a positive even number, got " + std::to_string(head_size));
    }
}

void rope_rotate(std::span<float> vec, int64_t pos, const RopeParams & params) {
    const int h = params.head_size;
    const int half = h / 2;
    if (static_cast<int>(vec.size()) != h) {
        fail(ErrorKind::shape, "rope: vector length must equal head size");
    }
    if (pos == 0) {
        return;
    }
    for (int i = 0; i < half; ++i) {
        const double freq = std::pow(params.theta, -2.0 * i / h);
        const double angle = static_cast<double>(pos) * freq;
        const float c = static_cast<float>(std::cos(angle));
        const float s = static_cast<float>(std::sin(angle));
        const float x0 = vec[i];
        const float x1 = vec[i + half];
        vec[i] = x0 * c - x1 * s;
        vec[i + half] = x0 * s + x1 * c;
    }
}

Tensor rope_apply(const Tensor & x, std::span<const int64_t> positions, const RopeParams & params) {
    params.validate();
    if (x.ndim() != 3 || x.dim(2) != params.head_size) {
        fail(ErrorKind::shape, "rope_apply expects heads x seq x head_size");
    }
    if (static_cast<int64_t>(positions.size()) != x.dim(1)) {
        fail(ErrorKind::shape, "rope_apply: positions length must equal seq");
    }
    Tensor out = x.to_f32();
    auto d = out.f32();
    const std::size_t h = static_cast<std::size_t>(params.head_size);
    for (int64_t head = 0; head < x.dim(0); ++head) {
        for (int64_t s = 0; s < x.dim(1); ++s) {
            rope_rotate(d.subspan((head * x.dim(1) + s) * h, h), positions[s], params);
        }
    }
    return out;
}

} // namespace danube
