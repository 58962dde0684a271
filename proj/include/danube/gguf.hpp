#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "danube/tensor.hpp"

namespace danube::gguf {

inline constexpr uint32_t kVersion = 3;
inline constexpr uint64_t kDefaultAlignment = 32;

enum class ValueType : uint32_t {
    u8 = 0, i8 = 1, u16 = 2, i16 = 3, u32 = 4, i32 = 5, f32 = 6, boolean = 7,
    string = 8, array = 9, u64 = 10, i64 = 11, f64 = 12,
};

std::string_view to_string(ValueType t);

struct Value;

struct Array {
    ValueType elem_type = ValueType::u8;
    std::vector<Value> items;

    bool operator==(const Array &) const;
};

/// One typed metadata value. The variant index matches ValueType.
struct Value {
    using Storage = std::variant<uint8_t, int8_t, uint16_t, int16_t, uint32_t, int32_t, float, bool,
                                 std::string, Array, uint64_t, int64_t, double>;
    Storage data;

    Value() = default;
    template <typename T>
        requires std::is_constructible_v<Storage, T>
    Value(T v) : data(std::move(v)) {}
    Value(const char * s) : data(std::string(s)) {}

    ValueType type() const { return static_cast<ValueType>(data.index()); }

    /// Any integer type widened; nullopt for non-integers or out-of-range values.
    std::optional<int64_t> as_int() const;
    std::optional<double> as_float() const;
    const std::string * as_string() const { return std::get_if<std::string>(&data); }
    const Array * as_array() const { return std::get_if<Array>(&data); }

    bool operator==(const Value & o) const { return data == o.data; }
};

inline bool Array::operator==(const Array & o) const {
    return elem_type == o.elem_type && items == o.items;
}

/// Insertion-ordered key/value map; order is preserved on rewrite.
class Metadata {
public:
    const Value * find(std::string_view key) const;
    void set(std::string key, Value value);
    bool erase(std::string_view key);
    std::size_t size() const { return entries_.size(); }
    const auto & entries() const { return entries_; }

    bool operator==(const Metadata &) const = default;

private:
    std::vector<std::pair<std::string, Value>> entries_;
};

/// ggml tensor type ids.
enum class GgmlType : uint32_t {
    f32 = 0, f16 = 1, q4_0 = 2, q4_1 = 3, q5_0 = 6, q5_1 = 7, q8_0 = 8, q8_1 = 9,
    q2_k = 10, q3_k = 11, q4_k = 12, q5_k = 13, q6_k = 14, q8_k = 15, bf16 = 30,
};

std::string_view ggml_type_name(uint32_t type);
/// {block bytes, block elements} for every recognised id; nullopt otherwise.
std::optional<DTypeTraits> ggml_type_traits(uint32_t type);
/// The engine DType for a ggml id; throws unsupported for recognised but
/// non-loadable ids (K-quants, Q4_1, ...) and format for unknown ids.
DType to_dtype(uint32_t type);
uint32_t to_ggml(DType t);

struct TensorInfo {
    std::string name;
    std::vector<uint64_t> dims; // ggml order: dims[0] is the innermost
    uint32_t type = 0;
    uint64_t offset = 0;        // from payload start

    uint64_t n_elements() const;
    uint64_t n_bytes() const;   // throws if the type is unrecognised
    /// Row-major engine shape (dims reversed).
    Shape shape() const;

    bool operator==(const TensorInfo &) const = default;
};

/// Parsed GGUF container. Tensor bytes are not copied: they are views into
/// the mapped file (or into an owned buffer for files built in memory).
class GgufFile {
public:
    GgufFile() = default;

    uint32_t version = kVersion;
    Metadata metadata;

    const std::vector<TensorInfo> & tensors() const { return tensors_; }
    const TensorInfo * find_tensor(std::string_view name) const;

    uint64_t alignment() const;
    std::span<const std::byte> payload() const { return payload_; }
    std::span<const std::byte> tensor_bytes(const TensorInfo & info) const;
    /// Engine tensor viewing the payload (kept alive with the file's storage).
    Tensor tensor(const TensorInfo & info) const;

    /// Appends a tensor at the next aligned offset of the owned payload.
    void add_tensor(std::string name, std::vector<uint64_t> dims, uint32_t type,
                    std::span<const std::byte> bytes);
    void add_tensor(std::string name, const Tensor & t);

    /// Checks the structural invariants (unique names, aligned in-bounds
    /// non-overlapping regions, consistent byte sizes).
    void validate() const;

    static GgufFile parse(std::span<const std::byte> bytes, std::shared_ptr<const void> keepalive);

    bool operator==(const GgufFile & o) const;

private:
    std::vector<TensorInfo> tensors_;
    std::span<const std::byte> payload_;
    std::shared_ptr<const void> storage_;
    std::shared_ptr<std::vector<std::byte>> owned_;
};

/// Memory-maps and validates a GGUF v3 file.
GgufFile read_gguf(const std::filesystem::path & path);

/// Parses bytes that the caller keeps alive.
GgufFile read_gguf(std::span<const std::byte> bytes);

void write_gguf(const GgufFile & file, const std::filesystem::path & path);
std::vector<std::byte> serialize(const GgufFile & file);

} // namespace danube::gguf
