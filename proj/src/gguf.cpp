#include "danube/gguf.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

namespace danube::gguf {

namespace {

constexpr char kMagic[4] = {'G', 'G', 'U', 'F'};

uint64_t align_up(uint64_t x, uint64_t a) { return (x + a - 1) / a * a; }

// Read-only mapping of a whole file.
class MappedFile {
public:
    explicit MappedFile(const std::filesystem::path & path) {
        fd_ = ::open(path.c_str(), O_RDONLY);
        if (fd_ < 0) {
            fail(ErrorKind::io, "cannot open " + path.string() + ": " + std::strerror(errno));
        }
        struct stat st {};
        if (::fstat(fd_, &st) != 0) {
            ::close(fd_);
            fail(ErrorKind::io, "cannot stat " + path.string());
        }
        size_ = static_cast<std::size_t>(st.st_size);
        if (size_ > 0) {
            void * p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
            if (p == MAP_FAILED) {
                ::close(fd_);
                fail(ErrorKind::io, "cannot map " + path.string());
            }
            data_ = static_cast<const std::byte *>(p);
        }
    }
    ~MappedFile() {
        if (data_ != nullptr) {
            ::munmap(const_cast<std::byte *>(data_), size_);
        }
        if (fd_ >= 0) {
            ::close(fd_);
        }
    }
    MappedFile(const MappedFile &) = delete;
    MappedFile & operator=(const MappedFile &) = delete;

    std::span<const std::byte> bytes() const { return {data_, size_}; }

private:
    int fd_ = -1;
    const std::byte * data_ = nullptr;
    std::size_t size_ = 0;
};

// Bounds-checked little-endian cursor over the header region.
class Reader {
public:
    explicit Reader(std::span<const std::byte> bytes) : bytes_(bytes) {}

    void set_section(const char * section) { section_ = section; }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void need(uint64_t n) const {
        if (n > remaining()) {
            fail(ErrorKind::corruption, "truncated file at byte " + std::to_string(pos_) + " while reading " +
                                            section_ + " (need " + std::to_string(n) + " bytes, " +
                                            std::to_string(remaining()) + " left)");
        }
    }

    template <typename T>
    T read() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string read_string() {
        const uint64_t len = read<uint64_t>();
        need(len);
        std::string s(reinterpret_cast<const char *>(bytes_.data() + pos_), static_cast<std::size_t>(len));
        pos_ += static_cast<std::size_t>(len);
        return s;
    }

    void skip(std::size_t n) {
        need(n);
        pos_ += n;
    }

private:
    std::span<const std::byte> bytes_;
    std::size_t pos_ = 0;
    const char * section_ = "header";
};

// Smallest serialized size of one value of the type; used to bound counts
// before allocating.
std::size_t min_value_size(ValueType t) {
    switch (t) {
        case ValueType::u8: case ValueType::i8: case ValueType::boolean: return 1;
        case ValueType::u16: case ValueType::i16: return 2;
        case ValueType::u32: case ValueType::i32: case ValueType::f32: return 4;
        case ValueType::u64: case ValueType::i64: case ValueType::f64: case ValueType::string: return 8;
        case ValueType::array: return 12;
    }
    return 1;
}

bool valid_value_type(uint32_t t) { return t <= static_cast<uint32_t>(ValueType::f64); }

Value read_value(Reader & r, ValueType type, int depth);

Value read_value(Reader & r, ValueType type, int depth) {
    switch (type) {
        case ValueType::u8: return r.read<uint8_t>();
        case ValueType::i8: return r.read<int8_t>();
        case ValueType::u16: return r.read<uint16_t>();
        case ValueType::i16: return r.read<int16_t>();
        case ValueType::u32: return r.read<uint32_t>();
        case ValueType::i32: return r.read<int32_t>();
        case ValueType::f32: return r.read<float>();
        case ValueType::boolean: {
            const auto b = r.read<uint8_t>();
            if (b > 1) {
                fail(ErrorKind::format, "bool value out of range at byte " + std::to_string(r.pos() - 1));
            }
            return b != 0;
        }
        case ValueType::string: return r.read_string();
        case ValueType::u64: return r.read<uint64_t>();
        case ValueType::i64: return r.read<int64_t>();
        case ValueType::f64: return r.read<double>();
        case ValueType::array: {
            if (depth > 8) {
                fail(ErrorKind::format, "metadata arrays nested too deeply");
            }
            const uint32_t et = r.read<uint32_t>();
            if (!valid_value_type(et)) {
                fail(ErrorKind::format, "unknown array element type " + std::to_string(et) + " at byte " +
                                            std::to_string(r.pos() - 4));
            }
            const uint64_t count = r.read<uint64_t>();
            const auto etype = static_cast<ValueType>(et);
            if (count > r.remaining() / min_value_size(etype)) {
                fail(ErrorKind::corruption, "array of " + std::to_string(count) + " elements at byte " +
                                                std::to_string(r.pos()) + " exceeds the file size");
            }
            Array arr;
            arr.elem_type = etype;
            arr.items.reserve(static_cast<std::size_t>(count));
            for (uint64_t i = 0; i < count; ++i) {
                arr.items.push_back(read_value(r, etype, depth + 1));
            }
            return arr;
        }
    }
    fail(ErrorKind::format, "unknown metadata value type");
}

// Little-endian append-only writer.
class Writer {
public:
    explicit Writer(std::vector<std::byte> & out) : out_(out) {}

    template <typename T>
    void put(T v) {
        const auto * p = reinterpret_cast<const std::byte *>(&v);
        out_.insert(out_.end(), p, p + sizeof(T));
    }
    void put_string(const std::string & s) {
        put<uint64_t>(s.size());
        const auto * p = reinterpret_cast<const std::byte *>(s.data());
        out_.insert(out_.end(), p, p + s.size());
    }
    void put_value(const Value & v) {
        std::visit(
            [&](const auto & x) {
                using T = std::decay_t<decltype(x)>;
                if constexpr (std::is_same_v<T, std::string>) {
                    put_string(x);
                } else if constexpr (std::is_same_v<T, Array>) {
                    put<uint32_t>(static_cast<uint32_t>(x.elem_type));
                    put<uint64_t>(x.items.size());
                    for (const auto & item : x.items) {
                        if (item.type() != x.elem_type) {
                            fail(ErrorKind::validation, "array item type differs from element type");
                        }
                        put_value(item);
                    }
                } else if constexpr (std::is_same_v<T, bool>) {
                    put<uint8_t>(x ? 1 : 0);
                } else {
                    put<T>(x);
                }
            },
            v.data);
    }

private:
    std::vector<std::byte> & out_;
};

// Everything before the payload, including the alignment padding.
std::vector<std::byte> serialize_header(const GgufFile & file) {
    std::vector<std::byte> out;
    Writer w(out);
    for (char c : kMagic) {
        w.put<char>(c);
    }
    w.put<uint32_t>(file.version);
    w.put<uint64_t>(file.tensors().size());
    w.put<uint64_t>(file.metadata.size());
    for (const auto & [key, value] : file.metadata.entries()) {
        w.put_string(key);
        w.put<uint32_t>(static_cast<uint32_t>(value.type()));
        w.put_value(value);
    }
    for (const auto & t : file.tensors()) {
        w.put_string(t.name);
        w.put<uint32_t>(static_cast<uint32_t>(t.dims.size()));
        for (uint64_t d : t.dims) {
            w.put<uint64_t>(d);
        }
        w.put<uint32_t>(t.type);
        w.put<uint64_t>(t.offset);
    }
    out.resize(align_up(out.size(), file.alignment()), std::byte{0});
    return out;
}

// Payload length as written: end of the last region, padded to alignment.
uint64_t payload_extent(const GgufFile & file) {
    uint64_t end = 0;
    for (const auto & t : file.tensors()) {
        end = std::max(end, t.offset + t.n_bytes());
    }
    return align_up(end, file.alignment());
}

} // namespace

std::string_view to_string(ValueType t) {
    switch (t) {
        case ValueType::u8: return "u8";
        case ValueType::i8: return "i8";
        case ValueType::u16: return "u16";
        case ValueType::i16: return "i16";
        case ValueType::u32: return "u32";
        case ValueType::i32: return "i32";
        case ValueType::f32: return "f32";
        case ValueType::boolean: return "bool";
        case ValueType::string: return "string";
        case ValueType::array: return "array";
        case ValueType::u64: return "u64";
        case ValueType::i64: return "i64";
        case ValueType::f64: return "f64";
    }
    return "?";
}

std::optional<int64_t> Value::as_int() const {
    return std::visit(
        [](const auto & x) -> std::optional<int64_t> {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, uint64_t>) {
                if (x > static_cast<uint64_t>(INT64_MAX)) {
                    return std::nullopt;
                }
                return static_cast<int64_t>(x);
            } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
                return static_cast<int64_t>(x);
            } else {
                return std::nullopt;
            }
        },
        data);
}

std::optional<double> Value::as_float() const {
    if (const auto * f = std::get_if<float>(&data)) {
        return *f;
    }
    if (const auto * d = std::get_if<double>(&data)) {
        return *d;
    }
    if (auto i = as_int()) {
        return static_cast<double>(*i);
    }
    return std::nullopt;
}

const Value * Metadata::find(std::string_view key) const {
    for (const auto & [k, v] : entries_) {
        if (k == key) {
            return &v;
        }
    }
    return nullptr;
}

void Metadata::set(std::string key, Value value) {
    for (auto & [k, v] : entries_) {
        if (k == key) {
            v = std::move(value);
            return;
        }
    }
    entries_.emplace_back(std::move(key), std::move(value));
}

bool Metadata::erase(std::string_view key) {
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto & e) { return e.first == key; });
    if (it == entries_.end()) {
        return false;
    }
    entries_.erase(it);
    return true;
}

std::string_view ggml_type_name(uint32_t type) {
    switch (static_cast<GgmlType>(type)) {
        case GgmlType::f32: return "F32";
        case GgmlType::f16: return "F16";
        case GgmlType::q4_0: return "Q4_0";
        case GgmlType::q4_1: return "Q4_1";
        case GgmlType::q5_0: return "Q5_0";
        case GgmlType::q5_1: return "Q5_1";
        case GgmlType::q8_0: return "Q8_0";
        case GgmlType::q8_1: return "Q8_1";
        case GgmlType::q2_k: return "Q2_K";
        case GgmlType::q3_k: return "Q3_K";
        case GgmlType::q4_k: return "Q4_K";
        case GgmlType::q5_k: return "Q5_K";
        case GgmlType::q6_k: return "Q6_K";
        case GgmlType::q8_k: return "Q8_K";
        case GgmlType::bf16: return "BF16";
    }
    return "unknown";
}

std::optional<DTypeTraits> ggml_type_traits(uint32_t type) {
    switch (static_cast<GgmlType>(type)) {
        case GgmlType::f32: return DTypeTraits{4, 1};
        case GgmlType::f16: return DTypeTraits{2, 1};
        case GgmlType::bf16: return DTypeTraits{2, 1};
        case GgmlType::q4_0: return DTypeTraits{18, 32};
        case GgmlType::q4_1: return DTypeTraits{20, 32};
        case GgmlType::q5_0: return DTypeTraits{22, 32};
        case GgmlType::q5_1: return DTypeTraits{24, 32};
        case GgmlType::q8_0: return DTypeTraits{34, 32};
        case GgmlType::q8_1: return DTypeTraits{36, 32};
        case GgmlType::q2_k: return DTypeTraits{84, 256};
        case GgmlType::q3_k: return DTypeTraits{110, 256};
        case GgmlType::q4_k: return DTypeTraits{144, 256};
        case GgmlType::q5_k: return DTypeTraits{176, 256};
        case GgmlType::q6_k: return DTypeTraits{210, 256};
        case GgmlType::q8_k: return DTypeTraits{292, 256};
    }
    return std::nullopt;
}

DType to_dtype(uint32_t type) {
    switch (static_cast<GgmlType>(type)) {
        case GgmlType::f32: return DType::f32;
        case GgmlType::f16: return DType::f16;
        case GgmlType::q4_0: return DType::q4_0;
        case GgmlType::q8_0: return DType::q8_0;
        default: break;
    }
    if (ggml_type_traits(type)) {
        fail(ErrorKind::unsupported, "tensor type " + std::string(ggml_type_name(type)) +
                                         " is not supported by this engine (supported: F32, F16, Q8_0, Q4_0)");
    }
    fail(ErrorKind::format, "unknown ggml tensor type id " + std::to_string(type));
}

uint32_t to_ggml(DType t) {
    switch (t) {
        case DType::f32: return static_cast<uint32_t>(GgmlType::f32);
        case DType::f16: return static_cast<uint32_t>(GgmlType::f16);
        case DType::q8_0: return static_cast<uint32_t>(GgmlType::q8_0);
        case DType::q4_0: return static_cast<uint32_t>(GgmlType::q4_0);
    }
    return 0;
}

uint64_t TensorInfo::n_elements() const {
    uint64_t n = 1;
    for (uint64_t d : dims) {
        n *= d;
    }
    return n;
}

uint64_t TensorInfo::n_bytes() const {
    const auto tr = ggml_type_traits(type);
    if (!tr) {
        fail(ErrorKind::format, "tensor '" + name + "' has unknown type id " + std::to_string(type));
    }
    if (dims.empty() || dims[0] % tr->block_elems != 0) {
        fail(ErrorKind::validation, "tensor '" + name + "': row length is not a multiple of the block size");
    }
    return n_elements() / tr->block_elems * tr->block_bytes;
}

Shape TensorInfo::shape() const {
    Shape s;
    for (auto it = dims.rbegin(); it != dims.rend(); ++it) {
        s.push_back(static_cast<int64_t>(*it));
    }
    return s;
}

const TensorInfo * GgufFile::find_tensor(std::string_view name) const {
    for (const auto & t : tensors_) {
        if (t.name == name) {
            return &t;
        }
    }
    return nullptr;
}

uint64_t GgufFile::alignment() const {
    if (const Value * v = metadata.find("general.alignment")) {
        const auto a = v->as_int();
        if (!a || *a <= 0 || (*a & (*a - 1)) != 0) {
            fail(ErrorKind::format, "general.alignment must be a positive power of two");
        }
        return static_cast<uint64_t>(*a);
    }
    return kDefaultAlignment;
}

std::span<const std::byte> GgufFile::tensor_bytes(const TensorInfo & info) const {
    const uint64_t n = info.n_bytes();
    if (info.offset > payload_.size() || n > payload_.size() - info.offset) {
        fail(ErrorKind::corruption, "tensor '" + info.name + "' extends past the end of the payload");
    }
    return payload_.subspan(static_cast<std::size_t>(info.offset), static_cast<std::size_t>(n));
}

Tensor GgufFile::tensor(const TensorInfo & info) const {
    const DType dt = to_dtype(info.type);
    return Tensor::view(info.shape(), dt, tensor_bytes(info), storage_ ? storage_ : owned_);
}

void GgufFile::add_tensor(std::string name, std::vector<uint64_t> dims, uint32_t type,
                          std::span<const std::byte> bytes) {
    if (find_tensor(name) != nullptr) {
        fail(ErrorKind::validation, "duplicate tensor name '" + name + "'");
    }
    TensorInfo info{std::move(name), std::move(dims), type, 0};
    if (info.n_bytes() != bytes.size()) {
        fail(ErrorKind::validation, "tensor '" + info.name + "': byte length does not match dims and type");
    }
    if (!owned_ || owned_.use_count() > 1) {
        owned_ = std::make_shared<std::vector<std::byte>>(payload_.begin(), payload_.end());
        storage_.reset();
    }
    auto & buf = *owned_;
    info.offset = align_up(buf.size(), alignment());
    buf.resize(static_cast<std::size_t>(info.offset), std::byte{0});
    buf.insert(buf.end(), bytes.begin(), bytes.end());
    buf.resize(static_cast<std::size_t>(align_up(buf.size(), alignment())), std::byte{0});
    payload_ = std::span<const std::byte>(buf.data(), buf.size());
    tensors_.push_back(std::move(info));
}

void GgufFile::add_tensor(std::string name, const Tensor & t) {
    std::vector<uint64_t> dims;
    for (auto it = t.shape().rbegin(); it != t.shape().rend(); ++it) {
        dims.push_back(static_cast<uint64_t>(*it));
    }
    add_tensor(std::move(name), std::move(dims), to_ggml(t.dtype()), t.bytes());
}

void GgufFile::validate() const {
    if (version != kVersion) {
        fail(ErrorKind::version, "GGUF version " + std::to_string(version) + " is not supported (only v3)");
    }
    const uint64_t align = alignment();
    std::set<std::string> names;
    std::vector<std::pair<uint64_t, uint64_t>> regions;
    for (const auto & t : tensors_) {
        if (!names.insert(t.name).second) {
            fail(ErrorKind::validation, "duplicate tensor name '" + t.name + "'");
        }
        if (t.dims.empty() || t.dims.size() > 4) {
            fail(ErrorKind::validation, "tensor '" + t.name + "' must have 1 to 4 dimensions");
        }
        for (uint64_t d : t.dims) {
            if (d == 0 || d > (uint64_t{1} << 40)) {
                fail(ErrorKind::validation, "tensor '" + t.name + "' has an invalid dimension");
            }
        }
        uint64_t elems = 1;
        for (uint64_t d : t.dims) {
            if (elems > (uint64_t{1} << 48) / d) {
                fail(ErrorKind::validation, "tensor '" + t.name + "' is implausibly large");
            }
            elems *= d;
        }
        if (t.offset % align != 0) {
            fail(ErrorKind::validation, "tensor '" + t.name + "' offset is not aligned");
        }
        const uint64_t n = t.n_bytes();
        if (t.offset > payload_.size() || n > payload_.size() - t.offset) {
            fail(ErrorKind::corruption, "tensor '" + t.name + "' data region (offset " + std::to_string(t.offset) +
                                            ", " + std::to_string(n) + " bytes) exceeds payload of " +
                                            std::to_string(payload_.size()) + " bytes");
        }
        regions.emplace_back(t.offset, t.offset + n);
    }
    std::sort(regions.begin(), regions.end());
    for (std::size_t i = 1; i < regions.size(); ++i) {
        if (regions[i].first < regions[i - 1].second) {
            fail(ErrorKind::validation, "tensor data regions overlap");
        }
    }
}

GgufFile GgufFile::parse(std::span<const std::byte> bytes, std::shared_ptr<const void> keepalive) {
    Reader r(bytes);
    r.set_section("magic");
    r.need(4);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        fail(ErrorKind::format, "bad magic: file does not start with \"GGUF\"");
    }
    r.skip(4);
    GgufFile file;
    r.set_section("header");
    file.version = r.read<uint32_t>();
    if (file.version != kVersion) {
        fail(ErrorKind::version, "GGUF version " + std::to_string(file.version) + " is not supported (only v3)");
    }
    const uint64_t n_tensors = r.read<uint64_t>();
    const uint64_t n_kv = r.read<uint64_t>();
    if (n_kv > r.remaining() / 12 || n_tensors > r.remaining() / 24) {
        fail(ErrorKind::corruption, "truncated file at byte " + std::to_string(r.pos()) +
                                        " while reading header: " + std::to_string(n_tensors) + " tensors and " +
                                        std::to_string(n_kv) + " metadata pairs cannot fit in the " +
                                        std::to_string(r.remaining()) + " bytes left");
    }

    r.set_section("metadata");
    for (uint64_t i = 0; i < n_kv; ++i) {
        std::string key = r.read_string();
        const uint32_t type = r.read<uint32_t>();
        if (!valid_value_type(type)) {
            fail(ErrorKind::format, "unknown metadata value type " + std::to_string(type) + " for key '" + key +
                                        "' at byte " + std::to_string(r.pos() - 4));
        }
        if (file.metadata.find(key) != nullptr) {
            fail(ErrorKind::format, "duplicate metadata key '" + key + "'");
        }
        Value v = read_value(r, static_cast<ValueType>(type), 0);
        file.metadata.set(std::move(key), std::move(v));
    }

    r.set_section("tensor directory");
    file.tensors_.reserve(static_cast<std::size_t>(n_tensors));
    for (uint64_t i = 0; i < n_tensors; ++i) {
        TensorInfo info;
        info.name = r.read_string();
        const uint32_t n_dims = r.read<uint32_t>();
        if (n_dims == 0 || n_dims > 4) {
            fail(ErrorKind::format, "tensor '" + info.name + "' has " + std::to_string(n_dims) + " dimensions");
        }
        for (uint32_t d = 0; d < n_dims; ++d) {
            info.dims.push_back(r.read<uint64_t>());
        }
        info.type = r.read<uint32_t>();
        if (!ggml_type_traits(info.type)) {
            fail(ErrorKind::format, "tensor '" + info.name + "' has unknown type id " + std::to_string(info.type));
        }
        info.offset = r.read<uint64_t>();
        file.tensors_.push_back(std::move(info));
    }

    const uint64_t align = file.alignment();
    const uint64_t data_start = align_up(r.pos(), align);
    if (data_start > bytes.size()) {
        if (!file.tensors_.empty()) {
            fail(ErrorKind::corruption, "truncated file at byte " + std::to_string(bytes.size()) +
                                            " while reading tensor data: payload starts at byte " +
                                            std::to_string(data_start));
        }
    }
    file.payload_ = data_start <= bytes.size() ? bytes.subspan(static_cast<std::size_t>(data_start))
                                               : std::span<const std::byte>{};
    file.storage_ = std::move(keepalive);
    r.set_section("tensor data");
    file.validate();
    return file;
}

bool GgufFile::operator==(const GgufFile & o) const {
    if (version != o.version || !(metadata == o.metadata) || tensors_ != o.tensors_) {
        return false;
    }
    for (const auto & t : tensors_) {
        const auto a = tensor_bytes(t);
        const auto b = o.tensor_bytes(t);
        if (!std::equal(a.begin(), a.end(), b.begin(), b.end())) {
            return false;
        }
    }
    return true;
}

GgufFile read_gguf(const std::filesystem::path & path) {
    auto mapped = std::make_shared<MappedFile>(path);
    const auto bytes = mapped->bytes();
    return GgufFile::parse(bytes, std::move(mapped));
}

GgufFile read_gguf(std::span<const std::byte> bytes) { return GgufFile::parse(bytes, nullptr); }

std::vector<std::byte> serialize(const GgufFile & file) {
    file.validate();
    std::vector<std::byte> out = serialize_header(file);
    const std::size_t data_start = out.size();
    out.resize(data_start + static_cast<std::size_t>(payload_extent(file)), std::byte{0});
    for (const auto & t : file.tensors()) {
        const auto src = file.tensor_bytes(t);
        std::memcpy(out.data() + data_start + t.offset, src.data(), src.size());
    }
    return out;
}

void write_gguf(const GgufFile & file, const std::filesystem::path & path) {
    file.validate();
    const auto header = serialize_header(file);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
    }
    os.write(reinterpret_cast<const char *>(header.data()), static_cast<std::streamsize>(header.size()));
    // Stream tensors in offset order, zero-filling the gaps.
    std::vector<const TensorInfo *> order;
    for (const auto & t : file.tensors()) {
        order.push_back(&t);
    }
    std::sort(order.begin(), order.end(), [](auto * a, auto * b) { return a->offset < b->offset; });
    const std::vector<char> zeros(static_cast<std::size_t>(file.alignment()), 0);
    uint64_t pos = 0;
    auto pad_to = [&](uint64_t target) {
        while (pos < target) {
            const uint64_t n = std::min<uint64_t>(target - pos, zeros.size());
            os.write(zeros.data(), static_cast<std::streamsize>(n));
            pos += n;
        }
    };
    for (const auto * t : order) {
        pad_to(t->offset);
        const auto src = file.tensor_bytes(*t);
        os.write(reinterpret_cast<const char *>(src.data()), static_cast<std::streamsize>(src.size()));
        pos += src.size();
    }
    pad_to(payload_extent(file));
    if (!os) {
        fail(ErrorKind::io, "write to " + path.string() + " failed");
    }
}

} // namespace danube::gguf
