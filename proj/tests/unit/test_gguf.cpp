#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "danube/gguf.hpp"
#include "danube/quant.hpp"

#include "support/gguf_gen.hpp"

using namespace danube;
using namespace danube::gguf;
using namespace danube::testing;

TEST_CASE("hand-built minimal file parses and re-serializes identically") {
    const auto bytes = minimal_file();
    const auto f = read_gguf(bytes);
    CHECK(f.version == 3);
    REQUIRE(f.metadata.size() == 2);
    CHECK(*f.metadata.find("general.architecture")->as_string() == "llama");
    CHECK(f.alignment() == 32);
    REQUIRE(f.tensors().size() == 1);
    const auto & t = f.tensors()[0];
    CHECK(t.name == "w");
    CHECK(t.shape() == Shape{2, 3});
    const auto w = f.tensor(t);
    CHECK(w.f32()[4] == 4.0f);
    CHECK(serialize(f) == bytes);
    CHECK(expected_size(f) == bytes.size());
}

TEST_CASE("smallest file: one 2x2 F32 tensor, no metadata, 16-byte payload") {
    Bytes b;
    b.v = {std::byte{'G'}, std::byte{'G'}, std::byte{'U'}, std::byte{'F'}};
    b.put<uint32_t>(3);
    b.put<uint64_t>(1);
    b.put<uint64_t>(0);
    b.str("t");
    b.put<uint32_t>(2);
    b.put<uint64_t>(2);
    b.put<uint64_t>(2);
    b.put<uint32_t>(0);
    b.put<uint64_t>(0);
    b.pad(32);
    for (float x : {1.0f, 2.0f, 3.0f, 4.0f}) b.put<float>(x);
    REQUIRE(b.v.size() == 96 + 16);
    const auto f = read_gguf(b.v);
    REQUIRE(f.tensors().size() == 1);
    CHECK(f.tensors()[0].n_bytes() == 16);
    CHECK(f.tensors()[0].offset % 32 == 0);
    CHECK(f.metadata.size() == 0);
    CHECK(f.tensor(f.tensors()[0]).to_f32().f32()[3] == 4.0f);
    // Re-serialized with the payload padded to the alignment.
    const auto again = serialize(f);
    CHECK(std::equal(b.v.begin(), b.v.end(), again.begin()));
    CHECK(again.size() == 128);
}

TEST_CASE("header errors carry the right kind") {
    auto kind_of = [](std::vector<std::byte> b) {
        try {
            read_gguf(b);
        } catch (const Error & e) {
            return e.kind();
        }
        return ErrorKind::io; // sentinel: no error
    };
    auto good = minimal_file();

    auto bad_magic = good;
    bad_magic[0] = std::byte{'X'};
    CHECK(kind_of(bad_magic) == ErrorKind::format);

    auto v2 = good;
    v2[4] = std::byte{2};
    CHECK(kind_of(v2) == ErrorKind::version);

    // Value type of the first KV is right after its key.
    auto bad_type = good;
    bad_type[24 + 8 + 20] = std::byte{77};
    CHECK(kind_of(bad_type) == ErrorKind::format);

    CHECK(kind_of({}) == ErrorKind::corruption);
    CHECK(kind_of(std::vector<std::byte>(good.begin(), good.begin() + 30)) == ErrorKind::corruption);
}

TEST_CASE("K-quant tensors are recognised but not loadable") {
    GgufFile f;
    std::vector<std::byte> block(210);
    f.add_tensor("q6", {256}, static_cast<uint32_t>(GgmlType::q6_k), block);
    const auto bytes = serialize(f);
    const auto g = read_gguf(bytes);
    CHECK(g.tensors()[0].n_bytes() == 210);
    try {
        g.tensor(g.tensors()[0]);
        FAIL("expected an error");
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::unsupported);
    }
    GgufFile h;
    CHECK_THROWS_AS(h.add_tensor("x", {32}, 99, block), Error);
}

TEST_CASE("tensor metadata mismatches are rejected") {
    GgufFile f;
    std::vector<std::byte> b(20);
    CHECK_THROWS_AS(f.add_tensor("x", {32}, static_cast<uint32_t>(GgmlType::q4_0), b), Error);
    f.add_tensor("x", {32}, static_cast<uint32_t>(GgmlType::q4_0), std::span(b).first(18));
    CHECK_THROWS_AS(f.add_tensor("x", {32}, static_cast<uint32_t>(GgmlType::q4_0), std::span(b).first(18)), Error);
}

TEST_CASE("property: write -> read -> write is byte-identical") {
    std::mt19937 rng(21);
    const auto dir = std::filesystem::temp_directory_path() / "danube_gguf_test";
    std::filesystem::create_directories(dir);
    for (int n = 0; n < 300; ++n) {
        const auto f = random_file(rng);
        const auto a = serialize(f);
        REQUIRE(a.size() == expected_size(f));
        const auto g = read_gguf(a);
        REQUIRE(g == f);
        REQUIRE(serialize(g) == a);
        if (n % 30 == 0) {
            const auto path = dir / ("f" + std::to_string(n) + ".gguf");
            write_gguf(g, path);
            const auto h = read_gguf(path);
            REQUIRE(h == f);
            REQUIRE(serialize(h) == a);
        }
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("fuzz: 1e4 truncations always raise") {
    std::mt19937 rng(22);
    std::vector<std::vector<std::byte>> files;
    std::vector<std::size_t> ends;
    while (files.size() < 50) {
        const auto f = random_file(rng);
        auto bytes = serialize(f);
        ends.push_back(content_end(f));
        files.push_back(std::move(bytes));
    }
    files.push_back(minimal_file());
    ends.push_back(content_end(read_gguf(files.back())));
    int raised = 0;
    for (int n = 0; n < 10000; ++n) {
        const std::size_t i = rng() % files.size();
        const std::size_t cut = rng() % ends[i];
        std::vector<std::byte> prefix(files[i].begin(), files[i].begin() + static_cast<std::ptrdiff_t>(cut));
        try {
            read_gguf(prefix);
        } catch (const Error &) {
            ++raised;
        }
    }
    CHECK(raised == 10000);
}

TEST_CASE("fuzz: random byte corruption never crashes") {
    std::mt19937 rng(23);
    const auto base = serialize(random_file(rng));
    const auto minimal = minimal_file();
    int parsed = 0, raised = 0;
    for (int n = 0; n < 5000; ++n) {
        auto b = n % 2 ? base : minimal;
        const int flips = 1 + static_cast<int>(rng() % 4);
        for (int k = 0; k < flips; ++k) {
            b[rng() % b.size()] = static_cast<std::byte>(rng());
        }
        try {
            const auto f = read_gguf(b);
            for (const auto & t : f.tensors()) {
                (void)f.tensor_bytes(t);
            }
            ++parsed;
        } catch (const Error &) {
            ++raised;
        }
    }
    CHECK(parsed + raised == 5000);
}

TEST_CASE("metadata map keeps insertion order and replaces in place") {
    Metadata m;
    m.set("b", Value(uint32_t{1}));
    m.set("a", Value("x"));
    m.set("b", Value(uint32_t{2}));
    REQUIRE(m.size() == 2);
    CHECK(m.entries()[0].first == "b");
    CHECK(m.find("b")->as_int() == 2);
    CHECK(m.erase("b"));
    CHECK(!m.find("b"));
    CHECK(Value(uint64_t{1} << 63).as_int() == std::nullopt);
    CHECK(Value(float{1.5f}).as_float() == 1.5);
}
