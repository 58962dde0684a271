#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "danube/model.hpp"
#include "danube/quant.hpp"
#include "support/reference_model.hpp"

using namespace danube;
using namespace danube::testing;

namespace {

std::vector<int32_t> random_tokens(std::mt19937 & rng, int n, int vocab) {
    std::vector<int32_t> t(n);
    for (auto & x : t) x = static_cast<int32_t>(rng() % vocab);
    return t;
}

double max_rel_diff(std::span<const float> a, std::span<const double> b) {
    double scale = 0, diff = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        scale = std::max(scale, std::fabs(b[i]));
        diff = std::max(diff, std::fabs(a[i] - b[i]));
    }
    return diff / std::max(scale, 1e-30);
}

} // namespace

TEST_CASE("parameter count equals the per-tensor sum of a built model") {
    for (bool tied : {false, true}) {
        auto c = tiny_config();
        c.tied_embeddings = tied;
        const auto m = make_random_model(c, 1);
        int64_t n = m.weights().token_embd.numel() + m.weights().output_norm.numel();
        if (!tied) n += m.weights().output.numel();
        for (const auto & l : m.weights().layers) {
            for (const Tensor * t : {&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w_gate, &l.w_up,
                                     &l.w_down}) {
                n += t->numel();
            }
        }
        CHECK(count_parameters(c) == n);
    }
}

TEST_CASE("forward pass matches the float64 reference") {
    std::mt19937 rng(31);
    const auto m = make_random_model(tiny_config(), 2);
    const ReferenceModel ref(m);
    const auto toks = random_tokens(rng, 40, 600);
    KvCache cache(m.config(), 64);
    const auto logits = m.forward(toks, cache);
    const auto want = ref.logits(toks);
    CHECK(max_rel_diff(logits, want) < 1e-4);
    CHECK(cache.length() == 40);
    CHECK(cache.tokens() == toks);

    KvCache c2(m.config(), 64);
    const auto last = m.forward(toks, c2, LogitsMode::last);
    REQUIRE(last.size() == 600);
    CHECK(std::memcmp(last.data(), logits.data() + 39 * 600, 600 * sizeof(float)) == 0);
}

TEST_CASE("GQA with group size 1 equals multi-head attention oracle") {
    auto c = tiny_config();
    c.n_kv_heads = c.n_heads;
    const auto m = make_random_model(c, 3);
    const ReferenceModel ref(m);
    std::mt19937 rng(32);
    std::normal_distribution<float> n(0, 1);
    const int S = 24;
    std::vector<float> x(S * c.hidden_size);
    for (auto & v : x) v = n(rng);
    KvCache cache(c, S);
    const auto got = attention_block(x, S, m.weights().layers[0], c, cache, 0);
    const std::vector<double> xd(x.begin(), x.end());
    const auto want = ref.attention_only(xd, S, 0);
    double diff = 0;
    for (std::size_t i = 0; i < want.size(); ++i) diff = std::max(diff, std::fabs(got[i] - want[i]));
    CHECK(diff < 1e-5);
}

TEST_CASE("GQA equals MHA with key/value heads repeated per group") {
    const auto c = tiny_config(); // 4 query heads share 2 kv heads
    const auto g = make_random_model(c, 4);
    auto mc = c;
    mc.n_kv_heads = c.n_heads;
    // Expand wk/wv so head h uses kv head h / group.
    auto expand = [&](const Tensor & w) {
        const auto f = w.to_f32();
        std::vector<float> out;
        for (int h = 0; h < c.n_heads; ++h) {
            const int kvh = h / c.group_size();
            const auto * src = f.f32().data() + kvh * c.head_size * c.hidden_size;
            out.insert(out.end(), src, src + c.head_size * c.hidden_size);
        }
        return Tensor::from_f32({c.q_width(), c.hidden_size}, out);
    };
    ModelWeights w = g.weights();
    for (auto & l : w.layers) {
        l.wk = expand(l.wk);
        l.wv = expand(l.wv);
    }
    const Model mha(mc, w);
    std::mt19937 rng(33);
    const auto toks = random_tokens(rng, 30, 600);
    KvCache c1(c, 32), c2(mc, 32);
    const auto a = g.forward(toks, c1);
    const auto b = mha.forward(toks, c2);
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, double(std::fabs(a[i] - b[i])));
        scale = std::max(scale, double(std::fabs(b[i])));
    }
    CHECK(diff / scale < 1e-5);
}

TEST_CASE("incremental decoding matches batch recompute") {
    const auto m = make_random_model(tiny_config(), 5);
    std::mt19937 rng(34);
    for (int len : {1, 7, 33, 64}) {
        const auto toks = random_tokens(rng, len, 600);
        KvCache batch(m.config(), 64);
        const auto all = m.forward(toks, batch);
        KvCache inc(m.config(), 64);
        // prefill half, then one token at a time
        const int pre = len / 2;
        std::vector<float> got;
        if (pre > 0) {
            got = m.forward(std::span(toks).first(pre), inc);
        }
        for (int i = pre; i < len; ++i) {
            const auto step = m.forward(std::span(toks).subspan(i, 1), inc);
            got.insert(got.end(), step.begin(), step.end());
        }
        REQUIRE(got.size() == all.size());
        double diff = 0, scale = 0;
        for (std::size_t i = 0; i < all.size(); ++i) {
            diff = std::max(diff, double(std::fabs(got[i] - all[i])));
            scale = std::max(scale, double(std::fabs(all[i])));
        }
        CHECK(diff / scale < 1e-4);
    }
}

TEST_CASE("causality: later tokens never affect earlier logits") {
    const auto m = make_random_model(tiny_config(), 6);
    std::mt19937 rng(35);
    auto toks = random_tokens(rng, 20, 600);
    KvCache c1(m.config(), 32);
    const auto a = m.forward(toks, c1);
    toks[12] = (toks[12] + 1) % 600;
    KvCache c2(m.config(), 32);
    const auto b = m.forward(toks, c2);
    CHECK(std::memcmp(a.data(), b.data(), 12 * 600 * sizeof(float)) == 0);
    CHECK(std::memcmp(a.data() + 12 * 600, b.data() + 12 * 600, 600 * sizeof(float)) != 0);
}

TEST_CASE("forward is bit-identical across 1, 2 and 8 threads") {
    for (DType dt : {DType::f32, DType::q8_0, DType::q4_0}) {
        const auto m = make_random_model(tiny_config(), 7, dt);
        std::mt19937 rng(36);
        const auto toks = random_tokens(rng, 17, 600);
        std::vector<float> first;
        for (int threads : {1, 2, 8}) {
            KvCache c(m.config(), 32);
            auto out = m.forward(toks, c, LogitsMode::all, threads);
            const auto step = m.forward(std::vector<int32_t>{3}, c, LogitsMode::all, threads);
            out.insert(out.end(), step.begin(), step.end());
            if (first.empty()) {
                first = out;
            } else {
                CHECK(std::memcmp(first.data(), out.data(), out.size() * sizeof(float)) == 0);
            }
        }
    }
}

TEST_CASE("cache capacity, truncation and input validation") {
    const auto m = make_random_model(tiny_config(), 8);
    KvCache cache(m.config(), 8);
    const std::vector<int32_t> toks{1, 2, 3, 4, 5, 6};
    const auto full = m.forward(toks, cache);
    try {
        m.forward(std::vector<int32_t>{1, 2, 3}, cache);
        FAIL("expected capacity error");
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::capacity);
    }
    CHECK(cache.length() == 6);

    // Truncate and recompute the tail: same logits.
    cache.truncate(3);
    const auto tail = m.forward(std::span(toks).subspan(3), cache);
    double diff = 0;
    for (std::size_t i = 0; i < tail.size(); ++i) diff = std::max(diff, double(std::fabs(tail[i] - full[1800 + i])));
    CHECK(diff < 1e-4);
    CHECK_THROWS_AS(cache.truncate(7), Error);

    try {
        m.forward(std::vector<int32_t>{600}, cache);
        FAIL("expected input error");
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::input);
    }
    CHECK_THROWS_AS(KvCache(m.config(), 0), Error);
    CHECK_THROWS_AS(KvCache(m.config(), 513), Error);
}

TEST_CASE("weight shape mismatches are rejected") {
    const auto m = make_random_model(tiny_config(), 9);
    auto w = m.weights();
    w.layers[1].wk = Tensor::zeros({16, 64});
    CHECK_THROWS_AS(Model(m.config(), w), Error);
    w = m.weights();
    w.output = Tensor();
    CHECK_THROWS_AS(Model(m.config(), w), Error);
    auto c = m.config();
    c.n_kv_heads = 8;
    CHECK_THROWS_AS(Model(c, m.weights()), Error);
}

TEST_CASE("quantized models stay close to F32") {
    const auto m = make_random_model(tiny_config(), 10);
    const auto q8 = quantize_model(m, DType::q8_0);
    CHECK(q8.weight_dtype() == DType::q8_0);
    CHECK(q8.weights().layers[0].attn_norm.dtype() == DType::f32);
    CHECK(q8.weight_bytes() < m.weight_bytes() / 3);
    const ReferenceModel ref(q8);
    std::mt19937 rng(37);
    const auto toks = random_tokens(rng, 16, 600);
    KvCache c(q8.config(), 16);
    CHECK(max_rel_diff(q8.forward(toks, c), ref.logits(toks)) < 1e-4);
}
