#include "danube/loader.hpp"

#include <cstring>
#include <map>

namespace danube {

using gguf::Array;
using gguf::Metadata;
using gguf::Value;
using gguf::ValueType;

namespace {

const Value & require_key(const Metadata & md, const std::string & key) {
    const Value * v = md.find(key);
    if (!v) {
        fail(ErrorKind::schema, "missing required metadata key '" + key + "'");
    }
    return *v;
}

int64_t require_int(const Metadata & md, const std::string & key) {
    const auto v = require_key(md, key).as_int();
    if (!v) {
        fail(ErrorKind::schema, "metadata key '" + key + "' must be an integer");
    }
    return *v;
}

std::optional<int64_t> opt_int(const Metadata & md, const std::string & key) {
    const Value * v = md.find(key);
    if (!v) {
        return std::nullopt;
    }
    const auto i = v->as_int();
    if (!i) {
        fail(ErrorKind::schema, "metadata key '" + key + "' must be an integer");
    }
    return i;
}

std::optional<double> opt_float(const Metadata & md, const std::string & key) {
    const Value * v = md.find(key);
    if (!v) {
        return std::nullopt;
    }
    const auto f = v->as_float();
    if (!f) {
        fail(ErrorKind::schema, "metadata key '" + key + "' must be a number");
    }
    return f;
}

std::optional<bool> opt_bool(const Metadata & md, const std::string & key) {
    const Value * v = md.find(key);
    if (!v) {
        return std::nullopt;
    }
    if (const bool * b = std::get_if<bool>(&v->data)) {
        return *b;
    }
    fail(ErrorKind::schema, "metadata key '" + key + "' must be a bool");
}

std::string architecture_of(const Metadata & md) {
    const auto * s = require_key(md, "general.architecture").as_string();
    if (!s) {
        fail(ErrorKind::schema, "general.architecture must be a string");
    }
    return *s;
}

const Array & require_array(const Metadata & md, const std::string & key) {
    const Array * a = require_key(md, key).as_array();
    if (!a) {
        fail(ErrorKind::schema, "metadata key '" + key + "' must be an array");
    }
    return *a;
}

int32_t to_i32(int64_t v, const std::string & what) {
    if (v < 0 || v > INT32_MAX) {
        fail(ErrorKind::schema, what + " out of range");
    }
    return static_cast<int32_t>(v);
}

Tensor permute_rows(const Tensor & w, int n_heads, bool forward) {
    if (w.ndim() != 2 || w.rows() % n_heads != 0 || (w.rows() / n_heads) % 2 != 0) {
        fail(ErrorKind::shape, "Q/K permutation needs rows divisible by 2 * heads");
    }
    const int64_t hs = w.rows() / n_heads;
    const int64_t half = hs / 2;
    const std::size_t rb = row_bytes(w.dtype(), w.cols());
    std::vector<std::byte> out(w.bytes().size());
    for (int64_t h = 0; h < n_heads; ++h) {
        for (int64_t i = 0; i < half; ++i) {
            for (int64_t j = 0; j < 2; ++j) {
                const int64_t split = h * hs + j * half + i;
                const int64_t inter = h * hs + 2 * i + j;
                const int64_t src = forward ? split : inter;
                const int64_t dst = forward ? inter : split;
                std::memcpy(out.data() + dst * rb, w.row(src).data(), rb);
            }
        }
    }
    return Tensor::from_bytes(w.shape(), w.dtype(), std::move(out));
}

} // namespace

Tensor permute_qk(const Tensor & w, int n_heads) { return permute_rows(w, n_heads, true); }
Tensor unpermute_qk(const Tensor & w, int n_heads) { return permute_rows(w, n_heads, false); }

ModelConfig config_from_metadata(const Metadata & md) {
    const std::string a = architecture_of(md);
    ModelConfig c;
    c.n_layers = static_cast<int>(require_int(md, a + ".block_count"));
    c.hidden_size = static_cast<int>(require_int(md, a + ".embedding_length"));
    c.intermediate_size = static_cast<int>(require_int(md, a + ".feed_forward_length"));
    c.n_heads = static_cast<int>(require_int(md, a + ".attention.head_count"));
    c.n_kv_heads = static_cast<int>(opt_int(md, a + ".attention.head_count_kv").value_or(c.n_heads));
    c.max_context = static_cast<int>(require_int(md, a + ".context_length"));
    const Value & theta = require_key(md, a + ".rope.freq_base");
    if (!theta.as_float()) {
        fail(ErrorKind::schema, "metadata key '" + a + ".rope.freq_base' must be a number");
    }
    c.rope_theta = *theta.as_float();
    c.rms_eps = static_cast<float>(opt_float(md, a + ".attention.layer_norm_rms_epsilon").value_or(1e-5));
    if (c.n_heads <= 0) {
        fail(ErrorKind::config, "attention.head_count must be positive");
    }
    c.head_size = static_cast<int>(opt_int(md, a + ".attention.key_length").value_or(c.hidden_size / c.n_heads));
    if (auto v = opt_int(md, a + ".vocab_size")) {
        c.vocab_size = static_cast<int>(*v);
    } else if (const Value * toks = md.find("tokenizer.ggml.tokens"); toks && toks->as_array()) {
        c.vocab_size = static_cast<int>(toks->as_array()->items.size());
    } else {
        c.vocab_size = 0; // filled from token_embd by the loader
    }
    return c;
}

std::optional<Vocabulary> vocab_from_metadata(const Metadata & md) {
    if (!md.find("tokenizer.ggml.tokens")) {
        return std::nullopt;
    }
    if (const Value * m = md.find("tokenizer.ggml.model")) {
        if (!m->as_string() || *m->as_string() != "llama") {
            fail(ErrorKind::unsupported, "tokenizer model '" + (m->as_string() ? *m->as_string() : std::string("?")) +
                                             "' is not supported (only SentencePiece 'llama')");
        }
    }
    Vocabulary v;
    const Array & toks = require_array(md, "tokenizer.ggml.tokens");
    const Array & scores = require_array(md, "tokenizer.ggml.scores");
    const Array & types = require_array(md, "tokenizer.ggml.token_type");
    v.tokens.reserve(toks.items.size());
    for (const auto & t : toks.items) {
        if (!t.as_string()) {
            fail(ErrorKind::schema, "tokenizer.ggml.tokens must hold strings");
        }
        v.tokens.push_back(*t.as_string());
    }
    for (const auto & s : scores.items) {
        const auto f = s.as_float();
        if (!f) {
            fail(ErrorKind::schema, "tokenizer.ggml.scores must hold numbers");
        }
        v.scores.push_back(static_cast<float>(*f));
    }
    for (const auto & t : types.items) {
        const auto i = t.as_int();
        if (!i || *i < 0 || *i > 6) {
            fail(ErrorKind::schema, "tokenizer.ggml.token_type holds an invalid type");
        }
        v.types.push_back(static_cast<TokenType>(*i));
    }
    v.bos_id = to_i32(opt_int(md, "tokenizer.ggml.bos_token_id").value_or(1), "bos_token_id");
    v.eos_id = to_i32(opt_int(md, "tokenizer.ggml.eos_token_id").value_or(2), "eos_token_id");
    v.unk_id = to_i32(opt_int(md, "tokenizer.ggml.unknown_token_id").value_or(0), "unknown_token_id");
    v.add_bos = opt_bool(md, "tokenizer.ggml.add_bos_token").value_or(true);
    v.add_space_prefix = opt_bool(md, "tokenizer.ggml.add_space_prefix").value_or(true);
    v.validate();
    return v;
}

LoadedModel load_model(const gguf::GgufFile & file, const LoadOptions & options) {
    const auto & md = file.metadata;
    ModelConfig config = config_from_metadata(md);
    const std::string arch = architecture_of(md);

    std::map<std::string, const gguf::TensorInfo *> by_name;
    for (const auto & t : file.tensors()) {
        if (t.name.ends_with(".bias")) {
            fail(ErrorKind::validation, "unexpected bias tensor '" + t.name + "': this architecture has no biases");
        }
        by_name[t.name] = &t;
    }

    auto take = [&](const std::string & name) -> Tensor {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            fail(ErrorKind::validation, "missing tensor '" + name + "'");
        }
        const gguf::TensorInfo & info = *it->second;
        by_name.erase(it);
        try {
            return file.tensor(info);
        } catch (const Error & e) {
            if (e.kind() == ErrorKind::unsupported) {
                fail(ErrorKind::unsupported, "tensor '" + name + "' is stored as " +
                                                 std::string(gguf::ggml_type_name(info.type)) +
                                                 ", which this engine cannot load (supported: F32, F16, Q8_0, Q4_0)");
            }
            throw;
        }
    };

    ModelWeights w;
    w.token_embd = take("token_embd.weight");
    if (w.token_embd.ndim() != 2) {
        fail(ErrorKind::validation, "token_embd.weight must be 2-D");
    }
    if (config.vocab_size == 0) {
        config.vocab_size = static_cast<int>(w.token_embd.dim(0));
    }
    config.tied_embeddings = !by_name.contains("output.weight");
    try {
        config.validate();
    } catch (const Error & e) {
        fail(ErrorKind::validation, std::string("inconsistent model metadata: ") + e.what());
    }

    // The standard converter permutes Q/K for interleaved RoPE.
    const bool permuted = arch == "llama";
    for (int l = 0; l < config.n_layers; ++l) {
        const std::string p = "blk." + std::to_string(l) + ".";
        LayerWeights lw;
        lw.attn_norm = take(p + "attn_norm.weight");
        lw.wq = take(p + "attn_q.weight");
        lw.wk = take(p + "attn_k.weight");
        lw.wv = take(p + "attn_v.weight");
        lw.wo = take(p + "attn_output.weight");
        lw.ffn_norm = take(p + "ffn_norm.weight");
        lw.w_gate = take(p + "ffn_gate.weight");
        lw.w_up = take(p + "ffn_up.weight");
        lw.w_down = take(p + "ffn_down.weight");
        if (lw.wq.shape() != Shape{config.q_width(), config.hidden_size} ||
            lw.wk.shape() != Shape{config.kv_width(), config.hidden_size}) {
            fail(ErrorKind::validation, "layer " + std::to_string(l) + ": Q/K shapes do not match the configured heads");
        }
        if (permuted) {
            lw.wq = unpermute_qk(lw.wq, config.n_heads);
            lw.wk = unpermute_qk(lw.wk, config.n_kv_heads);
        }
        w.layers.push_back(std::move(lw));
    }
    w.output_norm = take("output_norm.weight");
    if (!config.tied_embeddings) {
        w.output = take("output.weight");
    }

    std::optional<Vocabulary> vocab = vocab_from_metadata(md);
    if (vocab) {
        vocab->validate(config.vocab_size);
    } else if (options.require_tokenizer) {
        fail(ErrorKind::schema, "missing required metadata key 'tokenizer.ggml.tokens'");
    }

    LoadedModel out{Model(config, std::move(w)), std::move(vocab), std::nullopt, arch, arch, permuted, {}};
    if (const Value * t = md.find("tokenizer.chat_template"); t && t->as_string()) {
        out.chat_template = *t->as_string();
    }
    if (const Value * n = md.find("general.name"); n && n->as_string()) {
        out.name = *n->as_string();
    }
    for (const auto & [name, info] : by_name) {
        out.ignored_tensors.push_back(name);
    }
    return out;
}

LoadedModel load_model(const std::filesystem::path & path, const LoadOptions & options) {
    const auto file = gguf::read_gguf(path);
    auto m = load_model(file, options);
    if (!file.metadata.find("general.name")) {
        m.name = path.stem().string();
    }
    return m;
}

uint32_t file_type_for(DType t) {
    switch (t) {
        case DType::f32: return 0;
        case DType::f16: return 1;
        case DType::q4_0: return 2;
        case DType::q8_0: return 7;
    }
    return 0;
}

gguf::GgufFile export_gguf(const Model & model, const Vocabulary * vocab, const ExportOptions & options) {
    const auto & c = model.config();
    const auto & w = model.weights();
    gguf::GgufFile f;
    auto & md = f.metadata;
    md.set("general.architecture", Value("llama"));
    md.set("general.name", Value(options.name));
    md.set("general.file_type", Value(file_type_for(model.weight_dtype())));
    md.set("llama.context_length", Value(static_cast<uint32_t>(c.max_context)));
    md.set("llama.embedding_length", Value(static_cast<uint32_t>(c.hidden_size)));
    md.set("llama.block_count", Value(static_cast<uint32_t>(c.n_layers)));
    md.set("llama.feed_forward_length", Value(static_cast<uint32_t>(c.intermediate_size)));
    md.set("llama.rope.dimension_count", Value(static_cast<uint32_t>(c.head_size)));
    md.set("llama.attention.head_count", Value(static_cast<uint32_t>(c.n_heads)));
    md.set("llama.attention.head_count_kv", Value(static_cast<uint32_t>(c.n_kv_heads)));
    md.set("llama.attention.key_length", Value(static_cast<uint32_t>(c.head_size)));
    md.set("llama.attention.value_length", Value(static_cast<uint32_t>(c.head_size)));
    md.set("llama.rope.freq_base", Value(static_cast<float>(c.rope_theta)));
    md.set("llama.attention.layer_norm_rms_epsilon", Value(c.rms_eps));
    md.set("llama.vocab_size", Value(static_cast<uint32_t>(c.vocab_size)));
    if (vocab) {
        md.set("tokenizer.ggml.model", Value("llama"));
        Array toks{ValueType::string, {}};
        Array scores{ValueType::f32, {}};
        Array types{ValueType::i32, {}};
        for (std::size_t i = 0; i < vocab->size(); ++i) {
            toks.items.emplace_back(vocab->tokens[i]);
            scores.items.emplace_back(vocab->scores[i]);
            types.items.emplace_back(static_cast<int32_t>(vocab->types[i]));
        }
        md.set("tokenizer.ggml.tokens", Value(std::move(toks)));
        md.set("tokenizer.ggml.scores", Value(std::move(scores)));
        md.set("tokenizer.ggml.token_type", Value(std::move(types)));
        md.set("tokenizer.ggml.bos_token_id", Value(static_cast<uint32_t>(vocab->bos_id)));
        md.set("tokenizer.ggml.eos_token_id", Value(static_cast<uint32_t>(vocab->eos_id)));
        md.set("tokenizer.ggml.unknown_token_id", Value(static_cast<uint32_t>(vocab->unk_id)));
        md.set("tokenizer.ggml.add_bos_token", Value(vocab->add_bos));
        md.set("tokenizer.ggml.add_space_prefix", Value(vocab->add_space_prefix));
    }
    if (options.chat_template) {
        md.set("tokenizer.chat_template", Value(*options.chat_template));
    }

    f.add_tensor("token_embd.weight", w.token_embd);
    for (int l = 0; l < c.n_layers; ++l) {
        const auto & lw = w.layers[l];
        const std::string p = "blk." + std::to_string(l) + ".";
        f.add_tensor(p + "attn_norm.weight", lw.attn_norm);
        f.add_tensor(p + "attn_q.weight", permute_qk(lw.wq, c.n_heads));
        f.add_tensor(p + "attn_k.weight", permute_qk(lw.wk, c.n_kv_heads));
        f.add_tensor(p + "attn_v.weight", lw.wv);
        f.add_tensor(p + "attn_output.weight", lw.wo);
        f.add_tensor(p + "ffn_norm.weight", lw.ffn_norm);
        f.add_tensor(p + "ffn_gate.weight", lw.w_gate);
        f.add_tensor(p + "ffn_up.weight", lw.w_up);
        f.add_tensor(p + "ffn_down.weight", lw.w_down);
    }
    f.add_tensor("output_norm.weight", w.output_norm);
    if (!c.tied_embeddings) {
        f.add_tensor("output.weight", w.output);
    }
    return f;
}

gguf::GgufFile requantize(const gguf::GgufFile & in, DType target, QuantizeSummary * summary) {
    QuantizeSummary s;
    gguf::GgufFile out;
    out.version = in.version;
    out.metadata = in.metadata;
    out.metadata.set("general.file_type", Value(file_type_for(target)));
    for (const auto & info : in.tensors()) {
        const Tensor t = in.tensor(info);
        s.input_bytes += info.n_bytes();
        const bool eligible = t.ndim() == 2 && t.cols() % static_cast<int64_t>(traits(target).block_elems) == 0;
        if (eligible) {
            out.add_tensor(info.name, t.dtype() == target ? t : quantize_tensor(t, target));
            ++s.quantized_tensors;
        } else {
            out.add_tensor(info.name, info.dims, info.type, in.tensor_bytes(info));
            ++s.kept_tensors;
        }
        s.output_bytes += out.tensors().back().n_bytes();
    }
    if (summary) {
        *summary = s;
    }
    return out;
}

} // namespace danube
