#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>
#include <string>

#include "danube/chat_template.hpp"
#include "danube/config.hpp"
#include "danube/error.hpp"
#include "danube/eval.hpp"
#include "danube/generation.hpp"
#include "danube/gguf.hpp"
#include "danube/loader.hpp"
#include "danube/model.hpp"
#include "danube/quant.hpp"
#include "danube/threading.hpp"
#include "danube/tokenizer.hpp"

namespace py = pybind11;
using namespace danube;

namespace {

QuantType quant_type(const std::string & name) {
    const auto t = parse_quant_type(name);
    if (!t) {
        fail(ErrorKind::unsupported, "unknown quantization type '" + name + "'");
    }
    return *t;
}

QuantPolicy quant_policy(const std::string & name) {
    for (QuantPolicy p : {QuantPolicy::uniform, QuantPolicy::keep_norms, QuantPolicy::mixed}) {
        if (to_string(p) == name) {
            return p;
        }
    }
    fail(ErrorKind::config, "unknown policy '" + name + "'; expected uniform, keep-norms or mixed");
}

py::object value_to_py(const gguf::Value & v) {
    return std::visit(
        [](const auto & x) -> py::object {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, gguf::Array>) {
                py::list out;
                for (const auto & item : x.items) out.append(value_to_py(item));
                return out;
            } else if constexpr (std::is_same_v<T, std::string>) {
                return py::bytes(x).attr("decode")("utf-8", "replace");
            } else {
                return py::cast(x);
            }
        },
        v.data);
}

py::array_t<float> to_array(std::vector<float> v, py::ssize_t rows, py::ssize_t cols) {
    auto * heap = new std::vector<float>(std::move(v));
    py::capsule owner(heap, [](void * p) { delete static_cast<std::vector<float> *>(p); });
    return py::array_t<float>({rows, cols}, heap->data(), owner);
}

py::dict result_dict(const GenerationResult & r) {
    py::dict d;
    d["text"] = r.text;
    d["tokens"] = r.tokens;
    d["finish_reason"] = std::string(to_string(r.finish));
    d["prompt_tokens"] = r.prompt_tokens;
    return d;
}

GenerationParams make_params(int max_tokens, float temperature, int top_k, float top_p, float repeat_penalty,
                             uint64_t seed, std::vector<std::string> stop) {
    GenerationParams p;
    p.max_new_tokens = max_tokens;
    p.temperature = temperature;
    p.top_k = top_k;
    p.top_p = top_p;
    p.repeat_penalty = repeat_penalty;
    p.seed = seed;
    p.stop_sequences = std::move(stop);
    p.validate();
    return p;
}

// A loaded checkpoint with its tokenizer; one cache per generate call.
class PyModel {
public:
    explicit PyModel(const std::filesystem::path & path, bool require_tokenizer)
        : lm_(std::make_shared<LoadedModel>(load_model(path, LoadOptions{require_tokenizer}))) {
        if (lm_->vocab) {
            tok_ = std::make_shared<Tokenizer>(*lm_->vocab);
        }
    }

    const LoadedModel & loaded() const { return *lm_; }

    const Tokenizer & tokenizer() const {
        if (!tok_) {
            fail(ErrorKind::schema, "model file has no tokenizer");
        }
        return *tok_;
    }
    std::shared_ptr<Tokenizer> tokenizer_ptr() const {
        tokenizer();
        return tok_;
    }

    py::array_t<float> logits(const std::vector<int32_t> & tokens, int threads) const {
        std::vector<float> out;
        {
            py::gil_scoped_release release;
            KvCache cache(lm_->config(), static_cast<int>(tokens.size()));
            out = lm_->model.forward(tokens, cache, LogitsMode::all, threads);
        }
        return to_array(std::move(out), static_cast<py::ssize_t>(tokens.size()), lm_->config().vocab_size);
    }

    py::dict run(const std::vector<int32_t> & prompt, const GenerationParams & p, int ctx, int threads,
                 const std::function<bool(std::string)> & on_text) const {
        const int capacity = ctx > 0 ? ctx : std::min(4096, lm_->config().max_context);
        GenerationResult r;
        {
            py::gil_scoped_release release;
            KvCache cache(lm_->config(), capacity);
            TokenCallback cb;
            if (on_text) {
                cb = [&](int32_t, std::string_view piece) {
                    py::gil_scoped_acquire acquire;
                    const py::object keep = py::cast(on_text(std::string(piece)));
                    return keep.is_none() || keep.cast<bool>();
                };
            }
            r = generate(lm_->model, cache, tokenizer(), prompt, p, cb, threads);
        }
        return result_dict(r);
    }

    std::vector<int32_t> chat_prompt(const std::vector<std::pair<std::string, std::string>> & messages,
                                     const std::optional<std::string> & tmpl) const {
        std::vector<ChatMessage> turns;
        for (const auto & [role, content] : messages) turns.push_back({role, content});
        return render_chat(turns, select_template(lm_->chat_template, tmpl), tokenizer(), true);
    }

    py::dict perplexity_of(const std::string & text, int window, int threads) const {
        PerplexityOptions o;
        o.window = window;
        PerplexityReport r;
        {
            py::gil_scoped_release release;
            r = perplexity(lm_->model, tokenizer(), text, o, threads);
        }
        return py::module_::import("json").attr("loads")(r.to_json());
    }

private:
    std::shared_ptr<LoadedModel> lm_;
    std::shared_ptr<Tokenizer> tok_;
};

py::dict inspect_file(const std::filesystem::path & path) {
    const auto f = gguf::read_gguf(path);
    py::dict out;
    out["version"] = f.version;
    out["alignment"] = f.alignment();
    py::dict md;
    for (const auto & [k, v] : f.metadata.entries()) md[py::str(k)] = value_to_py(v);
    out["metadata"] = md;
    py::list tensors;
    for (const auto & t : f.tensors()) {
        py::dict d;
        d["name"] = t.name;
        d["shape"] = t.shape();
        d["type"] = std::string(gguf::ggml_type_name(t.type));
        d["bytes"] = t.n_bytes();
        d["offset"] = t.offset;
        tensors.append(d);
    }
    out["tensors"] = tensors;
    return out;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Quantized CPU inference for Danube3-family models";

    static py::exception<Error> error(m, "DanubeError", PyExc_RuntimeError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error & e) {
            PyErr_SetObject(error.ptr(), py::make_tuple(e.what(), std::string(to_string(e.kind()))).ptr());
        }
    });

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("n_layers", &ModelConfig::n_layers)
        .def_readwrite("hidden_size", &ModelConfig::hidden_size)
        .def_readwrite("intermediate_size", &ModelConfig::intermediate_size)
        .def_readwrite("n_heads", &ModelConfig::n_heads)
        .def_readwrite("n_kv_heads", &ModelConfig::n_kv_heads)
        .def_readwrite("head_size", &ModelConfig::head_size)
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("rope_theta", &ModelConfig::rope_theta)
        .def_readwrite("max_context", &ModelConfig::max_context)
        .def_readwrite("rms_eps", &ModelConfig::rms_eps)
        .def_readwrite("tied_embeddings", &ModelConfig::tied_embeddings)
        .def("validate", &ModelConfig::validate)
        .def("__eq__", [](const ModelConfig & a, const ModelConfig & b) { return a == b; })
        .def("__repr__", [](const ModelConfig & c) { return describe(c); });

    m.def("danube3_4b", &danube3_4b);
    m.def("danube3_500m", &danube3_500m);
    m.def("count_parameters", &count_parameters, py::arg("config"));
    m.def(
        "predict_model_size",
        [](const ModelConfig & c, const std::string & type, const std::string & policy) {
            return predict_model_size(c, quant_type(type), quant_policy(policy));
        },
        py::arg("config"), py::arg("type"), py::arg("policy") = "mixed",
        "Predicted GGUF file size in bytes.");
    m.def("set_num_threads", &set_num_threads, py::arg("n"));

    m.def(
        "quantize",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> x, const std::string & type) {
            const DType dt = to_dtype(quant_type(type));
            std::vector<std::byte> out;
            {
                const std::span<const float> src(x.data(), static_cast<std::size_t>(x.size()));
                py::gil_scoped_release release;
                out = quantize_row(src, dt);
            }
            return py::bytes(reinterpret_cast<const char *>(out.data()), out.size());
        },
        py::arg("values"), py::arg("type"), "Encode a float32 row (length a multiple of 32 for block types).");
    m.def(
        "dequantize",
        [](py::bytes data, const std::string & type, std::size_t n) {
            const std::string_view s = data;
            std::vector<float> out(n);
            dequantize_row(std::span(reinterpret_cast<const std::byte *>(s.data()), s.size()), quant_type(type), out);
            return py::array_t<float>(static_cast<py::ssize_t>(n), out.data());
        },
        py::arg("data"), py::arg("type"), py::arg("n"));
    m.def(
        "mean_kl_divergence",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> p,
           py::array_t<float, py::array::c_style | py::array::forcecast> q, int32_t vocab) {
            return mean_kl_divergence(std::span(p.data(), static_cast<std::size_t>(p.size())),
                                      std::span(q.data(), static_cast<std::size_t>(q.size())), vocab);
        },
        py::arg("p"), py::arg("q"), py::arg("vocab"));

    py::class_<Vocabulary>(m, "Vocabulary")
        .def(py::init([](std::vector<std::string> tokens, std::vector<float> scores, std::vector<int32_t> types,
                         int32_t bos, int32_t eos, int32_t unk, bool add_bos) {
                 Vocabulary v;
                 v.tokens = std::move(tokens);
                 v.scores = std::move(scores);
                 for (int32_t t : types) v.types.push_back(static_cast<TokenType>(t));
                 v.bos_id = bos;
                 v.eos_id = eos;
                 v.unk_id = unk;
                 v.add_bos = add_bos;
                 v.validate();
                 return v;
             }),
             py::arg("tokens"), py::arg("scores"), py::arg("types"), py::arg("bos_id") = 1, py::arg("eos_id") = 2,
             py::arg("unk_id") = 0, py::arg("add_bos") = true)
        .def("__len__", &Vocabulary::size)
        .def_readonly("bos_id", &Vocabulary::bos_id)
        .def_readonly("eos_id", &Vocabulary::eos_id);

    py::class_<Tokenizer, std::shared_ptr<Tokenizer>>(m, "Tokenizer")
        .def(py::init<Vocabulary>(), py::arg("vocab"))
        .def("encode", &Tokenizer::encode, py::arg("text"), py::arg("add_bos") = true)
        .def(
            "decode", [](const Tokenizer & t, const std::vector<int32_t> & ids) { return t.decode(ids); },
            py::arg("ids"))
        .def("__len__", &Tokenizer::size)
        .def_property_readonly("bos_id", &Tokenizer::bos)
        .def_property_readonly("eos_id", &Tokenizer::eos);

    m.def(
        "write_random_model",
        [](const std::filesystem::path & path, const ModelConfig & c, uint64_t seed, const Vocabulary * vocab,
           const std::string & type, const std::optional<std::string> & chat_template, const std::string & name) {
            const Model model = make_random_model(c, seed, to_dtype(quant_type(type)));
            ExportOptions o;
            o.name = name;
            o.chat_template = chat_template;
            gguf::write_gguf(export_gguf(model, vocab, o), path);
        },
        py::arg("path"), py::arg("config"), py::arg("seed") = 0, py::arg("vocab") = nullptr, py::arg("type") = "f32",
        py::arg("chat_template") = py::none(), py::arg("name") = "danube",
        "Write a randomly initialised model (for tests and benchmarks).");

    m.def(
        "quantize_file",
        [](const std::filesystem::path & in, const std::filesystem::path & out, const std::string & type) {
            QuantizeSummary s;
            const auto src = gguf::read_gguf(in);
            gguf::write_gguf(requantize(src, to_dtype(quant_type(type)), &s), out);
            py::dict d;
            d["input_bytes"] = s.input_bytes;
            d["output_bytes"] = s.output_bytes;
            d["quantized_tensors"] = s.quantized_tensors;
            d["kept_tensors"] = s.kept_tensors;
            return d;
        },
        py::arg("input"), py::arg("output"), py::arg("type"));

    m.def("inspect", &inspect_file, py::arg("path"), "GGUF version, metadata and tensor directory.");

    py::class_<PyModel>(m, "Model")
        .def(py::init<const std::filesystem::path &, bool>(), py::arg("path"), py::arg("require_tokenizer") = true)
        .def_property_readonly("config", [](const PyModel & p) { return p.loaded().config(); })
        .def_property_readonly("name", [](const PyModel & p) { return p.loaded().name; })
        .def_property_readonly("architecture", [](const PyModel & p) { return p.loaded().architecture; })
        .def_property_readonly("weight_type",
                               [](const PyModel & p) { return std::string(to_string(p.loaded().model.weight_dtype())); })
        .def_property_readonly("weight_bytes", [](const PyModel & p) { return p.loaded().model.weight_bytes(); })
        .def_property_readonly("chat_template", [](const PyModel & p) { return p.loaded().chat_template; })
        .def_property_readonly("tokenizer", &PyModel::tokenizer_ptr)
        .def("logits", &PyModel::logits, py::arg("tokens"), py::arg("threads") = 0,
             "Logits for every position, shape (len(tokens), vocab).")
        .def(
            "generate",
            [](const PyModel & self, const std::string & prompt, int max_tokens, float temperature, int top_k,
               float top_p, float repeat_penalty, uint64_t seed, std::vector<std::string> stop, int ctx, int threads,
               const std::function<bool(std::string)> & on_text) {
                const auto p = make_params(max_tokens, temperature, top_k, top_p, repeat_penalty, seed, std::move(stop));
                const auto ids = self.tokenizer().encode(prompt, self.loaded().vocab->add_bos);
                return self.run(ids, p, ctx, threads, on_text);
            },
            py::arg("prompt"), py::arg("max_tokens") = 256, py::arg("temperature") = 0.7f, py::arg("top_k") = 40,
            py::arg("top_p") = 0.95f, py::arg("repeat_penalty") = 1.1f, py::arg("seed") = 0,
            py::arg("stop") = std::vector<std::string>{}, py::arg("ctx") = 0, py::arg("threads") = 0,
            py::arg("on_text") = nullptr)
        .def(
            "chat",
            [](const PyModel & self, const std::vector<std::pair<std::string, std::string>> & messages,
               const std::optional<std::string> & chat_template, int max_tokens, float temperature, int top_k,
               float top_p, float repeat_penalty, uint64_t seed, std::vector<std::string> stop, int ctx, int threads,
               const std::function<bool(std::string)> & on_text) {
                const auto p = make_params(max_tokens, temperature, top_k, top_p, repeat_penalty, seed, std::move(stop));
                return self.run(self.chat_prompt(messages, chat_template), p, ctx, threads, on_text);
            },
            py::arg("messages"), py::kw_only(), py::arg("chat_template") = py::none(), py::arg("max_tokens") = 256,
            py::arg("temperature") = 0.7f, py::arg("top_k") = 40, py::arg("top_p") = 0.95f,
            py::arg("repeat_penalty") = 1.1f, py::arg("seed") = 0, py::arg("stop") = std::vector<std::string>{},
            py::arg("ctx") = 0, py::arg("threads") = 0, py::arg("on_text") = nullptr,
            "messages: list of (role, content) pairs.")
        .def("perplexity", &PyModel::perplexity_of, py::arg("text"), py::arg("window") = 512, py::arg("threads") = 0);
}
