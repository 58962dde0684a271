#include "commands.hpp"

#include <cstdio>
#include <filesystem>
#include <iostream>

#include <json.hpp>

#include "danube/error.hpp"
#include "danube/eval.hpp"
#include "danube/quant.hpp"

namespace danube::cli {

namespace {

using ojson = nlohmann::ordered_json;

std::string with_commas(uint64_t v) {
    std::string s = std::to_string(v);
    for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) {
        s.insert(static_cast<std::size_t>(i), ",");
    }
    return s;
}

std::string shape_text(const gguf::TensorInfo & t) {
    std::string s = "[";
    const auto shape = t.shape();
    for (std::size_t i = 0; i < shape.size(); ++i) {
        s += (i ? ", " : "") + std::to_string(shape[i]);
    }
    return s + "]";
}

ojson scalar_json(const gguf::Value & v) {
    return std::visit(
        [](const auto & x) -> ojson {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, gguf::Array>) {
                return nullptr; // handled by value_json
            } else if constexpr (std::is_same_v<T, uint8_t> || std::is_same_v<T, int8_t>) {
                return static_cast<int>(x);
            } else {
                return x;
            }
        },
        v.data);
}

// Long arrays (vocabularies) are summarised by type, length and a head.
ojson value_json(const gguf::Value & v, std::size_t head = 8) {
    const auto * arr = v.as_array();
    if (!arr) {
        return scalar_json(v);
    }
    ojson items = ojson::array();
    for (std::size_t i = 0; i < std::min(head, arr->items.size()); ++i) {
        items.push_back(value_json(arr->items[i], head));
    }
    if (arr->items.size() <= head) {
        return items;
    }
    return {{"type", gguf::to_string(arr->elem_type)}, {"length", arr->items.size()}, {"head", items}};
}

std::string value_text(const gguf::Value & v) {
    if (const auto * s = v.as_string()) {
        std::string out = ojson(*s).dump();
        if (out.size() > 96) {
            out = out.substr(0, 93) + "...";
        }
        return out;
    }
    if (const auto * arr = v.as_array()) {
        std::string out = "[" + std::string(gguf::to_string(arr->elem_type)) + " x " +
                          std::to_string(arr->items.size()) + "]";
        for (std::size_t i = 0; i < std::min<std::size_t>(4, arr->items.size()); ++i) {
            out += (i ? ", " : " ") + value_text(arr->items[i]);
        }
        return out + (arr->items.size() > 4 ? ", ..." : "");
    }
    return scalar_json(v).dump();
}

ojson config_json(const ModelConfig & c) {
    return {{"n_layers", c.n_layers},
            {"hidden_size", c.hidden_size},
            {"intermediate_size", c.intermediate_size},
            {"n_heads", c.n_heads},
            {"n_kv_heads", c.n_kv_heads},
            {"head_size", c.head_size},
            {"vocab_size", c.vocab_size},
            {"rope_theta", c.rope_theta},
            {"max_context", c.max_context},
            {"tied_embeddings", c.tied_embeddings}};
}

std::string weight_type_name(const gguf::GgufFile & f) {
    if (const auto * t = f.find_tensor("blk.0.attn_q.weight")) {
        return std::string(gguf::ggml_type_name(t->type));
    }
    return f.tensors().empty() ? "?" : std::string(gguf::ggml_type_name(f.tensors().front().type));
}

} // namespace

const std::vector<std::string> & quantize_types() {
    static const std::vector<std::string> types{"q8_0", "q4_0"};
    return types;
}

int run_quantize(const QuantizeArgs & a) {
    const QuantType qt = *parse_quant_type(a.type);
    const DType target = to_dtype(qt);
    const gguf::GgufFile in = gguf::read_gguf(a.in);
    ModelConfig config = config_from_metadata(in.metadata);
    config.validate();

    QuantizeSummary s;
    const gguf::GgufFile out = requantize(in, target, &s);
    gguf::write_gguf(out, a.out);

    // Ratio over the re-encoded matrices alone, and over the whole file.
    uint64_t w_in = 0;
    uint64_t w_out = 0;
    std::string kept_types;
    for (const auto & t : out.tensors()) {
        const auto * src = in.find_tensor(t.name);
        if (t.dims.size() == 2 && t.type == gguf::to_ggml(target)) {
            w_in += src->n_bytes();
            w_out += t.n_bytes();
        } else {
            const std::string name(gguf::ggml_type_name(t.type));
            if (kept_types.find(name) == std::string::npos) {
                kept_types += (kept_types.empty() ? "" : "/") + name;
            }
        }
    }
    const uint64_t f_in = std::filesystem::file_size(a.in);
    const uint64_t f_out = std::filesystem::file_size(a.out);
    const std::string tname(to_string(qt));
    std::printf("input:      %s (%s, %s bytes)\n", a.in.c_str(), weight_type_name(in).c_str(),
                with_commas(f_in).c_str());
    std::printf("output:     %s (%s, %s bytes)\n", a.out.c_str(), tname.c_str(), with_commas(f_out).c_str());
    std::printf("policy:     %s: 2-D weight matrices -> %s; 1-D tensors (norms) kept as stored (%s)\n",
                std::string(to_string(QuantPolicy::keep_norms)).c_str(), tname.c_str(),
                kept_types.empty() ? "none" : kept_types.c_str());
    std::printf("tensors:    %d re-encoded, %d kept\n", s.quantized_tensors, s.kept_tensors);
    std::printf("weights:    %s -> %s bytes, ratio %.2f\n", with_commas(w_in).c_str(), with_commas(w_out).c_str(),
                w_out ? static_cast<double>(w_in) / static_cast<double>(w_out) : 0.0);
    std::printf("file:       %s -> %s bytes, ratio %.2f\n", with_commas(f_in).c_str(), with_commas(f_out).c_str(),
                f_out ? static_cast<double>(f_in) / static_cast<double>(f_out) : 0.0);
    std::printf("predicted:  %s bytes (%s policy)\n",
                with_commas(predict_model_size(config, qt, QuantPolicy::keep_norms)).c_str(),
                std::string(to_string(QuantPolicy::keep_norms)).c_str());
    return kExitOk;
}

int run_inspect(const InspectArgs & a) {
    const gguf::GgufFile f = gguf::read_gguf(a.model);
    std::optional<ModelConfig> config;
    std::string config_error;
    try {
        config = config_from_metadata(f.metadata);
    } catch (const Error & e) {
        config_error = e.what();
    }
    uint64_t elements = 0;
    uint64_t tensor_bytes = 0;
    for (const auto & t : f.tensors()) {
        elements += t.n_elements();
        tensor_bytes += t.n_bytes();
    }

    if (a.json) {
        ojson j;
        j["file"] = a.model;
        j["version"] = f.version;
        j["alignment"] = f.alignment();
        j["metadata"] = ojson::object();
        for (const auto & [k, v] : f.metadata.entries()) {
            j["metadata"][k] = value_json(v);
        }
        j["tensors"] = ojson::array();
        for (const auto & t : f.tensors()) {
            j["tensors"].push_back({{"name", t.name},
                                    {"shape", t.shape()},
                                    {"type", gguf::ggml_type_name(t.type)},
                                    {"bytes", t.n_bytes()},
                                    {"offset", t.offset}});
        }
        if (config) {
            j["config"] = config_json(*config);
            j["parameters"] = count_parameters(*config);
        } else {
            j["config_error"] = config_error;
        }
        j["tensor_elements"] = elements;
        j["tensor_bytes"] = tensor_bytes;
        std::cout << j.dump(2) << "\n";
        return kExitOk;
    }

    std::printf("file: %s\nversion: %u, alignment: %llu\n", a.model.c_str(), f.version,
                static_cast<unsigned long long>(f.alignment()));
    std::printf("\nmetadata (%zu keys):\n", f.metadata.size());
    for (const auto & [k, v] : f.metadata.entries()) {
        std::printf("  %-40s %s\n", k.c_str(), value_text(v).c_str());
    }
    std::printf("\ntensors (%zu):\n", f.tensors().size());
    std::printf("  %-32s %-16s %-6s %14s\n", "name", "shape", "type", "bytes");
    for (const auto & t : f.tensors()) {
        std::printf("  %-32s %-16s %-6s %14s\n", t.name.c_str(), shape_text(t).c_str(),
                    std::string(gguf::ggml_type_name(t.type)).c_str(), with_commas(t.n_bytes()).c_str());
    }
    std::printf("\nconfig:\n");
    if (config) {
        const ModelConfig & c = *config;
        std::printf("  layers: %d, hidden: %d, heads: %d/%d\n", c.n_layers, c.hidden_size, c.n_heads, c.n_kv_heads);
        std::printf("  intermediate: %d, head size: %d, vocab: %d, context: %d, rope theta: %g, tied embeddings: %s\n",
                    c.intermediate_size, c.head_size, c.vocab_size, c.max_context, c.rope_theta,
                    c.tied_embeddings ? "yes" : "no");
        std::printf("parameters: %s\n", with_commas(static_cast<uint64_t>(count_parameters(c))).c_str());
    } else {
        std::printf("  unavailable: %s\n", config_error.c_str());
    }
    std::printf("tensor elements: %s, tensor bytes: %s\n", with_commas(elements).c_str(),
                with_commas(tensor_bytes).c_str());
    return kExitOk;
}

int run_perplexity(const PerplexityArgs & a) {
    const std::string text = read_text_file(a.file);
    PerplexityOptions opts;
    opts.window = a.window;
    opts.corpus = std::filesystem::path(a.file).filename().string();

    if (!a.table.empty()) {
        std::vector<QuantType> targets;
        for (const auto & t : a.table) {
            targets.push_back(*parse_quant_type(t));
        }
        const gguf::GgufFile f = gguf::read_gguf(a.m.model);
        const auto rows = size_quality_table(f, targets, text, opts, a.m.threads);
        if (a.json) {
            ojson j = ojson::array();
            for (const auto & r : rows) {
                ojson row{{"method", to_string(r.method)}, {"bytes", r.bytes}, {"accounting_only", r.accounting_only}};
                row["perplexity"] = r.perplexity ? ojson(*r.perplexity) : ojson(nullptr);
                j.push_back(row);
            }
            std::cout << j.dump(2) << "\n";
        } else {
            std::cout << format_size_quality(rows);
        }
        return kExitOk;
    }

    const LoadedModel lm = load_checked(a.m.model);
    const Tokenizer tok(*lm.vocab);
    const auto report = perplexity(lm.model, tok, text, opts, a.m.threads);
    std::cout << (a.json ? report.to_json() + "\n" : report.to_text());
    return kExitOk;
}

} // namespace danube::cli
