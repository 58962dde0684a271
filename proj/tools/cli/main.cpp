#include <algorithm>
#include <cctype>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "commands.hpp"
#include "danube/error.hpp"
#include "danube/quant.hpp"
#include "danube/threading.hpp"

using namespace danube;
using namespace danube::cli;

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::string joined(const std::vector<std::string> & v) {
    std::string s;
    for (const auto & x : v) {
        s += (s.empty() ? "" : ", ") + x;
    }
    return s;
}

// Accepts names from a fixed list (case-insensitive) and says which are valid.
CLI::Validator one_of(const std::vector<std::string> & allowed, std::string what) {
    return CLI::Validator(
        [allowed, what](std::string & value) -> std::string {
            value = lower(value);
            if (std::find(allowed.begin(), allowed.end(), value) != allowed.end()) {
                return {};
            }
            return "unsupported " + what + " '" + value + "'; supported: " + joined(allowed);
        },
        "{" + joined(allowed) + "}");
}

void add_model_args(CLI::App * sub, ModelArgs & m) {
    sub->add_option("-m,--model", m.model, "GGUF model file")->required()->check(CLI::ExistingFile);
    sub->add_option("-t,--threads", m.threads, "Compute threads")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("-c,--ctx", m.ctx, "Context size in tokens (default: min(4096, model context))")
        ->check(CLI::PositiveNumber);
    sub->add_option("--template", m.template_file, "Chat template file, used when the model has none")
        ->check(CLI::ExistingFile);
}

void add_sampling(CLI::App * sub, GenerationParams & p) {
    sub->add_option("--temp", p.temperature, "Sampling temperature (0 = greedy)")->capture_default_str();
    sub->add_option("--top-k", p.top_k, "Keep the k most likely tokens (0 = off)")->capture_default_str();
    sub->add_option("--top-p", p.top_p, "Nucleus mass in (0, 1]")->capture_default_str();
    sub->add_option("--repeat-penalty", p.repeat_penalty, "Penalty for recently used tokens (>= 1)")
        ->capture_default_str();
    sub->add_option("--repeat-window", p.repeat_window, "Tokens the repeat penalty looks back over")
        ->capture_default_str();
    sub->add_option("-n,--max-tokens", p.max_new_tokens, "Maximum tokens to generate")->capture_default_str();
    sub->add_option("--seed", p.seed, "Random seed")->capture_default_str();
    sub->add_option("--stop", p.stop_sequences, "Stop sequence (repeatable)");
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"danube: quantized CPU inference for Danube3-family models"};
    app.set_version_flag("--version", "danube 0.1.0");
    app.require_subcommand(1);
    const int default_threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));

    GenerateArgs gen;
    gen.m.threads = default_threads;
    auto * g = app.add_subcommand("generate", "Generate a continuation of a prompt");
    add_model_args(g, gen.m);
    add_sampling(g, gen.sampling);
    auto * prompt_opt = g->add_option("-p,--prompt", gen.prompt, "Prompt text");
    g->add_option("-f,--prompt-file", gen.prompt_file, "Read the prompt from a file")
        ->check(CLI::ExistingFile)
        ->excludes(prompt_opt);
    g->add_flag("--chat", gen.chat, "Wrap the prompt as a user turn of the chat template");
    g->add_option("--system", gen.system, "System message (with --chat)");
    g->add_flag("--stats", gen.show_stats, "Print timing to stderr");

    ChatArgs chat;
    chat.m.threads = default_threads;
    auto * c = app.add_subcommand("chat", "Interactive chat (/reset, /params, Ctrl-D to exit)");
    add_model_args(c, chat.m);
    add_sampling(c, chat.sampling);
    c->add_option("--system", chat.system, "System message");

    QuantizeArgs quant;
    auto * q = app.add_subcommand("quantize", "Re-encode a model's weight matrices");
    q->add_option("-i,--in", quant.in, "Input GGUF")->required()->check(CLI::ExistingFile);
    q->add_option("-o,--out", quant.out, "Output GGUF")->required();
    q->add_option("--type", quant.type, "Target type")->required()->check(one_of(quantize_types(), "type"));

    InspectArgs insp;
    auto * i = app.add_subcommand("inspect", "Print metadata, tensors and config of a GGUF file");
    i->add_option("-m,--model", insp.model, "GGUF file")->required()->check(CLI::ExistingFile);
    i->add_flag("--json", insp.json, "JSON output");

    PerplexityArgs ppl;
    ppl.m.threads = default_threads;
    auto * p = app.add_subcommand("perplexity", "Score a text file");
    add_model_args(p, ppl.m);
    p->add_option("-f,--file", ppl.file, "Text corpus")->required()->check(CLI::ExistingFile);
    p->add_option("-w,--window", ppl.window, "Window size in tokens")->capture_default_str();
    p->add_flag("--json", ppl.json, "JSON output");
    std::vector<std::string> table_types;
    for (QuantType t : {QuantType::f32, QuantType::f16, QuantType::q8_0, QuantType::q4_0, QuantType::q6_k,
                        QuantType::q5_k_m, QuantType::q4_k_m, QuantType::q3_k_m, QuantType::q2_k}) {
        table_types.push_back(lower(std::string(to_string(t))));
    }
    p->add_option("--table", ppl.table, "Size/quality table over these types (K-quants are sized only)")
        ->delimiter(',')
        ->check(one_of(table_types, "type"));

    ServeArgs serve;
    serve.server.n_threads = default_threads;
    auto * s = app.add_subcommand("serve", "Chat-completions HTTP server");
    s->add_option("--host", serve.server.host, "Bind address")->envname("DANUBE_HOST")->capture_default_str();
    s->add_option("--port", serve.server.port, "Port (0 = any free port)")->envname("DANUBE_PORT")->capture_default_str();
    s->add_option("-m,--model", serve.model, "GGUF model file")->envname("DANUBE_MODEL")->check(CLI::ExistingFile);
    s->add_option("--ctx", serve.server.context, "Context tokens per worker")
        ->envname("DANUBE_CTX")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    s->add_option("--workers", serve.server.workers, "Concurrent generations")
        ->envname("DANUBE_WORKERS")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    s->add_option("--queue", serve.server.queue, "Requests that may wait for a worker")
        ->envname("DANUBE_QUEUE")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    s->add_option("-t,--threads", serve.server.n_threads, "Compute threads per generation")
        ->envname("DANUBE_THREADS")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    s->add_option("--template", serve.template_file, "Chat template file, used when the model has none")
        ->check(CLI::ExistingFile);
    add_sampling(s, serve.server.defaults);

    BenchArgs bench;
    bench.m.threads = default_threads;
    auto * b = app.add_subcommand("bench", "Measure prompt and generation throughput");
    add_model_args(b, bench.m);
    b->add_option("--tokens", bench.tokens, "Tokens to generate (0 = prompt only)")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    b->add_option("--prompt-tokens", bench.prompt_tokens, "Prompt length")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    b->add_flag("--json", bench.json, "JSON output");

    try {
        app.parse(argc, argv);
        for (const GenerationParams * params : {&gen.sampling, &chat.sampling, &serve.server.defaults}) {
            params->validate();
        }
        if (ppl.window < 4) {
            throw CLI::ValidationError("--window", "must be at least 4");
        }
    } catch (const CLI::ParseError & e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    } catch (const Error & e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (*g) {
            set_num_threads(gen.m.threads);
            return run_generate(gen);
        }
        if (*c) {
            set_num_threads(chat.m.threads);
            return run_chat(chat, std::cin, std::cout);
        }
        if (*q) {
            return run_quantize(quant);
        }
        if (*i) {
            return run_inspect(insp);
        }
        if (*p) {
            set_num_threads(ppl.m.threads);
            return run_perplexity(ppl);
        }
        if (*s) {
            set_num_threads(serve.server.n_threads);
            return run_serve(serve);
        }
        if (*b) {
            set_num_threads(bench.m.threads);
            return run_bench(bench);
        }
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
