#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "danube/generation.hpp"
#include "danube/loader.hpp"
#include "danube/server.hpp"

namespace danube::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct ModelArgs {
    std::string model;
    int threads = 0;
    int ctx = 0; // 0: min(4096, model context)
    std::string template_file;
};

struct GenerateArgs {
    ModelArgs m;
    GenerationParams sampling;
    std::string prompt;
    std::string prompt_file;
    bool chat = false; // wrap the prompt as one user turn
    std::string system;
    bool show_stats = false;
};

struct ChatArgs {
    ModelArgs m;
    GenerationParams sampling;
    std::string system;
};

struct QuantizeArgs {
    std::string in;
    std::string out;
    std::string type;
};

struct InspectArgs {
    std::string model;
    bool json = false;
};

struct PerplexityArgs {
    ModelArgs m;
    std::string file;
    int window = 512;
    bool json = false;
    std::vector<std::string> table; // quant types for a size/quality table
};

struct ServeArgs {
    std::string model; // empty: serve without a model (model endpoints answer 503)
    std::string template_file;
    ServerOptions server;
};

struct BenchArgs {
    ModelArgs m;
    int tokens = 128;
    int prompt_tokens = 64;
    bool json = false;
};

/// Quantize targets accepted on the command line.
const std::vector<std::string> & quantize_types();

int run_generate(const GenerateArgs & args);
int run_chat(const ChatArgs & args, std::istream & in, std::ostream & out);
int run_quantize(const QuantizeArgs & args);
int run_inspect(const InspectArgs & args);
int run_perplexity(const PerplexityArgs & args);
int run_serve(const ServeArgs & args);
int run_bench(const BenchArgs & args);

// Shared helpers.
LoadedModel load_checked(const std::string & path, bool need_tokenizer = true);
std::optional<std::string> read_template_file(const std::string & path);
int context_for(const ModelArgs & m, const ModelConfig & c);
std::string read_text_file(const std::string & path);

} // namespace danube::cli
