#include "commands.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include <pthread.h>
#include <sys/resource.h>
#include <unistd.h>

#include <json.hpp>

#include "danube/chat_template.hpp"
#include "danube/error.hpp"

namespace danube::cli {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

ChatTemplate template_for(const LoadedModel & lm, const ModelArgs & m) {
    return select_template(lm.chat_template, read_template_file(m.template_file));
}

std::string describe_params(const GenerationParams & p) {
    std::ostringstream os;
    os << "temperature " << p.temperature << ", top_k " << p.top_k << ", top_p " << p.top_p << ", repeat_penalty "
       << p.repeat_penalty << " over " << p.repeat_window << " tokens, max_tokens " << p.max_new_tokens << ", seed "
       << p.seed;
    for (const auto & s : p.stop_sequences) {
        os << ", stop \"" << s << "\"";
    }
    return os.str();
}

constexpr const char * kFullMessage = "context is full; type /reset to start a new conversation";

} // namespace

LoadedModel load_checked(const std::string & path, bool need_tokenizer) {
    LoadOptions o;
    o.require_tokenizer = need_tokenizer;
    return load_model(std::filesystem::path(path), o);
}

std::string read_text_file(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::optional<std::string> read_template_file(const std::string & path) {
    if (path.empty()) {
        return std::nullopt;
    }
    return read_text_file(path);
}

int context_for(const ModelArgs & m, const ModelConfig & c) {
    if (m.ctx > c.max_context) {
        fail(ErrorKind::config, "--ctx " + std::to_string(m.ctx) + " exceeds the model context of " +
                                    std::to_string(c.max_context));
    }
    return m.ctx > 0 ? m.ctx : std::min(4096, c.max_context);
}

int run_generate(const GenerateArgs & a) {
    const LoadedModel lm = load_checked(a.m.model);
    const Tokenizer tok(*lm.vocab);
    const std::string text = a.prompt_file.empty() ? a.prompt : read_text_file(a.prompt_file);
    std::vector<int32_t> prompt;
    if (a.chat) {
        std::vector<ChatMessage> turns;
        if (!a.system.empty()) {
            turns.push_back({"system", a.system});
        }
        turns.push_back({"user", text});
        prompt = render_chat(turns, template_for(lm, a.m), tok, true);
    } else {
        prompt = tok.encode(text, lm.vocab->add_bos);
    }
    KvCache cache(lm.config(), context_for(a.m, lm.config()));
    const auto t0 = Clock::now();
    const auto r = generate(
        lm.model, cache, tok, prompt, a.sampling,
        [](int32_t, std::string_view piece) {
            std::cout << piece << std::flush;
            return true;
        },
        a.m.threads);
    const double dt = seconds_since(t0);
    std::cout << "\n" << std::flush;
    if (a.show_stats) {
        std::cerr << "finish: " << to_string(r.finish) << ", prompt tokens: " << r.prompt_tokens
                  << ", generated: " << r.tokens.size() << ", " << dt << " s ("
                  << (dt > 0 ? static_cast<double>(r.tokens.size()) / dt : 0.0) << " tokens/s)\n";
    }
    if (r.finish == FinishReason::capacity) {
        std::cerr << "note: the context filled up after " << cache.length() << " tokens\n";
    }
    return kExitOk;
}

int run_chat(const ChatArgs & a, std::istream & in, std::ostream & out) {
    const LoadedModel lm = load_checked(a.m.model);
    const Tokenizer tok(*lm.vocab);
    const ChatTemplate tmpl = template_for(lm, a.m);
    KvCache cache(lm.config(), context_for(a.m, lm.config()));
    std::vector<ChatMessage> history;
    auto reset = [&] {
        history.clear();
        if (!a.system.empty()) {
            history.push_back({"system", a.system});
        }
        cache.clear();
    };
    reset();
    const bool interactive = &in == &std::cin && isatty(STDIN_FILENO);
    out << "chatting with " << lm.name << " (" << cache.capacity()
        << " tokens of context). /reset clears, /params shows sampling, Ctrl-D exits.\n";

    std::string line;
    while (true) {
        if (interactive) {
            out << "> " << std::flush;
        }
        if (!std::getline(in, line)) {
            break;
        }
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) {
            continue;
        }
        line = line.substr(first, line.find_last_not_of(" \t\r") - first + 1);
        if (line == "/reset") {
            reset();
            out << "(conversation cleared)\n";
            continue;
        }
        if (line == "/params") {
            out << describe_params(a.sampling) << "\n";
            continue;
        }
        if (line == "/quit" || line == "/exit") {
            break;
        }
        if (line.front() == '/') {
            out << "unknown command " << line << "; try /reset, /params or /quit\n";
            continue;
        }
        history.push_back({"user", line});
        const auto prompt = render_chat(history, tmpl, tok, true);
        if (prompt.size() > static_cast<std::size_t>(cache.capacity())) {
            history.pop_back();
            out << "(" << kFullMessage << ")\n";
            continue;
        }
        const auto r = generate(
            lm.model, cache, tok, prompt, a.sampling,
            [&](int32_t, std::string_view piece) {
                out << piece << std::flush;
                return true;
            },
            a.m.threads);
        out << "\n";
        history.push_back({"assistant", r.text});
        if (r.finish == FinishReason::capacity) {
            out << "(" << kFullMessage << ")\n";
        }
    }
    if (interactive) {
        out << "\n";
    }
    return kExitOk;
}

int run_serve(const ServeArgs & a) {
    std::shared_ptr<const LoadedModel> model;
    if (!a.model.empty()) {
        model = std::make_shared<const LoadedModel>(load_checked(a.model));
    }
    ServerOptions o = a.server;
    if (!a.template_file.empty()) {
        o.chat_template = read_template_file(a.template_file);
    }
    // Signals go to a waiting thread, not to the request threads.
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    Server server(model, o);
    const int port = server.start();
    std::cerr << "serving " << (model ? model->name : std::string("(no model)")) << " on http://" << o.host << ":"
              << port << " (workers " << o.workers << ", queue " << o.queue << ")\n";
    int sig = 0;
    sigwait(&set, &sig);
    std::cerr << "shutting down\n";
    server.stop();
    return kExitOk;
}

int run_bench(const BenchArgs & a) {
    const LoadedModel lm = load_checked(a.m.model, false);
    const ModelConfig & c = lm.config();
    if (a.tokens < 0 || a.prompt_tokens < 1) {
        fail(ErrorKind::config, "bench: --tokens must be >= 0 and --prompt-tokens >= 1");
    }
    const int total = a.prompt_tokens + a.tokens;
    if (total > c.max_context) {
        fail(ErrorKind::config, "bench: prompt + generated tokens exceed the model context");
    }
    // A fixed, vocabulary-independent prompt keeps runs comparable.
    std::vector<int32_t> prompt(static_cast<std::size_t>(a.prompt_tokens));
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        prompt[i] = static_cast<int32_t>((i * 7919 + 13) % static_cast<std::size_t>(c.vocab_size));
    }
    KvCache cache(c, total);
    const auto t0 = Clock::now();
    auto logits = lm.model.forward(prompt, cache, LogitsMode::last, a.m.threads);
    const double pp_s = seconds_since(t0);

    const auto t1 = Clock::now();
    for (int i = 0; i < a.tokens; ++i) {
        const int32_t next =
            static_cast<int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        const std::array<int32_t, 1> one{next};
        logits = lm.model.forward(one, cache, LogitsMode::last, a.m.threads);
    }
    const double tg_s = seconds_since(t1);

    rusage ru{};
    getrusage(RUSAGE_SELF, &ru);
    const double peak_mb = static_cast<double>(ru.ru_maxrss) / 1024.0; // ru_maxrss is in kB on Linux
    const double pp_rate = pp_s > 0 ? a.prompt_tokens / pp_s : 0.0;
    const double tg_rate = tg_s > 0 && a.tokens > 0 ? a.tokens / tg_s : 0.0;

    if (a.json) {
        nlohmann::ordered_json j{{"model", lm.name},
                                 {"quantization", to_string(lm.model.weight_dtype())},
                                 {"weight_bytes", lm.model.weight_bytes()},
                                 {"file_bytes", std::filesystem::file_size(a.m.model)},
                                 {"parameters", count_parameters(c)},
                                 {"threads", a.m.threads},
                                 {"prompt_tokens", a.prompt_tokens},
                                 {"prompt_seconds", pp_s},
                                 {"prompt_tokens_per_second", pp_rate},
                                 {"generated_tokens", a.tokens},
                                 {"generation_seconds", tg_s},
                                 {"generation_tokens_per_second", tg_rate},
                                 {"kv_cache_bytes", cache.memory_bytes()},
                                 {"peak_rss_mb", peak_mb}};
        std::cout << j.dump(2) << "\n";
        return kExitOk;
    }
    std::printf("model:       %s (%s, %zu weight bytes, %lld parameters)\n", lm.name.c_str(),
                std::string(to_string(lm.model.weight_dtype())).c_str(), lm.model.weight_bytes(),
                static_cast<long long>(count_parameters(c)));
    std::printf("threads:     %d\n", a.m.threads);
    std::printf("prompt:      %d tokens in %.3f s (%.2f tokens/s)\n", a.prompt_tokens, pp_s, pp_rate);
    std::printf("generation:  %d tokens in %.3f s (%.2f tokens/s)\n", a.tokens, tg_s, tg_rate);
    std::printf("kv cache:    %.1f MB\n", static_cast<double>(cache.memory_bytes()) / 1e6);
    std::printf("peak rss:    %.1f MB\n", peak_mb);
    return kExitOk;
}

} // namespace danube::cli
