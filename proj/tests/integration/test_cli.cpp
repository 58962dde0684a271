#include <doctest.h>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <httplib.h>
#include <json.hpp>

#include "danube/loader.hpp"
#include "support/reference_model.hpp"
#include "support/spm_fixture.hpp"

extern char ** environ;

using namespace danube;
using namespace danube::testing;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char * kTemplate =
    "{{ bos_token }}{% for m in messages %}{% if m['role'] == 'user' %}<|prompt|>{% elif m['role'] == 'system' %}"
    "<|system|>{% else %}<|answer|>{% endif %}{{ m['content'] }}{{ eos_token }}{% endfor %}"
    "{% if add_generation_prompt %}<|answer|>{% endif %}";

struct Workspace {
    fs::path dir;
    fs::path f32;
    fs::path f16;
    fs::path corpus;

    Workspace() {
        dir = fs::temp_directory_path() / ("danube_cli_" + std::to_string(getpid()));
        fs::create_directories(dir);
        const Vocabulary vocab = load_spm_fixture().vocab;
        ExportOptions opts;
        opts.name = "tiny-cli";
        opts.chat_template = kTemplate;
        f32 = dir / "tiny-f32.gguf";
        f16 = dir / "tiny-f16.gguf";
        gguf::write_gguf(export_gguf(make_random_model(tiny_config(), 11), &vocab, opts), f32);
        gguf::write_gguf(export_gguf(make_random_model(tiny_config(), 11, DType::f16), &vocab, opts), f16);
        corpus = fs::path(DANUBE_TEST_DATA) / "corpus.txt";
    }
    ~Workspace() {
        std::error_code ec;
        fs::remove_all(dir, ec);
    }
};

const Workspace & ws() {
    static const Workspace w;
    return w;
}

struct Run {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path & p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Run run(const std::string & args, const std::string & input = "") {
    static int counter = 0;
    const fs::path base = ws().dir / ("run" + std::to_string(counter++));
    std::ofstream(base.string() + ".in") << input;
    const std::string cmd = std::string(DANUBE_CLI) + " " + args + " < " + base.string() + ".in > " + base.string() +
                            ".out 2> " + base.string() + ".err";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(base.string() + ".out");
    r.err = slurp(base.string() + ".err");
    return r;
}

std::string q(const fs::path & p) {
    return "'" + p.string() + "'";
}

bool contains(const std::string & s, const std::string & needle) {
    return s.find(needle) != std::string::npos;
}

std::string with_commas(uint64_t v) {
    std::string s = std::to_string(v);
    for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) {
        s.insert(static_cast<std::size_t>(i), ",");
    }
    return s;
}

int free_port() {
    const int fd = socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    bind(fd, reinterpret_cast<sockaddr *>(&addr), sizeof addr);
    socklen_t len = sizeof addr;
    getsockname(fd, reinterpret_cast<sockaddr *>(&addr), &len);
    close(fd);
    return ntohs(addr.sin_port);
}

} // namespace

TEST_CASE("help exits 0 for every subcommand without a model") {
    CHECK(run("--help").code == 0);
    for (const char * sub : {"chat", "generate", "quantize", "perplexity", "inspect", "serve", "bench"}) {
        INFO(sub);
        const auto r = run(std::string(sub) + " --help");
        CHECK(r.code == 0);
        CHECK(contains(r.out, "Usage"));
    }
}

TEST_CASE("usage errors exit 2") {
    CHECK(run("").code == 2);
    CHECK(run("frobnicate").code == 2);
    CHECK(run("generate --prompt hi").code == 2); // missing --model
    CHECK(run("generate -m /nonexistent/model.gguf -p hi").code == 2);
    CHECK(run("generate -m " + q(ws().f32) + " -p hi --top-p 0").code == 2);
    CHECK(run("generate -m " + q(ws().f32) + " -p hi --temp -1").code == 2);
    CHECK(run("bench -m " + q(ws().f32) + " --tokens -1").code == 2);

    const auto r = run("quantize --in " + q(ws().f16) + " --out " + q(ws().dir / "x.gguf") + " --type q4_k_m");
    CHECK(r.code == 2);
    CHECK(contains(r.err, "q8_0"));
    CHECK(contains(r.err, "q4_0"));
    CHECK_FALSE(fs::exists(ws().dir / "x.gguf"));
}

TEST_CASE("runtime errors exit 1") {
    const fs::path bad = ws().dir / "truncated.gguf";
    const std::string bytes = slurp(ws().f32);
    std::ofstream(bad, std::ios::binary) << bytes.substr(0, 200);
    const auto r = run("inspect -m " + q(bad));
    INFO(r.err);
    CHECK(r.code == 1);
    CHECK(contains(r.err, "corruption"));
    CHECK(contains(r.err, "byte"));
    CHECK(run("generate -m " + q(ws().f32) + " -p hi --ctx 100000").code == 1);
}

TEST_CASE("quantize F16 to Q8_0: ratio, idempotence, reload") {
    const fs::path a = ws().dir / "q8a.gguf";
    const fs::path b = ws().dir / "q8b.gguf";
    const auto r = run("quantize --in " + q(ws().f16) + " --out " + q(a) + " --type Q8_0");
    REQUIRE(r.code == 0);
    INFO(r.out);
    CHECK(contains(r.out, "ratio 1.88"));
    CHECK(contains(r.out, "policy:"));
    CHECK(contains(r.out, "F32"));
    REQUIRE(run("quantize --in " + q(ws().f16) + " --out " + q(b) + " --type q8_0").code == 0);
    CHECK(slurp(a) == slurp(b));

    const auto loaded = load_model(a);
    CHECK(loaded.model.weight_dtype() == DType::q8_0);
    const auto g = run("generate -m " + q(a) + " -p 'The river' -n 8 --temp 0");
    CHECK(g.code == 0);

    const fs::path q4 = ws().dir / "q4.gguf";
    CHECK(run("quantize --in " + q(ws().f32) + " --out " + q(q4) + " --type q4_0").code == 0);
    CHECK(load_model(q4).model.weight_dtype() == DType::q4_0);
}

TEST_CASE("inspect prints config and parameter count") {
    const auto r = run("inspect -m " + q(ws().f32));
    REQUIRE(r.code == 0);
    CHECK(contains(r.out, "layers: 2, hidden: 64, heads: 4/2"));
    CHECK(contains(r.out, "parameters: " + with_commas(static_cast<uint64_t>(count_parameters(tiny_config())))));
    CHECK(contains(r.out, "blk.0.attn_q.weight"));
    CHECK(contains(r.out, "general.architecture"));

    const auto j = run("inspect --json -m " + q(ws().f32));
    REQUIRE(j.code == 0);
    const auto doc = json::parse(j.out);
    CHECK(doc.at("parameters") == count_parameters(tiny_config()));
    CHECK(doc.at("config").at("n_kv_heads") == 2);
    CHECK(doc.at("metadata").at("tokenizer.ggml.tokens").at("length") == 600);
}

TEST_CASE("generate is byte-reproducible with a seed") {
    const std::string args = "generate -m " + q(ws().f32) + " -p 'The river flows' -n 24 --temp 0 --seed 3";
    const auto a = run(args);
    const auto b = run(args + " --threads 2");
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    CHECK(a.out.size() > 1);
    const std::string sampled = "generate -m " + q(ws().f32) + " -p 'The river flows' -n 24 --temp 0.9 --seed 5";
    CHECK(run(sampled).out == run(sampled).out);
}

TEST_CASE("chat: reset gives the fresh-session reply, Ctrl-D exits 0") {
    const std::string args = "chat -m " + q(ws().f32) + " --temp 0 -n 16";
    const auto fresh = run(args, "hello there\n");
    REQUIRE(fresh.code == 0);
    const auto banner_end = fresh.out.find('\n') + 1;
    const std::string reply = fresh.out.substr(banner_end);
    CHECK_FALSE(reply.empty());

    const auto again = run(args, "something else\n/params\n/reset\nhello there\n");
    REQUIRE(again.code == 0);
    CHECK(contains(again.out, "temperature 0"));
    const std::string marker = "(conversation cleared)\n";
    const auto pos = again.out.find(marker);
    REQUIRE(pos != std::string::npos);
    CHECK(again.out.substr(pos + marker.size()) == reply);
}

TEST_CASE("chat reports a full context and suggests /reset") {
    const auto r = run("chat -m " + q(ws().f32) + " --temp 0 -n 4 --ctx 24",
                       "this message is far too long to fit inside a twenty four token context window at all\n");
    CHECK(r.code == 0);
    CHECK(contains(r.out, "/reset"));
}

TEST_CASE("bench and perplexity") {
    const auto b = run("bench -m " + q(ws().f32) + " --tokens 0 --prompt-tokens 16 --json");
    REQUIRE(b.code == 0);
    const auto j = json::parse(b.out);
    CHECK(j.at("generated_tokens") == 0);
    CHECK(j.at("quantization") == "F32");
    CHECK(j.at("prompt_tokens_per_second").get<double>() > 0.0);

    const auto t = run("bench -m " + q(ws().f32) + " --tokens 8 --prompt-tokens 8");
    CHECK(t.code == 0);
    CHECK(contains(t.out, "tokens/s"));

    const auto p = run("perplexity -m " + q(ws().f32) + " -f " + q(ws().corpus) + " -w 64 --json");
    REQUIRE(p.code == 0);
    const auto report = json::parse(p.out);
    CHECK(report.at("window") == 64);
    CHECK(report.at("perplexity").get<double>() > 1.0);

    const auto table = run("perplexity -m " + q(ws().f32) + " -f " + q(ws().corpus) + " -w 64 --table q8_0,q4_k_m");
    REQUIRE(table.code == 0);
    CHECK(contains(table.out, "Q8_0"));
    CHECK(contains(table.out, "(size only)"));
}

TEST_CASE("serve honours DANUBE_ environment overrides and stops on SIGTERM") {
    const int port = free_port();
    const std::string model = ws().f32.string();
    std::vector<std::string> env_strings{"DANUBE_PORT=" + std::to_string(port), "DANUBE_MODEL=" + model,
                                         "DANUBE_WORKERS=1", "DANUBE_QUEUE=2", "DANUBE_CTX=128"};
    std::vector<char *> envp;
    for (char ** e = environ; *e; ++e) {
        envp.push_back(*e);
    }
    for (auto & s : env_strings) {
        envp.push_back(s.data());
    }
    envp.push_back(nullptr);
    std::string exe = DANUBE_CLI;
    std::string sub = "serve";
    std::string threads = "--threads=1";
    char * argv[] = {exe.data(), sub.data(), threads.data(), nullptr};
    pid_t pid = 0;
    REQUIRE(posix_spawn(&pid, exe.c_str(), nullptr, nullptr, argv, envp.data()) == 0);

    httplib::Client cli("127.0.0.1", port);
    cli.set_connection_timeout(1);
    bool up = false;
    for (int i = 0; i < 200 && !up; ++i) {
        auto res = cli.Get("/health");
        up = res && res->status == 200;
        if (!up) {
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
        }
    }
    REQUIRE(up);
    const auto models = cli.Get("/v1/models");
    REQUIRE(models);
    const auto m = json::parse(models->body).at("data").at(0);
    CHECK(m.at("id") == "tiny-cli");
    CHECK(m.at("context") == 128);

    const json body{{"messages", json::array({{{"role", "user"}, {"content", "hi"}}})}, {"max_tokens", 4}};
    const auto chat = cli.Post("/v1/chat/completions", body.dump(), "application/json");
    REQUIRE(chat);
    CHECK(chat->status == 200);

    kill(pid, SIGTERM);
    int status = 0;
    waitpid(pid, &status, 0);
    CHECK(WIFEXITED(status));
    CHECK(WEXITSTATUS(status) == 0);
    CHECK_FALSE(cli.Get("/health"));
}
