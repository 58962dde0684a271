#include "danube/server.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <ctime>
#include <limits>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "danube/error.hpp"

namespace danube {

using json = nlohmann::ordered_json;

namespace {

[[noreturn]] void bad_request(const std::string & code, const std::string & message) {
    throw ApiError(400, code, message);
}

// Plain string, null (empty) or an array of {"type": "text", "text": ...} parts.
std::string message_content(const json & c) {
    if (c.is_null()) {
        return {};
    }
    if (c.is_string()) {
        return c.get<std::string>();
    }
    if (c.is_array()) {
        std::string s;
        for (const auto & part : c) {
            if (!part.is_object() || part.value("type", "") != "text" || !part.contains("text") ||
                !part["text"].is_string()) {
                bad_request("invalid_request", "content parts must be {\"type\": \"text\", \"text\": string}");
            }
            s += part["text"].get<std::string>();
        }
        return s;
    }
    bad_request("invalid_request", "message content must be a string");
}

const json * field(const json & j, const char * key) {
    const auto it = j.find(key);
    return it == j.end() || it->is_null() ? nullptr : &*it;
}

float number_field(const json & j, const char * key, float fallback) {
    const json * v = field(j, key);
    if (!v) {
        return fallback;
    }
    if (!v->is_number()) {
        bad_request("invalid_parameter", std::string(key) + " must be a number");
    }
    return v->get<float>();
}

int64_t integer_field(const json & j, const char * key, int64_t fallback, int64_t lo, int64_t hi) {
    const json * v = field(j, key);
    if (!v) {
        return fallback;
    }
    if (!v->is_number_integer()) {
        bad_request("invalid_parameter", std::string(key) + " must be an integer");
    }
    if (v->is_number_unsigned() ? v->get<uint64_t>() > static_cast<uint64_t>(hi) : v->get<int64_t>() < lo ||
                                                                                     v->get<int64_t>() > hi) {
        bad_request("invalid_parameter", std::string(key) + " is out of range");
    }
    return v->get<int64_t>();
}

// FIFO admission gate over a fixed set of KV caches, one per worker.
class SessionPool {
public:
    SessionPool(const ModelConfig & config, int capacity, int workers, int queue)
        : workers_(workers), queue_(queue) {
        for (int i = 0; i < workers; ++i) {
            caches_.emplace_back(config, capacity);
        }
        busy_.assign(static_cast<std::size_t>(workers), false);
    }

    class Lease {
    public:
        Lease(SessionPool & pool, int index) : pool_(&pool), index_(index) {}
        ~Lease() { pool_->release(index_); }
        Lease(const Lease &) = delete;
        Lease & operator=(const Lease &) = delete;
        KvCache & cache() { return pool_->caches_[static_cast<std::size_t>(index_)]; }

    private:
        SessionPool * pool_;
        int index_;
    };

    // Waits in line for a worker; null when the queue is full or on shutdown.
    std::shared_ptr<Lease> acquire(std::span<const int32_t> prompt, const std::atomic<bool> & stopping) {
        std::unique_lock lk(m_);
        if (running_ + waiting_ >= workers_ + queue_) {
            return nullptr;
        }
        const uint64_t ticket = next_ticket_++;
        ++waiting_;
        cv_.wait(lk, [&] { return stopping.load() || (ticket == serving_ && running_ < workers_); });
        --waiting_;
        ++serving_;
        if (stopping.load()) {
            cv_.notify_all();
            return nullptr;
        }
        ++running_;
        // Prefer the free cache sharing the longest prefix with this prompt.
        int best = -1;
        std::size_t best_len = 0;
        for (int i = 0; i < workers_; ++i) {
            if (busy_[static_cast<std::size_t>(i)]) {
                continue;
            }
            const auto & t = caches_[static_cast<std::size_t>(i)].tokens();
            const std::size_t n = std::min(t.size(), prompt.size());
            const std::size_t len =
                static_cast<std::size_t>(std::mismatch(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(n),
                                                       prompt.begin())
                                             .first -
                                         t.begin());
            if (best < 0 || len > best_len) {
                best = i;
                best_len = len;
            }
        }
        busy_[static_cast<std::size_t>(best)] = true;
        cv_.notify_all();
        return std::make_shared<Lease>(*this, best);
    }

    void wake() {
        std::lock_guard lk(m_);
        cv_.notify_all();
    }

    int running() const {
        std::lock_guard lk(m_);
        return running_;
    }
    int waiting() const {
        std::lock_guard lk(m_);
        return waiting_;
    }

private:
    void release(int index) {
        std::lock_guard lk(m_);
        busy_[static_cast<std::size_t>(index)] = false;
        --running_;
        cv_.notify_all();
    }

    int workers_;
    int queue_;
    std::vector<KvCache> caches_;
    std::vector<bool> busy_;
    mutable std::mutex m_;
    std::condition_variable cv_;
    uint64_t next_ticket_ = 0;
    uint64_t serving_ = 0;
    int running_ = 0;
    int waiting_ = 0;
};

json config_json(const ModelConfig & c) {
    return {{"n_layers", c.n_layers},         {"hidden_size", c.hidden_size},
            {"intermediate_size", c.intermediate_size}, {"n_heads", c.n_heads},
            {"n_kv_heads", c.n_kv_heads},     {"head_size", c.head_size},
            {"vocab_size", c.vocab_size},     {"rope_theta", c.rope_theta},
            {"max_context", c.max_context},   {"tied_embeddings", c.tied_embeddings}};
}

} // namespace

ChatRequest parse_chat_request(std::string_view body, const GenerationParams & defaults) {
    json j;
    try {
        j = json::parse(body);
    } catch (const json::parse_error & e) {
        bad_request("invalid_json", std::string("request body is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) {
        bad_request("invalid_request", "request body must be a JSON object");
    }
    ChatRequest r;
    const json * messages = field(j, "messages");
    if (!messages || !messages->is_array()) {
        bad_request("invalid_request", "messages must be an array");
    }
    if (messages->empty()) {
        bad_request("empty_messages", "messages must contain at least one message");
    }
    for (const auto & m : *messages) {
        if (!m.is_object() || !m.contains("role") || !m["role"].is_string()) {
            bad_request("invalid_request", "each message needs a string role");
        }
        ChatMessage msg{m["role"].get<std::string>(), message_content(m.value("content", json()))};
        if (msg.role != "system" && msg.role != "user" && msg.role != "assistant") {
            bad_request("invalid_role", "unsupported role: " + msg.role);
        }
        r.messages.push_back(std::move(msg));
    }

    GenerationParams & p = r.params;
    p = defaults;
    p.temperature = number_field(j, "temperature", p.temperature);
    p.top_p = number_field(j, "top_p", p.top_p);
    p.repeat_penalty = number_field(j, "repeat_penalty", p.repeat_penalty);
    constexpr int64_t int_max = std::numeric_limits<int>::max();
    p.top_k = static_cast<int>(integer_field(j, "top_k", p.top_k, 0, int_max));
    p.max_new_tokens = static_cast<int>(integer_field(j, "max_tokens", p.max_new_tokens, 0, int_max));
    if (const json * seed = field(j, "seed")) {
        if (!seed->is_number_integer() || (!seed->is_number_unsigned() && seed->get<int64_t>() < 0)) {
            bad_request("invalid_parameter", "seed must be a non-negative integer");
        }
        p.seed = seed->get<uint64_t>();
    }
    if (const json * stop = field(j, "stop")) {
        p.stop_sequences.clear();
        if (stop->is_string()) {
            p.stop_sequences.push_back(stop->get<std::string>());
        } else if (stop->is_array()) {
            for (const auto & s : *stop) {
                if (!s.is_string()) {
                    bad_request("invalid_parameter", "stop must be a string or an array of strings");
                }
                p.stop_sequences.push_back(s.get<std::string>());
            }
        } else {
            bad_request("invalid_parameter", "stop must be a string or an array of strings");
        }
    }
    if (const json * stream = field(j, "stream")) {
        if (!stream->is_boolean()) {
            bad_request("invalid_parameter", "stream must be a boolean");
        }
        r.stream = stream->get<bool>();
    }
    try {
        p.validate();
    } catch (const Error & e) {
        bad_request("invalid_parameter", e.what());
    }
    return r;
}

std::string error_body(std::string_view code, std::string_view message) {
    return json{{"error", {{"code", code}, {"message", message}, {"type", "invalid_request_error"}}}}.dump();
}

std::string_view api_finish_reason(FinishReason r) {
    switch (r) {
        case FinishReason::eos:
        case FinishReason::stop_sequence: return "stop";
        case FinishReason::length:
        case FinishReason::capacity: return "length";
        case FinishReason::cancelled: return "cancelled";
    }
    return "stop";
}

struct Server::Impl {
    std::shared_ptr<const LoadedModel> model;
    ServerOptions options;
    std::optional<Tokenizer> tokenizer;
    std::optional<ChatTemplate> chat_template;
    std::unique_ptr<SessionPool> pool;
    int capacity = 0;

    httplib::Server http;
    std::thread listener;
    std::atomic<bool> stopping{false};
    std::atomic<uint64_t> next_id{0};
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();
    int bound_port = 0;

    Impl(std::shared_ptr<const LoadedModel> m, ServerOptions o) : model(std::move(m)), options(std::move(o)) {
        if (options.workers < 1 || options.queue < 0 || options.context < 1) {
            fail(ErrorKind::config, "server: workers and context must be >= 1, queue >= 0");
        }
        options.defaults.validate();
        if (model) {
            if (!model->vocab) {
                fail(ErrorKind::schema, "server: the model file has no tokenizer");
            }
            tokenizer.emplace(*model->vocab);
            chat_template = select_template(model->chat_template, options.chat_template);
            capacity = std::min(options.context, model->config().max_context);
            pool = std::make_unique<SessionPool>(model->config(), capacity, options.workers, options.queue);
        }
        // Request threads: every worker and queue slot, plus spares so health
        // checks and 503 replies never wait behind inference.
        const int threads = options.workers + options.queue + 8;
        http.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
        http.set_payload_max_length(8u << 20);
        http.set_keep_alive_timeout(5);
        http.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
        http.Options(R"(/.*)", [](const httplib::Request &, httplib::Response & res) {
            res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type, Authorization");
            res.status = 204;
        });
        http.Get("/health", [this](const httplib::Request &, httplib::Response & res) { health(res); });
        http.Get("/v1/models", [this](const httplib::Request &, httplib::Response & res) { models(res); });
        http.Post("/v1/chat/completions", [this](const httplib::Request & req, httplib::Response & res) {
            try {
                chat(req, res);
            } catch (const ApiError & e) {
                reply_error(res, e.status(), e.code(), e.what());
            } catch (const std::exception & e) {
                reply_error(res, 500, "internal_error", e.what());
            }
        });
    }

    static void reply_error(httplib::Response & res, int status, std::string_view code, std::string_view message) {
        res.status = status;
        res.set_content(error_body(code, message), "application/json");
    }

    void health(httplib::Response & res) const {
        const double uptime =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        json j{{"status", "ok"},
               {"uptime_seconds", uptime},
               {"model_loaded", model != nullptr},
               {"active_sessions", pool ? pool->running() : 0},
               {"queued_requests", pool ? pool->waiting() : 0}};
        res.set_content(j.dump(), "application/json");
    }

    void models(httplib::Response & res) const {
        if (!model) {
            reply_error(res, 503, "model_not_loaded", "no model is loaded");
            return;
        }
        const ModelConfig & c = model->config();
        json m{{"id", model->name},
               {"object", "model"},
               {"created", 0},
               {"owned_by", "local"},
               {"architecture", model->architecture},
               {"quantization", to_string(model->model.weight_dtype())},
               {"parameters", count_parameters(c)},
               {"context", capacity},
               {"config", config_json(c)}};
        res.set_content(json{{"object", "list"}, {"data", json::array({m})}}.dump(), "application/json");
    }

    json chunk(const std::string & id, std::time_t created, json delta, const char * finish) const {
        json choice{{"index", 0}, {"delta", std::move(delta)}, {"finish_reason", nullptr}};
        if (finish) {
            choice["finish_reason"] = finish;
        }
        return {{"id", id},
                {"object", "chat.completion.chunk"},
                {"created", created},
                {"model", model->name},
                {"choices", json::array({choice})}};
    }

    void throttle() const {
        if (options.token_delay.count() > 0) {
            std::this_thread::sleep_for(options.token_delay);
        }
    }

    static json usage(const GenerationResult & r) {
        const auto completion = static_cast<int>(r.tokens.size());
        return {{"prompt_tokens", r.prompt_tokens},
                {"completion_tokens", completion},
                {"total_tokens", r.prompt_tokens + completion}};
    }

    void chat(const httplib::Request & req, httplib::Response & res) {
        if (!model) {
            throw ApiError(503, "model_not_loaded", "no model is loaded");
        }
        ChatRequest cr = parse_chat_request(req.body, options.defaults);
        std::vector<int32_t> prompt;
        try {
            prompt = render_chat(cr.messages, *chat_template, *tokenizer, true);
        } catch (const Error & e) {
            if (e.kind() == ErrorKind::input) {
                throw ApiError(400, "invalid_messages", e.what());
            }
            throw ApiError(500, "template_error", e.what());
        }
        if (prompt.size() > static_cast<std::size_t>(capacity)) {
            throw ApiError(409, "context_overflow",
                           "prompt is " + std::to_string(prompt.size()) + " tokens; the context holds " +
                               std::to_string(capacity));
        }
        auto lease = pool->acquire(prompt, stopping);
        if (!lease) {
            res.set_header("Retry-After", "1");
            throw ApiError(503, "server_busy", "all workers and queue slots are in use");
        }
        const std::string id = "chatcmpl-" + std::to_string(next_id.fetch_add(1));
        const std::time_t created = std::time(nullptr);

        if (!cr.stream) {
            GenerationResult r;
            try {
                r = generate(model->model, lease->cache(), *tokenizer, prompt, cr.params,
                             [this](int32_t, std::string_view) {
                                 throttle();
                                 return !stopping.load();
                             }, options.n_threads);
            } catch (const Error & e) {
                lease->cache().clear();
                throw ApiError(500, "generation_failed", e.what());
            }
            json choice{{"index", 0},
                        {"message", {{"role", "assistant"}, {"content", r.text}}},
                        {"finish_reason", api_finish_reason(r.finish)}};
            json body{{"id", id},
                      {"object", "chat.completion"},
                      {"created", created},
                      {"model", model->name},
                      {"choices", json::array({choice})},
                      {"usage", usage(r)}};
            res.set_content(body.dump(), "application/json");
            return;
        }

        struct StreamState {
            std::shared_ptr<SessionPool::Lease> lease;
            std::vector<int32_t> prompt;
            GenerationParams params;
        };
        auto state = std::make_shared<StreamState>(StreamState{std::move(lease), std::move(prompt), cr.params});
        res.set_header("Cache-Control", "no-cache");
        res.set_chunked_content_provider(
            "text/event-stream", [this, state, id, created](std::size_t, httplib::DataSink & sink) {
                bool gone = false;
                auto send = [&](const std::string & payload) {
                    const std::string event = "data: " + payload + "\n\n";
                    if (!gone && !sink.write(event.data(), event.size())) {
                        gone = true;
                    }
                    return !gone;
                };
                send(chunk(id, created, {{"role", "assistant"}, {"content", ""}}, nullptr).dump());
                GenerationResult r;
                bool failed = false;
                try {
                    r = generate(
                        model->model, state->lease->cache(), *tokenizer, state->prompt, state->params,
                        [&](int32_t, std::string_view text) {
                            throttle();
                            if (stopping.load()) {
                                return false;
                            }
                            if (!text.empty()) {
                                return send(chunk(id, created, {{"content", text}}, nullptr).dump());
                            }
                            // Nothing to send yet; still notice a vanished client.
                            if (!sink.is_writable()) {
                                gone = true;
                            }
                            return !gone;
                        },
                        options.n_threads);
                } catch (const Error & e) {
                    failed = true;
                    state->lease->cache().clear();
                    send(json{{"error", {{"code", "generation_failed"}, {"message", e.what()}}}}.dump());
                }
                if (!failed) {
                    json last = chunk(id, created, json::object(), api_finish_reason(r.finish).data());
                    last["usage"] = usage(r);
                    send(last.dump());
                }
                send("[DONE]");
                state->lease.reset(); // free the worker before the connection winds down
                if (gone) {
                    return false;
                }
                sink.done();
                return true;
            });
    }

    void bind() {
        if (options.port == 0) {
            bound_port = http.bind_to_any_port(options.host);
        } else {
            bound_port = http.bind_to_port(options.host, options.port) ? options.port : -1;
        }
        if (bound_port <= 0) {
            fail(ErrorKind::io, "server: cannot bind " + options.host + ":" + std::to_string(options.port));
        }
    }

    void shutdown() {
        stopping = true;
        if (pool) {
            pool->wake();
        }
        http.stop();
        if (listener.joinable()) {
            listener.join();
        }
    }
};

Server::Server(std::shared_ptr<const LoadedModel> model, ServerOptions options)
    : impl_(std::make_unique<Impl>(std::move(model), std::move(options))) {}

Server::~Server() { impl_->shutdown(); }

int Server::start() {
    impl_->bind();
    impl_->listener = std::thread([this] { impl_->http.listen_after_bind(); });
    impl_->http.wait_until_ready();
    return impl_->bound_port;
}

void Server::run() {
    impl_->bind();
    impl_->http.listen_after_bind();
}

void Server::stop() { impl_->shutdown(); }

int Server::port() const { return impl_->bound_port; }

int Server::active_sessions() const { return impl_->pool ? impl_->pool->running() : 0; }

int Server::queued_requests() const { return impl_->pool ? impl_->pool->waiting() : 0; }

} // namespace danube
