#pragma once

#include <chrono>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "danube/chat_template.hpp"
#include "danube/generation.hpp"
#include "danube/loader.hpp"

namespace danube {

struct ServerOptions {
    std::string host = "127.0.0.1";
    int port = 8080; // 0 picks a free port
    int context = 2048; // KV capacity per worker, clamped to the model's max_context
    int workers = 1;    // concurrent generations
    int queue = 8;      // requests allowed to wait for a worker; beyond that: 503
    int n_threads = 0;  // compute threads per forward pass (0 = process default)
    GenerationParams defaults;
    std::optional<std::string> chat_template; // used when the checkpoint has none
    std::chrono::milliseconds token_delay{0};  // pause after each token (load testing)
};

/// An HTTP error with a stable machine-readable code.
class ApiError : public std::runtime_error {
public:
    ApiError(int status, std::string code, const std::string & message)
        : std::runtime_error(message), status_(status), code_(std::move(code)) {}
    int status() const noexcept { return status_; }
    const std::string & code() const noexcept { return code_; }

private:
    int status_;
    std::string code_;
};

struct ChatRequest {
    std::vector<ChatMessage> messages;
    GenerationParams params;
    bool stream = false;
};

/// Parses a chat-completions body. Overrides (temperature, top_p, top_k,
/// max_tokens, seed, stop, repeat_penalty) replace the defaults. Throws
/// ApiError 400 with codes invalid_json, invalid_request, empty_messages,
/// invalid_role, invalid_parameter.
ChatRequest parse_chat_request(std::string_view body, const GenerationParams & defaults);

/// {"error": {"code", "message", "type"}}
std::string error_body(std::string_view code, std::string_view message);

/// Maps a generation finish to the chat-completions finish_reason
/// (stop | length | cancelled).
std::string_view api_finish_reason(FinishReason r);

/// Chat-completions HTTP service for one model.
///
///   POST /v1/chat/completions   JSON or server-sent events (stream: true)
///   GET  /v1/models             model descriptor
///   GET  /health                uptime and session counts
///
/// At most `workers` generations run at once, each on its own KV cache;
/// up to `queue` more wait in FIFO order and anything beyond is refused
/// with 503. A model may be null, in which case model endpoints return 503.
class Server {
public:
    Server(std::shared_ptr<const LoadedModel> model, ServerOptions options);
    ~Server();

    Server(const Server &) = delete;
    Server & operator=(const Server &) = delete;

    /// Binds and serves on a background thread; returns the bound port.
    /// Throws an io error if the address cannot be bound.
    int start();
    /// Binds and serves on the calling thread until stop().
    void run();
    /// Stops listening and cancels in-flight generations.
    void stop();

    int port() const;
    int active_sessions() const;
    int queued_requests() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace danube
