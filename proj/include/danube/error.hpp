#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace danube {

enum class ErrorKind {
    shape,        // dimension mismatch
    format,       // malformed bytes / bad magic / bad block layout
    version,      // unsupported container version
    corruption,   // truncated file, offsets out of range
    config,       // invalid hyperparameters
    numeric,      // non-finite input where finite is required
    unsupported,  // recognised but not implemented (K-quants)
    schema,       // missing metadata key
    validation,   // structure violates an invariant
    capacity,     // context window exhausted
    input,        // bad user input (token ids, utf-8, corpus)
    degenerate,   // nothing to sample from (all logits -inf)
    io,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string & message)
        : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string & message) {
    throw Error(kind, message);
}

} // namespace danube
