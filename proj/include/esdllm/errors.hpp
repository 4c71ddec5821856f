#pragma once

#include <stdexcept>
#include <string>

namespace esdllm {

// Invalid shapes, inconsistent configuration values.
struct config_error : std::runtime_error {
    explicit config_error(const std::string & msg) : std::runtime_error(msg) {}
};

// Bad runtime inputs (token ids out of range, unusable traces, ...).
struct input_error : std::runtime_error {
    explicit input_error(const std::string & msg) : std::runtime_error(msg) {}
};

// Malformed files (weights, traces).
struct format_error : std::runtime_error {
    explicit format_error(const std::string & msg) : std::runtime_error(msg) {}
};

// Caller broke a documented precondition.
struct contract_error : std::runtime_error {
    explicit contract_error(const std::string & msg) : std::runtime_error(msg) {}
};

}  // namespace esdllm
