#pragma once

#include <stdexcept>
#include <string>

namespace atl {

// Exit-code mapping used by the CLI: config errors -> 2,
// incompatibility -> 3, training divergence -> 4.

struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct incompat_error : std::runtime_error {
    explicit incompat_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct dimension_error : incompat_error {
    explicit dimension_error(const std::string& msg) : incompat_error(msg) {}
};

struct corrupt_checkpoint_error : config_error {
    explicit corrupt_checkpoint_error(const std::string& msg) : config_error(msg) {}
};

struct version_error : config_error {
    explicit version_error(const std::string& msg) : config_error(msg) {}
};

struct diverged_error : std::runtime_error {
    long step;
    explicit diverged_error(long step_, const std::string& msg)
        : std::runtime_error(msg), step(step_) {}
};

struct contract_error : std::runtime_error {
    explicit contract_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace atl
