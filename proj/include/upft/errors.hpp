#pragma once

#include <stdexcept>
#include <string>

namespace upft {

// Error taxonomy shared across the library. The CLI maps each class to a
// distinct exit code (see cli.hpp).

struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad input data (untokenizable example, malformed file). Carries the
// offending record in the message.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// HTTP / network failure that survived the retry policy.
struct TransportError : std::runtime_error {
    explicit TransportError(const std::string& msg) : std::runtime_error(msg) {}
};

// A guarded budget (enumeration paths, remote request ceiling) was exceeded.
struct ResourceError : std::runtime_error {
    explicit ResourceError(const std::string& msg) : std::runtime_error(msg) {}
};

// A checked mathematical invariant failed.
struct VerificationError : std::runtime_error {
    explicit VerificationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Experiment setup could not reach its contract (e.g. base-model accuracy band).
struct SetupError : std::runtime_error {
    explicit SetupError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace upft
