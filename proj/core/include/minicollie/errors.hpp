#pragma once

#include <stdexcept>
#include <string>

namespace minicollie {

// Error taxonomy shared by the whole library. The CLI maps these onto
// process exit codes: ConfigError -> 2, DataError -> 3, everything else -> 4.

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated API contract (caller bug): non-scalar loss, double merge, ...
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Cross-worker protocol failures: mismatched collectives, timeouts,
// aborted runs, checksum mismatches on the wire.
struct ProtocolError : std::runtime_error {
  explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace minicollie
