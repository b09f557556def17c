#pragma once

#include <stdexcept>
#include <string>

namespace nlden {

// Exit codes used by the command line tool.
enum class ExitCode : int { ok = 0, usage = 1, config = 2, numeric = 3, io = 4 };

class Error : public std::runtime_error {
 public:
  Error(const std::string& what, ExitCode code) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Shapes that do not line up.
struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error("dimension error: " + w, ExitCode::config) {}
};

// NaN/Inf produced or consumed, or a degenerate quantity such as a zero spectral norm.
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error("numeric error: " + w, ExitCode::numeric) {}
};

// A caller broke a precondition.
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error("contract error: " + w, ExitCode::config) {}
};

struct GraphError : Error {
  explicit GraphError(const std::string& w) : Error("graph error: " + w, ExitCode::numeric) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config error: " + w, ExitCode::config) {}
};

// Malformed binary or text file; message carries the byte offset.
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error("format error: " + w, ExitCode::io) {}
};

struct IoError : Error {
  explicit IoError(const std::string& w) : Error("i/o error: " + w, ExitCode::io) {}
};

}  // namespace nlden
