#pragma once

#include <stdexcept>
#include <string>

namespace nestnet {

// Error category, used by the CLI to map failures onto exit codes and by
// tests to distinguish file-format failures.
enum class ErrorKind {
  config,      // bad configuration or argument
  shape,       // tensor shape mismatch
  overflow,    // non-finite value produced
  format,      // bad magic / malformed file
  version,     // unsupported file version
  checksum,    // CRC mismatch
  truncation,  // file shorter than declared
  runtime,     // everything else
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

}  // namespace nestnet
