#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mnmt {

enum class ErrorKind {
  Dimension,
  Domain,
  Contract,
  Numeric,
  Vocab,
  Length,
  Config,
  Training,
  Routing,
  Parse,
  Capacity,
  Alignment,
  Extraction,
  Bounds,
  Degenerate,
  Io,
  MissingInput,
};

std::string_view to_string(ErrorKind kind) noexcept;

// Single exception type for the library; the kind carries the category so
// callers (notably the CLI) can map failures to exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace mnmt
