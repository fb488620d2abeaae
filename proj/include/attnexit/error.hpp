#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace attnexit {

// Category of a structured failure. The CLI maps these onto exit codes.
enum class ErrorKind {
  invalid_argument,   // shape mismatch, out-of-range parameter
  config,             // bad or missing configuration value
  data,               // malformed input file or dataset content
  io,                 // open/read/write failure
  bad_magic,          // tensor dump header does not start with the tag
  truncated,          // tensor dump shorter than its header promises
  manifest_mismatch,  // sidecar manifest disagrees with the payload
  undefined,          // statistic undefined for the input (e.g. constant series)
  ordering,           // incremental execution requested out of order
  runtime,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
    case ErrorKind::io: return "io";
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::truncated: return "truncated";
    case ErrorKind::manifest_mismatch: return "manifest_mismatch";
    case ErrorKind::undefined: return "undefined";
    case ErrorKind::ordering: return "ordering";
    case ErrorKind::runtime: return "runtime";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(ErrorKind kind, Args&&... args) {
  throw Error(kind, detail::concat(std::forward<Args>(args)...));
}

}  // namespace attnexit
