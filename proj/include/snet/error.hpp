#pragma once

#include <stdexcept>
#include <string>

namespace snet {

// Process exit codes used by the CLI: 0 success, 1 usage, 2 data, 3 numerical.
enum class ErrorKind { usage = 1, data = 2, numeric = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}

  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void usage_error(const std::string& msg) {
  throw Error(ErrorKind::usage, msg);
}
[[noreturn]] inline void data_error(const std::string& msg) {
  throw Error(ErrorKind::data, msg);
}
[[noreturn]] inline void numeric_error(const std::string& msg) {
  throw Error(ErrorKind::numeric, msg);
}

}  // namespace snet
