#pragma once

#include <stdexcept>
#include <string>

namespace tbd {

// Machine-parsable error categories; the CLI prints them as
// `error: [<category>] <message>` and maps them to nonzero exit codes.
enum class ErrorCategory {
  usage,   // bad flags / unknown subcommand
  config,  // config file or option validation
  io,      // filesystem failures
  format,  // malformed external files (dataset, checkpoint, program text)
  shape,   // tensor shape contract violations
  state,   // misuse of an API (e.g. backward called twice)
};

const char* to_string(ErrorCategory c);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

}  // namespace tbd
