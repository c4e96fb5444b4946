#pragma once

#include <stdexcept>
#include <string>

namespace stepdpo {

enum class ErrorKind {
  config,             // invalid configuration or bounds
  argument,           // precondition violated by caller
  length,             // sequence exceeds the model context
  tokenize,           // symbol outside the vocabulary
  parse,              // malformed solution text
  numerical,          // non-finite loss, gradient or divergence
  corrupt_checkpoint, // checksum or layout mismatch
  io,                 // unreadable or unwritable path
  missing_input,      // a required upstream artifact is absent
  empty_dataset,      // a pipeline stage produced nothing
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// CLI exit codes: 0 success, 2 config, 3 runtime/numerical, 4 missing input.
int exit_code(ErrorKind kind);

}  // namespace stepdpo
