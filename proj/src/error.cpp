#include "stepdpo/error.hpp"

namespace stepdpo {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return "config";
    case ErrorKind::argument: return "argument";
    case ErrorKind::length: return "length";
    case ErrorKind::tokenize: return "tokenize";
    case ErrorKind::parse: return "parse";
    case ErrorKind::numerical: return "numerical";
    case ErrorKind::corrupt_checkpoint: return "corrupt-checkpoint";
    case ErrorKind::io: return "io";
    case ErrorKind::missing_input: return "missing-input";
    case ErrorKind::empty_dataset: return "empty-dataset";
  }
  return "unknown";
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::missing_input: return 4;
    default: return 3;
  }
}

}  // namespace stepdpo
