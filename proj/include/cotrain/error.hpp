#pragma once

#include <stdexcept>
#include <string>

namespace cotrain {

// Malformed input: bad JSON, missing fields, unparseable label lines.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Well-formed input that breaks a domain invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Detector backend failure (worker exit code, malformed response, ...).
class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Missing or corrupt checkpoint files.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cotrain
