#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace xrac {

// Bad argument value (non-finite score, non-positive temperature, ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// A function evaluation produced a non-finite value.
struct EvaluationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Input data failed validation (unknown ids, mismatched hashes, cycles).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
  ParseError(const std::string& what, std::size_t line_no)
      : std::runtime_error("line " + std::to_string(line_no) + ": " + what), line(line_no) {}
  std::size_t line;
};

}  // namespace xrac
