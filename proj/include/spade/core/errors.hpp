#pragma once

#include <stdexcept>
#include <string>

namespace spade {

// Shape disagreement between operands. Message names both shapes.
class DimensionError : public std::runtime_error {
public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// A precondition of an operation was violated by the caller.
class ContractError : public std::runtime_error {
public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where the math requires finite ones.
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unknown category id against a vocabulary.
class VocabError : public std::runtime_error {
public:
  explicit VocabError(const std::string& msg) : std::runtime_error(msg) {}
};

// Scene placement could not satisfy constraints within the retry budget.
class GenerationError : public std::runtime_error {
public:
  explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input file; carries the 1-based line number when known.
class ParseError : public std::runtime_error {
public:
  ParseError(const std::string& msg, long line = -1)
      : std::runtime_error(line >= 0 ? msg + " (line " + std::to_string(line) + ")" : msg),
        line_(line) {}
  long line() const { return line_; }

private:
  long line_;
};

}  // namespace spade
