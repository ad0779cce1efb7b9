#pragma once

#include <stdexcept>
#include <string>

namespace teamprod {

// Malformed input data. `row` is 1-based within the file (0 when not tied to a row).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t row = 0)
      : std::runtime_error(row ? "row " + std::to_string(row) + ": " + what : what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

// Input that parses but violates a precondition of an operation.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Estimation failure, labeled with the pipeline stage that raised it.
class EstimationError : public std::runtime_error {
 public:
  EstimationError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)), message_(what) {}
  const std::string& stage() const noexcept { return stage_; }
  // what() without the stage prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  std::string stage_;
  std::string message_;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace teamprod
