#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace propedit {

// Invalid dimensions, counts or option combinations.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A call received arguments that violate its preconditions.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A named weight, tensor or artifact could not be resolved.
class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Non-finite loss during an optimization loop. `where` is a step index or
// an episode id depending on the loop that raised it.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::int64_t where)
      : std::runtime_error(what), where_(where) {}
  std::int64_t where() const { return where_; }

 private:
  std::int64_t where_;
};

}  // namespace propedit
