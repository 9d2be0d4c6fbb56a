#pragma once

#include <stdexcept>
#include <string>

namespace mixres {

/// Input violated an operation's precondition (bad shape, bad parameter).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Internal state is inconsistent, e.g. a masked patch without a cache entry.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Predictor training diverged.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

inline void ensure(bool cond, const std::string& what) {
  if (!cond) throw IntegrityError(what);
}

}  // namespace detail
}  // namespace mixres
