#pragma once

#include <stdexcept>
#include <string>

namespace phasefuse {

/// Invalid input data or a violated precondition (bad shapes, malformed files,
/// out-of-range values). The CLI maps this to exit code 2.
class data_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of a command or configuration surface (unknown key, malformed flag).
/// The CLI maps this to exit code 1.
class usage_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

[[noreturn]] inline void fail(const std::string& what) { throw data_error(what); }

inline void require(bool cond, const char* what) {
  if (!cond) fail(what);
}

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(what);
}

}  // namespace detail
}  // namespace phasefuse
