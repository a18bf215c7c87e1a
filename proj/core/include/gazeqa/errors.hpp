#pragma once

#include <atomic>
#include <stdexcept>
#include <string>

namespace gazeqa {

/// Malformed input: unreadable files, bad JSON, missing config keys.
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

/// Well-formed input that violates a domain invariant (out-of-bounds span,
/// duplicate id, zero-fixation trial). Messages name the offending record.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// A run that started but cannot continue (non-finite loss, I/O failure
/// mid-write). Callers must not swallow these.
class RunAbort : public std::runtime_error {
 public:
  explicit RunAbort(const std::string& what) : std::runtime_error(what) {}
};

/// Count of clamped log arguments (degenerate probabilities floored at 1e-12).
/// Incremented by the loss functions so tests and operators can notice.
std::atomic<long>& loss_floor_hits();

void warn(const std::string& message);

}  // namespace gazeqa
