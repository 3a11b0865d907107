#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace crf_refine {

// Shape, range or finiteness violation in caller-supplied data.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Out-of-range configuration value (sigma <= 0, floor outside (0,1), ...).
class InvalidParameter : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Quadratic-cost guard tripped (exact energy on a large grid).
class SizeError : public std::length_error {
 public:
  using std::length_error::length_error;
};

// Statistical test with no defined answer (n < 2, zero-variance differences).
class UndefinedTest : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed serialized input. `offset` is the byte position at which parsing
// failed; for text formats it is the position in the source text, or npos when
// the failure is semantic rather than positional.
class ParseError : public std::runtime_error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  enum class Kind {
    BadMagic,
    BadVersion,
    BadDtype,
    BadHeader,
    Truncated,
    TrailingBytes,
    UnsupportedFormat,
    AmbiguousValue,
    Schema,
    Io,
  };

  ParseError(Kind kind, std::size_t offset, const std::string& what)
      : std::runtime_error(what), kind_(kind), offset_(offset) {}

  Kind kind() const noexcept { return kind_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  Kind kind_;
  std::size_t offset_;
};

}  // namespace crf_refine
