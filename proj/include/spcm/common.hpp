#pragma once

#include <cstdarg>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace spcm {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape/axis violations in tensor ops.
struct ShapeError : Error {
  using Error::Error;
};

// Malformed or truncated on-disk data; message carries the byte offset.
struct IoError : Error {
  using Error::Error;
};

// Bad run configuration (unknown key, out-of-range value).
struct ConfigError : Error {
  using Error::Error;
};

// Dataset-level inconsistencies (missing fixations, bad splits).
struct DataError : Error {
  using Error::Error;
};

inline std::string strf(const char* fmt, ...) {
  va_list ap;
  va_start(ap, fmt);
  char buf[1024];
  std::vsnprintf(buf, sizeof(buf), fmt, ap);
  va_end(ap);
  return std::string(buf);
}

}  // namespace spcm
