#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace defusion {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Tensor shape or dimensionality violation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration detected before a run starts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid runtime value (bad label, non-finite gradient, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// File or directory level failure.
class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void msg_append(std::ostringstream&) {}

template <class T, class... Rest>
void msg_append(std::ostringstream& os, const T& head, const Rest&... rest) {
  os << head;
  msg_append(os, rest...);
}

}  // namespace detail

template <class... Args>
std::string strcat_msg(const Args&... args) {
  std::ostringstream os;
  detail::msg_append(os, args...);
  return os.str();
}

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  s += "]";
  return s;
}

}  // namespace defusion
