#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ng {

template <class... Ts>
std::string cat(Ts&&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

template <class T0, class T1, class... Ts>
[[noreturn]] void fail(T0&& a, T1&& b, Ts&&... rest) {
  fail(cat(std::forward<T0>(a), std::forward<T1>(b), std::forward<Ts>(rest)...));
}

// Evaluates the message lazily so hot-path checks stay cheap.
#define NG_CHECK(cond, ...)             \
  do {                                  \
    if (!(cond)) {                      \
      ::ng::fail(::ng::cat(__VA_ARGS__)); \
    }                                   \
  } while (0)

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

}  // namespace ng
