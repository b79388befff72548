#pragma once

#include <charconv>
#include <string>

namespace dtlab {

// Shortest decimal that parses back to the exact same value. Used everywhere
// floats are written to text so repeated runs emit identical bytes.
inline void append_number(std::string& out, float v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

inline void append_number(std::string& out, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

inline std::string number_str(float v) {
  std::string s;
  append_number(s, v);
  return s;
}

inline std::string number_str(double v) {
  std::string s;
  append_number(s, v);
  return s;
}

}  // namespace dtlab
