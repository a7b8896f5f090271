// Small file/codec helpers shared by the table and checkpoint formats: whole-
// file reads, line iteration over an in-memory buffer (the codecs mix text
// headers with raw binary payloads), and explicit little-endian f32 packing.
#pragma once

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "qrec/common.hpp"

namespace qrec::io {

inline std::string read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct LineCursor {
  const std::string& buf;
  size_t pos = 0;
  std::string next_line() {
    QREC_CHECK(pos <= buf.size(), "read past end of buffer");
    const size_t nl = buf.find('\n', pos);
    std::string line = nl == std::string::npos ? buf.substr(pos)
                                               : buf.substr(pos, nl - pos);
    pos = nl == std::string::npos ? buf.size() : nl + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  }
  bool done() const { return pos >= buf.size(); }
};

inline void put_f32(std::ostream& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  const char b[4] = {char(bits & 0xff), char((bits >> 8) & 0xff),
                     char((bits >> 16) & 0xff), char((bits >> 24) & 0xff)};
  out.write(b, 4);
}

// Reads one f32 from p (little-endian) and advances it.
inline float get_f32(const char*& p) {
  const auto* u = reinterpret_cast<const unsigned char*>(p);
  const uint32_t bits = uint32_t(u[0]) | uint32_t(u[1]) << 8 |
                        uint32_t(u[2]) << 16 | uint32_t(u[3]) << 24;
  p += 4;
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace qrec::io
