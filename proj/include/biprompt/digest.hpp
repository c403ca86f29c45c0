#pragma once

#include <openssl/evp.h>

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace biprompt {

using ByteBuffer = std::vector<unsigned char>;

inline void append_le_u32(ByteBuffer& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline void append_le_u64(ByteBuffer& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline void append_le_double(ByteBuffer& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  append_le_u64(out, bits);
}

inline void append_le_doubles(ByteBuffer& out, const std::vector<double>& vs) {
  for (double v : vs) append_le_double(out, v);
}

inline std::string sha256_hex(const ByteBuffer& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int md_len = 0;
  EVP_Digest(data.empty() ? nullptr : data.data(), data.size(), md, &md_len, EVP_sha256(),
             nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * md_len);
  for (unsigned int i = 0; i < md_len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

}  // namespace biprompt
