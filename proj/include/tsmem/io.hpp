#pragma once

// Little-endian binary file helpers and SHA-256 digests (OpenSSL) used by
// the TSMC / TSMT / TSMP container formats and the run MANIFEST.

#include "tsmem/core.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace tsmem {

using Digest = std::array<std::uint8_t, 32>;

inline Digest sha256(const void* data, std::size_t len) {
  Digest out{};
  unsigned int out_len = 0;
  if (EVP_Digest(data, len, out.data(), &out_len, EVP_sha256(), nullptr) != 1 ||
      out_len != out.size())
    throw std::runtime_error("sha256: digest failed");
  return out;
}

inline Digest sha256(const std::vector<std::uint8_t>& bytes) {
  return sha256(bytes.data(), bytes.size());
}

inline std::string hex(const Digest& d) {
  static const char* k = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (std::uint8_t b : d) {
    s.push_back(k[b >> 4]);
    s.push_back(k[b & 0xf]);
  }
  return s;
}

inline Digest sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("sha256_file: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return sha256(bytes);
}

// Append-only byte sink; also usable to accumulate fingerprint material.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }

  void raw(const void* data, std::size_t len) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + len);
  }

  void magic(const char (&m)[5]) { raw(m, 4); }
  void u16(std::uint16_t v) { raw(&v, sizeof v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void i64(std::int64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }

  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }

  void matrix(const Matrix& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    for (long r = 0; r < m.rows(); ++r)
      for (long c = 0; c < m.cols(); ++c) f64(m(r, c));
  }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

  Digest digest() const { return sha256(bytes_.data(), bytes_.size()); }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("ByteWriter: cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(bytes_.data()),
              static_cast<std::streamsize>(bytes_.size()));
    if (!out) throw std::runtime_error("ByteWriter: write failed " + path.string());
  }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> bytes)
      : bytes_(std::move(bytes)) {}

  static ByteReader load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("ByteReader: cannot open " + path.string());
    return ByteReader(std::vector<std::uint8_t>(
        (std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()));
  }

  void raw(void* out, std::size_t len) {
    if (pos_ + len > bytes_.size())
      throw std::runtime_error("ByteReader: truncated input");
    std::memcpy(out, bytes_.data() + pos_, len);
    pos_ += len;
  }

  void expect_magic(const char (&m)[5]) {
    char got[4];
    raw(got, 4);
    if (std::memcmp(got, m, 4) != 0)
      throw std::runtime_error(std::string("ByteReader: bad magic, expected ") + m);
  }

  std::uint8_t u8() { std::uint8_t v; raw(&v, sizeof v); return v; }
  std::uint16_t u16() { std::uint16_t v; raw(&v, sizeof v); return v; }
  std::uint32_t u32() { std::uint32_t v; raw(&v, sizeof v); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, sizeof v); return v; }
  std::int64_t i64() { std::int64_t v; raw(&v, sizeof v); return v; }
  double f64() { double v; raw(&v, sizeof v); return v; }

  std::string str() {
    std::string s(u64(), '\0');
    raw(s.data(), s.size());
    return s;
  }

  Matrix matrix() {
    const long rows = u32(), cols = u32();
    Matrix m(rows, cols);
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c) m(r, c) = f64();
    return m;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace tsmem
