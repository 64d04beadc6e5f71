#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>

#include "sesom/errors.hpp"
#include "sesom/linalg.hpp"

// Checkpoint container format. Every file starts with an 8-byte magic whose
// first seven bytes name the payload kind and whose last byte is the format
// version. All integers and doubles are little-endian.

namespace sesom {

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path)
      : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open for writing: " + path.string());
  }

  void magic(const char tag[9]) { raw(tag, 8); }
  void u32(std::uint32_t v) { raw_le(v); }
  void u64(std::uint64_t v) { raw_le(v); }
  void i32(std::int32_t v) { raw_le(static_cast<std::uint32_t>(v)); }

  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    raw_le(bits);
  }

  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

  void doubles(std::span<const double> v) {
    for (double x : v) f64(x);
  }

 private:
  template <class T>
  void raw_le(T v) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i)
      buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    raw(reinterpret_cast<const char*>(buf), sizeof(T));
  }

  void raw(const char* p, std::size_t n) {
    out_.write(p, static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failed");
  }

  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path)
      : in_(path, std::ios::binary), path_(path.string()) {
    if (!in_) throw IoError("cannot open for reading: " + path_);
  }

  // Magic check: a mismatch in the 7-byte kind tag is a FormatError, a
  // matching tag with a different trailing version byte is a VersionError.
  void expect_magic(const char tag[9]) {
    const std::size_t at = offset_;
    char got[9] = {0};
    raw(got, 8);
    if (std::memcmp(got, tag, 7) != 0)
      throw FormatError(path_ + ": bad magic \"" + printable(got) + "\", expected \"" +
                            std::string(tag, 8) + "\"",
                        at);
    if (got[7] != tag[7])
      throw VersionError(path_ + ": unsupported version '" + printable(got + 7) +
                             "' of \"" + std::string(tag, 7) + "\"",
                         at);
  }

  std::uint32_t u32() { return raw_le<std::uint32_t>(); }
  std::uint64_t u64() { return raw_le<std::uint64_t>(); }
  std::int32_t i32() { return static_cast<std::int32_t>(raw_le<std::uint32_t>()); }

  double f64() {
    std::uint64_t bits = raw_le<std::uint64_t>();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string str() {
    const std::size_t at = offset_;
    std::uint32_t n = u32();
    if (n > (1u << 24))
      throw FormatError(path_ + ": implausible string length " + std::to_string(n), at);
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  void doubles(std::span<double> v) {
    for (double& x : v) x = f64();
  }

  Vec doubles(std::size_t n) {
    Vec v(n);
    doubles(std::span<double>(v));
    return v;
  }

  // Call after the last field; trailing bytes mean the file does not match
  // the advertised layout.
  void expect_eof() {
    char c;
    in_.read(&c, 1);
    if (!in_.eof())
      throw FormatError(path_ + ": trailing bytes after payload", offset_);
  }

  std::size_t offset() const { return offset_; }

 private:
  template <class T>
  T raw_le() {
    unsigned char buf[sizeof(T)];
    raw(reinterpret_cast<char*>(buf), sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
  }

  void raw(char* p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw FormatError(path_ + ": truncated, wanted " + std::to_string(n) +
                            " bytes",
                        offset_);
    offset_ += n;
  }

  static std::string printable(const char* p) {
    std::string s;
    for (std::size_t i = 0; i < 8 && p[i]; ++i)
      s += (p[i] >= 32 && p[i] < 127) ? p[i] : '?';
    return s;
  }

  std::ifstream in_;
  std::string path_;
  std::size_t offset_ = 0;
};

}  // namespace sesom
