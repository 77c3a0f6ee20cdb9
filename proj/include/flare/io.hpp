#pragma once

// Little-endian byte framing shared by the PCF and FLCK formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "flare/errors.hpp"

namespace flare::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class ByteWriter {
 public:
  template <class U>
    requires std::is_arithmetic_v<U>
  void put(U v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(U));
  }

  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }

  void str(const std::string& s) { bytes(s.data(), s.size()); }

  template <class U>
  void array(const std::vector<U>& v) {
    bytes(v.data(), v.size() * sizeof(U));
  }

  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> data) : data_(std::move(data)) {}

  // Throws TruncatedError naming `what` if fewer than n bytes remain.
  void need(std::size_t n, const std::string& what) const {
    if (data_.size() - pos_ < n) {
      throw TruncatedError("truncated file: " + what + " needs " + std::to_string(n) +
                           " bytes, " + std::to_string(data_.size() - pos_) + " remain");
    }
  }

  template <class U>
    requires std::is_arithmetic_v<U>
  U get(const std::string& what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, data_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string str(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  template <class U>
  std::vector<U> array(std::size_t count, const std::string& what) {
    if (count > (data_.size() - pos_) / sizeof(U)) need(count * sizeof(U), what);
    std::vector<U> v(count);
    std::memcpy(v.data(), data_.data() + pos_, count * sizeof(U));
    pos_ += count * sizeof(U);
    return v;
  }

  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::vector<char> data_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Writes through a sibling temporary and renames, so readers never observe a
// half-written file.
inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::vector<char>(text.begin(), text.end()));
}

}  // namespace flare::io
