// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "tokensel/errors.hpp"
#include "tokensel/rng.hpp"
#include "tokensel/tensor.hpp"

// Little-endian binary encoding helpers shared by the dataset and checkpoint
// formats. Payloads are assembled in memory, which keeps checksumming and
// atomic whole-file writes trivial at this scale.

namespace tokensel {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

class ByteWriter {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }

  void magic(std::string_view tag) { buffer_.append(tag.data(), tag.size()); }
  void append(std::string_view raw) { buffer_.append(raw.data(), raw.size()); }

  void str(std::string_view s) {
    u64(s.size());
    buffer_.append(s.data(), s.size());
  }

  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d : t.shape()) u64(d);
    for (std::size_t i = 0; i < t.size(); ++i) f64(t.data()[i]);
  }

  std::size_t size() const { return buffer_.size(); }
  const std::string& bytes() const { return buffer_; }

  void patch_u64(std::size_t offset, std::uint64_t v) {
    std::memcpy(buffer_.data() + offset, &v, sizeof v);
  }

 private:
  void raw(const void* p, std::size_t n) {
    buffer_.append(static_cast<const char*>(p), n);
  }
  std::string buffer_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  float f32() { return pod<float>(); }
  double f64() { return pod<double>(); }

  void expect_magic(std::string_view tag) {
    if (remaining() < tag.size() ||
        std::string_view(bytes_.data() + pos_, tag.size()) != tag) {
      throw IntegrityError("bad file magic, expected '" + std::string(tag) + "'");
    }
    pos_ += tag.size();
  }

  std::string str() {
    const std::uint64_t n = u64();
    if (remaining() < n) throw IntegrityError("truncated string field");
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  std::string chars(std::size_t n) {
    if (remaining() < n) throw IntegrityError("truncated file");
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  Tensor tensor() {
    const std::uint32_t ndim = u32();
    if (ndim > 8) throw IntegrityError("implausible tensor rank");
    Shape shape(ndim);
    for (auto& d : shape) d = u64();
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = f64();
    return t;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }
  void seek(std::size_t pos) {
    if (pos > bytes_.size()) throw IntegrityError("seek past end of file");
    pos_ = pos;
  }
  const std::string& bytes() const { return bytes_; }

 private:
  template <typename T>
  T pod() {
    if (remaining() < sizeof(T)) throw IntegrityError("truncated file");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

inline std::uint64_t checksum_bytes(std::string_view bytes) {
  return detail::fnv1a64(bytes);
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading '" + path + "'");
  return bytes;
}

}  // namespace tokensel
