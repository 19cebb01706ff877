// Copyright 2026 The posediff Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "posediff/errors.hpp"
#include "posediff/tensor.hpp"

namespace posediff {

// Tensor container layout (little-endian):
//   "RPTENS01" | dtype u8 (1 = f32, 2 = f64) | ndim u8 | dims u32 × ndim | values

inline constexpr char kTensorMagic[8] = {'R', 'P', 'T', 'E', 'N', 'S', '0', '1'};

enum class DType : std::uint8_t { kF32 = 1, kF64 = 2 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "tensors are f32 or f64");
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

namespace io {

template <typename U>
void put(std::ostream& os, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

/// Reader over an in-memory byte buffer that reports the failing offset.
class ByteReader {
 public:
  ByteReader(std::string bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    unsigned char buf[sizeof(U)];
    std::memcpy(buf, bytes_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    U v;
    std::memcpy(&v, buf, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError(source_ + ": truncated " + what + " at offset " + std::to_string(pos_));
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(source_ + ": " + what + " at offset " + std::to_string(pos_));
  }

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }
  const std::string& source() const { return source_; }

 private:
  std::string bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace io

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (t.shape.size() > 255) throw ContractViolation("tensor rank exceeds 255");
  os.write(kTensorMagic, sizeof(kTensorMagic));
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.shape.size()));
  for (std::size_t d : t.shape) {
    if (d > 0xffffffffu) throw ContractViolation("tensor dimension exceeds u32");
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  }
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(T)));
  } else {
    for (T v : t.data) io::put<T>(os, v);
  }
}

/// A decoded tensor of either precision.
struct AnyTensor {
  DType dtype = DType::kF64;
  Tensor<float> f32;
  Tensor<double> f64;

  const Shape& shape() const { return dtype == DType::kF32 ? f32.shape : f64.shape; }

  template <typename T>
  Tensor<T> as() const {
    return dtype == DType::kF32 ? f32.template cast<T>() : f64.template cast<T>();
  }
};

inline AnyTensor read_tensor(io::ByteReader& r) {
  const std::string magic = r.get_bytes(sizeof(kTensorMagic), "tensor magic");
  if (std::memcmp(magic.data(), kTensorMagic, sizeof(kTensorMagic)) != 0) r.fail("bad tensor magic");
  const auto code = r.get<std::uint8_t>("dtype");
  if (code != 1 && code != 2) r.fail("unknown dtype code " + std::to_string(code));
  const auto ndim = r.get<std::uint8_t>("ndim");
  Shape shape(ndim);
  for (auto& d : shape) d = r.get<std::uint32_t>("dimension");
  const std::size_t count = shape_numel(shape);
  AnyTensor out;
  out.dtype = static_cast<DType>(code);
  auto fill = [&](auto& t) {
    using V = typename std::decay_t<decltype(t.data)>::value_type;
    r.need(count * sizeof(V), "tensor values");
    t.shape = shape;
    t.data.resize(count);
    for (auto& v : t.data) v = r.get<V>("tensor values");
  };
  if (out.dtype == DType::kF32)
    fill(out.f32);
  else
    fill(out.f64);
  return out;
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(path.string() + ": cannot open for writing");
  write_tensor(os, t);
  if (!os) throw FormatError(path.string() + ": write failed");
}

inline AnyTensor load_tensor(const std::filesystem::path& path) {
  io::ByteReader r(io::slurp(path), path.string());
  AnyTensor t = read_tensor(r);
  if (!r.at_end()) r.fail("trailing bytes after tensor");
  return t;
}

}  // namespace posediff
