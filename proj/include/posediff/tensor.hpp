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

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "posediff/errors.hpp"

namespace posediff {

using Shape = std::vector<std::size_t>;

/// Over-aligned storage so vectorised reductions peel identically for equal
/// shapes; plain std::vector buffers made results depend on heap addresses.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

/// Dense row-major n-d array. Everything in the network is viewed as a 2-d
/// (rows = shape[0], cols = product of the remaining dims) matrix.
template <typename T>
struct Tensor {
  Shape shape;
  AlignedVector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::initializer_list<T> values) : Tensor(std::move(s), AlignedVector<T>(values)) {}
  Tensor(Shape s, const std::vector<T>& values) : Tensor(std::move(s), AlignedVector<T>(values.begin(), values.end())) {}
  Tensor(Shape s, AlignedVector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape)) throw ContractViolation("tensor data does not match shape " + shape_str(shape));
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.empty() ? 1 : (shape[0] == 0 ? 0 : data.size() / shape[0]); }

  T& operator[](std::size_t i) { return data[i]; }
  T operator[](std::size_t i) const { return data[i]; }
  T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool operator==(const Tensor&) const = default;

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatView = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatView = Eigen::Map<const RowMat<T>>;

template <typename T>
MatView<T> as_matrix(Tensor<T>& t) {
  return MatView<T>(t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
ConstMatView<T> as_matrix(const Tensor<T>& t) {
  return ConstMatView<T>(t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

}  // namespace posediff
