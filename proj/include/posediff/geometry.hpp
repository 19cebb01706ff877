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
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "posediff/errors.hpp"

namespace posediff {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kPi = std::numbers::pi;

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

/// Proper rotation matrix. The factory functions are the only way to obtain
/// one from raw data, so instances always satisfy RᵀR = I and det R = +1.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  static Rotation identity() { return {}; }

  /// Wraps a matrix the caller guarantees to be in SO(3) (checked to 1e-9).
  static Rotation from_matrix(const Mat3& m) {
    if (!is_rotation(m, 1e-9)) throw DomainError("matrix is not a proper rotation");
    return Rotation(m);
  }

  static Rotation axis_angle(const Vec3& axis, double angle) {
    const double n = axis.norm();
    if (!(n > 0.0)) throw DomainError("rotation axis must be non-zero");
    return Rotation(Eigen::AngleAxisd(angle, axis / n).toRotationMatrix());
  }

  static Rotation rx(double angle) { return axis_angle(Vec3::UnitX(), angle); }
  static Rotation ry(double angle) { return axis_angle(Vec3::UnitY(), angle); }
  static Rotation rz(double angle) { return axis_angle(Vec3::UnitZ(), angle); }

  /// Haar-uniform sample on SO(3) (normalized Gaussian quaternion).
  template <class Rng>
  static Rotation random(Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::Quaterniond q;
    double norm = 0.0;
    do {
      q = Eigen::Quaterniond(n(rng), n(rng), n(rng), n(rng));
      norm = q.norm();
    } while (norm < 1e-12);
    q.coeffs() /= norm;
    return Rotation(q.toRotationMatrix());
  }

  static bool is_rotation(const Mat3& m, double tol) {
    return m.allFinite() && ((m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol) &&
           std::abs(m.determinant() - 1.0) <= tol;
  }

  const Mat3& matrix() const { return m_; }
  Rotation transpose() const { return Rotation(m_.transpose()); }
  Rotation operator*(const Rotation& o) const { return Rotation(m_ * o.m_); }
  Vec3 operator*(const Vec3& v) const { return m_ * v; }

 private:
  explicit Rotation(const Mat3& m) : m_(m) {}
  friend Rotation project_to_so3(const Mat3& m);
  Mat3 m_;
};

/// Rigid object-to-camera transform.
struct Pose {
  Rotation r;
  Vec3 t = Vec3::Zero();

  Pose inverse() const {
    const Rotation rt = r.transpose();
    return {rt, -(rt * t)};
  }
  Pose operator*(const Pose& o) const { return {r * o.r, r * o.t + t}; }
  Vec3 apply(const Vec3& x) const { return r * x + t; }
};

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw DomainError("focal lengths must be positive");
  }
};

/// Detection box in original-image pixels plus the zoom applied when the box
/// is resized to the network input.
struct CropSpec {
  double x = 0.0;
  double y = 0.0;
  double w = 1.0;
  double h = 1.0;
  double r_z = 1.0;

  void validate() const {
    if (!(w > 0.0) || !(h > 0.0) || !(r_z > 0.0)) throw DomainError("crop must have positive w, h and r_z");
  }
};

inline Vec2 project_centroid(const Intrinsics& k, const Vec3& t) {
  if (!(t.z() > 0.0)) throw DomainError("centroid depth must be positive");
  return {k.fx * t.x() / t.z() + k.cx, k.fy * t.y() / t.z() + k.cy};
}

/// Nearest rotation in Frobenius norm, via SVD with the Kabsch sign fix.
/// Throws when the matrix has rank < 2 (the projection is not unique).
inline Rotation project_to_so3(const Mat3& m) {
  if (!m.allFinite()) throw DegenerateInputError("non-finite matrix");
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 s = svd.singularValues();
  if (!(s(0) > 0.0) || s(1) <= 1e-9 * s(0)) throw DegenerateInputError("rank-deficient alignment matrix");
  Mat3 u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) *= -1.0;
  return Rotation(u * v.transpose());
}

inline double procrustes_objective(const Rotation& r, std::span<const Vec3> src, std::span<const Vec3> dst) {
  double acc = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) acc += (r * src[i] - dst[i]).squaredNorm();
  return acc;
}

/// argmin over SO(3) of Σ‖R·src_i − dst_i‖².
inline Rotation procrustes_align(std::span<const Vec3> src, std::span<const Vec3> dst) {
  if (src.size() != dst.size()) throw ContractViolation("procrustes_align: size mismatch");
  if (src.size() < 3) throw DegenerateInputError("procrustes_align needs at least 3 correspondences");
  Mat3 cov = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) cov += dst[i] * src[i].transpose();
  return project_to_so3(cov);
}

/// H_Q = H_rel · H_gt.
inline Pose compose_query_pose(const Pose& h_rel, const Pose& h_gt) { return h_rel * h_gt; }

inline double geodesic_distance(const Rotation& a, const Rotation& b) {
  // atan2 form stays accurate near 0 and pi where acos of the trace loses digits.
  const Eigen::Matrix3d m = a.matrix().transpose() * b.matrix();
  const Eigen::Vector3d w(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  return std::atan2(0.5 * w.norm(), 0.5 * (m.trace() - 1.0));
}

/// Projects the arithmetic mean of the inputs back onto SO(3).
inline Rotation chordal_mean(std::span<const Rotation> rs) {
  if (rs.empty()) throw DegenerateInputError("chordal_mean of an empty set");
  Mat3 acc = Mat3::Zero();
  for (const auto& r : rs) acc += r.matrix();
  return project_to_so3(acc / static_cast<double>(rs.size()));
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw DegenerateInputError("median of an empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

inline Vec3 componentwise_median(std::span<const Vec3> ts) {
  Vec3 out;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> col;
    col.reserve(ts.size());
    for (const auto& t : ts) col.push_back(t(c));
    out(c) = median(std::move(col));
  }
  return out;
}

}  // namespace posediff
