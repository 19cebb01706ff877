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
#include <cstddef>
#include <span>
#include <vector>

#include "posediff/autodiff.hpp"
#include "posediff/errors.hpp"
#include "posediff/geometry.hpp"
#include "posediff/posemap.hpp"

namespace posediff {

struct LossWeights {
  double recon = 1.0;
  double cos = 1.0;
  double reg = 0.1;
  double x = 1.0;
  double y = 1.0;
  double z = 1.0;
  double t = 0.5;
  double rot = 1.0;
  double trans = 1.0;

  void validate() const {
    for (double v : {recon, cos, reg, x, y, z, t, rot, trans})
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
  }

  LossWeights scaled(double c) const {
    return {recon * c, cos * c, reg * c, x * c, y * c, z * c, t * c, rot * c, trans * c};
  }
};

struct RotLossTerms {
  double recon = 0.0;
  double cos = 0.0;
  double reg = 0.0;
  double total = 0.0;
  std::size_t skipped_cells = 0;  // zero-norm predictions left out of the cosine term
};

struct TransLossTerms {
  double recon = 0.0;
  double xyz = 0.0;
  double total = 0.0;
  bool depth_clamped = false;  // decoded depth was non-positive and clamped
  Vec3 decoded = Vec3::Zero();
};

/// Adjacent ray pairs: right and down neighbours on the p×p grid, each once.
inline std::vector<std::pair<std::size_t, std::size_t>> adjacent_pairs(int p) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < p; ++j) {
      const auto id = static_cast<std::size_t>(i * p + j);
      if (j + 1 < p) out.emplace_back(id, id + 1);
      if (i + 1 < p) out.emplace_back(id, id + static_cast<std::size_t>(p));
    }
  }
  return out;
}

inline double safe_acos(double u) { return std::acos(std::clamp(u, -1.0, 1.0)); }

/// Mean squared deviation of adjacent-ray angles from the canonical ones.
inline double ray_angle_consistency(std::span<const double> rays, const CanonicalGrid& grid) {
  const auto pairs = adjacent_pairs(grid.p);
  double acc = 0.0;
  for (auto [i, j] : pairs) {
    const Vec3 a(rays[3 * i], rays[3 * i + 1], rays[3 * i + 2]);
    const Vec3 b(rays[3 * j], rays[3 * j + 1], rays[3 * j + 2]);
    const double alpha = safe_acos(a.normalized().dot(b.normalized()));
    const double ref = safe_acos(grid.dirs[i].dot(grid.dirs[j]));
    acc += (alpha - ref) * (alpha - ref);
  }
  return acc / static_cast<double>(pairs.size());
}

namespace detail {

inline void check_map_sizes(std::size_t pred, std::size_t target, std::size_t cells) {
  if (pred != target || pred != 3 * cells) throw ContractViolation("loss: map shape mismatch");
}

inline double smooth_abs(double x, double delta = 1e-8) { return std::abs(x) < delta ? x * x / (2 * delta) : std::abs(x) - delta / 2; }
inline double smooth_abs_grad(double x, double delta = 1e-8) { return std::abs(x) < delta ? x / delta : (x > 0 ? 1.0 : -1.0); }

}  // namespace detail

/// Rotation objective on a predicted ray map: per-cell squared error, cosine
/// dissimilarity, and adjacent-angle consistency. When `grad` is non-empty it
/// receives d(total)/d(pred).
inline RotLossTerms loss_rot(std::span<const double> pred, std::span<const double> target, const CanonicalGrid& grid,
                             const LossWeights& w, std::span<double> grad = {}) {
  const std::size_t n = grid.cells();
  detail::check_map_sizes(pred.size(), target.size(), n);
  const bool want = !grad.empty();
  if (want) std::fill(grad.begin(), grad.end(), 0.0);
  RotLossTerms out;

  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    out.recon += d * d;
    if (want) grad[i] += w.recon * 2.0 * d / static_cast<double>(n);
  }
  out.recon /= static_cast<double>(n);

  std::vector<Vec3> unit(n, Vec3::Zero());
  std::vector<double> norm(n, 0.0);
  std::vector<std::size_t> used;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 p(pred[3 * i], pred[3 * i + 1], pred[3 * i + 2]);
    norm[i] = p.norm();
    if (norm[i] > 1e-12) unit[i] = p / norm[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 t(target[3 * i], target[3 * i + 1], target[3 * i + 2]);
    if (norm[i] <= 1e-12 || t.norm() <= 1e-12) {
      ++out.skipped_cells;
      continue;
    }
    used.push_back(i);
  }
  for (std::size_t i : used) {
    const Vec3 t = Vec3(target[3 * i], target[3 * i + 1], target[3 * i + 2]).normalized();
    const double c = unit[i].dot(t);
    out.cos += 1.0 - c;
    if (want) {
      // d(1 − c)/dp = −(t − c·u)/|p|
      const Vec3 g = -(t - c * unit[i]) / norm[i] * (w.cos / static_cast<double>(used.size()));
      for (int k = 0; k < 3; ++k) grad[3 * i + static_cast<std::size_t>(k)] += g(k);
    }
  }
  if (!used.empty()) out.cos /= static_cast<double>(used.size());

  const auto pairs = adjacent_pairs(grid.p);
  for (auto [i, j] : pairs) {
    if (norm[i] <= 1e-12 || norm[j] <= 1e-12) continue;
    const double u = unit[i].dot(unit[j]);
    const double ref = safe_acos(grid.dirs[i].dot(grid.dirs[j]));
    const double diff = safe_acos(u) - ref;
    out.reg += diff * diff;
    if (want && std::abs(u) < 1.0 - 1e-12) {
      const double coef = w.reg * 2.0 * diff * (-1.0 / std::sqrt(1.0 - u * u)) / static_cast<double>(pairs.size());
      const Vec3 gi = (unit[j] - u * unit[i]) / norm[i] * coef;
      const Vec3 gj = (unit[i] - u * unit[j]) / norm[j] * coef;
      for (int k = 0; k < 3; ++k) {
        grad[3 * i + static_cast<std::size_t>(k)] += gi(k);
        grad[3 * j + static_cast<std::size_t>(k)] += gj(k);
      }
    }
  }
  out.reg /= static_cast<double>(pairs.size());
  out.total = w.recon * out.recon + w.cos * out.cos + w.reg * out.reg;
  return out;
}

/// Decoding context for a translation map: intrinsics and crop of the query,
/// plus the factor turning the mean depth channel into metric depth (the
/// crop's zoom ratio for absolute maps, see relative_depth_factor otherwise).
struct TranslationDecode {
  Intrinsics k;
  CropSpec crop;
  double depth_factor = 1.0;
};

/// Translation objective: per-cell squared error plus weighted L1 on the
/// translation decoded from the prediction. The decode is differentiated
/// exactly; the L1 kink is smoothed within 1e-8.
inline TransLossTerms loss_trans(std::span<const double> pred, std::span<const double> target,
                                 const TranslationDecode& dec, const Vec3& t_gt, const LossWeights& w,
                                 std::span<double> grad = {}) {
  if (pred.size() != target.size() || pred.size() % 3 != 0) throw ContractViolation("loss_trans: map shape mismatch");
  const std::size_t n = pred.size() / 3;
  const int p = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (static_cast<std::size_t>(p * p) != n) throw ContractViolation("loss_trans: map is not square");
  const bool want = !grad.empty();
  if (want) std::fill(grad.begin(), grad.end(), 0.0);
  TransLossTerms out;

  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    out.recon += d * d;
    if (want) grad[i] += w.recon * 2.0 * d / static_cast<double>(n);
  }
  out.recon /= static_cast<double>(n);

  const auto& crop = dec.crop;
  const auto& k = dec.k;
  double ox = 0.0, oy = 0.0, mz = 0.0;
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < p; ++j) {
      const auto c = static_cast<std::size_t>(i * p + j);
      const Vec2 uv = crop_sample_pixel(crop, p, i, j);
      ox += uv.x() - crop.w * pred[3 * c];
      oy += uv.y() - crop.h * pred[3 * c + 1];
      mz += pred[3 * c + 2];
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  ox *= inv_n;
  oy *= inv_n;
  mz *= inv_n;
  double tz = dec.depth_factor * mz;
  if (!(tz > 1e-6)) {
    tz = 1e-6;
    out.depth_clamped = true;
  }
  const double nx = (ox - k.cx) / k.fx;
  const double ny = (oy - k.cy) / k.fy;
  const Vec3 t_hat(tz * nx, tz * ny, tz);
  out.decoded = t_hat;
  const Vec3 e = t_hat - t_gt;
  out.xyz = w.x * detail::smooth_abs(e.x()) + w.y * detail::smooth_abs(e.y()) + w.z * detail::smooth_abs(e.z());
  if (want) {
    const double gx = w.t * w.x * detail::smooth_abs_grad(e.x());
    const double gy = w.t * w.y * detail::smooth_abs_grad(e.y());
    const double gz = w.t * w.z * detail::smooth_abs_grad(e.z());
    const double d_ox = gx * tz / k.fx;
    const double d_oy = gy * tz / k.fy;
    const double d_tz = out.depth_clamped ? 0.0 : gx * nx + gy * ny + gz;
    for (std::size_t c = 0; c < n; ++c) {
      grad[3 * c] += d_ox * (-crop.w) * inv_n;
      grad[3 * c + 1] += d_oy * (-crop.h) * inv_n;
      grad[3 * c + 2] += d_tz * dec.depth_factor * inv_n;
    }
  }
  out.total = w.recon * out.recon + w.t * out.xyz;
  return out;
}

inline double loss_total(double rot_total, double trans_total, const LossWeights& w) {
  return w.rot * rot_total + w.trans * trans_total;
}

inline double loss_total(const RotLossTerms& r, const TransLossTerms& t, const LossWeights& w) {
  return loss_total(r.total, t.total, w);
}

// ------------------------------------------------------------ graph wrappers

/// Scalar tape node for loss_rot on a [p²×3] prediction.
template <typename T>
typename Graph<T>::Var loss_rot_op(Graph<T>& g, typename Graph<T>::Var pred, std::span<const double> target,
                                   const CanonicalGrid& grid, const LossWeights& w, RotLossTerms* terms = nullptr) {
  const auto& vp = g.value(pred);
  std::vector<double> p(vp.data.begin(), vp.data.end());
  auto grad = std::make_shared<std::vector<double>>(p.size());
  const RotLossTerms r = loss_rot(p, target, grid, w, *grad);
  if (terms) *terms = r;
  return g.custom({pred}, Tensor<T>({1}, std::vector<T>{static_cast<T>(r.total)}),
                  [grad](const Tensor<T>& gout, std::span<Tensor<T>*> gin) {
                    if (!gin[0]) return;
                    for (std::size_t i = 0; i < grad->size(); ++i) (*gin[0])[i] += gout[0] * static_cast<T>((*grad)[i]);
                  });
}

template <typename T>
typename Graph<T>::Var loss_trans_op(Graph<T>& g, typename Graph<T>::Var pred, std::span<const double> target,
                                     const TranslationDecode& dec, const Vec3& t_gt, const LossWeights& w,
                                     TransLossTerms* terms = nullptr) {
  const auto& vp = g.value(pred);
  std::vector<double> p(vp.data.begin(), vp.data.end());
  auto grad = std::make_shared<std::vector<double>>(p.size());
  const TransLossTerms r = loss_trans(p, target, dec, t_gt, w, *grad);
  if (terms) *terms = r;
  return g.custom({pred}, Tensor<T>({1}, std::vector<T>{static_cast<T>(r.total)}),
                  [grad](const Tensor<T>& gout, std::span<Tensor<T>*> gin) {
                    if (!gin[0]) return;
                    for (std::size_t i = 0; i < grad->size(); ++i) (*gin[0])[i] += gout[0] * static_cast<T>((*grad)[i]);
                  });
}

}  // namespace posediff
