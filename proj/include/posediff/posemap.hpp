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

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "posediff/errors.hpp"
#include "posediff/geometry.hpp"

namespace posediff {

/// Object-centred reference rays: the object centre acts as a virtual pinhole
/// camera with a uniform intrinsic, one unit ray through each cell centre of a
/// p×p grid spanning [-s, s]² on the z = 1 plane.
struct CanonicalGrid {
  int p = 0;
  double half_extent = 1.0;
  std::vector<Vec3> dirs;  // row-major, p*p entries

  std::size_t cells() const { return dirs.size(); }
};

inline CanonicalGrid canonical_rays(int p, double half_extent = 1.0) {
  if (p < 2) throw ConfigError("canonical grid needs p >= 2");
  if (!(half_extent > 0.0)) throw ConfigError("canonical grid half extent must be positive");
  CanonicalGrid g{p, half_extent, {}};
  g.dirs.reserve(static_cast<std::size_t>(p * p));
  const double s = half_extent;
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < p; ++j) {
      const double u = -s + (2.0 * j + 1.0) * s / p;
      const double v = -s + (2.0 * i + 1.0) * s / p;
      g.dirs.push_back(Vec3(u, v, 1.0).normalized());
    }
  }
  return g;
}

/// p×p×3 row-major grid of doubles. The tag keeps ray maps and translation
/// maps from being mixed up at call sites.
template <class Tag>
class GridMap {
 public:
  GridMap() = default;
  explicit GridMap(int p) : p_(p), data_(static_cast<std::size_t>(p * p * 3), 0.0) {}
  GridMap(int p, std::vector<double> data) : p_(p), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(p * p * 3)) throw ContractViolation("grid map size mismatch");
  }

  int p() const { return p_; }
  std::size_t cells() const { return static_cast<std::size_t>(p_ * p_); }

  Vec3 cell(std::size_t i) const { return {data_[3 * i], data_[3 * i + 1], data_[3 * i + 2]}; }
  void set_cell(std::size_t i, const Vec3& v) {
    data_[3 * i] = v.x();
    data_[3 * i + 1] = v.y();
    data_[3 * i + 2] = v.z();
  }
  double& at(int row, int col, int ch) { return data_[static_cast<std::size_t>((row * p_ + col) * 3 + ch)]; }
  double at(int row, int col, int ch) const { return data_[static_cast<std::size_t>((row * p_ + col) * 3 + ch)]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool operator==(const GridMap&) const = default;

 private:
  int p_ = 0;
  std::vector<double> data_;
};

struct RayTag {};
struct TranslationTag {};
using RayMap = GridMap<RayTag>;
using TranslationMap = GridMap<TranslationTag>;

inline RayMap encode_rotation(const Rotation& r, const CanonicalGrid& grid) {
  RayMap m(grid.p);
  for (std::size_t i = 0; i < grid.cells(); ++i) m.set_cell(i, r * grid.dirs[i]);
  return m;
}

/// Cells are renormalised first (noisy diffusion states are not unit length);
/// cells with norm below 1e-6 carry no direction and are dropped.
inline Rotation decode_rotation(const RayMap& m, const CanonicalGrid& grid) {
  if (m.p() != grid.p || grid.p < 2) throw ContractViolation("decode_rotation: grid/map size mismatch");
  std::vector<Vec3> src;
  std::vector<Vec3> dst;
  src.reserve(grid.cells());
  dst.reserve(grid.cells());
  for (std::size_t i = 0; i < grid.cells(); ++i) {
    const Vec3 d = m.cell(i);
    if (!d.allFinite()) throw DomainError("decode_rotation: non-finite ray");
    const double n = d.norm();
    if (n < 1e-6) continue;
    src.push_back(grid.dirs[i]);
    dst.push_back(d / n);
  }
  if (src.size() < 3) throw DegenerateInputError("decode_rotation: fewer than 3 usable rays");
  return procrustes_align(src, dst);
}

/// Pixel centre sampled for cell (row, col) of a p×p map over the crop box.
inline Vec2 crop_sample_pixel(const CropSpec& crop, int p, int row, int col) {
  return {crop.x + (col + 0.5) * crop.w / p, crop.y + (row + 0.5) * crop.h / p};
}

/// Dense offset map: per sampled pixel, the normalised offset to the projected
/// centroid, plus depth divided by the zoom ratio.
inline TranslationMap encode_translation(const Vec3& t, const Intrinsics& k, const CropSpec& crop, int p) {
  if (p < 1) throw ConfigError("translation map needs p >= 1");
  crop.validate();
  const Vec2 o = project_centroid(k, t);
  TranslationMap m(p);
  const double depth = t.z() / crop.r_z;
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < p; ++j) {
      const Vec2 uv = crop_sample_pixel(crop, p, i, j);
      m.at(i, j, 0) = (uv.x() - o.x()) / crop.w;
      m.at(i, j, 1) = (uv.y() - o.y()) / crop.h;
      m.at(i, j, 2) = depth;
    }
  }
  return m;
}

/// Mean centroid estimate over all cells of an offset map.
inline Vec2 decode_centroid(const TranslationMap& m, const CropSpec& crop) {
  const int p = m.p();
  Vec2 acc = Vec2::Zero();
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < p; ++j) {
      const Vec2 uv = crop_sample_pixel(crop, p, i, j);
      acc.x() += uv.x() - crop.w * m.at(i, j, 0);
      acc.y() += uv.y() - crop.h * m.at(i, j, 1);
    }
  }
  return acc / static_cast<double>(p * p);
}

inline double mean_depth_channel(const TranslationMap& m) {
  double acc = 0.0;
  for (std::size_t i = 0; i < m.cells(); ++i) acc += m.values()[3 * i + 2];
  return acc / static_cast<double>(m.cells());
}

inline Vec3 back_project(const Intrinsics& k, const Vec2& o, double depth) {
  return {depth * (o.x() - k.cx) / k.fx, depth * (o.y() - k.cy) / k.fy, depth};
}

/// Inverse of encode_translation where the depth channel is scaled by
/// `depth_factor` instead of the crop's own zoom ratio.
inline Vec3 decode_translation_scaled(const TranslationMap& m, const Intrinsics& k, const CropSpec& crop,
                                      double depth_factor) {
  for (double v : m.values())
    if (!std::isfinite(v)) throw DomainError("decode_translation: non-finite map");
  k.validate();
  crop.validate();
  const double tz = depth_factor * mean_depth_channel(m);
  if (!(tz > 0.0)) throw DomainError("decode_translation: recovered depth is not positive");
  return back_project(k, decode_centroid(m, crop), tz);
}

inline Vec3 decode_translation(const TranslationMap& m, const Intrinsics& k, const CropSpec& crop) {
  return decode_translation_scaled(m, k, crop, crop.r_z);
}

/// Query-to-template depth ratio, each depth normalised by its zoom ratio.
inline double relative_depth_scale(double tq_z, double rq_z, double tt_z, double rt_z) {
  if (!(tq_z > 0.0) || !(rq_z > 0.0) || !(tt_z > 0.0) || !(rt_z > 0.0))
    throw DomainError("relative_depth_scale: inputs must be positive");
  return (tq_z * rt_z) / (tt_z * rq_z);
}

inline double recover_query_depth(double scale, double tt_z, double rt_z, double rq_z) {
  if (!(tt_z > 0.0) || !(rt_z > 0.0) || !(rq_z > 0.0)) throw DomainError("recover_query_depth: inputs must be positive");
  return scale * tt_z * rq_z / rt_z;
}

/// Factor mapping the mean depth channel of a relative map to query depth.
inline double relative_depth_factor(double tt_z, double rt_z, double rq_z) {
  return recover_query_depth(1.0, tt_z, rt_z, rq_z);
}

struct PosedCrop {
  Pose pose;
  CropSpec crop;
};

struct PoseMaps {
  RayMap ray;
  TranslationMap trans;
};

/// Relative supervision for one template: the ray map carries R_Q·R_Tᵀ, the
/// translation map carries the query's own centroid offsets and the relative
/// depth scale in the third channel.
inline PoseMaps make_relative_maps(const PosedCrop& query, const PosedCrop& templ, const Intrinsics& k_query,
                                   const CanonicalGrid& grid) {
  const Rotation r_rel = query.pose.r * templ.pose.r.transpose();
  PoseMaps out{encode_rotation(r_rel, grid), encode_translation(query.pose.t, k_query, query.crop, grid.p)};
  const double s =
      relative_depth_scale(query.pose.t.z(), query.crop.r_z, templ.pose.t.z(), templ.crop.r_z);
  for (std::size_t i = 0; i < out.trans.cells(); ++i) out.trans.values()[3 * i + 2] = s;
  return out;
}

inline PoseMaps make_absolute_maps(const PosedCrop& query, const Intrinsics& k_query, const CanonicalGrid& grid) {
  return {encode_rotation(query.pose.r, grid), encode_translation(query.pose.t, k_query, query.crop, grid.p)};
}

/// Recovers H_rel such that compose_query_pose(H_rel, template pose) is the
/// query pose encoded in `maps`.
inline Pose invert_relative_maps(const PoseMaps& maps, const PosedCrop& templ, const CropSpec& query_crop,
                                 const Intrinsics& k_query, const CanonicalGrid& grid) {
  const Rotation r_rel = decode_rotation(maps.ray, grid);
  const double factor = relative_depth_factor(templ.pose.t.z(), templ.crop.r_z, query_crop.r_z);
  const Vec3 t_q = decode_translation_scaled(maps.trans, k_query, query_crop, factor);
  return {r_rel, t_q - r_rel * templ.pose.t};
}

inline Pose invert_absolute_maps(const PoseMaps& maps, const CropSpec& query_crop, const Intrinsics& k_query,
                                 const CanonicalGrid& grid) {
  return {decode_rotation(maps.ray, grid), decode_translation(maps.trans, k_query, query_crop)};
}

}  // namespace posediff
