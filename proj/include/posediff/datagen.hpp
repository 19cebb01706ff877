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
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <vector>

#include "posediff/errors.hpp"
#include "posediff/geometry.hpp"
#include "posediff/tensor.hpp"

namespace posediff {

/// splitmix64 finaliser; derives independent stream seeds from (seed, index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index = 0) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

/// Coloured point constellation standing in for a CAD model.
struct ToyObject {
  std::uint64_t id = 0;
  std::vector<Vec3> points;
  std::vector<std::array<float, 3>> colors;
};

inline ToyObject make_object(std::uint64_t seed, int k_points = 24) {
  if (k_points < 12) throw ConfigError("toy objects need at least 12 points");
  Rng rng(mix_seed(seed, 0x0b1ec7));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<float> uf(0.0f, 1.0f);
  ToyObject obj;
  obj.id = seed;
  while (obj.points.size() < static_cast<std::size_t>(k_points)) {
    const Vec3 x(u(rng), u(rng), u(rng));
    if (x.norm() > 1.0) continue;
    bool clash = false;
    for (const auto& q : obj.points) clash = clash || (q - x).norm() < 1e-9;
    if (!clash) obj.points.push_back(x);
  }
  // Saturated colours on an evenly spaced but shuffled hue wheel keep every
  // point distinguishable.
  std::vector<int> order(static_cast<std::size_t>(k_points));
  for (int i = 0; i < k_points; ++i) order[static_cast<std::size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (int i = 0; i < k_points; ++i) {
    const float hue = (static_cast<float>(order[static_cast<std::size_t>(i)]) + 0.5f * uf(rng)) / static_cast<float>(k_points);
    const float val = 0.55f + 0.45f * uf(rng);
    const float h6 = hue * 6.0f;
    const float f = h6 - std::floor(h6);
    const float pp = 0.0f, q = val * (1.0f - f), t = val * f;
    std::array<float, 3> c{};
    switch (static_cast<int>(h6) % 6) {
      case 0: c = {val, t, pp}; break;
      case 1: c = {q, val, pp}; break;
      case 2: c = {pp, val, t}; break;
      case 3: c = {pp, q, val}; break;
      case 4: c = {t, pp, val}; break;
      default: c = {val, pp, q}; break;
    }
    obj.colors.push_back(c);
  }
  return obj;
}

/// Rendering conventions shared by the generator and the fine-stage sampler.
struct RenderSettings {
  Intrinsics k{100.0, 100.0, 16.0, 16.0};
  int canvas = 32;            // original image side, pixels
  int out_size = 32;          // network input side, pixels
  double point_radius = 0.1;  // metres
  double bbox_pad = 0.10;     // total padding fraction
};

/// One posed, cropped observation of an object.
struct View {
  Tensor<float> image;  // out_size × out_size × 3, values in [0, 1]
  Pose pose;
  Intrinsics k;
  CropSpec crop;
};

inline View render(const ToyObject& obj, const Pose& pose, const RenderSettings& rs) {
  const Intrinsics& k = rs.k;
  std::vector<Vec3> cam;
  cam.reserve(obj.points.size());
  double umin = std::numeric_limits<double>::max(), umax = std::numeric_limits<double>::lowest();
  double vmin = umin, vmax = umax;
  std::vector<Vec2> px;
  for (const auto& x : obj.points) {
    const Vec3 c = pose.apply(x);
    if (!(c.z() > 1e-3)) throw RenderRejected("point behind the camera");
    cam.push_back(c);
    const Vec2 uv(k.fx * c.x() / c.z() + k.cx, k.fy * c.y() / c.z() + k.cy);
    px.push_back(uv);
    umin = std::min(umin, uv.x());
    umax = std::max(umax, uv.x());
    vmin = std::min(vmin, uv.y());
    vmax = std::max(vmax, uv.y());
  }
  const double w = (umax - umin) * (1.0 + rs.bbox_pad);
  const double h = (vmax - vmin) * (1.0 + rs.bbox_pad);
  const double side = std::max({w, h, 1e-6});
  const double ccx = 0.5 * (umin + umax), ccy = 0.5 * (vmin + vmax);

  View v;
  v.pose = pose;
  v.k = k;
  v.crop = {ccx - side / 2, ccy - side / 2, side, side, rs.out_size / side};
  const int n = rs.out_size;
  v.image = Tensor<float>({static_cast<std::size_t>(n), static_cast<std::size_t>(n), 3});
  std::vector<double> zbuf(static_cast<std::size_t>(n * n), std::numeric_limits<double>::max());
  for (std::size_t i = 0; i < cam.size(); ++i) {
    const double z = cam[i].z();
    const double cu = (px[i].x() - v.crop.x) * v.crop.r_z;
    const double cv = (px[i].y() - v.crop.y) * v.crop.r_z;
    const double rad = std::max(0.75, rs.point_radius * k.fx / z * v.crop.r_z);
    const int r0 = std::max(0, static_cast<int>(std::floor(cv - rad)));
    const int r1 = std::min(n - 1, static_cast<int>(std::ceil(cv + rad)));
    const int c0 = std::max(0, static_cast<int>(std::floor(cu - rad)));
    const int c1 = std::min(n - 1, static_cast<int>(std::ceil(cu + rad)));
    for (int r = r0; r <= r1; ++r) {
      for (int c = c0; c <= c1; ++c) {
        const double du = c + 0.5 - cu, dv = r + 0.5 - cv;
        if (du * du + dv * dv > rad * rad) continue;
        auto& zb = zbuf[static_cast<std::size_t>(r * n + c)];
        if (z >= zb) continue;
        zb = z;
        for (int ch = 0; ch < 3; ++ch)
          v.image.data[static_cast<std::size_t>((r * n + c) * 3 + ch)] = obj.colors[i][static_cast<std::size_t>(ch)];
      }
    }
  }
  return v;
}

/// Pose distribution for queries and coarse templates: Haar-uniform rotation,
/// depth uniform in [1.5, 3] m, projected centroid uniform in the central
/// three quarters of the canvas.
template <class R>
Pose random_pose(R& rng, const RenderSettings& rs) {
  std::uniform_real_distribution<double> depth(1.5, 3.0);
  std::uniform_real_distribution<double> pix(rs.canvas * 0.125, rs.canvas * 0.875);
  const double z = depth(rng);
  const Vec2 o(pix(rng), pix(rng));
  const Rotation r = Rotation::random(rng);
  return {r, Vec3(z * (o.x() - rs.k.cx) / rs.k.fx, z * (o.y() - rs.k.cy) / rs.k.fy, z)};
}

template <class R>
View render_with_retry(const ToyObject& obj, R& rng, const RenderSettings& rs) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    try {
      return render(obj, random_pose(rng, rs), rs);
    } catch (const RenderRejected&) {
    }
  }
  throw RenderRejected("no renderable pose after 100 attempts");
}

inline std::vector<View> sample_coarse_templates(const ToyObject& obj, int n, std::uint64_t seed,
                                                 const RenderSettings& rs = {}) {
  if (n < 1) throw ConfigError("template count must be positive");
  Rng rng(mix_seed(seed, 0xc0a75e));
  std::vector<View> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(render_with_retry(obj, rng, rs));
  return out;
}

/// Rotation of uniform random angle in [0, max_angle] about a uniform axis.
template <class R>
Rotation random_bounded_rotation(R& rng, double max_angle) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 axis;
  do axis = Vec3(n(rng), n(rng), n(rng));
  while (axis.norm() < 1e-9);
  const double angle = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * max_angle;
  return Rotation::axis_angle(axis, angle);
}

/// Pose perturbed in the camera frame: geodesic distance to the centre is
/// at most max_rot_deg, translation offset lies in the ±max_trans_m cube.
template <class R>
Pose perturb_pose(R& rng, const Pose& center, double max_rot_deg, double max_trans_m) {
  std::uniform_real_distribution<double> ut(-max_trans_m, max_trans_m);
  const Rotation dr = random_bounded_rotation(rng, deg2rad(max_rot_deg));
  return {dr * center.r, center.t + Vec3(ut(rng), ut(rng), ut(rng))};
}

inline std::vector<View> sample_fine_templates(const ToyObject& obj, const Pose& center, int n, std::uint64_t seed,
                                               double max_rot_deg = 30.0, double max_trans_m = 0.05,
                                               const RenderSettings& rs = {}) {
  if (n < 1) throw ConfigError("template count must be positive");
  if (max_rot_deg < 0.0 || max_trans_m < 0.0) throw ConfigError("fine template bounds must be non-negative");
  Rng rng(mix_seed(seed, 0xf1e7e5));
  std::vector<View> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    bool done = false;
    for (int attempt = 0; attempt < 100 && !done; ++attempt) {
      try {
        out.push_back(render(obj, perturb_pose(rng, center, max_rot_deg, max_trans_m), rs));
        done = true;
      } catch (const RenderRejected&) {
      }
    }
    if (!done) throw RenderRejected("fine template not renderable after 100 attempts");
  }
  return out;
}

/// The same n template poses for every query (the "fixed" distribution).
inline std::vector<View> fixed_templates(const ToyObject& obj, int n, const RenderSettings& rs = {}) {
  Rng rng(mix_seed(0xf1c5ed, static_cast<std::uint64_t>(n)));
  std::vector<View> out;
  for (int i = 0; i < n; ++i) {
    const Rotation r = Rotation::random(rng);
    out.push_back(render(obj, Pose{r, Vec3(0.0, 0.0, 2.25)}, rs));
  }
  return out;
}

/// One query crop plus its posed templates.
struct Sample {
  View query;
  std::vector<View> templates;
  std::uint64_t object_id = 0;
};

enum class TemplateMode { kRandom, kFixed, kFine };

struct TemplateDistribution {
  TemplateMode mode = TemplateMode::kRandom;
  double max_rot_deg = 30.0;
  double max_trans_m = 0.05;
};

inline std::vector<View> draw_templates(const ToyObject& obj, const Pose& query_pose, int n, std::uint64_t seed,
                                        const TemplateDistribution& dist, const RenderSettings& rs) {
  switch (dist.mode) {
    case TemplateMode::kRandom: return sample_coarse_templates(obj, n, seed, rs);
    case TemplateMode::kFixed: return fixed_templates(obj, n, rs);
    case TemplateMode::kFine: return sample_fine_templates(obj, query_pose, n, seed, dist.max_rot_deg, dist.max_trans_m, rs);
  }
  throw ConfigError("unknown template mode");
}

/// Objects are addressed by id; the generator derives ids from its seed.
using ObjectCatalog = std::map<std::uint64_t, ToyObject>;

inline ObjectCatalog make_catalog(std::uint64_t seed, int n_objects, int k_points) {
  if (n_objects < 1) throw ConfigError("need at least one object");
  ObjectCatalog cat;
  for (int i = 0; i < n_objects; ++i) {
    const std::uint64_t id = mix_seed(seed, 0x0b0000 + static_cast<std::uint64_t>(i)) >> 11;
    cat.emplace(id, make_object(id, k_points));
  }
  return cat;
}

/// Deterministic sample `index` of the stream defined by `seed`.
inline Sample make_sample(const ObjectCatalog& cat, std::uint64_t seed, std::uint64_t index, int n_templates,
                          const TemplateDistribution& dist, const RenderSettings& rs = {}) {
  Rng rng(mix_seed(seed, index));
  auto it = cat.begin();
  std::advance(it, static_cast<std::ptrdiff_t>(std::uniform_int_distribution<std::size_t>(0, cat.size() - 1)(rng)));
  const ToyObject& obj = it->second;
  Sample s;
  s.object_id = obj.id;
  s.query = render_with_retry(obj, rng, rs);
  s.templates = draw_templates(obj, s.query.pose, n_templates, rng(), dist, rs);
  return s;
}

}  // namespace posediff
