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

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "posediff/datagen.hpp"
#include "posediff/errors.hpp"
#include "posediff/tensor_io.hpp"

namespace posediff {

// Dataset directory layout:
//   manifest.json            version, seed, intrinsics, counts, objects, samples
//   sNNNNNN_images.rpt       f32 [1+N, S, S, 3]  query first, then templates
//   sNNNNNN_poses.rpt        f64 [1+N, 12]       R row-major, then t
//   sNNNNNN_cams.rpt         f64 [1+N, 9]        fx fy cx cy, crop x y w h r_z

inline constexpr int kDatasetVersion = 1;

struct Dataset {
  std::uint64_t seed = 0;
  RenderSettings render;
  int points_per_object = 24;
  ObjectCatalog objects;
  std::vector<Sample> samples;
};

namespace detail {

inline std::string sample_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%06zu", i);
  return buf;
}

inline std::vector<const View*> views_of(const Sample& s) {
  std::vector<const View*> v{&s.query};
  for (const auto& t : s.templates) v.push_back(&t);
  return v;
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["version"] = kDatasetVersion;
  manifest["seed"] = ds.seed;
  const auto& k = ds.render.k;
  manifest["intrinsics"] = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}};
  manifest["render"] = {{"canvas", ds.render.canvas},
                        {"out_size", ds.render.out_size},
                        {"point_radius", ds.render.point_radius},
                        {"bbox_pad", ds.render.bbox_pad}};
  const std::size_t n_templates = ds.samples.empty() ? 0 : ds.samples.front().templates.size();
  manifest["counts"] = {{"samples", ds.samples.size()},
                        {"templates", n_templates},
                        {"objects", ds.objects.size()},
                        {"points_per_object", ds.points_per_object}};
  auto objs = nlohmann::ordered_json::array();
  for (const auto& [id, obj] : ds.objects) objs.push_back({{"id", id}, {"points", obj.points.size()}});
  manifest["objects"] = objs;
  auto list = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    if (s.templates.size() != n_templates) throw ContractViolation("all samples must have the same template count");
    const auto views = detail::views_of(s);
    const std::size_t nv = views.size();
    const std::size_t side = static_cast<std::size_t>(ds.render.out_size);
    Tensor<float> images({nv, side, side, 3});
    Tensor<double> poses({nv, 12});
    Tensor<double> cams({nv, 9});
    for (std::size_t v = 0; v < nv; ++v) {
      const View& view = *views[v];
      if (view.image.size() != side * side * 3) throw ContractViolation("view image has the wrong resolution");
      std::copy(view.image.data.begin(), view.image.data.end(),
                images.data.begin() + static_cast<std::ptrdiff_t>(v * side * side * 3));
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) poses.at(v, static_cast<std::size_t>(r * 3 + c)) = view.pose.r.matrix()(r, c);
      for (int c = 0; c < 3; ++c) poses.at(v, static_cast<std::size_t>(9 + c)) = view.pose.t(c);
      const double cam[9] = {view.k.fx, view.k.fy, view.k.cx, view.k.cy, view.crop.x,
                             view.crop.y, view.crop.w, view.crop.h, view.crop.r_z};
      for (std::size_t c = 0; c < 9; ++c) cams.at(v, c) = cam[c];
    }
    const std::string stem = detail::sample_stem(i);
    const std::string fi = stem + "_images.rpt", fp = stem + "_poses.rpt", fc = stem + "_cams.rpt";
    save_tensor(dir / fi, images);
    save_tensor(dir / fp, poses);
    save_tensor(dir / fc, cams);
    list.push_back({{"object_id", s.object_id}, {"images", fi}, {"poses", fp}, {"cams", fc}});
  }
  manifest["samples"] = list;
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw FormatError((dir / "manifest.json").string() + ": cannot open for writing");
  os << manifest.dump(2) << "\n";
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(io::slurp(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  try {
    if (m.at("version").get<int>() != kDatasetVersion) throw FormatError(mpath.string() + ": unsupported dataset version");
    Dataset ds;
    ds.seed = m.at("seed").get<std::uint64_t>();
    const auto& k = m.at("intrinsics");
    ds.render.k = {k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(), k.at("cy").get<double>()};
    const auto& r = m.at("render");
    ds.render.canvas = r.at("canvas").get<int>();
    ds.render.out_size = r.at("out_size").get<int>();
    ds.render.point_radius = r.at("point_radius").get<double>();
    ds.render.bbox_pad = r.at("bbox_pad").get<double>();
    const auto& counts = m.at("counts");
    ds.points_per_object = counts.at("points_per_object").get<int>();
    const auto n_templates = counts.at("templates").get<std::size_t>();
    for (const auto& o : m.at("objects")) {
      const auto id = o.at("id").get<std::uint64_t>();
      ds.objects.emplace(id, make_object(id, o.at("points").get<int>()));
    }
    const auto& list = m.at("samples");
    if (list.size() != counts.at("samples").get<std::size_t>())
      throw FormatError(mpath.string() + ": sample count does not match the file list");
    const std::size_t side = static_cast<std::size_t>(ds.render.out_size);
    for (const auto& e : list) {
      const auto fi = dir / e.at("images").get<std::string>();
      const auto fp = dir / e.at("poses").get<std::string>();
      const auto fc = dir / e.at("cams").get<std::string>();
      const AnyTensor images = load_tensor(fi);
      const AnyTensor poses = load_tensor(fp);
      const AnyTensor cams = load_tensor(fc);
      const std::size_t nv = n_templates + 1;
      if (images.dtype != DType::kF32 || images.shape() != Shape{nv, side, side, 3})
        throw FormatError(fi.string() + ": unexpected image tensor shape " + shape_str(images.shape()));
      if (poses.dtype != DType::kF64 || poses.shape() != Shape{nv, 12})
        throw FormatError(fp.string() + ": unexpected pose tensor shape " + shape_str(poses.shape()));
      if (cams.dtype != DType::kF64 || cams.shape() != Shape{nv, 9})
        throw FormatError(fc.string() + ": unexpected camera tensor shape " + shape_str(cams.shape()));
      Sample s;
      s.object_id = e.at("object_id").get<std::uint64_t>();
      for (std::size_t v = 0; v < nv; ++v) {
        View view;
        view.image = Tensor<float>({side, side, 3});
        std::copy_n(images.f32.data.begin() + static_cast<std::ptrdiff_t>(v * side * side * 3), side * side * 3,
                    view.image.data.begin());
        Mat3 rm;
        for (int rr = 0; rr < 3; ++rr)
          for (int c = 0; c < 3; ++c) rm(rr, c) = poses.f64.at(v, static_cast<std::size_t>(rr * 3 + c));
        try {
          view.pose.r = Rotation::from_matrix(rm);
        } catch (const DomainError&) {
          throw FormatError(fp.string() + ": stored rotation is not in SO(3)");
        }
        view.pose.t = Vec3(poses.f64.at(v, 9), poses.f64.at(v, 10), poses.f64.at(v, 11));
        const auto c = [&](std::size_t j) { return cams.f64.at(v, j); };
        view.k = {c(0), c(1), c(2), c(3)};
        view.crop = {c(4), c(5), c(6), c(7), c(8)};
        if (v == 0)
          s.query = std::move(view);
        else
          s.templates.push_back(std::move(view));
      }
      ds.samples.push_back(std::move(s));
    }
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": malformed manifest (" + e.what() + ")");
  }
}

}  // namespace posediff
