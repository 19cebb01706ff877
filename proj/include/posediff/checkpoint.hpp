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
#include <map>
#include <sstream>
#include <string>

#include "posediff/diffusion.hpp"
#include "posediff/errors.hpp"
#include "posediff/model.hpp"
#include "posediff/tensor_io.hpp"

namespace posediff {

// Checkpoint layout (little-endian):
//   "RPCKPT01" | count u32 | count × (name length u16 | name bytes | RPTENS01 tensor)
// Parameters are stored under "param.<name>"; scalar settings as f64 [1]
// tensors under "config.", "diffusion." and "meta.".

inline constexpr char kCheckpointMagic[8] = {'R', 'P', 'C', 'K', 'P', 'T', '0', '1'};

enum class PredictorKind { kCoarse = 0, kFine = 1 };

inline std::string to_string(PredictorKind k) { return k == PredictorKind::kCoarse ? "coarse" : "fine"; }

inline PredictorKind parse_predictor_kind(const std::string& s) {
  if (s == "coarse") return PredictorKind::kCoarse;
  if (s == "fine") return PredictorKind::kFine;
  throw ConfigError("unknown predictor kind '" + s + "' (expected coarse or fine)");
}

struct Checkpoint {
  ModelConfig model;
  DiffusionConfig diffusion;
  PredictorKind kind = PredictorKind::kCoarse;
  std::int64_t step = 0;
  Parameters<float> params;
};

namespace detail {

inline std::map<std::string, double> config_scalars(const Checkpoint& c) {
  const ModelConfig& m = c.model;
  return {
      {"config.image_size", m.image_size},
      {"config.patch_size", m.patch_size},
      {"config.embed_dim", m.embed_dim},
      {"config.heads", m.heads},
      {"config.n_fuser", m.n_fuser},
      {"config.n_decoder", m.n_decoder},
      {"config.mlp_ratio", m.mlp_ratio},
      {"config.p", m.p},
      {"config.half_extent", m.half_extent},
      {"config.fourier_bands", m.fourier_bands},
      {"config.fourier_base", m.fourier_base},
      {"config.templates", m.templates},
      {"config.single_view", m.single_view ? 1.0 : 0.0},
      {"config.absolute_pose", m.absolute_pose ? 1.0 : 0.0},
      {"config.condition_template_pose", m.condition_template_pose ? 1.0 : 0.0},
      {"config.view_index_encoding", m.view_index_encoding ? 1.0 : 0.0},
      {"diffusion.kind", static_cast<double>(c.diffusion.kind)},
      {"diffusion.steps", c.diffusion.steps},
      {"diffusion.beta_min", c.diffusion.beta_min},
      {"diffusion.beta_max", c.diffusion.beta_max},
      {"meta.kind", static_cast<double>(c.kind)},
      {"meta.step", static_cast<double>(c.step)},
  };
}

inline void write_entry_name(std::ostream& os, const std::string& name) {
  if (name.size() > 0xffff) throw ContractViolation("checkpoint entry name too long");
  io::put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  std::ostringstream os(std::ios::binary);
  const auto scalars = detail::config_scalars(c);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(scalars.size() + c.params.size()));
  for (const auto& [name, v] : scalars) {
    detail::write_entry_name(os, name);
    write_tensor(os, Tensor<double>({1}, std::vector<double>{v}));
  }
  for (const auto& [name, t] : c.params) {
    detail::write_entry_name(os, "param." + name);
    write_tensor(os, t);
  }
  return os.str();
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = serialize_checkpoint(c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(path.string() + ": cannot open for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError(path.string() + ": write failed");
}

inline Checkpoint parse_checkpoint(std::string bytes, const std::string& source) {
  io::ByteReader r(std::move(bytes), source);
  const std::string magic = r.get_bytes(sizeof(kCheckpointMagic), "checkpoint magic");
  if (magic != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) r.fail("bad checkpoint magic");
  const auto count = r.get<std::uint32_t>("entry count");
  std::map<std::string, double> scalars;
  Checkpoint c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>("entry name length");
    const std::string name = r.get_bytes(len, "entry name");
    AnyTensor t = read_tensor(r);
    if (name.rfind("param.", 0) == 0) {
      const std::string pname = name.substr(6);
      if (c.params.contains(pname)) r.fail("duplicate entry '" + name + "'");
      c.params.add(pname, t.as<float>());
    } else {
      if (t.shape() != Shape{1} || t.dtype != DType::kF64) r.fail("scalar entry '" + name + "' must be f64 [1]");
      if (!scalars.emplace(name, t.f64[0]).second) r.fail("duplicate entry '" + name + "'");
    }
  }
  if (!r.at_end()) r.fail("trailing bytes after checkpoint entries");
  auto get = [&](const std::string& k) {
    auto it = scalars.find(k);
    if (it == scalars.end()) r.fail("missing entry '" + k + "'");
    return it->second;
  };
  auto geti = [&](const std::string& k) { return static_cast<int>(get(k)); };
  ModelConfig& m = c.model;
  m.image_size = geti("config.image_size");
  m.patch_size = geti("config.patch_size");
  m.embed_dim = geti("config.embed_dim");
  m.heads = geti("config.heads");
  m.n_fuser = geti("config.n_fuser");
  m.n_decoder = geti("config.n_decoder");
  m.mlp_ratio = geti("config.mlp_ratio");
  m.p = geti("config.p");
  m.half_extent = get("config.half_extent");
  m.fourier_bands = geti("config.fourier_bands");
  m.fourier_base = get("config.fourier_base");
  m.templates = geti("config.templates");
  m.single_view = get("config.single_view") != 0.0;
  m.absolute_pose = get("config.absolute_pose") != 0.0;
  m.condition_template_pose = get("config.condition_template_pose") != 0.0;
  m.view_index_encoding = get("config.view_index_encoding") != 0.0;
  const int kind = geti("diffusion.kind");
  if (kind != 0 && kind != 1) r.fail("unknown schedule kind");
  c.diffusion.kind = static_cast<ScheduleKind>(kind);
  c.diffusion.steps = geti("diffusion.steps");
  c.diffusion.beta_min = get("diffusion.beta_min");
  c.diffusion.beta_max = get("diffusion.beta_max");
  const int pk = geti("meta.kind");
  if (pk != 0 && pk != 1) r.fail("unknown predictor kind");
  c.kind = static_cast<PredictorKind>(pk);
  c.step = static_cast<std::int64_t>(get("meta.step"));
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw FormatError(source + ": invalid stored model config (" + e.what() + ")");
  }
  // The stored parameter set must match what the config builds.
  const Parameters<double> expect = init_parameters(m, 0);
  if (expect.size() != c.params.size()) throw FormatError(source + ": parameter count does not match the stored config");
  for (const auto& [name, t] : expect) {
    if (!c.params.contains(name)) throw FormatError(source + ": missing parameter '" + name + "'");
    if (c.params[name].shape != t.shape)
      throw FormatError(source + ": parameter '" + name + "' has shape " + shape_str(c.params[name].shape) + ", expected " +
                        shape_str(t.shape));
  }
  return c;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(io::slurp(path), path.string());
}

}  // namespace posediff
