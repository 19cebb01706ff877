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
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "posediff/autodiff.hpp"
#include "posediff/datagen.hpp"
#include "posediff/errors.hpp"
#include "posediff/posemap.hpp"
#include "posediff/tensor.hpp"

namespace posediff {

struct ModelConfig {
  int image_size = 32;
  int patch_size = 8;
  int embed_dim = 64;
  int heads = 4;
  int n_fuser = 2;
  int n_decoder = 4;
  int mlp_ratio = 2;
  int p = 4;                    // pose-map side; must equal image_size / patch_size
  double half_extent = 1.0;     // canonical ray grid half extent
  int fourier_bands = 6;        // d
  double fourier_base = 0.25;   // B, lowest frequency in cycles per unit
  int templates = 8;            // N
  bool single_view = false;
  bool absolute_pose = false;
  bool condition_template_pose = true;
  bool view_index_encoding = true;

  int patches_per_side() const { return image_size / patch_size; }
  int tokens_per_image() const { return patches_per_side() * patches_per_side(); }
  int cells() const { return p * p; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw ConfigError("image_size must be a positive multiple of patch_size");
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
    if (embed_dim % 4 != 0) throw ConfigError("embed_dim must be a multiple of 4 for 2-d positional encodings");
    if (p < 2 || p > 16) throw ConfigError("pose-map side p must be in [2, 16]");
    if (p != patches_per_side()) throw ConfigError("pose-map cells must align with the patch grid (p == image_size / patch_size)");
    if (n_fuser < 0 || n_decoder < 0 || mlp_ratio < 1) throw ConfigError("negative layer counts");
    if (fourier_bands < 1 || !(fourier_base > 0.0)) throw ConfigError("fourier encoding needs d >= 1 and B > 0");
    if (templates < 1) throw ConfigError("need at least one template");
  }
};

// Scalar channels fed to the view encoder per cell.
inline constexpr int kRotChannels = 3;
inline constexpr int kTransChannels = 3;
inline constexpr int kBoxChannels = 4;

/// γ(x) = (x, sin(2πB·2^k x), cos(2πB·2^k x)) for k in [0, d).
template <typename T>
void fourier_encode(T x, double base, int bands, T* out) {
  out[0] = x;
  for (int k = 0; k < bands; ++k) {
    const double w = 2.0 * 3.14159265358979323846 * base * std::ldexp(1.0, k);
    out[1 + 2 * k] = static_cast<T>(std::sin(w * static_cast<double>(x)));
    out[2 + 2 * k] = static_cast<T>(std::cos(w * static_cast<double>(x)));
  }
}

inline std::vector<double> fourier_encode(std::span<const double> xs, double base, int bands) {
  const std::size_t width = static_cast<std::size_t>(2 * bands + 1);
  std::vector<double> out(xs.size() * width);
  for (std::size_t i = 0; i < xs.size(); ++i) fourier_encode(xs[i], base, bands, out.data() + i * width);
  return out;
}

/// Width of the per-cell view feature vector before projection.
inline int view_feature_dim(const ModelConfig& c) {
  return (2 * c.fourier_bands + 1) * (kRotChannels + kTransChannels + kBoxChannels);
}

inline constexpr int kTimeBands = 8;

// ------------------------------------------------------------ parameters

/// Ordered, uniquely named tensors.
template <typename T>
class Parameters {
 public:
  void add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw ContractViolation("duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& operator[](const std::string& name) { return entries_.at(lookup(name)).second; }
  const Tensor<T>& operator[](const std::string& name) const { return entries_.at(lookup(name)).second; }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::pair<std::string, Tensor<T>>& entry(std::size_t i) { return entries_[i]; }
  const std::pair<std::string, Tensor<T>>& entry(std::size_t i) const { return entries_[i]; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

  /// Same names and shapes, all zeros.
  Parameters zeros_like() const {
    Parameters out;
    for (const auto& [n, t] : entries_) out.add(n, Tensor<T>(t.shape));
    return out;
  }

  template <typename U>
  Parameters<U> cast() const {
    Parameters<U> out;
    for (const auto& [n, t] : entries_) out.add(n, t.template cast<U>());
    return out;
  }

  bool operator==(const Parameters& o) const { return entries_ == o.entries_; }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct InitOptions {
  bool zero_heads = true;   // output heads start at exactly zero
  bool zero_gates = true;   // residual gates / adaptive modulation start at zero
};

inline Parameters<double> init_parameters(const ModelConfig& c, std::uint64_t seed, InitOptions opt = {}) {
  c.validate();
  Rng rng(mix_seed(seed, 0x1417));
  std::normal_distribution<double> n(0.0, 1.0);
  Parameters<double> ps;
  const std::size_t d = static_cast<std::size_t>(c.embed_dim);
  const std::size_t hidden = d * static_cast<std::size_t>(c.mlp_ratio);
  auto dense = [&](const std::string& name, std::size_t in, std::size_t out, double gain = 1.0) {
    Tensor<double> w({in, out});
    const double s = gain / std::sqrt(static_cast<double>(in));
    for (auto& x : w.data) x = n(rng) * s;
    ps.add(name + ".w", std::move(w));
    ps.add(name + ".b", Tensor<double>({out}));
  };
  auto maybe_zero = [&](const std::string& name, std::size_t in, std::size_t out, bool zero, double gain = 1.0) {
    if (zero) {
      ps.add(name + ".w", Tensor<double>({in, out}));
      ps.add(name + ".b", Tensor<double>({out}));
    } else {
      dense(name, in, out, gain);
    }
  };
  auto vec = [&](const std::string& name, bool zero, double s = 0.1) {
    Tensor<double> v({d});
    if (!zero)
      for (auto& x : v.data) x = n(rng) * s;
    ps.add(name, std::move(v));
  };
  auto attn = [&](const std::string& name) {
    for (const char* m : {"q", "k", "v"}) dense(name + "." + m, d, d);
    dense(name + ".o", d, d);
  };
  auto mlp = [&](const std::string& name) {
    dense(name + ".fc1", d, hidden);
    dense(name + ".fc2", hidden, d);
  };

  const std::size_t patch_in = static_cast<std::size_t>(c.patch_size * c.patch_size * 3);
  dense("img.patch", patch_in, d);
  for (int i = 0; i < 2; ++i) mlp("img.mix" + std::to_string(i));
  dense("view.proj", static_cast<std::size_t>(view_feature_dim(c)), d);
  dense("map.proj", 6, d);
  dense("time.fc1", static_cast<std::size_t>(2 * kTimeBands + 1), d);
  dense("time.fc2", d, d);
  for (int i = 0; i < c.n_fuser; ++i) {
    const std::string b = "fuser" + std::to_string(i);
    for (const char* m : {"shift1", "scale1", "shift2", "scale2"}) vec(b + "." + m, opt.zero_gates);
    // Gates start at one so the fuser mixes views from the first step.
    for (const char* m : {"gate1", "gate2"}) {
      Tensor<double> g({d}, 1.0);
      if (!opt.zero_gates)
        for (auto& x : g.data) x += n(rng) * 0.1;
      ps.add(b + "." + m, std::move(g));
    }
    attn(b + ".attn");
    mlp(b + ".mlp");
  }
  for (int i = 0; i < c.n_decoder; ++i) {
    const std::string b = "dec" + std::to_string(i);
    maybe_zero(b + ".ada", d, 9 * d, opt.zero_gates, 0.5);
    attn(b + ".self");
    attn(b + ".cross");
    mlp(b + ".mlp");
  }
  maybe_zero("head.ada", d, 2 * d, opt.zero_gates, 0.5);
  maybe_zero("head.rot", d, 3, opt.zero_heads);
  maybe_zero("head.trans", d, 3, opt.zero_heads);
  return ps;
}

// ------------------------------------------------------------ inputs

/// Normalised box (centre x, centre y, width, height): centres by the canvas
/// side, sizes by four canvas sides so typical crops fall inside [0, 1].
inline std::array<double, 4> normalized_bbox(const CropSpec& crop, int canvas) {
  const double s = static_cast<double>(canvas);
  return {(crop.x + crop.w / 2) / s, (crop.y + crop.h / 2) / s, crop.w / (4 * s), crop.h / (4 * s)};
}

/// Network-ready view: image plus the per-cell view features.
template <typename T>
struct ViewInput {
  Tensor<T> patches;   // [tokens × 3·patch²]
  Tensor<T> features;  // [p² × view_feature_dim]
  std::vector<double> pose_channels;  // raw per-cell ray+translation channels actually encoded (for inspection)
};

template <typename T>
struct NetworkInput {
  ViewInput<T> query;
  std::vector<ViewInput<T>> templates;
};

template <typename T>
Tensor<T> patchify(const Tensor<float>& image, const ModelConfig& c) {
  const std::size_t s = static_cast<std::size_t>(c.image_size);
  if (image.shape != Shape{s, s, 3}) throw ContractViolation("image must be " + std::to_string(s) + "x" + std::to_string(s) + "x3");
  const std::size_t ps = static_cast<std::size_t>(c.patch_size);
  const std::size_t per = s / ps;
  Tensor<T> out({per * per, ps * ps * 3});
  for (std::size_t pr = 0; pr < per; ++pr)
    for (std::size_t pc = 0; pc < per; ++pc)
      for (std::size_t r = 0; r < ps; ++r)
        for (std::size_t q = 0; q < ps; ++q)
          for (std::size_t ch = 0; ch < 3; ++ch)
            out.at(pr * per + pc, (r * ps + q) * 3 + ch) =
                static_cast<T>(image.data[((pr * ps + r) * s + pc * ps + q) * 3 + ch]);
  return out;
}

/// Per-cell Fourier features of (ray map, translation map, box). Maps may be
/// null, in which case their channels are zero.
template <typename T>
ViewInput<T> make_view_input(const Tensor<float>& image, const RayMap* ray, const TranslationMap* trans,
                             const std::array<double, 4>& box, const ModelConfig& c) {
  ViewInput<T> v;
  v.patches = patchify<T>(image, c);
  const std::size_t cells = static_cast<std::size_t>(c.cells());
  if ((ray && ray->p() != c.p) || (trans && trans->p() != c.p)) throw ContractViolation("view maps do not match config p");
  const std::size_t width = static_cast<std::size_t>(2 * c.fourier_bands + 1);
  v.features = Tensor<T>({cells, static_cast<std::size_t>(view_feature_dim(c))});
  v.pose_channels.assign(cells * 6, 0.0);
  for (std::size_t i = 0; i < cells; ++i) {
    double raw[kRotChannels + kTransChannels + kBoxChannels] = {};
    for (int k = 0; k < 3; ++k) {
      raw[k] = ray ? ray->values()[3 * i + static_cast<std::size_t>(k)] : 0.0;
      raw[3 + k] = trans ? trans->values()[3 * i + static_cast<std::size_t>(k)] : 0.0;
      v.pose_channels[6 * i + static_cast<std::size_t>(k)] = raw[k];
      v.pose_channels[6 * i + 3 + static_cast<std::size_t>(k)] = raw[3 + k];
    }
    for (int k = 0; k < 4; ++k) raw[6 + k] = box[static_cast<std::size_t>(k)];
    T* row = &v.features.data[i * v.features.cols()];
    for (std::size_t k = 0; k < 10; ++k) fourier_encode<T>(static_cast<T>(raw[k]), c.fourier_base, c.fourier_bands, row + k * width);
  }
  return v;
}

/// Builds the conditioning input for one sample. Template views carry their
/// absolute pose maps unless pose conditioning is disabled; the query carries
/// its box only.
template <typename T>
NetworkInput<T> make_network_input(const Sample& s, const ModelConfig& c, const CanonicalGrid& grid, int canvas) {
  NetworkInput<T> in;
  in.query = make_view_input<T>(s.query.image, nullptr, nullptr, normalized_bbox(s.query.crop, canvas), c);
  for (const View& t : s.templates) {
    const auto box = normalized_bbox(t.crop, canvas);
    if (c.condition_template_pose) {
      const RayMap rm = encode_rotation(t.pose.r, grid);
      const TranslationMap tm = encode_translation(t.pose.t, t.k, t.crop, c.p);
      in.templates.push_back(make_view_input<T>(t.image, &rm, &tm, box, c));
    } else {
      in.templates.push_back(make_view_input<T>(t.image, nullptr, nullptr, box, c));
    }
  }
  return in;
}

// ------------------------------------------------------------ network

/// Fixed 2-d sinusoidal encoding: first half of the width encodes the row,
/// second half the column.
template <typename T>
Tensor<T> patch_position_encoding(int side, int width) {
  Tensor<T> pe({static_cast<std::size_t>(side * side), static_cast<std::size_t>(width)});
  const int half = width / 2;
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      for (int k = 0; k < half / 2; ++k) {
        const double f = std::pow(100.0, -2.0 * k / half);
        const std::size_t row = static_cast<std::size_t>(r * side + c);
        pe.at(row, static_cast<std::size_t>(2 * k)) = static_cast<T>(std::sin(r * f));
        pe.at(row, static_cast<std::size_t>(2 * k + 1)) = static_cast<T>(std::cos(r * f));
        pe.at(row, static_cast<std::size_t>(half + 2 * k)) = static_cast<T>(std::sin(c * f));
        pe.at(row, static_cast<std::size_t>(half + 2 * k + 1)) = static_cast<T>(std::cos(c * f));
      }
    }
  }
  return pe;
}

template <typename T>
Tensor<T> view_index_encoding(int index, int width) {
  Tensor<T> pe({static_cast<std::size_t>(width)});
  for (int k = 0; k < width / 2; ++k) {
    const double f = std::pow(50.0, -2.0 * k / width);
    pe[static_cast<std::size_t>(2 * k)] = static_cast<T>(std::sin((index + 1) * f));
    pe[static_cast<std::size_t>(2 * k + 1)] = static_cast<T>(std::cos((index + 1) * f));
  }
  return pe;
}

/// Binds parameters into a graph on first use.
template <typename T>
class Binder {
 public:
  using Var = typename Graph<T>::Var;
  Binder(Graph<T>& g, const Parameters<T>& ps) : g_(g), ps_(ps) {}

  Var operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const Var v = g_.external(ps_[name], true);
    vars_.emplace(name, v);
    return v;
  }

  /// Gradients of every parameter (zeros for those never used).
  Parameters<T> gradients() const {
    Parameters<T> out = ps_.zeros_like();
    for (const auto& [name, v] : vars_) {
      const auto& gr = g_.grad(v);
      if (!gr.empty()) out[name].data = gr.data;
    }
    return out;
  }

  Graph<T>& graph() { return g_; }

 private:
  Graph<T>& g_;
  const Parameters<T>& ps_;
  std::map<std::string, Var> vars_;
};

template <typename T>
struct Conditioning {
  typename Graph<T>::Var query;     // F_Q  [tokens × D]
  typename Graph<T>::Var fused;     // F_MV [N·tokens × D], raw residual stream
  typename Graph<T>::Var context;   // layer-normed F_MV used as cross-attention memory
  typename Graph<T>::Var cell_prior;  // per-template tokens added to the map tokens
};

template <typename T>
struct MapPrediction {
  typename Graph<T>::Var rot;    // [N·p² × 3]
  typename Graph<T>::Var trans;  // [N·p² × 3]
};

/// Counters for assertions on which code paths ran.
struct NetworkStats {
  std::size_t fuser_views_per_group = 0;
  std::size_t decoder_calls = 0;
};

template <typename T>
class Network {
 public:
  using Var = typename Graph<T>::Var;

  explicit Network(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    patch_pe_ = patch_position_encoding<T>(cfg_.patches_per_side(), cfg_.embed_dim);
  }

  const ModelConfig& config() const { return cfg_; }
  NetworkStats& stats() { return stats_; }

  /// Patch embedding plus position encoding, then two token-wise residual MLP
  /// blocks. The position term keeps blank background tokens away from the
  /// zero vector, where layer norm has gradients of order 1/sqrt(eps).
  Var encode_image(Binder<T>& P, const Tensor<T>& patches, Var* pre_mixing = nullptr) {
    auto& g = P.graph();
    Var x = g.add(g.linear(g.constant(patches), P("img.patch.w"), P("img.patch.b")), g.constant(patch_pe_));
    if (pre_mixing) *pre_mixing = x;
    for (int i = 0; i < 2; ++i) x = g.add(x, mlp(P, "img.mix" + std::to_string(i), g.layer_norm(x)));
    return x;
  }

  Var encode_view(Binder<T>& P, const Tensor<T>& features) {
    auto& g = P.graph();
    return g.linear(g.constant(features), P("view.proj.w"), P("view.proj.b"));
  }

  /// Self-attention stack over the concatenated view tokens. With
  /// single_view each view is its own attention group.
  Var fuse_multiview(Binder<T>& P, Var tokens, std::size_t views) {
    if (views == 0) throw ContractViolation("fuse_multiview needs at least one view");
    auto& g = P.graph();
    const std::size_t groups = cfg_.single_view ? views : 1;
    stats_.fuser_views_per_group = views / groups;
    Var x = tokens;
    for (int i = 0; i < cfg_.n_fuser; ++i) {
      const std::string b = "fuser" + std::to_string(i);
      Var h = g.modulate(g.layer_norm(x), P(b + ".shift1"), P(b + ".scale1"));
      x = g.gated_add(x, attention(P, b + ".attn", h, h, groups, groups), P(b + ".gate1"));
      h = g.modulate(g.layer_norm(x), P(b + ".shift2"), P(b + ".scale2"));
      x = g.gated_add(x, mlp(P, b + ".mlp", h), P(b + ".gate2"));
    }
    return x;
  }

  Conditioning<T> encode(Binder<T>& P, const NetworkInput<T>& in) {
    auto& g = P.graph();
    const std::size_t n_views = in.templates.size();
    if (n_views == 0) throw ContractViolation("need at least one template view");
    Conditioning<T> c;
    c.query = g.add(encode_image(P, in.query.patches), encode_view(P, in.query.features));
    std::vector<Var> views;
    for (std::size_t j = 0; j < n_views; ++j) {
      Var tok = g.add(encode_image(P, in.templates[j].patches), encode_view(P, in.templates[j].features));
      if (cfg_.view_index_encoding) tok = g.add_row(tok, g.constant(view_index_encoding<T>(static_cast<int>(j), cfg_.embed_dim)));
      views.push_back(tok);
    }
    const Var stacked = g.concat_rows(views);
    c.fused = fuse_multiview(P, stacked, n_views);
    c.context = g.layer_norm(c.fused);
    c.cell_prior = c.context;
    return c;
  }

  /// Predicts clean pose maps for every template hypothesis. `noisy` is
  /// [N·p² × 6] (ray channels, then translation channels per cell).
  MapPrediction<T> denoise(Binder<T>& P, const Conditioning<T>& cond, const Tensor<T>& noisy, int t, int steps) {
    auto& g = P.graph();
    ++stats_.decoder_calls;
    const std::size_t cells = static_cast<std::size_t>(cfg_.cells());
    const std::size_t q_tokens = g.value(cond.query).rows();
    const std::size_t views = g.value(cond.context).rows() / static_cast<std::size_t>(cfg_.tokens_per_image());
    if (noisy.cols() != 6 || noisy.rows() != views * cells) throw ContractViolation("denoise: noisy map shape mismatch");
    if (t < 1 || t > steps) throw ContractViolation("denoise: timestep out of range");

    // Timestep embedding.
    std::vector<T> tf(2 * kTimeBands + 1);
    fourier_encode<T>(static_cast<T>(static_cast<double>(t) / steps), 0.5, kTimeBands, tf.data());
    Var temb = g.constant(Tensor<T>({1, tf.size()}, tf));
    temb = g.silu(g.linear(temb, P("time.fc1.w"), P("time.fc1.b")));
    temb = g.linear(temb, P("time.fc2.w"), P("time.fc2.b"));
    const Var act = g.silu(temb);

    // Map tokens + per-template prior + cell positions, then sequences
    // [map cells of template j ; query tokens].
    Var maps = g.linear(g.constant(noisy), P("map.proj.w"), P("map.proj.b"));
    maps = g.add(maps, cond.cell_prior);
    std::vector<Var> pe_rows(views, g.constant(patch_pe_));
    maps = g.add(maps, g.concat_rows(pe_rows));
    const Var pool = g.concat_rows({maps, cond.query});
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < views; ++j) {
      for (std::size_t i = 0; i < cells; ++i) idx.push_back(j * cells + i);
      for (std::size_t i = 0; i < q_tokens; ++i) idx.push_back(views * cells + i);
    }
    Var x = g.select_rows(pool, idx);
    const std::size_t kv_groups = cfg_.single_view ? views : 1;
    const std::size_t d = static_cast<std::size_t>(cfg_.embed_dim);

    for (int i = 0; i < cfg_.n_decoder; ++i) {
      const std::string b = "dec" + std::to_string(i);
      const Var ada = g.linear(act, P(b + ".ada.w"), P(b + ".ada.b"));
      auto part = [&](std::size_t k) { return g.slice_cols(ada, k * d, d); };
      Var h = g.modulate(g.layer_norm(x), part(0), part(1));
      x = g.gated_add(x, attention(P, b + ".self", h, h, views, views), part(2));
      h = g.modulate(g.layer_norm(x), part(3), part(4));
      x = g.gated_add(x, attention(P, b + ".cross", h, cond.context, views, kv_groups), part(5));
      h = g.modulate(g.layer_norm(x), part(6), part(7));
      x = g.gated_add(x, mlp(P, b + ".mlp", h), part(8));
      for (T v : g.value(x).data)
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite activation in decoder block " + std::to_string(i));
    }

    std::vector<std::size_t> map_rows;
    const std::size_t seq = cells + q_tokens;
    for (std::size_t j = 0; j < views; ++j)
      for (std::size_t i = 0; i < cells; ++i) map_rows.push_back(j * seq + i);
    Var out = g.select_rows(x, map_rows);
    const Var ada = g.linear(act, P("head.ada.w"), P("head.ada.b"));
    out = g.modulate(g.layer_norm(out), g.slice_cols(ada, 0, d), g.slice_cols(ada, d, d));
    return {g.linear(out, P("head.rot.w"), P("head.rot.b")), g.linear(out, P("head.trans.w"), P("head.trans.b"))};
  }

 private:
  Var attention(Binder<T>& P, const std::string& name, Var x, Var ctx, std::size_t q_groups, std::size_t kv_groups) {
    auto& g = P.graph();
    const Var q = g.linear(x, P(name + ".q.w"), P(name + ".q.b"));
    const Var k = g.linear(ctx, P(name + ".k.w"), P(name + ".k.b"));
    const Var v = g.linear(ctx, P(name + ".v.w"), P(name + ".v.b"));
    const Var a = g.attention(q, k, v, static_cast<std::size_t>(cfg_.heads), q_groups, kv_groups);
    return g.linear(a, P(name + ".o.w"), P(name + ".o.b"));
  }

  Var mlp(Binder<T>& P, const std::string& name, Var x) {
    auto& g = P.graph();
    return g.linear(g.gelu(g.linear(x, P(name + ".fc1.w"), P(name + ".fc1.b"))), P(name + ".fc2.w"), P(name + ".fc2.b"));
  }

  ModelConfig cfg_;
  Tensor<T> patch_pe_;
  NetworkStats stats_;
};

// ------------------------------------------------------------ optimisation

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
};

template <typename T>
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;
};

/// Global L2 norm of a gradient set.
template <typename T>
double gradient_norm(const Parameters<T>& grads) {
  double acc = 0.0;
  for (const auto& [n, t] : grads)
    for (T x : t.data) acc += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(acc);
}

/// Adam with bias correction. Moments are kept in double regardless of T.
template <typename T>
void optimizer_step(Parameters<T>& params, const Parameters<T>& grads, AdamState<T>& state, double lr,
                    const AdamConfig& cfg = {}) {
  if (params.size() != grads.size()) throw ContractViolation("optimizer_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& [n, t] : params) {
      state.m.emplace_back(t.size(), 0.0);
      state.v.emplace_back(t.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractViolation("optimizer_step: state does not match parameters");
  double clip = 1.0;
  if (cfg.grad_clip > 0.0) {
    const double norm = gradient_norm(grads);
    if (norm > cfg.grad_clip) clip = cfg.grad_clip / norm;
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.entry(i);
    const auto& g = grads.entry(i);
    if (p.first != g.first || p.second.shape != g.second.shape)
      throw ContractViolation("optimizer_step: gradient '" + g.first + "' does not match parameter '" + p.first + "'");
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.second.size()) throw ContractViolation("optimizer_step: state shape mismatch");
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double gk = static_cast<double>(g.second.data[k]) * clip;
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      const double upd = lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.eps);
      p.second.data[k] = static_cast<T>(static_cast<double>(p.second.data[k]) - upd);
    }
  }
}

// ------------------------------------------------------------ gradient check

/// Scalar function of a parameter set; fills `grads` (same layout) when given.
using ScalarFn = std::function<double(const Parameters<double>&, Parameters<double>* grads)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// Central differences on every entry, or a seeded subsample of `max_entries`
/// when the set is larger. Relative error is |a − n| / max(|a|, |n|, floor).
inline GradCheckResult grad_check(const ScalarFn& fn, const Parameters<double>& params, double eps = 1e-6,
                                  std::size_t max_entries = 10000, std::uint64_t seed = 0, double floor = 1e-6) {
  Parameters<double> analytic = params.zeros_like();
  fn(params, &analytic);
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t k = 0; k < params.entry(i).second.size(); ++k) all.emplace_back(i, k);
  if (all.size() > max_entries) {
    Rng rng(mix_seed(seed, 0x9c));
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(max_entries);
    std::sort(all.begin(), all.end());
  }
  GradCheckResult res;
  Parameters<double> probe = params;
  for (auto [i, k] : all) {
    double& x = probe.entry(i).second.data[k];
    const double x0 = x;
    x = x0 + eps;
    const double fp = fn(probe, nullptr);
    x = x0 - eps;
    const double fm = fn(probe, nullptr);
    x = x0;
    const double num = (fp - fm) / (2 * eps);
    const double ana = analytic.entry(i).second.data[k];
    const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor});
    ++res.checked;
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst = params.entry(i).first + "[" + std::to_string(k) + "]";
    }
  }
  return res;
}

}  // namespace posediff
