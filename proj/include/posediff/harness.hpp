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
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "posediff/autodiff.hpp"
#include "posediff/checkpoint.hpp"
#include "posediff/datagen.hpp"
#include "posediff/dataset.hpp"
#include "posediff/diffusion.hpp"
#include "posediff/errors.hpp"
#include "posediff/geometry.hpp"
#include "posediff/losses.hpp"
#include "posediff/model.hpp"
#include "posediff/posemap.hpp"

namespace posediff {

// ------------------------------------------------------------ configuration

/// Where samples come from: a dataset directory, or the procedural stream
/// over a seeded object catalog.
struct DataConfig {
  std::string dataset;
  std::uint64_t object_seed = 7;
  int n_objects = 8;
  int points_per_object = 24;
  RenderSettings render;
};

struct TrainConfig {
  ModelConfig model;
  LossWeights weights;
  DiffusionConfig diffusion;
  AdamConfig adam;
  DataConfig data;
  int steps = 3000;
  int batch = 4;
  int warmup = 100;
  double lr_min_ratio = 0.05;
  std::uint64_t seed = 0;
  PredictorKind kind = PredictorKind::kCoarse;
  TemplateDistribution fine{TemplateMode::kFine, 30.0, 0.05};
  bool fixed_templates = false;  // coarse predictor trained on the fixed template set
  int checkpoint_every = 0;      // 0 = final checkpoint only
  // Coarse predictors on random templates draw each sample from the fixed
  // template set with probability falling linearly from 1 to 0 over this many
  // steps. With Haar-random templates the relative target has zero mean given
  // either pose alone, so training otherwise sits at the predict-zero
  // stationary point.
  int fixed_template_steps = 0;

  void validate() const {
    model.validate();
    weights.validate();
    if (steps < 1 || batch < 1 || warmup < 0) throw ConfigError("steps and batch must be positive, warmup non-negative");
    if (!(adam.lr > 0.0) || !(lr_min_ratio >= 0.0 && lr_min_ratio <= 1.0)) throw ConfigError("invalid learning rate settings");
    if (data.n_objects < 1) throw ConfigError("need at least one object");
    if (data.render.out_size != model.image_size) throw ConfigError("render size must match the model image size");
    if (!(fine.max_rot_deg >= 0.0) || !(fine.max_trans_m >= 0.0)) throw ConfigError("fine bounds must be non-negative");
    if (fixed_template_steps < 0) throw ConfigError("fixed_template_steps must be non-negative");
    (void)diffusion.make();
  }

  /// Template distribution the predictor is trained (and run) with.
  TemplateDistribution templates() const {
    if (kind == PredictorKind::kFine) return fine;
    return {fixed_templates ? TemplateMode::kFixed : TemplateMode::kRandom, fine.max_rot_deg, fine.max_trans_m};
  }
};

/// Warmup then cosine decay to lr·lr_min_ratio.
inline double learning_rate(const TrainConfig& c, int step) {
  const double base = c.adam.lr;
  if (step < c.warmup) return base * static_cast<double>(step + 1) / static_cast<double>(c.warmup);
  const int span = std::max(1, c.steps - c.warmup);
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup) / span);
  const double lo = base * c.lr_min_ratio;
  return lo + 0.5 * (base - lo) * (1.0 + std::cos(kPi * progress));
}

// ------------------------------------------------------------ supervision

/// Which target code path ran (flag contracts are asserted on these).
struct PathCounters {
  std::size_t relative_maps = 0;
  std::size_t absolute_maps = 0;
};

/// One target per template: relative maps by default, the query's absolute
/// maps when absolute_pose is set.
inline std::vector<PoseMaps> make_targets(const Sample& s, const ModelConfig& c, const CanonicalGrid& grid,
                                          PathCounters* counters = nullptr) {
  std::vector<PoseMaps> out;
  const PosedCrop q{s.query.pose, s.query.crop};
  for (const View& t : s.templates) {
    if (c.absolute_pose) {
      out.push_back(make_absolute_maps(q, s.query.k, grid));
      if (counters) ++counters->absolute_maps;
    } else {
      out.push_back(make_relative_maps(q, {t.pose, t.crop}, s.query.k, grid));
      if (counters) ++counters->relative_maps;
    }
  }
  return out;
}

/// State layout: template-major, cell-major, 6 channels (ray xyz, translation xyz).
inline std::vector<double> pack_state(const std::vector<PoseMaps>& maps) {
  std::vector<double> out;
  for (const auto& m : maps) {
    for (std::size_t i = 0; i < m.ray.cells(); ++i) {
      for (int k = 0; k < 3; ++k) out.push_back(m.ray.values()[3 * i + static_cast<std::size_t>(k)]);
      for (int k = 0; k < 3; ++k) out.push_back(m.trans.values()[3 * i + static_cast<std::size_t>(k)]);
    }
  }
  return out;
}

inline PoseMaps unpack_state(std::span<const double> state, std::size_t j, int p) {
  const std::size_t cells = static_cast<std::size_t>(p * p);
  if (state.size() < (j + 1) * cells * 6) throw ContractViolation("unpack_state: template index out of range");
  PoseMaps m{RayMap(p), TranslationMap(p)};
  for (std::size_t i = 0; i < cells; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      m.ray.values()[3 * i + k] = state[(j * cells + i) * 6 + k];
      m.trans.values()[3 * i + k] = state[(j * cells + i) * 6 + 3 + k];
    }
  return m;
}

/// Depth decode settings for template j's translation map.
inline TranslationDecode translation_decode(const Sample& s, std::size_t j, const ModelConfig& c) {
  if (c.absolute_pose) return {s.query.k, s.query.crop, s.query.crop.r_z};
  const View& t = s.templates[j];
  return {s.query.k, s.query.crop, relative_depth_factor(t.pose.t.z(), t.crop.r_z, s.query.crop.r_z)};
}

/// Query pose hypothesis carried by template j's maps.
inline Pose hypothesis_from_maps(const PoseMaps& m, const Sample& s, std::size_t j, const ModelConfig& c,
                                 const CanonicalGrid& grid) {
  if (c.absolute_pose) return invert_absolute_maps(m, s.query.crop, s.query.k, grid);
  const View& t = s.templates[j];
  return compose_query_pose(invert_relative_maps(m, {t.pose, t.crop}, s.query.crop, s.query.k, grid), t.pose);
}

struct LossBreakdown {
  double total = 0.0;
  double rot_recon = 0.0;
  double rot_cos = 0.0;
  double rot_reg = 0.0;
  double trans_recon = 0.0;
  double trans_xyz = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    total += o.total;
    rot_recon += o.rot_recon;
    rot_cos += o.rot_cos;
    rot_reg += o.rot_reg;
    trans_recon += o.trans_recon;
    trans_xyz += o.trans_xyz;
    return *this;
  }
  LossBreakdown scaled(double c) const { return {total * c, rot_recon * c, rot_cos * c, rot_reg * c, trans_recon * c, trans_xyz * c}; }
  bool finite() const {
    return std::isfinite(total) && std::isfinite(rot_recon) && std::isfinite(rot_cos) && std::isfinite(rot_reg) &&
           std::isfinite(trans_recon) && std::isfinite(trans_xyz);
  }
  std::string str() const {
    std::ostringstream os;
    os << "total=" << total << " rot_recon=" << rot_recon << " rot_cos=" << rot_cos << " rot_reg=" << rot_reg
       << " trans_recon=" << trans_recon << " trans_xyz=" << trans_xyz;
    return os.str();
  }
};

/// Noised training input for one sample.
struct DiffusionExample {
  std::vector<PoseMaps> targets;
  std::vector<double> noisy;
  int t = 1;
};

inline DiffusionExample make_diffusion_example(const Sample& s, const ModelConfig& c, const CanonicalGrid& grid,
                                               const NoiseSchedule& sched, Rng& rng, PathCounters* counters = nullptr) {
  DiffusionExample ex;
  ex.targets = make_targets(s, c, grid, counters);
  const std::vector<double> x0 = pack_state(ex.targets);
  ex.t = std::uniform_int_distribution<int>(1, sched.steps)(rng);
  std::vector<double> eps(x0.size());
  fill_normal(std::span<double>(eps), rng);
  ex.noisy = forward_noise(x0, ex.t, eps, sched);
  return ex;
}

/// Loss averaged over template hypotheses, differentiated into the binder's
/// parameters when `backward` is set.
template <typename T>
LossBreakdown example_loss(Network<T>& net, Binder<T>& P, const NetworkInput<T>& in, const Sample& s,
                           const DiffusionExample& ex, const NoiseSchedule& sched, const LossWeights& w,
                           const CanonicalGrid& grid, bool backward) {
  auto& g = P.graph();
  const ModelConfig& c = net.config();
  const std::size_t cells = static_cast<std::size_t>(c.cells());
  const std::size_t n = s.templates.size();
  const Conditioning<T> cond = net.encode(P, in);
  Tensor<T> noisy({n * cells, 6});
  for (std::size_t i = 0; i < ex.noisy.size(); ++i) noisy.data[i] = static_cast<T>(ex.noisy[i]);
  const MapPrediction<T> pred = net.denoise(P, cond, noisy, ex.t, sched.steps);
  LossBreakdown acc;
  std::vector<typename Graph<T>::Var> terms;
  for (std::size_t j = 0; j < n; ++j) {
    RotLossTerms rt;
    TransLossTerms tt;
    const auto lr = loss_rot_op(g, g.slice_rows(pred.rot, j * cells, cells), ex.targets[j].ray.values(), grid, w, &rt);
    const auto lt = loss_trans_op(g, g.slice_rows(pred.trans, j * cells, cells), ex.targets[j].trans.values(),
                                  translation_decode(s, j, c), s.query.pose.t, w, &tt);
    terms.push_back(g.add(g.scale(lr, static_cast<T>(w.rot)), g.scale(lt, static_cast<T>(w.trans))));
    acc += {loss_total(rt, tt, w), rt.recon, rt.cos, rt.reg, tt.recon, tt.xyz};
  }
  const auto total = g.scale(g.sum(g.concat_rows(terms)), static_cast<T>(1.0 / static_cast<double>(n)));
  if (backward) g.backward(total);
  return acc.scaled(1.0 / static_cast<double>(n));
}

// ------------------------------------------------------------ data streams

/// Training/eval sample source. Fine predictors get templates rendered around
/// the query's ground-truth pose.
class SampleSource {
 public:
  SampleSource(const DataConfig& dc, int n_templates, TemplateDistribution dist, std::uint64_t stream_seed)
      : render_(dc.render), n_templates_(n_templates), dist_(dist), stream_(stream_seed) {
    if (!dc.dataset.empty()) {
      Dataset ds = read_dataset(dc.dataset);
      if (ds.samples.empty()) throw FormatError(dc.dataset + ": dataset has no samples");
      if (ds.render.out_size != dc.render.out_size)
        throw FormatError(dc.dataset + ": dataset images are " + std::to_string(ds.render.out_size) + " px, model expects " +
                          std::to_string(dc.render.out_size));
      render_ = ds.render;
      objects_ = std::move(ds.objects);
      samples_ = std::move(ds.samples);
    } else {
      objects_ = make_catalog(dc.object_seed, dc.n_objects, dc.points_per_object);
    }
  }

  bool from_dataset() const { return !samples_.empty(); }
  std::size_t dataset_size() const { return samples_.size(); }
  const ObjectCatalog& objects() const { return objects_; }
  const RenderSettings& render() const { return render_; }

  Sample get(std::uint64_t index) const {
    if (!from_dataset()) return make_sample(objects_, stream_, index, n_templates_, dist_, render_);
    Sample s = samples_[static_cast<std::size_t>(mix_seed(stream_, index) % samples_.size())];
    if (dist_.mode != TemplateMode::kRandom || static_cast<int>(s.templates.size()) != n_templates_) {
      const ToyObject& obj = objects_.at(s.object_id);
      s.templates = draw_templates(obj, s.query.pose, n_templates_, mix_seed(stream_, index ^ 0x5eed), dist_, render_);
    }
    return s;
  }

 private:
  RenderSettings render_;
  int n_templates_;
  TemplateDistribution dist_;
  std::uint64_t stream_;
  ObjectCatalog objects_;
  std::vector<Sample> samples_;
};

// ------------------------------------------------------------ training

inline constexpr const char* kTrainLogHeader = "step,loss_total,loss_rot_recon,loss_rot_cos,loss_rot_reg,loss_trans_recon,loss_trans_xyz,lr";

struct TrainResult {
  std::filesystem::path checkpoint;
  std::vector<LossBreakdown> log;
  PathCounters counters;
  Checkpoint final_state;
};

inline std::string format_log_row(int step, const LossBreakdown& l, double lr) {
  std::ostringstream os;
  os << std::setprecision(9) << step << ',' << l.total << ',' << l.rot_recon << ',' << l.rot_cos << ',' << l.rot_reg << ','
     << l.trans_recon << ',' << l.trans_xyz << ',' << lr;
  return os.str();
}

inline std::string checkpoint_name(int step) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "ckpt_%06d.rpck", step);
  return buf;
}

/// Trains one predictor. Writes train_log.csv, periodic checkpoints and
/// model.rpck into out_dir; returns the final checkpoint path.
inline TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir, std::ostream* progress = nullptr) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const ModelConfig& mc = cfg.model;
  const NoiseSchedule sched = cfg.diffusion.make();
  const CanonicalGrid grid = canonical_rays(mc.p, mc.half_extent);
  const SampleSource source(cfg.data, mc.templates, cfg.templates(), mix_seed(cfg.seed, 0x7a11));
  const bool curriculum = cfg.kind == PredictorKind::kCoarse && !cfg.fixed_templates && cfg.fixed_template_steps > 0;
  std::optional<SampleSource> warm_source;
  if (curriculum) warm_source.emplace(cfg.data, mc.templates, TemplateDistribution{TemplateMode::kFixed, 0.0, 0.0},
                                      mix_seed(cfg.seed, 0x7a11));
  Network<float> net(mc);
  Checkpoint ck{mc, cfg.diffusion, cfg.kind, 0, init_parameters(mc, cfg.seed).cast<float>()};
  AdamState<float> opt;
  TrainResult res;
  std::ofstream log(out_dir / "train_log.csv", std::ios::trunc);
  if (!log) throw FormatError((out_dir / "train_log.csv").string() + ": cannot open for writing");
  log << kTrainLogHeader << "\n";
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng(mix_seed(cfg.seed, 0x57e9000000ULL + static_cast<std::uint64_t>(step)));
    Parameters<float> grads = ck.params.zeros_like();
    LossBreakdown step_loss;
    const double p_fixed = curriculum ? 1.0 - static_cast<double>(step) / cfg.fixed_template_steps : 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const bool use_fixed = p_fixed > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p_fixed;
      const Sample s = (use_fixed ? *warm_source : source).get(static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.batch) +
                                  static_cast<std::uint64_t>(b));
      const DiffusionExample ex = make_diffusion_example(s, mc, grid, sched, rng, &res.counters);
      const NetworkInput<float> in = make_network_input<float>(s, mc, grid, source.render().canvas);
      Graph<float> g;
      Binder<float> P(g, ck.params);
      const LossBreakdown l = example_loss(net, P, in, s, ex, sched, cfg.weights, grid, true);
      if (!l.finite()) throw NumericError("non-finite loss at step " + std::to_string(step) + " (" + l.str() + ")");
      step_loss += l;
      const Parameters<float> sg = P.gradients();
      for (std::size_t i = 0; i < grads.size(); ++i) {
        auto& dst = grads.entry(i).second.data;
        const auto& src = sg.entry(i).second.data;
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
    const double inv = 1.0 / cfg.batch;
    for (auto& [n, t] : grads)
      for (auto& v : t.data) {
        v = static_cast<float>(v * inv);
        if (!std::isfinite(v)) throw NumericError("non-finite gradient in '" + n + "' at step " + std::to_string(step));
      }
    const double lr = learning_rate(cfg, step);
    optimizer_step(ck.params, grads, opt, lr, cfg.adam);
    step_loss = step_loss.scaled(inv);
    res.log.push_back(step_loss);
    log << format_log_row(step, step_loss, lr) << "\n";
    ck.step = step + 1;
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps)
      save_checkpoint(out_dir / checkpoint_name(step + 1), ck);
    if (progress && (step % 100 == 0 || step + 1 == cfg.steps))
      *progress << "step " << step << " " << step_loss.str() << " lr=" << lr << std::endl;
  }
  res.checkpoint = out_dir / "model.rpck";
  save_checkpoint(res.checkpoint, ck);
  res.final_state = std::move(ck);
  return res;
}

// ------------------------------------------------------------ inference

/// Produces the clean packed state for all templates of a sample.
using StageSampler = std::function<std::vector<double>(const Sample&, std::uint64_t seed)>;

/// Runs reverse diffusion with a trained network. The conditioning is encoded
/// once per sample; each timestep re-runs the decoder only.
template <typename T>
class Predictor {
 public:
  explicit Predictor(Checkpoint ck, RenderSettings rs = {})
      : ck_(std::move(ck)),
        net_(ck_.model),
        params_(ck_.params.template cast<T>()),
        sched_(ck_.diffusion.make()),
        grid_(canonical_rays(ck_.model.p, ck_.model.half_extent)),
        render_(rs) {}

  const ModelConfig& config() const { return ck_.model; }
  const Checkpoint& checkpoint() const { return ck_; }
  const NoiseSchedule& schedule() const { return sched_; }
  std::size_t parameter_count() const { return params_.numel(); }

  std::vector<double> sample_state(const Sample& s, std::uint64_t seed) {
    const ModelConfig& c = ck_.model;
    Tensor<T> query, context;
    {
      Graph<T> g(false);
      Binder<T> P(g, params_);
      const NetworkInput<T> in = make_network_input<T>(s, c, grid_, render_.canvas);
      const Conditioning<T> cond = net_.encode(P, in);
      query = g.value(cond.query);
      context = g.value(cond.context);
    }
    const std::size_t rows = s.templates.size() * static_cast<std::size_t>(c.cells());
    const Denoiser d = [&](std::span<const double> state, int t) {
      Graph<T> g(false);
      Binder<T> P(g, params_);
      Conditioning<T> cond;
      cond.query = g.constant(query);
      cond.context = g.constant(context);
      cond.cell_prior = cond.context;
      cond.fused = cond.context;
      Tensor<T> noisy({rows, 6});
      for (std::size_t i = 0; i < state.size(); ++i) noisy.data[i] = static_cast<T>(state[i]);
      const MapPrediction<T> pred = net_.denoise(P, cond, noisy, t, sched_.steps);
      const auto& r = g.value(pred.rot);
      const auto& tr = g.value(pred.trans);
      std::vector<double> out(rows * 6);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t k = 0; k < 3; ++k) {
          out[i * 6 + k] = static_cast<double>(r.at(i, k));
          out[i * 6 + 3 + k] = static_cast<double>(tr.at(i, k));
        }
      return out;
    };
    return sample(d, rows * 6, sched_, seed);
  }

  StageSampler sampler() {
    return [this](const Sample& s, std::uint64_t seed) { return sample_state(s, seed); };
  }

 private:
  Checkpoint ck_;
  Network<T> net_;
  Parameters<T> params_;
  NoiseSchedule sched_;
  CanonicalGrid grid_;
  RenderSettings render_;
};

/// Ground-truth denoiser plugged into the real sampling loop (plumbing check).
inline StageSampler oracle_sampler(const ModelConfig& c, const DiffusionConfig& dc) {
  return [c, dc](const Sample& s, std::uint64_t seed) {
    const CanonicalGrid grid = canonical_rays(c.p, c.half_extent);
    const std::vector<double> gt = pack_state(make_targets(s, c, grid));
    const Denoiser d = [gt](std::span<const double>, int) { return gt; };
    return sample(d, gt.size(), dc.make(), seed);
  };
}

struct Stage {
  StageSampler sampler;
  ModelConfig model;
};

struct InferOptions {
  std::uint64_t seed = 0;
  int n_hypotheses = 0;  // 0 = all templates of the sample
  int fine_templates = 0;  // 0 = same count as the coarse stage
  TemplateDistribution fine{TemplateMode::kFine, 30.0, 0.05};
  RenderSettings render;
};

struct InferResult {
  Pose pose;
  Pose coarse_pose;
  std::vector<Pose> coarse_hypotheses;
  std::vector<Pose> fine_hypotheses;
  bool refined = false;
  bool warning_missing_object = false;
  std::size_t failed_decodes = 0;
};

/// Chordal mean of rotations, component-wise median of translations.
inline Pose aggregate_hypotheses(std::span<const Pose> hs) {
  if (hs.empty()) throw DegenerateInputError("no hypotheses to aggregate");
  std::vector<Rotation> rs;
  std::vector<Vec3> ts;
  for (const Pose& h : hs) {
    rs.push_back(h.r);
    ts.push_back(h.t);
  }
  return {chordal_mean(rs), componentwise_median(ts)};
}

namespace detail {

/// Decodes every template's maps; undecodable maps are skipped and counted.
inline std::vector<Pose> decode_hypotheses(const std::vector<double>& state, const Sample& s, const ModelConfig& c,
                                           std::size_t* failed) {
  const CanonicalGrid grid = canonical_rays(c.p, c.half_extent);
  std::vector<Pose> out;
  for (std::size_t j = 0; j < s.templates.size(); ++j) {
    try {
      const Pose h = hypothesis_from_maps(unpack_state(state, j, c.p), s, j, c, grid);
      if (!h.t.allFinite()) throw DegenerateInputError("non-finite translation");
      out.push_back(h);
    } catch (const DegenerateInputError&) {
      ++*failed;
    } catch (const DomainError&) {
      ++*failed;
    }
  }
  return out;
}

inline Pose aggregate_or_default(const std::vector<Pose>& hs) {
  if (hs.empty()) return Pose{Rotation::identity(), Vec3(0.0, 0.0, 2.25)};
  return aggregate_hypotheses(hs);
}

}  // namespace detail

/// Coarse stage on the sample's own templates, then (with a fine stage and the
/// object model) re-sampling on templates rendered around the coarse estimate.
inline InferResult infer(const Stage& coarse, const Stage* fine, Sample s, const ToyObject* obj, const InferOptions& opt) {
  if (opt.n_hypotheses > 0 && static_cast<std::size_t>(opt.n_hypotheses) < s.templates.size())
    s.templates.resize(static_cast<std::size_t>(opt.n_hypotheses));
  if (s.templates.empty()) throw ContractViolation("infer: sample has no templates");
  InferResult res;
  const std::vector<double> state = coarse.sampler(s, mix_seed(opt.seed, 1));
  res.coarse_hypotheses = detail::decode_hypotheses(state, s, coarse.model, &res.failed_decodes);
  res.coarse_pose = detail::aggregate_or_default(res.coarse_hypotheses);
  res.pose = res.coarse_pose;
  if (!fine) return res;
  if (!obj) {
    res.warning_missing_object = true;
    return res;
  }
  Sample fs = s;
  const int n = opt.fine_templates > 0 ? opt.fine_templates : static_cast<int>(s.templates.size());
  try {
    fs.templates = sample_fine_templates(*obj, res.coarse_pose, n, mix_seed(opt.seed, 2), opt.fine.max_rot_deg,
                                         opt.fine.max_trans_m, opt.render);
  } catch (const RenderRejected&) {
    return res;
  }
  const std::vector<double> fstate = fine->sampler(fs, mix_seed(opt.seed, 3));
  res.fine_hypotheses = detail::decode_hypotheses(fstate, fs, fine->model, &res.failed_decodes);
  if (!res.fine_hypotheses.empty()) {
    res.pose = aggregate_hypotheses(res.fine_hypotheses);
    res.refined = true;
  }
  return res;
}

// ------------------------------------------------------------ evaluation

struct EvalRow {
  std::size_t index = 0;
  std::uint64_t object_id = 0;
  double rot_deg = 0.0;
  double trans_m = 0.0;
  double depth_rel = 0.0;
  double coarse_rot_deg = 0.0;
  double best_rot_deg = 0.0;    // best single hypothesis of the final stage
  double spread_deg = 0.0;      // mean geodesic distance of hypotheses to the aggregate
  std::size_t hypotheses = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double median_rot_deg = 0.0, mean_rot_deg = 0.0;
  double median_trans_m = 0.0, mean_trans_m = 0.0;
  double median_depth_rel = 0.0, mean_depth_rel = 0.0;
  double median_coarse_rot_deg = 0.0;
  double median_best_rot_deg = 0.0;
  double best_le_aggregate = 0.0;  // fraction of samples where best-of-N <= aggregated error
  double mean_spread_deg = 0.0;
  double recall_5deg = 0.0;
  double recall_5deg_5pct = 0.0;
};

/// Error metrics for one prediction against ground truth.
inline EvalRow score_pose(const Pose& pred, const Pose& gt) {
  EvalRow r;
  r.rot_deg = rad2deg(geodesic_distance(pred.r, gt.r));
  r.trans_m = (pred.t - gt.t).norm();
  r.depth_rel = std::abs(pred.t.z() - gt.t.z()) / std::abs(gt.t.z());
  r.coarse_rot_deg = r.rot_deg;
  r.best_rot_deg = r.rot_deg;
  return r;
}

inline EvalReport summarize(std::vector<EvalRow> rows) {
  if (rows.empty()) throw DegenerateInputError("evaluation produced no rows");
  EvalReport rep;
  auto column = [&](double EvalRow::*f) {
    std::vector<double> v;
    for (const auto& r : rows) {
      if (!std::isfinite(r.*f)) throw NumericError("non-finite metric for sample " + std::to_string(r.index));
      v.push_back(r.*f);
    }
    return v;
  };
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const auto rot = column(&EvalRow::rot_deg), tr = column(&EvalRow::trans_m), dep = column(&EvalRow::depth_rel);
  rep.median_rot_deg = median(rot);
  rep.mean_rot_deg = mean(rot);
  rep.median_trans_m = median(tr);
  rep.mean_trans_m = mean(tr);
  rep.median_depth_rel = median(dep);
  rep.mean_depth_rel = mean(dep);
  rep.median_coarse_rot_deg = median(column(&EvalRow::coarse_rot_deg));
  rep.median_best_rot_deg = median(column(&EvalRow::best_rot_deg));
  rep.mean_spread_deg = mean(column(&EvalRow::spread_deg));
  double le = 0, r5 = 0, r55 = 0;
  for (const auto& r : rows) {
    le += r.best_rot_deg <= r.rot_deg ? 1 : 0;
    r5 += r.rot_deg < 5.0 ? 1 : 0;
    r55 += (r.rot_deg < 5.0 && r.depth_rel < 0.05) ? 1 : 0;
  }
  const double n = static_cast<double>(rows.size());
  rep.best_le_aggregate = le / n;
  rep.recall_5deg = r5 / n;
  rep.recall_5deg_5pct = r55 / n;
  rep.rows = std::move(rows);
  return rep;
}

inline EvalRow score_inference(const InferResult& r, const Pose& gt) {
  EvalRow row = score_pose(r.pose, gt);
  row.coarse_rot_deg = rad2deg(geodesic_distance(r.coarse_pose.r, gt.r));
  const auto& hs = r.refined ? r.fine_hypotheses : r.coarse_hypotheses;
  row.hypotheses = hs.size();
  row.best_rot_deg = row.rot_deg;
  if (!hs.empty()) {
    double best = 1e300, spread = 0.0;
    for (const Pose& h : hs) {
      best = std::min(best, rad2deg(geodesic_distance(h.r, gt.r)));
      spread += rad2deg(geodesic_distance(h.r, r.pose.r));
    }
    row.best_rot_deg = best;
    row.spread_deg = spread / static_cast<double>(hs.size());
  }
  return row;
}

struct EvalOptions {
  std::uint64_t seed = 0;
  InferOptions infer;
  std::ostream* progress = nullptr;
};

/// Runs inference on every sample with per-sample seeds.
inline EvalReport evaluate(const Stage& coarse, const Stage* fine, const std::vector<Sample>& samples,
                           const ObjectCatalog& objects, const EvalOptions& opt) {
  std::vector<EvalRow> rows;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    InferOptions io = opt.infer;
    io.seed = mix_seed(opt.seed, i);
    const auto it = objects.find(s.object_id);
    try {
      const InferResult r = infer(coarse, fine, s, it == objects.end() ? nullptr : &it->second, io);
      EvalRow row = score_inference(r, s.query.pose);
      row.index = i;
      row.object_id = s.object_id;
      rows.push_back(row);
    } catch (const NumericError& e) {
      throw NumericError("sample " + std::to_string(i) + ": " + e.what());
    } catch (const DegenerateInputError& e) {
      throw NumericError("sample " + std::to_string(i) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("sample " + std::to_string(i) + ": " + e.what());
    }
    if (opt.progress && (i + 1) % 50 == 0) *opt.progress << "evaluated " << (i + 1) << "/" << samples.size() << std::endl;
  }
  return summarize(std::move(rows));
}

/// Uniformly random rotations with the ground-truth translation.
inline EvalReport random_pose_baseline(const std::vector<Sample>& samples, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xba5e));
  std::vector<EvalRow> rows;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EvalRow r = score_pose({Rotation::random(rng), samples[i].query.pose.t}, samples[i].query.pose);
    r.index = i;
    r.object_id = samples[i].object_id;
    rows.push_back(r);
  }
  return summarize(std::move(rows));
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["samples"] = r.rows.size();
  j["median_rot_deg"] = r.median_rot_deg;
  j["mean_rot_deg"] = r.mean_rot_deg;
  j["median_trans_m"] = r.median_trans_m;
  j["mean_trans_m"] = r.mean_trans_m;
  j["median_depth_rel"] = r.median_depth_rel;
  j["mean_depth_rel"] = r.mean_depth_rel;
  j["median_coarse_rot_deg"] = r.median_coarse_rot_deg;
  j["median_best_of_n_rot_deg"] = r.median_best_rot_deg;
  j["best_of_n_le_aggregate"] = r.best_le_aggregate;
  j["mean_hypothesis_spread_deg"] = r.mean_spread_deg;
  j["recall_5deg"] = r.recall_5deg;
  j["recall_5deg_5pct_depth"] = r.recall_5deg_5pct;
  return j;
}

inline constexpr const char* kEvalCsvHeader =
    "index,object_id,rot_err_deg,trans_err_m,depth_rel_err,coarse_rot_err_deg,best_of_n_rot_err_deg,spread_deg,hypotheses";

inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(9) << kEvalCsvHeader << "\n";
  for (const auto& e : r.rows)
    os << e.index << ',' << e.object_id << ',' << e.rot_deg << ',' << e.trans_m << ',' << e.depth_rel << ','
       << e.coarse_rot_deg << ',' << e.best_rot_deg << ',' << e.spread_deg << ',' << e.hypotheses << "\n";
  return os.str();
}

inline void write_report(const EvalReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream js(dir / "report.json", std::ios::trunc);
  std::ofstream cs(dir / "per_sample.csv", std::ios::trunc);
  if (!js || !cs) throw FormatError(dir.string() + ": cannot write report files");
  js << report_json(r).dump(2) << "\n";
  cs << report_csv(r);
}

/// Held-out query stream over the training objects (distinct stream seed).
inline std::vector<Sample> make_eval_samples(const DataConfig& dc, int n_samples, int n_templates,
                                             const TemplateDistribution& dist, std::uint64_t eval_seed) {
  const ObjectCatalog cat = make_catalog(dc.object_seed, dc.n_objects, dc.points_per_object);
  std::vector<Sample> out;
  const std::uint64_t stream = mix_seed(eval_seed, 0xe7a1);
  for (int i = 0; i < n_samples; ++i)
    out.push_back(make_sample(cat, stream, static_cast<std::uint64_t>(i), n_templates, dist, dc.render));
  return out;
}

// ------------------------------------------------------------ ablations

struct AblateConfig {
  TrainConfig base;
  int eval_samples = 500;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::uint64_t eval_seed = 99;
};

struct AblationRow {
  std::string axis;
  std::string arm;
  std::uint64_t seed = 0;
  EvalReport report;
};

struct AblationArm {
  std::string name;
  TrainConfig cfg;
};

inline std::vector<AblationArm> component_arms(const TrainConfig& base) {
  std::vector<AblationArm> arms;
  arms.push_back({"full", base});
  AblationArm a{"absolute_pose", base};
  a.cfg.model.absolute_pose = true;
  arms.push_back(a);
  AblationArm b{"single_view", base};
  b.cfg.model.single_view = true;
  arms.push_back(b);
  AblationArm c{"no_template_pose", base};
  c.cfg.model.condition_template_pose = false;
  arms.push_back(c);
  return arms;
}

/// The five template selection strategies of the sweep.
inline std::vector<AblationArm> template_distribution_arms(const TrainConfig& base) {
  std::vector<AblationArm> arms;
  AblationArm fixed{"fixed", base};
  fixed.cfg.kind = PredictorKind::kCoarse;
  fixed.cfg.fixed_templates = true;
  arms.push_back(fixed);
  AblationArm rnd{"random", base};
  rnd.cfg.kind = PredictorKind::kCoarse;
  rnd.cfg.fixed_templates = false;
  arms.push_back(rnd);
  const std::pair<const char*, std::pair<double, double>> fine[] = {
      {"fine_90deg_10cm", {90.0, 0.10}}, {"fine_30deg_5cm", {30.0, 0.05}}, {"fine_15deg_3cm", {15.0, 0.03}}};
  for (const auto& [name, b] : fine) {
    AblationArm f{name, base};
    f.cfg.kind = PredictorKind::kFine;
    f.cfg.fine = {TemplateMode::kFine, b.first, b.second};
    arms.push_back(f);
  }
  return arms;
}

inline constexpr const char* kAblationCsvHeader =
    "axis,arm,seed,median_rot_deg,mean_rot_deg,median_trans_m,median_depth_rel,recall_5deg,recall_5deg_5pct_depth";

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(9) << kAblationCsvHeader << "\n";
  for (const auto& r : rows)
    os << r.axis << ',' << r.arm << ',' << r.seed << ',' << r.report.median_rot_deg << ',' << r.report.mean_rot_deg << ','
       << r.report.median_trans_m << ',' << r.report.median_depth_rel << ',' << r.report.recall_5deg << ','
       << r.report.recall_5deg_5pct << "\n";
  return os.str();
}

/// Trains and evaluates every arm of an axis ("components" or
/// "template-distribution") with matched budgets. Each arm is evaluated on
/// queries with its own template distribution; the query poses are shared.
inline std::vector<AblationRow> run_ablation(const std::string& axis, const AblateConfig& cfg,
                                             const std::filesystem::path& out_dir, std::ostream* progress = nullptr) {
  std::vector<AblationArm> arms;
  std::vector<std::uint64_t> seeds = cfg.seeds;
  if (axis == "components") {
    arms = component_arms(cfg.base);
  } else if (axis == "template-distribution") {
    arms = template_distribution_arms(cfg.base);
  } else {
    throw UsageError("unknown ablation axis '" + axis + "' (expected components or template-distribution)");
  }
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationRow> rows;
  for (const auto& arm : arms) {
    for (std::uint64_t seed : seeds) {
      TrainConfig tc = arm.cfg;
      tc.seed = seed;
      const std::filesystem::path dir = out_dir / (axis + "_" + arm.name + "_s" + std::to_string(seed));
      const TrainResult tr = train(tc, dir);
      const std::vector<Sample> samples =
          make_eval_samples(tc.data, cfg.eval_samples, tc.model.templates, tc.templates(), cfg.eval_seed);
      Predictor<float> pred(tr.final_state, tc.data.render);
      const Stage stage{pred.sampler(), tc.model};
      EvalOptions eo;
      eo.seed = cfg.eval_seed;
      eo.infer.render = tc.data.render;
      const EvalReport rep = evaluate(stage, nullptr, samples, {}, eo);
      write_report(rep, dir);
      if (progress)
        *progress << axis << " " << arm.name << " seed " << seed << ": median rot " << rep.median_rot_deg << " deg"
                  << std::endl;
      rows.push_back({axis, arm.name, seed, rep});
    }
  }
  std::filesystem::create_directories(out_dir);
  std::ofstream os(out_dir / (axis + ".csv"), std::ios::trunc);
  if (!os) throw FormatError((out_dir / (axis + ".csv")).string() + ": cannot open for writing");
  os << ablation_csv(rows);
  return rows;
}

// ------------------------------------------------------------ JSON config

namespace detail {

template <typename V>
void take(const nlohmann::json& j, const char* key, V& dst) {
  if (j.contains(key)) dst = j.at(key).get<V>();
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown config key '" + where + it.key() + "'");
  }
}

}  // namespace detail

/// Applies the keys present in `j` on top of `c`; unknown keys are rejected.
inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
  using detail::take;
  try {
    detail::reject_unknown(j, {"model", "weights", "diffusion", "optimizer", "data", "steps", "batch", "warmup",
                               "lr_min_ratio", "seed", "kind", "fine", "fixed_templates", "checkpoint_every",
                               "fixed_template_steps"},
                           "");
    if (j.contains("model")) {
      const auto& m = j.at("model");
      detail::reject_unknown(m, {"image_size", "patch_size", "embed_dim", "heads", "n_fuser", "n_decoder", "mlp_ratio", "p",
                                 "half_extent", "fourier_bands", "fourier_base", "templates", "single_view",
                                 "absolute_pose", "condition_template_pose", "view_index_encoding"},
                             "model.");
      take(m, "image_size", c.model.image_size);
      take(m, "patch_size", c.model.patch_size);
      take(m, "embed_dim", c.model.embed_dim);
      take(m, "heads", c.model.heads);
      take(m, "n_fuser", c.model.n_fuser);
      take(m, "n_decoder", c.model.n_decoder);
      take(m, "mlp_ratio", c.model.mlp_ratio);
      take(m, "p", c.model.p);
      take(m, "half_extent", c.model.half_extent);
      take(m, "fourier_bands", c.model.fourier_bands);
      take(m, "fourier_base", c.model.fourier_base);
      take(m, "templates", c.model.templates);
      take(m, "single_view", c.model.single_view);
      take(m, "absolute_pose", c.model.absolute_pose);
      take(m, "condition_template_pose", c.model.condition_template_pose);
      take(m, "view_index_encoding", c.model.view_index_encoding);
    }
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      detail::reject_unknown(w, {"recon", "cos", "reg", "x", "y", "z", "t", "rot", "trans"}, "weights.");
      take(w, "recon", c.weights.recon);
      take(w, "cos", c.weights.cos);
      take(w, "reg", c.weights.reg);
      take(w, "x", c.weights.x);
      take(w, "y", c.weights.y);
      take(w, "z", c.weights.z);
      take(w, "t", c.weights.t);
      take(w, "rot", c.weights.rot);
      take(w, "trans", c.weights.trans);
    }
    if (j.contains("diffusion")) {
      const auto& d = j.at("diffusion");
      detail::reject_unknown(d, {"schedule", "steps", "beta_min", "beta_max"}, "diffusion.");
      if (d.contains("schedule")) c.diffusion.kind = parse_schedule_kind(d.at("schedule").get<std::string>());
      take(d, "steps", c.diffusion.steps);
      take(d, "beta_min", c.diffusion.beta_min);
      take(d, "beta_max", c.diffusion.beta_max);
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      detail::reject_unknown(o, {"lr", "beta1", "beta2", "eps", "grad_clip"}, "optimizer.");
      take(o, "lr", c.adam.lr);
      take(o, "beta1", c.adam.beta1);
      take(o, "beta2", c.adam.beta2);
      take(o, "eps", c.adam.eps);
      take(o, "grad_clip", c.adam.grad_clip);
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      detail::reject_unknown(d, {"dataset", "object_seed", "n_objects", "points_per_object"}, "data.");
      take(d, "dataset", c.data.dataset);
      take(d, "object_seed", c.data.object_seed);
      take(d, "n_objects", c.data.n_objects);
      take(d, "points_per_object", c.data.points_per_object);
    }
    if (j.contains("fine")) {
      const auto& f = j.at("fine");
      detail::reject_unknown(f, {"max_rot_deg", "max_trans_m"}, "fine.");
      take(f, "max_rot_deg", c.fine.max_rot_deg);
      take(f, "max_trans_m", c.fine.max_trans_m);
    }
    if (j.contains("kind")) c.kind = parse_predictor_kind(j.at("kind").get<std::string>());
    take(j, "steps", c.steps);
    take(j, "batch", c.batch);
    take(j, "warmup", c.warmup);
    take(j, "lr_min_ratio", c.lr_min_ratio);
    take(j, "seed", c.seed);
    take(j, "fixed_templates", c.fixed_templates);
    take(j, "checkpoint_every", c.checkpoint_every);
    take(j, "fixed_template_steps", c.fixed_template_steps);
    c.data.render.out_size = c.model.image_size;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  const ModelConfig& m = c.model;
  j["model"] = {{"image_size", m.image_size}, {"patch_size", m.patch_size}, {"embed_dim", m.embed_dim},
                {"heads", m.heads}, {"n_fuser", m.n_fuser}, {"n_decoder", m.n_decoder}, {"mlp_ratio", m.mlp_ratio},
                {"p", m.p}, {"half_extent", m.half_extent}, {"fourier_bands", m.fourier_bands},
                {"fourier_base", m.fourier_base}, {"templates", m.templates}, {"single_view", m.single_view},
                {"absolute_pose", m.absolute_pose}, {"condition_template_pose", m.condition_template_pose},
                {"view_index_encoding", m.view_index_encoding}};
  const LossWeights& w = c.weights;
  j["weights"] = {{"recon", w.recon}, {"cos", w.cos}, {"reg", w.reg}, {"x", w.x}, {"y", w.y},
                  {"z", w.z}, {"t", w.t}, {"rot", w.rot}, {"trans", w.trans}};
  j["diffusion"] = {{"schedule", to_string(c.diffusion.kind)}, {"steps", c.diffusion.steps},
                    {"beta_min", c.diffusion.beta_min}, {"beta_max", c.diffusion.beta_max}};
  j["optimizer"] = {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps},
                    {"grad_clip", c.adam.grad_clip}};
  j["data"] = {{"dataset", c.data.dataset}, {"object_seed", c.data.object_seed}, {"n_objects", c.data.n_objects},
               {"points_per_object", c.data.points_per_object}};
  j["steps"] = c.steps;
  j["batch"] = c.batch;
  j["warmup"] = c.warmup;
  j["lr_min_ratio"] = c.lr_min_ratio;
  j["seed"] = c.seed;
  j["kind"] = to_string(c.kind);
  j["fine"] = {{"max_rot_deg", c.fine.max_rot_deg}, {"max_trans_m", c.fine.max_trans_m}};
  j["fixed_templates"] = c.fixed_templates;
  j["checkpoint_every"] = c.checkpoint_every;
  j["fixed_template_steps"] = c.fixed_template_steps;
  return j;
}

}  // namespace posediff
