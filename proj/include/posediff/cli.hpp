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
#include <iostream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "posediff/checkpoint.hpp"
#include "posediff/dataset.hpp"
#include "posediff/errors.hpp"
#include "posediff/harness.hpp"
#include "posediff/plot.hpp"

namespace posediff {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

namespace detail {

inline nlohmann::json read_json_file(const std::string& path) {
  try {
    return nlohmann::json::parse(io::slurp(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
}

inline nlohmann::ordered_json pose_json(const Pose& p) {
  nlohmann::ordered_json j;
  auto r = nlohmann::ordered_json::array();
  for (int i = 0; i < 3; ++i) r.push_back({p.r.matrix()(i, 0), p.r.matrix()(i, 1), p.r.matrix()(i, 2)});
  j["R"] = r;
  j["t"] = {p.t.x(), p.t.y(), p.t.z()};
  return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(path.string() + ": cannot open for writing");
  os << text;
}

/// Flag overrides shared by train and ablate.
struct TrainFlags {
  std::string config;
  std::optional<int> steps, batch, objects, diffusion_steps, templates, checkpoint_every;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> kind, data, schedule;
  bool absolute_pose = false, single_view = false, no_template_pose = false;

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "JSON config file (flags override it)");
    app->add_option("--steps", steps, "optimizer steps");
    app->add_option("--batch", batch, "samples per step");
    app->add_option("--lr", lr, "peak learning rate");
    app->add_option("--seed", seed, "training seed");
    app->add_option("--kind", kind, "predictor kind: coarse or fine");
    app->add_option("--data", data, "dataset directory (default: procedural stream)");
    app->add_option("--objects", objects, "number of procedural objects");
    app->add_option("--templates", templates, "templates per sample");
    app->add_option("--diffusion-steps", diffusion_steps, "diffusion steps T");
    app->add_option("--schedule", schedule, "noise schedule: linear or cosine");
    app->add_option("--checkpoint-every", checkpoint_every, "periodic checkpoint interval (0 = final only)");
    app->add_flag("--absolute-pose", absolute_pose, "supervise absolute query maps");
    app->add_flag("--single-view", single_view, "fuse each template alone");
    app->add_flag("--no-template-pose", no_template_pose, "zero the template pose channels");
  }

  TrainConfig resolve() const {
    TrainConfig c;
    if (!config.empty()) apply_json(c, read_json_file(config));
    if (steps) c.steps = *steps;
    if (batch) c.batch = *batch;
    if (lr) c.adam.lr = *lr;
    if (seed) c.seed = *seed;
    if (kind) c.kind = parse_predictor_kind(*kind);
    if (data) c.data.dataset = *data;
    if (objects) c.data.n_objects = *objects;
    if (templates) c.model.templates = *templates;
    if (diffusion_steps) c.diffusion.steps = *diffusion_steps;
    if (schedule) c.diffusion.kind = parse_schedule_kind(*schedule);
    if (checkpoint_every) c.checkpoint_every = *checkpoint_every;
    if (absolute_pose) c.model.absolute_pose = true;
    if (single_view) c.model.single_view = true;
    if (no_template_pose) c.model.condition_template_pose = false;
    c.data.render.out_size = c.model.image_size;
    c.validate();
    return c;
  }
};

}  // namespace detail

/// Entry point of the posediff tool. Never throws; returns the exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Template-conditioned pose-map diffusion toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a procedural dataset");
  std::uint64_t g_seed = 0, g_object_seed = 7;
  std::string g_out, g_dist = "random";
  int g_samples = 64, g_templates = 8, g_objects = 8, g_points = 24;
  gen->add_option("--seed", g_seed, "pose stream seed");
  gen->add_option("--out", g_out, "output directory")->required();
  gen->add_option("--samples", g_samples, "number of samples");
  gen->add_option("--templates", g_templates, "templates per sample");
  gen->add_option("--objects", g_objects, "number of objects");
  gen->add_option("--points", g_points, "points per object");
  gen->add_option("--object-seed", g_object_seed, "object catalog seed");
  gen->add_option("--distribution", g_dist, "template distribution: random, fixed or fine");

  // train
  auto* tr = app.add_subcommand("train", "train a coarse or fine predictor");
  detail::TrainFlags t_flags;
  std::string t_out;
  t_flags.add_to(tr);
  tr->add_option("--out", t_out, "output directory")->required();

  // infer
  auto* inf = app.add_subcommand("infer", "estimate the pose of one dataset sample");
  std::string i_coarse, i_fine, i_data;
  std::size_t i_index = 0;
  std::uint64_t i_seed = 0;
  int i_hyp = 0;
  inf->add_option("--coarse", i_coarse, "coarse checkpoint")->required();
  inf->add_option("--fine", i_fine, "fine checkpoint");
  inf->add_option("--data", i_data, "dataset directory")->required();
  inf->add_option("--index", i_index, "sample index");
  inf->add_option("--seed", i_seed, "sampling seed");
  inf->add_option("--hypotheses", i_hyp, "number of coarse hypotheses (0 = all templates)");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate checkpoints on a dataset or a held-out stream");
  std::string e_coarse, e_fine, e_data, e_out, e_baseline;
  std::uint64_t e_seed = 0, e_eval_seed = 99, e_object_seed = 7;
  int e_samples = 500, e_objects = 8, e_templates = 0;
  ev->add_option("--coarse", e_coarse, "coarse checkpoint");
  ev->add_option("--fine", e_fine, "fine checkpoint");
  ev->add_option("--baseline", e_baseline, "evaluate a baseline instead of a checkpoint: random");
  ev->add_option("--data", e_data, "dataset directory (default: procedural held-out stream)");
  ev->add_option("--out", e_out, "report directory")->required();
  ev->add_option("--seed", e_seed, "sampling seed");
  ev->add_option("--eval-seed", e_eval_seed, "held-out stream seed");
  ev->add_option("--samples", e_samples, "held-out samples");
  ev->add_option("--objects", e_objects, "number of objects");
  ev->add_option("--object-seed", e_object_seed, "object catalog seed");
  ev->add_option("--templates", e_templates, "templates per held-out sample (0 = the checkpoint's count)");

  // ablate
  auto* ab = app.add_subcommand("ablate", "run an ablation sweep");
  detail::TrainFlags a_flags;
  std::string a_axis, a_out;
  int a_eval = 500;
  std::vector<std::uint64_t> a_seeds;
  a_flags.add_to(ab);
  ab->add_option("--axis", a_axis, "components or template-distribution")->required();
  ab->add_option("--out", a_out, "output directory")->required();
  ab->add_option("--eval-samples", a_eval, "evaluation samples per arm");
  ab->add_option("--seeds", a_seeds, "training seeds (default 1 2 3; template-distribution uses the first)")->delimiter(',');

  // plot
  auto* pl = app.add_subcommand("plot", "render a CSV as an SVG line plot or histogram");
  std::string p_csv, p_svg, p_x, p_hist, p_title;
  std::vector<std::string> p_y;
  int p_bins = 20;
  pl->add_option("--csv", p_csv, "input CSV")->required();
  pl->add_option("--svg", p_svg, "output SVG")->required();
  pl->add_option("--x", p_x, "x column (default: first)");
  pl->add_option("--y", p_y, "y columns (default: all numeric)")->delimiter(',');
  pl->add_option("--histogram", p_hist, "histogram of this column instead of lines");
  pl->add_option("--bins", p_bins, "histogram bins");
  pl->add_option("--title", p_title, "plot title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      if (g_samples < 1) throw UsageError("--samples must be positive");
      TemplateDistribution dist;
      if (g_dist == "fixed")
        dist.mode = TemplateMode::kFixed;
      else if (g_dist == "fine")
        dist.mode = TemplateMode::kFine;
      else if (g_dist != "random")
        throw UsageError("unknown --distribution '" + g_dist + "'");
      Dataset ds;
      ds.seed = g_seed;
      ds.points_per_object = g_points;
      ds.objects = make_catalog(g_object_seed, g_objects, g_points);
      for (int i = 0; i < g_samples; ++i)
        ds.samples.push_back(make_sample(ds.objects, g_seed, static_cast<std::uint64_t>(i), g_templates, dist, ds.render));
      write_dataset(ds, g_out);
      out << "wrote " << g_samples << " samples to " << g_out << "\n";
    } else if (tr->parsed()) {
      const TrainConfig c = t_flags.resolve();
      std::filesystem::create_directories(t_out);
      detail::write_text(std::filesystem::path(t_out) / "config.json", to_json(c).dump(2) + "\n");
      const TrainResult r = train(c, t_out, &out);
      out << "checkpoint " << r.checkpoint.string() << "\n";
    } else if (inf->parsed()) {
      const Dataset ds = read_dataset(i_data);
      if (i_index >= ds.samples.size()) throw UsageError("--index out of range");
      const Sample& s = ds.samples[i_index];
      Predictor<float> coarse(load_checkpoint(i_coarse), ds.render);
      std::unique_ptr<Predictor<float>> fine;
      if (!i_fine.empty()) fine = std::make_unique<Predictor<float>>(load_checkpoint(i_fine), ds.render);
      const Stage cs{coarse.sampler(), coarse.config()};
      std::optional<Stage> fstage;
      if (fine) fstage = Stage{fine->sampler(), fine->config()};
      InferOptions io;
      io.seed = i_seed;
      io.n_hypotheses = i_hyp;
      io.render = ds.render;
      const auto it = ds.objects.find(s.object_id);
      const InferResult r = infer(cs, fstage ? &*fstage : nullptr, s, it == ds.objects.end() ? nullptr : &it->second, io);
      nlohmann::ordered_json j;
      j["pose"] = detail::pose_json(r.pose);
      j["coarse_pose"] = detail::pose_json(r.coarse_pose);
      j["refined"] = r.refined;
      j["warning_missing_object"] = r.warning_missing_object;
      j["failed_decodes"] = r.failed_decodes;
      auto hyps = nlohmann::ordered_json::array();
      for (const Pose& h : r.coarse_hypotheses) hyps.push_back(detail::pose_json(h));
      j["coarse_hypotheses"] = hyps;
      auto fh = nlohmann::ordered_json::array();
      for (const Pose& h : r.fine_hypotheses) fh.push_back(detail::pose_json(h));
      j["fine_hypotheses"] = fh;
      const EvalRow e = score_pose(r.pose, s.query.pose);
      j["rot_err_deg"] = e.rot_deg;
      j["trans_err_m"] = e.trans_m;
      out << j.dump(2) << "\n";
    } else if (ev->parsed()) {
      if (e_coarse.empty() && e_baseline.empty()) throw UsageError("eval needs --coarse <checkpoint> (or --baseline random)\n" + ev->help());
      std::optional<Checkpoint> coarse_ck, fine_ck;
      if (!e_coarse.empty()) coarse_ck = load_checkpoint(e_coarse);
      if (!e_fine.empty()) fine_ck = load_checkpoint(e_fine);
      std::vector<Sample> samples;
      ObjectCatalog objects;
      RenderSettings rs;
      if (coarse_ck) rs.out_size = coarse_ck->model.image_size;
      if (!e_data.empty()) {
        Dataset ds = read_dataset(e_data);
        samples = std::move(ds.samples);
        objects = std::move(ds.objects);
        rs = ds.render;
      } else {
        DataConfig dc;
        dc.object_seed = e_object_seed;
        dc.n_objects = e_objects;
        dc.render = rs;
        const int n_templates = e_templates > 0 ? e_templates : (coarse_ck ? coarse_ck->model.templates : 8);
        samples = make_eval_samples(dc, e_samples, n_templates, {}, e_eval_seed);
        objects = make_catalog(dc.object_seed, dc.n_objects, dc.points_per_object);
      }
      EvalReport rep;
      if (!e_baseline.empty()) {
        if (e_baseline != "random") throw UsageError("unknown --baseline '" + e_baseline + "'");
        rep = random_pose_baseline(samples, e_seed);
      } else {
        Predictor<float> coarse(*coarse_ck, rs);
        std::unique_ptr<Predictor<float>> fine;
        if (fine_ck) fine = std::make_unique<Predictor<float>>(*fine_ck, rs);
        const Stage cs{coarse.sampler(), coarse.config()};
        std::optional<Stage> fstage;
        if (fine) fstage = Stage{fine->sampler(), fine->config()};
        EvalOptions eo;
        eo.seed = e_seed;
        eo.infer.render = rs;
        eo.progress = &out;
        rep = evaluate(cs, fstage ? &*fstage : nullptr, samples, objects, eo);
      }
      write_report(rep, e_out);
      out << report_json(rep).dump(2) << "\n";
    } else if (ab->parsed()) {
      AblateConfig ac;
      ac.base = a_flags.resolve();
      ac.eval_samples = a_eval;
      if (!a_seeds.empty()) ac.seeds = a_seeds;
      if (a_axis == "template-distribution") ac.seeds.resize(1);
      const auto rows = run_ablation(a_axis, ac, a_out, &out);
      out << ablation_csv(rows);
    } else if (pl->parsed()) {
      const CsvTable t = parse_csv(io::slurp(p_csv), p_csv);
      std::string svg;
      if (!p_hist.empty()) {
        svg = histogram_svg(t, t.column(p_hist), p_bins, p_title);
      } else {
        const std::size_t x = p_x.empty() ? 0 : t.column(p_x);
        std::vector<std::size_t> ys;
        for (const auto& y : p_y) ys.push_back(t.column(y));
        svg = line_plot_svg(t, x, ys, p_title);
      }
      detail::write_text(p_svg, svg);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ContractViolation& e) {
    err << "invalid arguments: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const RenderRejected& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const DomainError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DegenerateInputError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace posediff
