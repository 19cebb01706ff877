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

#include "posediff/cli.hpp"
#include "posediff/plot.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

namespace posediff {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("posediff_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "posediff");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (std::size_t pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) ++n;
  return n;
}

TEST(Cli, GenDataIsReproducible) {
  const fs::path dir = scratch("gen");
  for (const char* sub : {"a", "b"}) {
    const CliRun r = run({"gen-data", "--seed", "7", "--out", (dir / sub).string(), "--samples", "64", "--templates", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    ++files;
    EXPECT_EQ(io::slurp(e.path()), io::slurp(dir / "b" / e.path().filename())) << e.path();
  }
  EXPECT_EQ(files, 1u + 64u * 3u);
}

TEST(Cli, UsageErrors) {
  const fs::path dir = scratch("usage");
  const CliRun e = run({"eval", "--out", (dir / "r").string()});
  EXPECT_EQ(e.code, 1);
  EXPECT_NE(e.err.find("--coarse"), std::string::npos);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"gen-data", "--out", (dir / "x").string(), "--bogus"}).code, 1);
  EXPECT_EQ(run({"ablate", "--axis", "colour", "--out", (dir / "y").string(), "--steps", "1"}).code, 1);
  EXPECT_EQ(run({"eval", "--coarse", (dir / "missing.rpck").string(), "--out", (dir / "r").string()}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(Cli, TrainInferEvalOnTinyModel) {
  const fs::path dir = scratch("pipeline");
  {
    std::ofstream cfg(dir / "tiny.json");
    cfg << R"({"model": {"image_size": 16, "patch_size": 4, "p": 4, "embed_dim": 16, "heads": 2,
               "n_fuser": 1, "n_decoder": 1, "fourier_bands": 2, "templates": 2},
               "diffusion": {"steps": 5}, "steps": 4, "batch": 1, "warmup": 1})";
  }
  CliRun r = run({"train", "--config", (dir / "tiny.json").string(), "--out", (dir / "run").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "run" / "config.json"));
  const std::string ck = (dir / "run" / "model.rpck").string();

  r = run({"eval", "--coarse", ck, "--out", (dir / "ev").string(), "--samples", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string report = io::slurp(dir / "ev" / "report.json");
  EXPECT_NE(report.find("median_rot_deg"), std::string::npos);
  run({"eval", "--coarse", ck, "--out", (dir / "ev2").string(), "--samples", "3"});
  EXPECT_EQ(report, io::slurp(dir / "ev2" / "report.json"));

  // A dataset rendered at the default size does not fit the 16 px model.
  ASSERT_EQ(run({"gen-data", "--out", (dir / "data").string(), "--samples", "2", "--templates", "2"}).code, 0);
  r = run({"infer", "--coarse", ck, "--data", (dir / "data").string()});
  EXPECT_EQ(r.code, 1) << r.err;
  EXPECT_EQ(run({"train", "--config", (dir / "tiny.json").string(), "--data", (dir / "data").string(), "--out",
                 (dir / "run2").string()})
                .code,
            2);
}

TEST(Cli, InferPrintsHypotheses) {
  const fs::path dir = scratch("infer");
  ASSERT_EQ(run({"gen-data", "--out", (dir / "data").string(), "--samples", "2", "--templates", "3"}).code, 0);
  CliRun r = run({"train", "--out", (dir / "run").string(), "--steps", "1", "--batch", "1", "--templates", "3",
               "--diffusion-steps", "3", "--data", (dir / "data").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run({"infer", "--coarse", (dir / "run" / "model.rpck").string(), "--data", (dir / "data").string(), "--index", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("coarse_hypotheses").size() + j.at("failed_decodes").get<std::size_t>(), 3u);
  EXPECT_EQ(run({"infer", "--coarse", (dir / "run" / "model.rpck").string(), "--data", (dir / "data").string(), "--index",
                 "5"})
                .code,
            1);
}

TEST(Cli, BadConfigKey) {
  const fs::path dir = scratch("badcfg");
  {
    std::ofstream cfg(dir / "bad.json");
    cfg << R"({"modle": {}})";
  }
  const CliRun r = run({"train", "--config", (dir / "bad.json").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("modle"), std::string::npos);
}

TEST(Cli, RandomBaseline) {
  const fs::path dir = scratch("baseline");
  const CliRun r = run({"eval", "--baseline", "random", "--out", (dir / "b").string(), "--samples", "500"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(io::slurp(dir / "b" / "report.json"));
  EXPECT_NEAR(j.at("median_rot_deg").get<double>(), 132.3, 5.0);
  EXPECT_NEAR(j.at("mean_rot_deg").get<double>(), 126.5, 5.0);
}

TEST(Plot, TwoRowCsvGivesOnePolyline) {
  const CsvTable t = parse_csv("step,loss\n0,1.5\n1,0.7\n", "mem");
  const std::string svg = line_plot_svg(t, 0, {}, "loss");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_EQ(count(svg, "<polyline"), 1u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

TEST(Plot, MalformedCsv) {
  EXPECT_THROW(parse_csv("", "empty.csv"), FormatError);
  EXPECT_THROW(parse_csv("a,b\n", "header.csv"), FormatError);
  EXPECT_THROW(parse_csv("a,b\n1,2\n3\n", "ragged.csv"), FormatError);
  const CsvTable t = parse_csv("a,b\n1,2\n", "ok.csv");
  EXPECT_THROW(t.column("c"), UsageError);
}

TEST(Plot, HistogramAndCli) {
  const fs::path dir = scratch("plot");
  {
    std::ofstream csv(dir / "x.csv");
    csv << "index,err\n0,1\n1,2\n2,2.5\n3,9\n";
    std::ofstream empty(dir / "empty.csv");
  }
  ASSERT_EQ(run({"plot", "--csv", (dir / "x.csv").string(), "--svg", (dir / "x.svg").string()}).code, 0);
  EXPECT_EQ(count(io::slurp(dir / "x.svg"), "<polyline"), 1u);
  ASSERT_EQ(run({"plot", "--csv", (dir / "x.csv").string(), "--svg", (dir / "h.svg").string(), "--histogram", "err",
                 "--bins", "3"})
                .code,
            0);
  EXPECT_EQ(count(io::slurp(dir / "h.svg"), "<rect x="), 3u);
  const CliRun r = run({"plot", "--csv", (dir / "empty.csv").string(), "--svg", (dir / "e.svg").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("empty.csv"), std::string::npos);
}

}  // namespace
}  // namespace posediff
