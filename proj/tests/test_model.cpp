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

#include "posediff/harness.hpp"
#include "posediff/model.hpp"

#include <gtest/gtest.h>

namespace posediff {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.p = 4;
  c.embed_dim = 16;
  c.heads = 2;
  c.n_fuser = 1;
  c.n_decoder = 1;
  c.fourier_bands = 2;
  c.templates = 3;
  return c;
}

RenderSettings tiny_render() {
  RenderSettings rs;
  rs.out_size = 16;
  return rs;
}

Sample tiny_sample(std::uint64_t seed, int templates = 3) {
  const auto cat = make_catalog(seed, 2, 16);
  return make_sample(cat, seed, 0, templates, {}, tiny_render());
}

TEST(Fourier, Values) {
  double out[5];
  fourier_encode(0.0, 0.25, 2, out);
  EXPECT_EQ(out[0], 0.0);
  EXPECT_EQ(out[1], 0.0);
  EXPECT_EQ(out[2], 1.0);
  EXPECT_EQ(out[3], 0.0);
  EXPECT_EQ(out[4], 1.0);
  double one[3];
  fourier_encode(0.25, 1.0, 1, one);
  EXPECT_DOUBLE_EQ(one[0], 0.25);
  EXPECT_NEAR(one[1], 1.0, 1e-15);
  EXPECT_NEAR(one[2], 0.0, 1e-15);
  // Period 1/B on the first band.
  double a[3], b[3];
  fourier_encode(0.3, 0.5, 1, a);
  fourier_encode(0.3 + 2.0, 0.5, 1, b);
  EXPECT_NEAR(a[1], b[1], 1e-12);
  EXPECT_NEAR(a[2], b[2], 1e-12);
  EXPECT_NE(a[0], b[0]);
}

TEST(ViewInput, FeatureWidthAndNullMaps) {
  ModelConfig c = tiny_config();
  c.fourier_bands = 8;
  EXPECT_EQ(view_feature_dim(c), 170);
  const Tensor<float> img({16, 16, 3});
  const auto v = make_view_input<double>(img, nullptr, nullptr, {0, 0, 0, 0}, c);
  ASSERT_EQ(v.features.shape, (Shape{16, 170}));
  const std::size_t w = 17;
  for (std::size_t r = 0; r < v.features.rows(); ++r)
    for (std::size_t k = 0; k < 10; ++k)
      for (int b = 0; b < 8; ++b) EXPECT_EQ(v.features.at(r, k * w + 1 + 2 * static_cast<std::size_t>(b)), 0.0);
  EXPECT_THROW(make_view_input<double>(Tensor<float>({8, 8, 3}), nullptr, nullptr, {0, 0, 0, 0}, c), ContractViolation);
}

TEST(Patchify, TokenCount) {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 4;
  c.p = 8;
  const auto t = patchify<float>(Tensor<float>({32, 32, 3}), c);
  EXPECT_EQ(t.rows(), 64u);
  EXPECT_EQ(t.cols(), 48u);
}

TEST(Config, Validation) {
  ModelConfig c = tiny_config();
  c.p = 8;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.embed_dim = 18;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ImageEncoder, IdenticalImagesIdenticalTokens) {
  const ModelConfig c = tiny_config();
  const auto params = init_parameters(c, 1);
  Network<double> net(c);
  const Sample s = tiny_sample(1);
  Graph<double> g(false);
  Binder<double> P(g, params);
  const auto patches = patchify<double>(s.query.image, c);
  const auto a = g.value(net.encode_image(P, patches));
  const auto b = g.value(net.encode_image(P, patches));
  EXPECT_EQ(a.data, b.data);
  EXPECT_EQ(a.rows(), 16u);
}

TEST(Fuser, NoLayersIsIdentity) {
  ModelConfig c = tiny_config();
  c.n_fuser = 0;
  const auto params = init_parameters(c, 2);
  Network<double> net(c);
  const Sample s = tiny_sample(2, 1);
  const auto in = make_network_input<double>(s, c, canonical_rays(c.p), 32);
  Graph<double> g(false);
  Binder<double> P(g, params);
  const auto cond = net.encode(P, in);
  auto expect = g.value(net.encode_image(P, in.templates[0].patches));
  const auto& view = g.value(net.encode_view(P, in.templates[0].features));
  const auto vi = view_index_encoding<double>(0, c.embed_dim);
  for (std::size_t r = 0; r < expect.rows(); ++r)
    for (std::size_t k = 0; k < expect.cols(); ++k) expect.at(r, k) = expect.at(r, k) + view.at(r, k) + vi[k];
  const auto& fused = g.value(cond.fused);
  ASSERT_EQ(fused.shape, expect.shape);
  for (std::size_t i = 0; i < fused.size(); ++i) EXPECT_NEAR(fused[i], expect[i], 1e-12);
}

TEST(Fuser, PermutationEquivariantWithoutViewIndex) {
  ModelConfig c = tiny_config();
  c.view_index_encoding = false;
  const auto params = init_parameters(c, 3, {false, false});
  Network<double> net(c);
  const Sample s = tiny_sample(3);
  Sample swapped = s;
  std::swap(swapped.templates[0], swapped.templates[2]);
  const auto grid = canonical_rays(c.p);
  Graph<double> g(false);
  Binder<double> P(g, params);
  const auto a = g.value(net.encode(P, make_network_input<double>(s, c, grid, 32)).fused);
  const auto b = g.value(net.encode(P, make_network_input<double>(swapped, c, grid, 32)).fused);
  const std::size_t tok = 16, d = 16;
  const std::size_t perm[3] = {2, 1, 0};
  for (std::size_t v = 0; v < 3; ++v)
    for (std::size_t i = 0; i < tok * d; ++i) EXPECT_NEAR(a[v * tok * d + i], b[perm[v] * tok * d + i], 1e-10);
  // With the view index on, the same swap is not equivariant.
  ModelConfig ci = tiny_config();
  Network<double> net_i(ci);
  const auto ai = g.value(net_i.encode(P, make_network_input<double>(s, ci, grid, 32)).fused);
  const auto bi = g.value(net_i.encode(P, make_network_input<double>(swapped, ci, grid, 32)).fused);
  double diff = 0;
  for (std::size_t i = 0; i < tok * d; ++i) diff = std::max(diff, std::abs(ai[i] - bi[2 * tok * d + i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(Fuser, SingleViewGroups) {
  ModelConfig c = tiny_config();
  c.single_view = true;
  Network<double> net(c);
  const auto params = init_parameters(c, 4);
  Graph<double> g(false);
  Binder<double> P(g, params);
  net.encode(P, make_network_input<double>(tiny_sample(4), c, canonical_rays(c.p), 32));
  EXPECT_EQ(net.stats().fuser_views_per_group, 1u);
  ModelConfig m = tiny_config();
  Network<double> multi(m);
  multi.encode(P, make_network_input<double>(tiny_sample(4), m, canonical_rays(m.p), 32));
  EXPECT_EQ(multi.stats().fuser_views_per_group, 3u);
}

TEST(Decoder, ZeroHeadsGiveZero) {
  const ModelConfig c = tiny_config();
  const auto params = init_parameters(c, 5);
  Network<double> net(c);
  Graph<double> g(false);
  Binder<double> P(g, params);
  const auto cond = net.encode(P, make_network_input<double>(tiny_sample(5), c, canonical_rays(c.p), 32));
  Rng rng(1);
  Tensor<double> noisy({48, 6});
  fill_normal(std::span<double>(noisy.data), rng);
  const auto pred = net.denoise(P, cond, noisy, 7, 10);
  for (double v : g.value(pred.rot).data) EXPECT_EQ(v, 0.0);
  for (double v : g.value(pred.trans).data) EXPECT_EQ(v, 0.0);
}

TEST(Decoder, ShapesFiniteAndErrors) {
  const ModelConfig c = tiny_config();
  Network<double> net(c);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto params = init_parameters(c, seed, {false, false});
    Graph<double> g(false);
    Binder<double> P(g, params);
    const auto cond = net.encode(P, make_network_input<double>(tiny_sample(seed), c, canonical_rays(c.p), 32));
    Rng rng(seed);
    Tensor<double> noisy({48, 6});
    fill_normal(std::span<double>(noisy.data), rng);
    const auto pred = net.denoise(P, cond, noisy, 1 + static_cast<int>(seed % 10), 10);
    ASSERT_EQ(g.value(pred.rot).shape, (Shape{48, 3}));
    ASSERT_EQ(g.value(pred.trans).shape, (Shape{48, 3}));
    for (double v : g.value(pred.rot).data) ASSERT_TRUE(std::isfinite(v));
    if (seed == 0) {
      EXPECT_THROW(net.denoise(P, cond, Tensor<double>({47, 6}), 1, 10), ContractViolation);
      EXPECT_THROW(net.denoise(P, cond, noisy, 11, 10), ContractViolation);
    }
  }
}

TEST(Decoder, NonFiniteNamesBlock) {
  const ModelConfig c = tiny_config();
  auto params = init_parameters(c, 6, {false, false});
  params["dec0.mlp.fc2.b"].data[0] = std::numeric_limits<double>::infinity();
  Network<double> net(c);
  Graph<double> g(false);
  Binder<double> P(g, params);
  const auto cond = net.encode(P, make_network_input<double>(tiny_sample(6), c, canonical_rays(c.p), 32));
  try {
    net.denoise(P, cond, Tensor<double>({48, 6}), 3, 10);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder block 0"), std::string::npos);
  }
}

TEST(Adam, ZeroGradientsLeaveParameters) {
  Parameters<double> p;
  p.add("w", Tensor<double>({3}, {1, -2, 3}));
  const auto before = p;
  AdamState<double> st;
  for (int i = 0; i < 5; ++i) optimizer_step(p, p.zeros_like(), st, 0.1);
  EXPECT_TRUE(p == before);
}

TEST(Adam, QuadraticBowl) {
  auto run = [] {
    Parameters<double> p;
    p.add("w", Tensor<double>({4}, {1.0, -0.5, 0.3, 2.0}));
    AdamState<double> st;
    AdamConfig cfg;
    cfg.grad_clip = 0.0;
    for (int i = 0; i < 200; ++i) {
      Parameters<double> g = p.zeros_like();
      for (std::size_t k = 0; k < 4; ++k) g["w"].data[k] = 2 * p["w"].data[k];
      optimizer_step(p, g, st, 0.1, cfg);
    }
    return p;
  };
  const auto a = run(), b = run();
  double n = 0;
  for (double v : a["w"].data) n += v * v;
  EXPECT_LT(std::sqrt(n), 1e-3);
  EXPECT_TRUE(a == b);
}

TEST(Adam, ShapeMismatch) {
  Parameters<double> p, g;
  p.add("w", Tensor<double>({3}));
  g.add("w", Tensor<double>({2}));
  AdamState<double> st;
  EXPECT_THROW(optimizer_step(p, g, st, 0.1), ContractViolation);
}

TEST(GradCheck, ProductAndLinear) {
  Parameters<double> p;
  p.add("w", Tensor<double>({2}, {2.0, 3.0}));
  const ScalarFn prod = [](const Parameters<double>& q, Parameters<double>* g) {
    const auto& w = q["w"].data;
    if (g) {
      (*g)["w"].data[0] = w[1];
      (*g)["w"].data[1] = w[0];
    }
    return w[0] * w[1];
  };
  Parameters<double> analytic = p.zeros_like();
  prod(p, &analytic);
  EXPECT_EQ(analytic["w"].data, (AlignedVector<double>{3.0, 2.0}));
  EXPECT_LT(grad_check(prod, p).max_rel_error, 1e-8);
  const ScalarFn lin = [](const Parameters<double>& q, Parameters<double>* g) {
    if (g) (*g)["w"].data = {4.0, -1.5};
    return 4.0 * q["w"].data[0] - 1.5 * q["w"].data[1] + 0.5;
  };
  EXPECT_LT(grad_check(lin, p).max_rel_error, 1e-10);
}

TEST(GradCheck, FullTinyNetwork) {
  const ModelConfig c = tiny_config();
  const auto params = init_parameters(c, 8, {false, false});
  const Sample s = tiny_sample(8);
  const auto grid = canonical_rays(c.p);
  const auto sched = make_schedule(ScheduleKind::kLinear, 10, 1e-4, 0.02);
  Rng rng(3);
  const DiffusionExample ex = make_diffusion_example(s, c, grid, sched, rng);
  const auto in = make_network_input<double>(s, c, grid, 32);
  const LossWeights w{};
  const ScalarFn fn = [&](const Parameters<double>& q, Parameters<double>* grads) {
    Network<double> net(c);
    Graph<double> g(grads != nullptr);
    Binder<double> P(g, q);
    const LossBreakdown l = example_loss(net, P, in, s, ex, sched, w, grid, grads != nullptr);
    if (grads) *grads = P.gradients();
    return l.total;
  };
  const GradCheckResult r = grad_check(fn, params, 1e-6, 2000, 1, 1e-4);
  EXPECT_EQ(r.checked, 2000u);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
}

}  // namespace
}  // namespace posediff
