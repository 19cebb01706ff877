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
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "posediff/errors.hpp"
#include "posediff/tensor.hpp"

namespace posediff {

/// Reverse-mode tape over 2-d tensors. Nodes are appended in evaluation
/// order; backward() walks them in reverse. A graph built with record=false
/// keeps values only and is meant for inference.
template <typename T>
class Graph {
 public:
  struct Var {
    std::int32_t id = -1;
  };

  explicit Graph(bool record = true) : record_(record) { nodes_.reserve(1024); }

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }
  std::size_t node_count() const { return nodes_.size(); }

  Var constant(Tensor<T> v) { return push(std::move(v), false, {}); }

  Var leaf(Tensor<T> v, bool requires_grad = true) { return push(std::move(v), requires_grad && record_, {}); }

  /// Leaf that refers to caller-owned storage (parameters); must outlive the graph.
  Var external(const Tensor<T>& v, bool requires_grad = true) {
    Node n;
    n.ext = &v;
    n.requires_grad = requires_grad && record_;
    nodes_.push_back(std::move(n));
    return {static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  const Tensor<T>& value(Var v) const { return node(v).value(); }
  const Tensor<T>& grad(Var v) const { return node(v).grad; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  void backward(Var out) {
    const Tensor<T>& v = value(out);
    if (v.size() != 1) throw ContractViolation("backward() without a seed needs a scalar output");
    Tensor<T> seed(v.shape, T(1));
    backward(out, seed);
  }

  void backward(Var out, const Tensor<T>& seed) {
    if (!record_) throw ContractViolation("backward() on a non-recording graph");
    Node& o = node(out);
    if (seed.size() != o.value().size()) throw ContractViolation("backward seed shape mismatch");
    if (!o.requires_grad) return;
    grad_ref(out.id) = seed;
    for (std::int32_t i = out.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && !n.grad.empty()) n.back();
    }
  }

  // ---------------------------------------------------------------- ops

  Var add(Var a, Var b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    if (va.size() != vb.size()) throw ContractViolation("add: shape mismatch");
    Tensor<T> out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return emit(std::move(out), {a, b}, [this, a, b](std::int32_t self) {
      const auto& g = nodes_[self].grad;
      accumulate(a, g);
      accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    if (va.size() != vb.size()) throw ContractViolation("sub: shape mismatch");
    Tensor<T> out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return emit(std::move(out), {a, b}, [this, a, b](std::int32_t self) {
      const auto& g = nodes_[self].grad;
      accumulate(a, g);
      if (wants(b)) {
        auto& gb = grad_ref(b.id);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    if (va.size() != vb.size()) throw ContractViolation("mul: shape mismatch");
    Tensor<T> out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return emit(std::move(out), {a, b}, [this, a, b](std::int32_t self) {
      const auto& g = nodes_[self].grad;
      if (wants(a)) {
        auto& ga = grad_ref(a.id);
        const auto& vb = value(b);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
      }
      if (wants(b)) {
        auto& gb = grad_ref(b.id);
        const auto& va = value(a);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
      }
    });
  }

  Var scale(Var a, T c) {
    Tensor<T> out = value(a);
    for (auto& x : out.data) x *= c;
    return emit(std::move(out), {a}, [this, a, c](std::int32_t self) {
      if (!wants(a)) return;
      const auto& g = nodes_[self].grad;
      auto& ga = grad_ref(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
  }

  Var sum(Var a) {
    T acc = 0;
    for (T x : value(a).data) acc += x;
    return emit(Tensor<T>({1}, std::vector<T>{acc}), {a}, [this, a](std::int32_t self) {
      if (!wants(a)) return;
      const T g = nodes_[self].grad[0];
      for (auto& x : grad_ref(a.id).data) x += g;
    });
  }

  /// x·W + b with x [n×k], W [k×m], b [m] (b may be invalid for no bias).
  Var linear(Var x, Var w, Var b = {}) {
    const auto& vx = value(x);
    const auto& vw = value(w);
    if (vx.cols() != vw.rows()) throw ContractViolation("linear: inner dimension mismatch");
    Tensor<T> out({vx.rows(), vw.cols()});
    auto y = as_matrix(out);
    y.noalias() = as_matrix(vx) * as_matrix(vw);
    if (b.id >= 0) {
      const auto& vb = value(b);
      if (vb.size() != vw.cols()) throw ContractViolation("linear: bias size mismatch");
      y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(vb.data.data(), vb.size());
    }
    return emit(std::move(out), {x, w, b}, [this, x, w, b](std::int32_t self) {
      const auto g = as_matrix(nodes_[self].grad);
      if (wants(x)) as_matrix(grad_ref(x.id)).noalias() += g * as_matrix(value(w)).transpose();
      if (wants(w)) as_matrix(grad_ref(w.id)).noalias() += as_matrix(value(x)).transpose() * g;
      if (b.id >= 0 && wants(b)) {
        auto& gb = grad_ref(b.id);
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data.data(), gb.size()) += g.colwise().sum();
      }
    });
  }

  Var matmul(Var a, Var b) { return linear(a, b); }

  /// Row-broadcast: x [n×d] + r [d].
  Var add_row(Var x, Var r) {
    const auto& vx = value(x);
    const auto& vr = value(r);
    if (vr.size() != vx.cols()) throw ContractViolation("add_row: width mismatch");
    Tensor<T> out = vx;
    const std::size_t d = vx.cols();
    rowwise(out.size(), d, [&](std::size_t i, std::size_t c) { out[i] += vr[c]; });
    return emit(std::move(out), {x, r}, [this, x, r, d](std::int32_t self) {
      const auto& g = nodes_[self].grad;
      accumulate(x, g);
      if (wants(r)) {
        auto& gr = grad_ref(r.id);
        rowwise(g.size(), d, [&](std::size_t i, std::size_t c) { gr[c] += g[i]; });
      }
    });
  }

  /// x ⊙ (1 + scale) + shift, with shift and scale [d] broadcast over rows.
  Var modulate(Var x, Var shift, Var scl) {
    const auto& vx = value(x);
    const auto& vs = value(shift);
    const auto& vc = value(scl);
    const std::size_t d = vx.cols();
    if (vs.size() != d || vc.size() != d) throw ContractViolation("modulate: width mismatch");
    Tensor<T> out = vx;
    rowwise(out.size(), d, [&](std::size_t i, std::size_t c) { out[i] = vx[i] * (T(1) + vc[c]) + vs[c]; });
    return emit(std::move(out), {x, shift, scl}, [this, x, shift, scl, d](std::int32_t self) {
      const auto& g = nodes_[self].grad;
      const auto& vx = value(x);
      const auto& vc = value(scl);
      if (wants(x)) {
        auto& gx = grad_ref(x.id);
        rowwise(g.size(), d, [&](std::size_t i, std::size_t c) { gx[i] += g[i] * (T(1) + vc[c]); });
      }
      if (wants(shift)) {
        auto& gs = grad_ref(shift.id);
        rowwise(g.size(), d, [&](std::size_t i, std::size_t c) { gs[c] += g[i]; });
      }
      if (wants(scl)) {
        auto& gc = grad_ref(scl.id);
        rowwise(g.size(), d, [&](std::size_t i, std::size_t c) { gc[c] += g[i] * vx[i]; });
      }
    });
  }

  /// x + gate ⊙ u, gate [d] broadcast over rows.
  Var gated_add(Var x, Var u, Var gate) {
    const auto& vx = value(x);
    const auto& vu = value(u);
    const auto& vg = value(gate);
    const std::size_t d = vx.cols();
    if (vu.size() != vx.size() || vg.size() != d) throw ContractViolation("gated_add: shape mismatch");
    Tensor<T> out = vx;
    rowwise(out.size(), d, [&](std::size_t i, std::size_t c) { out[i] += vg[c] * vu[i]; });
    return emit(std::move(out), {x, u, gate}, [this, x, u, gate, d](std::int32_t self) {
      const auto& g = nodes_[self].grad;
      accumulate(x, g);
      if (wants(u)) {
        auto& gu = grad_ref(u.id);
        const auto& vg = value(gate);
        rowwise(g.size(), d, [&](std::size_t i, std::size_t c) { gu[i] += g[i] * vg[c]; });
      }
      if (wants(gate)) {
        auto& gg = grad_ref(gate.id);
        const auto& vu = value(u);
        rowwise(g.size(), d, [&](std::size_t i, std::size_t c) { gg[c] += g[i] * vu[i]; });
      }
    });
  }

  /// Per-row normalisation to zero mean and unit variance (no affine terms).
  Var layer_norm(Var x, T eps = T(1e-6)) {
    const auto& vx = value(x);
    const std::size_t n = vx.rows();
    const std::size_t d = vx.cols();
    Tensor<T> out(vx.shape);
    auto inv_std = std::make_shared<AlignedVector<T>>(n);
    using Row = Eigen::Map<Eigen::Array<T, 1, Eigen::Dynamic>>;
    using CRow = Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>>;
    const auto di = static_cast<Eigen::Index>(d);
    for (std::size_t r = 0; r < n; ++r) {
      const CRow xr(&vx.data[r * d], di);
      Row yr(&out.data[r * d], di);
      yr = xr - xr.mean();
      const T is = T(1) / std::sqrt(yr.square().sum() / static_cast<T>(d) + eps);
      (*inv_std)[r] = is;
      yr *= is;
    }
    return emit(std::move(out), {x}, [this, x, inv_std, n, d](std::int32_t self) {
      if (!wants(x)) return;
      const auto& g = nodes_[self].grad;
      const auto& y = nodes_[self].value();
      auto& gx = grad_ref(x.id);
      using Row = Eigen::Map<Eigen::Array<T, 1, Eigen::Dynamic>>;
      using CRow = Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>>;
      const auto di = static_cast<Eigen::Index>(d);
      for (std::size_t r = 0; r < n; ++r) {
        const CRow gr(&g.data[r * d], di);
        const CRow yr(&y.data[r * d], di);
        const T mg = gr.mean();
        const T mgy = (gr * yr).mean();
        Row(&gx.data[r * d], di) += (*inv_std)[r] * (gr - mg - yr * mgy);
      }
    });
  }

  /// tanh-approximated GELU.
  Var gelu(Var x) {
    constexpr T k0 = T(0.7978845608028654);
    constexpr T k1 = T(0.044715);
    const auto& vx = value(x);
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const Eigen::Map<const Arr> v(vx.data.data(), static_cast<Eigen::Index>(vx.size()));
    auto th = std::make_shared<Arr>((k0 * (v + k1 * v.cube())).tanh());
    Tensor<T> out(vx.shape);
    Eigen::Map<Arr>(out.data.data(), static_cast<Eigen::Index>(out.size())) = T(0.5) * v * (T(1) + *th);
    return emit(std::move(out), {x}, [this, x, th, k0, k1](std::int32_t self) {
      if (!wants(x)) return;
      const auto& g = nodes_[self].grad;
      const auto& vx = value(x);
      const auto n = static_cast<Eigen::Index>(g.size());
      const Eigen::Map<const Arr> v(vx.data.data(), n), ga(g.data.data(), n);
      const Arr dth = (T(1) - th->square()) * k0 * (T(1) + T(3) * k1 * v.square());
      Eigen::Map<Arr>(grad_ref(x.id).data.data(), n) += ga * (T(0.5) * (T(1) + *th) + T(0.5) * v * dth);
    });
  }

  Var silu(Var x) {
    const auto& vx = value(x);
    Tensor<T> out(vx.shape);
    for (std::size_t i = 0; i < vx.size(); ++i) out[i] = vx[i] / (T(1) + std::exp(-vx[i]));
    return emit(std::move(out), {x}, [this, x](std::int32_t self) {
      if (!wants(x)) return;
      const auto& g = nodes_[self].grad;
      const auto& vx = value(x);
      auto& gx = grad_ref(x.id);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-vx[i]));
        gx[i] += g[i] * s * (T(1) + vx[i] * (T(1) - s));
      }
    });
  }

  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ContractViolation("concat_rows of nothing");
    const std::size_t d = value(parts[0]).cols();
    std::size_t n = 0;
    for (Var p : parts) {
      if (value(p).cols() != d) throw ContractViolation("concat_rows: width mismatch");
      n += value(p).rows();
    }
    Tensor<T> out({n, d});
    std::size_t off = 0;
    for (Var p : parts) {
      const auto& vp = value(p);
      std::copy(vp.data.begin(), vp.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
      off += vp.size();
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return emit(std::move(out), ins, [this, ins](std::int32_t self) {
      const auto& g = nodes_[self].grad;
      std::size_t off = 0;
      for (Var p : ins) {
        const std::size_t sz = value(p).size();
        if (wants(p)) {
          auto& gp = grad_ref(p.id);
          for (std::size_t i = 0; i < sz; ++i) gp[i] += g[off + i];
        }
        off += sz;
      }
    });
  }

  Var concat_rows(std::initializer_list<Var> parts) { return concat_rows(std::span<const Var>(parts.begin(), parts.size())); }

  /// Gathers rows by index; backward scatter-adds.
  Var select_rows(Var x, std::vector<std::size_t> idx) {
    const auto& vx = value(x);
    const std::size_t d = vx.cols();
    Tensor<T> out({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] >= vx.rows()) throw ContractViolation("select_rows: index out of range");
      std::copy_n(vx.data.begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d,
                  out.data.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    auto shared_idx = std::make_shared<std::vector<std::size_t>>(std::move(idx));
    return emit(std::move(out), {x}, [this, x, shared_idx, d](std::int32_t self) {
      if (!wants(x)) return;
      const auto& g = nodes_[self].grad;
      auto& gx = grad_ref(x.id);
      for (std::size_t r = 0; r < shared_idx->size(); ++r)
        for (std::size_t c = 0; c < d; ++c) gx[(*shared_idx)[r] * d + c] += g[r * d + c];
    });
  }

  Var slice_rows(Var x, std::size_t begin, std::size_t count) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), begin);
    return select_rows(x, std::move(idx));
  }

  Var slice_cols(Var x, std::size_t begin, std::size_t count) {
    const auto& vx = value(x);
    const std::size_t n = vx.rows();
    const std::size_t d = vx.cols();
    if (begin + count > d) throw ContractViolation("slice_cols: range out of bounds");
    Tensor<T> out({n, count});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < count; ++c) out.data[r * count + c] = vx.data[r * d + begin + c];
    return emit(std::move(out), {x}, [this, x, begin, count, n, d](std::int32_t self) {
      if (!wants(x)) return;
      const auto& g = nodes_[self].grad;
      auto& gx = grad_ref(x.id);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < count; ++c) gx[r * d + begin + c] += g[r * count + c];
    });
  }

  /// Multi-head scaled dot-product attention over grouped sequences.
  /// q holds q_groups sequences of equal length stacked by rows; k/v hold
  /// either one shared sequence or one per query group.
  Var attention(Var q, Var k, Var v, std::size_t heads, std::size_t q_groups, std::size_t kv_groups) {
    const auto& vq = value(q);
    const auto& vk = value(k);
    const auto& vv = value(v);
    const std::size_t d = vq.cols();
    if (vk.cols() != d || vv.cols() != d || vk.rows() != vv.rows()) throw ContractViolation("attention: shape mismatch");
    if (heads == 0 || d % heads != 0) throw ContractViolation("attention: width not divisible by heads");
    if (q_groups == 0 || vq.rows() % q_groups != 0) throw ContractViolation("attention: bad query grouping");
    if (!(kv_groups == 1 || kv_groups == q_groups) || vk.rows() % kv_groups != 0)
      throw ContractViolation("attention: bad key grouping");
    const std::size_t nq = vq.rows() / q_groups;
    const std::size_t nk = vk.rows() / kv_groups;
    const std::size_t dh = d / heads;
    const T scl = T(1) / std::sqrt(static_cast<T>(dh));
    using Idx = Eigen::Index;

    Tensor<T> out({vq.rows(), d});
    auto probs = std::make_shared<AlignedVector<T>>(q_groups * heads * nq * nk);
    const auto Q = as_matrix(vq);
    const auto K = as_matrix(vk);
    const auto V = as_matrix(vv);
    auto O = as_matrix(out);
    RowMat<T> s(static_cast<Idx>(nq), static_cast<Idx>(nk));
    for (std::size_t g = 0; g < q_groups; ++g) {
      const std::size_t kg = kv_groups == 1 ? 0 : g;
      for (std::size_t h = 0; h < heads; ++h) {
        const auto qh = Q.block(static_cast<Idx>(g * nq), static_cast<Idx>(h * dh), static_cast<Idx>(nq), static_cast<Idx>(dh));
        const auto kh = K.block(static_cast<Idx>(kg * nk), static_cast<Idx>(h * dh), static_cast<Idx>(nk), static_cast<Idx>(dh));
        const auto vh = V.block(static_cast<Idx>(kg * nk), static_cast<Idx>(h * dh), static_cast<Idx>(nk), static_cast<Idx>(dh));
        s.noalias() = (qh * kh.transpose()) * scl;
        for (Idx r = 0; r < s.rows(); ++r) {
          const T mx = s.row(r).maxCoeff();
          s.row(r) = (s.row(r).array() - mx).exp();
          s.row(r) /= s.row(r).sum();
        }
        MatView<T>(probs->data() + (g * heads + h) * nq * nk, static_cast<Idx>(nq), static_cast<Idx>(nk)) = s;
        O.block(static_cast<Idx>(g * nq), static_cast<Idx>(h * dh), static_cast<Idx>(nq), static_cast<Idx>(dh)).noalias() = s * vh;
      }
    }
    return emit(std::move(out), {q, k, v}, [this, q, k, v, probs, heads, q_groups, kv_groups, nq, nk, dh, scl](std::int32_t self) {
      using Idx = Eigen::Index;
      const auto G = as_matrix(nodes_[self].grad);
      const auto Q = as_matrix(value(q));
      const auto K = as_matrix(value(k));
      const auto V = as_matrix(value(v));
      const bool wq = wants(q), wk = wants(k), wv = wants(v);
      Tensor<T> dummy;
      auto gq = as_matrix(wq ? grad_ref(q.id) : dummy);
      auto gk = as_matrix(wk ? grad_ref(k.id) : dummy);
      auto gv = as_matrix(wv ? grad_ref(v.id) : dummy);
      RowMat<T> dp(static_cast<Idx>(nq), static_cast<Idx>(nk));
      for (std::size_t g = 0; g < q_groups; ++g) {
        const std::size_t kg = kv_groups == 1 ? 0 : g;
        for (std::size_t h = 0; h < heads; ++h) {
          const Idx qr = static_cast<Idx>(g * nq), kr = static_cast<Idx>(kg * nk), c0 = static_cast<Idx>(h * dh);
          const Idx nqi = static_cast<Idx>(nq), nki = static_cast<Idx>(nk), dhi = static_cast<Idx>(dh);
          const ConstMatView<T> p(probs->data() + (g * heads + h) * nq * nk, nqi, nki);
          const auto go = G.block(qr, c0, nqi, dhi);
          if (wv) gv.block(kr, c0, nki, dhi).noalias() += p.transpose() * go;
          if (!wq && !wk) continue;
          dp.noalias() = go * V.block(kr, c0, nki, dhi).transpose();
          for (Idx r = 0; r < nqi; ++r) {
            const T dot = dp.row(r).dot(p.row(r));
            dp.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
          }
          if (wq) gq.block(qr, c0, nqi, dhi).noalias() += (dp * K.block(kr, c0, nki, dhi)) * scl;
          if (wk) gk.block(kr, c0, nki, dhi).noalias() += (dp.transpose() * Q.block(qr, c0, nqi, dhi)) * scl;
        }
      }
    });
  }

  /// Escape hatch for fused ops with hand-written adjoints. `back` receives the
  /// output gradient and, per input, a pointer to its gradient buffer (null
  /// when that input does not need one).
  using CustomBackward = std::function<void(const Tensor<T>& gout, std::span<Tensor<T>*> gin)>;
  Var custom(std::vector<Var> inputs, Tensor<T> value_out, CustomBackward back) {
    return emit(std::move(value_out), inputs, [this, inputs, back = std::move(back)](std::int32_t self) {
      std::vector<Tensor<T>*> gin(inputs.size(), nullptr);
      for (std::size_t i = 0; i < inputs.size(); ++i)
        if (wants(inputs[i])) gin[i] = &grad_ref(inputs[i].id);
      back(nodes_[self].grad, gin);
    });
  }

 private:
  // Visits a row-major buffer of `size` entries as (flat index, column).
  template <class F>
  static void rowwise(std::size_t size, std::size_t d, F&& f) {
    for (std::size_t base = 0; base < size; base += d)
      for (std::size_t c = 0; c < d; ++c) f(base + c, c);
  }

  struct Node {
    Tensor<T> own;
    const Tensor<T>* ext = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void()> back;

    const Tensor<T>& value() const { return ext ? *ext : own; }
  };

  Node& node(Var v) {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw ContractViolation("invalid graph variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw ContractViolation("invalid graph variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  bool wants(Var v) const { return v.id >= 0 && nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  Tensor<T>& grad_ref(std::int32_t id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value().shape);
    return n.grad;
  }

  void accumulate(Var v, const Tensor<T>& g) {
    if (!wants(v)) return;
    auto& gv = grad_ref(v.id);
    for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
  }

  Var push(Tensor<T> v, bool requires_grad, std::function<void()> back) {
    Node n;
    n.own = std::move(v);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return {static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  template <class Back>
  Var emit(Tensor<T> out, std::initializer_list<Var> inputs, Back&& back) {
    return emit(std::move(out), std::vector<Var>(inputs), std::forward<Back>(back));
  }

  template <class Back>
  Var emit(Tensor<T> out, const std::vector<Var>& inputs, Back&& back) {
    bool rg = false;
    for (Var in : inputs) rg = rg || wants(in);
    if (!record_ || !rg) return push(std::move(out), false, {});
    const auto self = static_cast<std::int32_t>(nodes_.size());
    return push(std::move(out), true, [b = std::forward<Back>(back), self]() { b(self); });
  }

  std::vector<Node> nodes_;
  bool record_;
};

}  // namespace posediff
