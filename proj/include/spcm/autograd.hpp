#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "spcm/common.hpp"
#include "spcm/tensor.hpp"

namespace spcm {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape)) {}

  // Frozen or non-trainable parameters enter the graph as constants and are
  // skipped by both backward traversal and the optimizer.
  bool active() const { return trainable && !frozen; }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

inline void zero_grads(const std::vector<Parameter*>& ps) {
  for (Parameter* p : ps) p->zero_grad();
}

class Tape;

struct Value {
  Tape* tape = nullptr;
  std::size_t idx = 0;
};

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Reverse-mode tape over dense f64 tensors. Nodes are recorded in definition
// order, which is a topological order, so one reverse sweep visits each node
// exactly once.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Tensor& val(Value v) const { return node_at(v).val; }

  Tensor grad_of(Value v) const {
    const Node& n = node_at(v);
    return n.has_grad ? n.grad : Tensor::zeros(n.val.shape);
  }

  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  Value leaf(Tensor t) {
    t.check_finite("leaf");
    return push(std::move(t), false, {}, nullptr);
  }

  Value param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Value{this, it->second};
    p.value.check_finite(p.name.empty() ? "param" : p.name.c_str());
    Value v = push(p.value, grad_enabled_ && p.active(), {}, nullptr);
    nodes_[v.idx].param = &p;
    param_nodes_[&p] = v.idx;
    return v;
  }

  // ---- elementwise and shape ops ----

  Value add(Value a, Value b) {
    const Tensor &x = val(a), &y = val(b);
    require_same_shape(x, y, "add");
    Tensor out = x;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += y[i];
    return push(std::move(out), needs(a) || needs(b), {a.idx, b.idx},
                [](Tape& t, const BackCtx& c) {
                  const Tensor& g = t.nodes_[c.self].grad;
                  if (t.wants(c.par[0])) t.accum(c.par[0], g);
                  if (t.wants(c.par[1])) t.accum(c.par[1], g);
                });
  }

  Value mul(Value a, Value b) {
    const Tensor &x = val(a), &y = val(b);
    require_same_shape(x, y, "mul");
    Tensor out = x;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= y[i];
    return push(std::move(out), needs(a) || needs(b), {a.idx, b.idx},
                [](Tape& t, const BackCtx& c) {
                  const Tensor& g = t.nodes_[c.self].grad;
                  const Tensor& x = t.nodes_[c.par[0]].val;
                  const Tensor& y = t.nodes_[c.par[1]].val;
                  if (t.wants(c.par[0])) {
                    Tensor& gx = t.grad_buf(c.par[0]);
                    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i];
                  }
                  if (t.wants(c.par[1])) {
                    Tensor& gy = t.grad_buf(c.par[1]);
                    for (std::size_t i = 0; i < g.numel(); ++i) gy[i] += g[i] * x[i];
                  }
                });
  }

  // a*x + b
  Value affine(Value v, double a, double b) {
    Tensor out = val(v);
    for (double& e : out.data) e = a * e + b;
    return push(std::move(out), needs(v), {v.idx}, [a](Tape& t, const BackCtx& c) {
      const Tensor& g = t.nodes_[c.self].grad;
      Tensor& gx = t.grad_buf(c.par[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += a * g[i];
    });
  }

  Value clip(Value v, double lo, double hi) {
    if (!(lo < hi)) throw Error("clip: lo must be < hi");
    const Tensor& x = val(v);
    Tensor out = x;
    for (double& e : out.data) e = std::min(std::max(e, lo), hi);
    return push(std::move(out), needs(v), {v.idx}, [lo, hi](Tape& t, const BackCtx& c) {
      const Tensor& g = t.nodes_[c.self].grad;
      const Tensor& x = t.nodes_[c.par[0]].val;
      Tensor& gx = t.grad_buf(c.par[0]);
      for (std::size_t i = 0; i < g.numel(); ++i)
        if (x[i] >= lo && x[i] <= hi) gx[i] += g[i];
    });
  }

  Value log_(Value v) {
    const Tensor& x = val(v);
    Tensor out = x;
    for (std::size_t i = 0; i < out.numel(); ++i) {
      if (!(x[i] > 0.0)) throw Error(strf("log: non-positive input %.17g at index %zu", x[i], i));
      out[i] = std::log(x[i]);
    }
    return push(std::move(out), needs(v), {v.idx}, [](Tape& t, const BackCtx& c) {
      const Tensor& g = t.nodes_[c.self].grad;
      const Tensor& x = t.nodes_[c.par[0]].val;
      Tensor& gx = t.grad_buf(c.par[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] / x[i];
    });
  }

  Value sigmoid(Value v) {
    Tensor out = val(v);
    for (double& e : out.data) e = 1.0 / (1.0 + std::exp(-e));
    return push(std::move(out), needs(v), {v.idx}, [](Tape& t, const BackCtx& c) {
      const Tensor& g = t.nodes_[c.self].grad;
      const Tensor& y = t.nodes_[c.self].val;
      Tensor& gx = t.grad_buf(c.par[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
    });
  }

  Value tanh_(Value v) {
    Tensor out = val(v);
    for (double& e : out.data) e = std::tanh(e);
    return push(std::move(out), needs(v), {v.idx}, [](Tape& t, const BackCtx& c) {
      const Tensor& g = t.nodes_[c.self].grad;
      const Tensor& y = t.nodes_[c.self].val;
      Tensor& gx = t.grad_buf(c.par[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
    });
  }

  Value relu(Value v) {
    Tensor out = val(v);
    for (double& e : out.data) e = e > 0.0 ? e : 0.0;
    return push(std::move(out), needs(v), {v.idx}, [](Tape& t, const BackCtx& c) {
      const Tensor& g = t.nodes_[c.self].grad;
      const Tensor& x = t.nodes_[c.par[0]].val;
      Tensor& gx = t.grad_buf(c.par[0]);
      for (std::size_t i = 0; i < g.numel(); ++i)
        if (x[i] > 0.0) gx[i] += g[i];
    });
  }

  Value sum_all(Value v) {
    Tensor out = Tensor::scalar(val(v).sum());
    return push(std::move(out), needs(v), {v.idx}, [](Tape& t, const BackCtx& c) {
      const double g = t.nodes_[c.self].grad[0];
      Tensor& gx = t.grad_buf(c.par[0]);
      for (double& e : gx.data) e += g;
    });
  }

  // y = x / sum(x); sum must be positive.
  Value normalize_sum(Value v) {
    const Tensor& x = val(v);
    const double s = x.sum();
    if (!(s > 0.0)) throw Error("normalize_sum: non-positive mass");
    Tensor out = x;
    for (double& e : out.data) e /= s;
    return push(std::move(out), needs(v), {v.idx}, [s](Tape& t, const BackCtx& c) {
      const Tensor& g = t.nodes_[c.self].grad;
      const Tensor& y = t.nodes_[c.self].val;
      double dot = 0.0;
      for (std::size_t i = 0; i < g.numel(); ++i) dot += g[i] * y[i];
      Tensor& gx = t.grad_buf(c.par[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += (g[i] - dot) / s;
    });
  }

  // ---- spatial ops on [C,H,W] ----

  // Per-channel softmax over the H*W plane, max-subtracted for stability.
  Value spatial_softmax(Value v) {
    const Tensor& x = val(v);
    if (x.rank() != 3) throw ShapeError(strf("spatial_softmax: want rank 3, got %zu", x.rank()));
    const std::size_t C = x.shape[0], HW = x.shape[1] * x.shape[2];
    Tensor out = x;
    for (std::size_t c = 0; c < C; ++c) {
      double* p = out.data.data() + c * HW;
      double mx = p[0];
      for (std::size_t i = 1; i < HW; ++i) mx = std::max(mx, p[i]);
      double s = 0.0;
      for (std::size_t i = 0; i < HW; ++i) {
        p[i] = std::exp(p[i] - mx);
        s += p[i];
      }
      for (std::size_t i = 0; i < HW; ++i) p[i] /= s;
    }
    return push(std::move(out), needs(v), {v.idx}, [C, HW](Tape& t, const BackCtx& c) {
      const Tensor& g = t.nodes_[c.self].grad;
      const Tensor& y = t.nodes_[c.self].val;
      Tensor& gx = t.grad_buf(c.par[0]);
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double* gp = g.data.data() + ch * HW;
        const double* yp = y.data.data() + ch * HW;
        double* xp = gx.data.data() + ch * HW;
        double dot = 0.0;
        for (std::size_t i = 0; i < HW; ++i) dot += gp[i] * yp[i];
        for (std::size_t i = 0; i < HW; ++i) xp[i] += yp[i] * (gp[i] - dot);
      }
    });
  }

  // 2x2 max pool, stride 2. Ties resolve to the first maximum in row-major
  // window order.
  Value maxpool2(Value v) {
    const Tensor& x = val(v);
    if (x.rank() != 3) throw ShapeError(strf("maxpool2: want rank 3, got %zu", x.rank()));
    const std::size_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    if (H % 2 || W % 2) throw ShapeError(strf("maxpool2: odd extents %zux%zu", H, W));
    const std::size_t Ho = H / 2, Wo = W / 2;
    Tensor out({C, Ho, Wo});
    auto arg = std::make_shared<std::vector<std::uint32_t>>(C * Ho * Wo);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          std::size_t best = ((c * H + 2 * oy) * W) + 2 * ox;
          double bv = x.data[best];
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((c * H + 2 * oy + dy) * W) + 2 * ox + dx;
              if (x.data[idx] > bv) {
                bv = x.data[idx];
                best = idx;
              }
            }
          out.at3(c, oy, ox) = bv;
          (*arg)[(c * Ho + oy) * Wo + ox] = std::uint32_t(best);
        }
    return push(std::move(out), needs(v), {v.idx}, [arg](Tape& t, const BackCtx& c) {
      const Tensor& g = t.nodes_[c.self].grad;
      Tensor& gx = t.grad_buf(c.par[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) gx.data[(*arg)[i]] += g[i];
    });
  }

  // Cross-correlation with zero padding.
  Value conv2d(Value x, Value k, std::optional<Value> bias, std::size_t pad) {
    const Tensor& xv = val(x);
    const Tensor& kv = val(k);
    if (xv.rank() != 3) throw ShapeError(strf("conv2d: input rank %zu, want 3", xv.rank()));
    if (kv.rank() != 4) throw ShapeError(strf("conv2d: kernel rank %zu, want 4", kv.rank()));
    const std::size_t Cin = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    const std::size_t Cout = kv.shape[0], kh = kv.shape[2], kw = kv.shape[3];
    if (kv.shape[1] != Cin)
      throw ShapeError(strf("conv2d: kernel axis 1 is %zu but input has %zu channels",
                            kv.shape[1], Cin));
    if (H + 2 * pad < kh || W + 2 * pad < kw)
      throw ShapeError("conv2d: kernel larger than padded input");
    if (bias && (val(*bias).rank() != 1 || val(*bias).shape[0] != Cout))
      throw ShapeError("conv2d: bias axis 0 must equal output channels");
    const std::size_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1;

    Tensor out({Cout, Ho, Wo});
    {
      // scratch reuse keeps large im2col buffers off the mmap path
      std::vector<double>& col = col_scratch_;
      im2col(xv, kh, kw, pad, Ho, Wo, col);
      Eigen::Map<const MatRM> K(kv.data.data(), Cout, Cin * kh * kw);
      Eigen::Map<const MatRM> C(col.data(), Cin * kh * kw, Ho * Wo);
      Eigen::Map<MatRM> O(out.data.data(), Cout, Ho * Wo);
      O.noalias() = K * C;
      if (bias) {
        const Tensor& bv = val(*bias);
        for (std::size_t co = 0; co < Cout; ++co) {
          double* row = out.data.data() + co * Ho * Wo;
          for (std::size_t i = 0; i < Ho * Wo; ++i) row[i] += bv[co];
        }
      }
    }

    std::vector<std::size_t> parents = {x.idx, k.idx};
    if (bias) parents.push_back(bias->idx);
    const bool rg = needs(x) || needs(k) || (bias && needs(*bias));
    return push(std::move(out), rg, std::move(parents),
                [Cin, Cout, H, W, kh, kw, pad, Ho, Wo](Tape& t, const BackCtx& c) {
                  const Tensor& g = t.nodes_[c.self].grad;
                  const Tensor& xv = t.nodes_[c.par[0]].val;
                  const Tensor& kv = t.nodes_[c.par[1]].val;
                  Eigen::Map<const MatRM> G(g.data.data(), Cout, Ho * Wo);
                  if (t.wants(c.par[1])) {
                    std::vector<double>& col = t.col_scratch_;
                    im2col(xv, kh, kw, pad, Ho, Wo, col);
                    Eigen::Map<const MatRM> C(col.data(), Cin * kh * kw, Ho * Wo);
                    Tensor& gk = t.grad_buf(c.par[1]);
                    Eigen::Map<MatRM> GK(gk.data.data(), Cout, Cin * kh * kw);
                    GK.noalias() += G * C.transpose();
                  }
                  if (t.wants(c.par[0])) {
                    Eigen::Map<const MatRM> K(kv.data.data(), Cout, Cin * kh * kw);
                    std::vector<double>& colg = t.colg_scratch_;
                    colg.resize(Cin * kh * kw * Ho * Wo);
                    Eigen::Map<MatRM> CG(colg.data(), Cin * kh * kw, Ho * Wo);
                    CG.noalias() = K.transpose() * G;
                    Tensor& gx = t.grad_buf(c.par[0]);
                    col2im_add(colg.data(), gx, kh, kw, pad, Ho, Wo);
                  }
                  if (c.par.size() > 2 && t.wants(c.par[2])) {
                    Tensor& gb = t.grad_buf(c.par[2]);
                    for (std::size_t co = 0; co < Cout; ++co) {
                      const double* row = g.data.data() + co * Ho * Wo;
                      double s = 0.0;
                      for (std::size_t i = 0; i < Ho * Wo; ++i) s += row[i];
                      gb[co] += s;
                    }
                  }
                });
  }

  // y = W x (+ b) for x [N], W [M,N], b [M].
  Value linear(Value x, Value w, std::optional<Value> bias) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    if (xv.rank() != 1) throw ShapeError(strf("linear: input rank %zu, want 1", xv.rank()));
    if (wv.rank() != 2) throw ShapeError(strf("linear: weight rank %zu, want 2", wv.rank()));
    const std::size_t N = xv.shape[0], M = wv.shape[0];
    if (wv.shape[1] != N)
      throw ShapeError(strf("linear: weight axis 1 is %zu but input is %zu", wv.shape[1], N));
    Tensor out({M});
    for (std::size_t m = 0; m < M; ++m) {
      const double* row = wv.data.data() + m * N;
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) s += row[n] * xv[n];
      out[m] = s;
    }
    if (bias) {
      const Tensor& bv = val(*bias);
      if (bv.rank() != 1 || bv.shape[0] != M) throw ShapeError("linear: bias axis 0 mismatch");
      for (std::size_t m = 0; m < M; ++m) out[m] += bv[m];
    }
    std::vector<std::size_t> parents = {x.idx, w.idx};
    if (bias) parents.push_back(bias->idx);
    const bool rg = needs(x) || needs(w) || (bias && needs(*bias));
    return push(std::move(out), rg, std::move(parents), [M, N](Tape& t, const BackCtx& c) {
      const Tensor& g = t.nodes_[c.self].grad;
      const Tensor& xv = t.nodes_[c.par[0]].val;
      const Tensor& wv = t.nodes_[c.par[1]].val;
      if (t.wants(c.par[0])) {
        Tensor& gx = t.grad_buf(c.par[0]);
        for (std::size_t m = 0; m < M; ++m) {
          const double* row = wv.data.data() + m * N;
          for (std::size_t n = 0; n < N; ++n) gx[n] += g[m] * row[n];
        }
      }
      if (t.wants(c.par[1])) {
        Tensor& gw = t.grad_buf(c.par[1]);
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t n = 0; n < N; ++n) gw.data[m * N + n] += g[m] * xv[n];
      }
      if (c.par.size() > 2 && t.wants(c.par[2])) {
        Tensor& gb = t.grad_buf(c.par[2]);
        for (std::size_t m = 0; m < M; ++m) gb[m] += g[m];
      }
    });
  }

  // Channel concat of [Ci,H,W] inputs.
  Value concat_ch(const std::vector<Value>& xs) {
    if (xs.empty()) throw ShapeError("concat_ch: no inputs");
    const Tensor& first = val(xs[0]);
    if (first.rank() != 3) throw ShapeError("concat_ch: want rank 3");
    const std::size_t H = first.shape[1], W = first.shape[2];
    std::size_t C = 0;
    bool rg = false;
    std::vector<std::size_t> parents;
    for (const Value& v : xs) {
      const Tensor& t = val(v);
      if (t.rank() != 3 || t.shape[1] != H || t.shape[2] != W)
        throw ShapeError("concat_ch: spatial axes mismatch");
      C += t.shape[0];
      rg = rg || needs(v);
      parents.push_back(v.idx);
    }
    Tensor out({C, H, W});
    std::size_t off = 0;
    auto spans = std::make_shared<std::vector<std::size_t>>();
    for (const Value& v : xs) {
      const Tensor& t = val(v);
      std::copy(t.data.begin(), t.data.end(), out.data.begin() + off);
      spans->push_back(t.shape[0]);
      off += t.numel();
    }
    return push(std::move(out), rg, std::move(parents), [spans, H, W](Tape& t, const BackCtx& c) {
      const Tensor& g = t.nodes_[c.self].grad;
      std::size_t off = 0;
      for (std::size_t i = 0; i < c.par.size(); ++i) {
        const std::size_t n = (*spans)[i] * H * W;
        if (t.wants(c.par[i])) {
          Tensor& gx = t.grad_buf(c.par[i]);
          for (std::size_t j = 0; j < n; ++j) gx[j] += g[off + j];
        }
        off += n;
      }
    });
  }

  // Channels [c0,c1) of a [C,H,W] input.
  Value slice_ch(Value v, std::size_t c0, std::size_t c1) {
    const Tensor& x = val(v);
    if (x.rank() != 3) throw ShapeError("slice_ch: want rank 3");
    if (c0 >= c1 || c1 > x.shape[0])
      throw ShapeError(strf("slice_ch: range [%zu,%zu) outside %zu channels", c0, c1, x.shape[0]));
    const std::size_t HW = x.shape[1] * x.shape[2];
    Tensor out({c1 - c0, x.shape[1], x.shape[2]});
    std::copy(x.data.begin() + c0 * HW, x.data.begin() + c1 * HW, out.data.begin());
    return push(std::move(out), needs(v), {v.idx}, [c0, HW](Tape& t, const BackCtx& c) {
      const Tensor& g = t.nodes_[c.self].grad;
      Tensor& gx = t.grad_buf(c.par[0]);
      for (std::size_t j = 0; j < g.numel(); ++j) gx[c0 * HW + j] += g[j];
    });
  }

  // Per-channel scaling of [C,H,W] by gains [C].
  Value scale_ch(Value v, Value gains) {
    const Tensor& x = val(v);
    const Tensor& gn = val(gains);
    if (x.rank() != 3) throw ShapeError("scale_ch: want rank 3");
    if (gn.rank() != 1 || gn.shape[0] != x.shape[0])
      throw ShapeError(strf("scale_ch: gains axis 0 is %zu, channels are %zu", gn.shape[0],
                            x.shape[0]));
    const std::size_t C = x.shape[0], HW = x.shape[1] * x.shape[2];
    Tensor out = x;
    for (std::size_t c = 0; c < C; ++c) {
      double* p = out.data.data() + c * HW;
      for (std::size_t i = 0; i < HW; ++i) p[i] *= gn[c];
    }
    return push(std::move(out), needs(v) || needs(gains), {v.idx, gains.idx},
                [C, HW](Tape& t, const BackCtx& c) {
                  const Tensor& g = t.nodes_[c.self].grad;
                  const Tensor& x = t.nodes_[c.par[0]].val;
                  const Tensor& gn = t.nodes_[c.par[1]].val;
                  if (t.wants(c.par[0])) {
                    Tensor& gx = t.grad_buf(c.par[0]);
                    for (std::size_t ch = 0; ch < C; ++ch)
                      for (std::size_t i = 0; i < HW; ++i)
                        gx[ch * HW + i] += g[ch * HW + i] * gn[ch];
                  }
                  if (t.wants(c.par[1])) {
                    Tensor& gg = t.grad_buf(c.par[1]);
                    for (std::size_t ch = 0; ch < C; ++ch) {
                      double s = 0.0;
                      for (std::size_t i = 0; i < HW; ++i)
                        s += g[ch * HW + i] * x[ch * HW + i];
                      gg[ch] += s;
                    }
                  }
                });
  }

  // Spatial mean per channel: [C,H,W] -> [C].
  Value channel_mean(Value v) {
    const Tensor& x = val(v);
    if (x.rank() != 3) throw ShapeError("channel_mean: want rank 3");
    const std::size_t C = x.shape[0], HW = x.shape[1] * x.shape[2];
    Tensor out({C});
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = x.data.data() + c * HW;
      double s = 0.0;
      for (std::size_t i = 0; i < HW; ++i) s += p[i];
      out[c] = s / double(HW);
    }
    return push(std::move(out), needs(v), {v.idx}, [C, HW](Tape& t, const BackCtx& c) {
      const Tensor& g = t.nodes_[c.self].grad;
      Tensor& gx = t.grad_buf(c.par[0]);
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t i = 0; i < HW; ++i) gx[ch * HW + i] += g[ch] / double(HW);
    });
  }

  // x [Cx,H,W] * tile(a [Ca,H,W]); Cx must be a multiple of Ca, channel j of x
  // pairs with channel j % Ca. With Cx == Ca this is a plain hadamard product.
  Value attend_mul(Value x, Value a) {
    const Tensor& xv = val(x);
    const Tensor& av = val(a);
    if (xv.rank() != 3 || av.rank() != 3) throw ShapeError("attend_mul: want rank 3");
    if (xv.shape[1] != av.shape[1] || xv.shape[2] != av.shape[2])
      throw ShapeError("attend_mul: spatial axes mismatch");
    const std::size_t Cx = xv.shape[0], Ca = av.shape[0];
    if (Cx % Ca != 0)
      throw ShapeError(strf("attend_mul: %zu channels not a multiple of %zu", Cx, Ca));
    const std::size_t HW = xv.shape[1] * xv.shape[2];
    Tensor out = xv;
    for (std::size_t c = 0; c < Cx; ++c) {
      const double* ap = av.data.data() + (c % Ca) * HW;
      double* p = out.data.data() + c * HW;
      for (std::size_t i = 0; i < HW; ++i) p[i] *= ap[i];
    }
    return push(std::move(out), needs(x) || needs(a), {x.idx, a.idx},
                [Cx, Ca, HW](Tape& t, const BackCtx& c) {
                  const Tensor& g = t.nodes_[c.self].grad;
                  const Tensor& xv = t.nodes_[c.par[0]].val;
                  const Tensor& av = t.nodes_[c.par[1]].val;
                  if (t.wants(c.par[0])) {
                    Tensor& gx = t.grad_buf(c.par[0]);
                    for (std::size_t ch = 0; ch < Cx; ++ch) {
                      const double* ap = av.data.data() + (ch % Ca) * HW;
                      for (std::size_t i = 0; i < HW; ++i)
                        gx[ch * HW + i] += g[ch * HW + i] * ap[i];
                    }
                  }
                  if (t.wants(c.par[1])) {
                    Tensor& ga = t.grad_buf(c.par[1]);
                    for (std::size_t ch = 0; ch < Cx; ++ch) {
                      const double* xp = xv.data.data() + ch * HW;
                      double* gp = ga.data.data() + (ch % Ca) * HW;
                      for (std::size_t i = 0; i < HW; ++i)
                        gp[i] += g[ch * HW + i] * xp[i];
                    }
                  }
                });
  }

  // ---- backward ----

  void backward(Value loss) {
    if (loss.tape != this) throw Error("backward: value belongs to another tape");
    Node& root = nodes_[loss.idx];
    if (root.val.numel() != 1)
      throw ShapeError(strf("backward: loss has %zu elements, want 1", root.val.numel()));
    if (!root.requires_grad) throw Error("backward: value is detached from the graph");
    if (ran_backward_) throw Error("backward: tape already traversed");
    ran_backward_ = true;

    grad_buf(loss.idx)[0] = 1.0;
    for (std::size_t i = loss.idx + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.has_grad) continue;
      if (n.back) {
        BackCtx ctx{i, n.parents};
        n.back(*this, ctx);
      } else if (n.param) {
        Tensor& pg = n.param->grad;
        for (std::size_t j = 0; j < pg.numel(); ++j) pg[j] += n.grad[j];
      }
    }
  }

 private:
  struct BackCtx {
    std::size_t self;
    const std::vector<std::size_t>& par;
  };
  using BackFn = std::function<void(Tape&, const BackCtx&)>;

  struct Node {
    Tensor val;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackFn back;
    Parameter* param = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
  };

  const Node& node_at(Value v) const {
    if (v.tape != this || v.idx >= nodes_.size()) throw Error("value belongs to another tape");
    return nodes_[v.idx];
  }

  bool needs(Value v) const { return node_at(v).requires_grad; }
  bool wants(std::size_t idx) const { return nodes_[idx].requires_grad; }

  Tensor& grad_buf(std::size_t idx) {
    Node& n = nodes_[idx];
    if (!n.has_grad) {
      n.grad = Tensor::zeros(n.val.shape);
      n.has_grad = true;
    }
    return n.grad;
  }

  void accum(std::size_t idx, const Tensor& g) {
    Tensor& dst = grad_buf(idx);
    for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
  }

  Value push(Tensor val, bool requires_grad, std::vector<std::size_t> parents, BackFn back) {
    val.check_finite("op output");
    Node n;
    n.val = std::move(val);
    n.requires_grad = grad_enabled_ && requires_grad;
    if (n.requires_grad) {
      n.parents = std::move(parents);
      n.back = std::move(back);
    }
    nodes_.push_back(std::move(n));
    return Value{this, nodes_.size() - 1};
  }

  static void im2col(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t pad,
                     std::size_t Ho, std::size_t Wo, std::vector<double>& col) {
    const std::size_t Cin = x.shape[0], H = x.shape[1], W = x.shape[2];
    col.assign(Cin * kh * kw * Ho * Wo, 0.0);
    for (std::size_t ci = 0; ci < Cin; ++ci)
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          double* dst = col.data() + ((ci * kh + ky) * kw + kx) * Ho * Wo;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const std::ptrdiff_t iy = std::ptrdiff_t(oy + ky) - std::ptrdiff_t(pad);
            if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
            const double* src = x.data.data() + (ci * H + iy) * W;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const std::ptrdiff_t ix = std::ptrdiff_t(ox + kx) - std::ptrdiff_t(pad);
              if (ix >= 0 && ix < std::ptrdiff_t(W)) dst[oy * Wo + ox] = src[ix];
            }
          }
        }
  }

  static void col2im_add(const double* col, Tensor& gx, std::size_t kh, std::size_t kw,
                         std::size_t pad, std::size_t Ho, std::size_t Wo) {
    const std::size_t Cin = gx.shape[0], H = gx.shape[1], W = gx.shape[2];
    for (std::size_t ci = 0; ci < Cin; ++ci)
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double* src = col + ((ci * kh + ky) * kw + kx) * Ho * Wo;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const std::ptrdiff_t iy = std::ptrdiff_t(oy + ky) - std::ptrdiff_t(pad);
            if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
            double* dst = gx.data.data() + (ci * H + iy) * W;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const std::ptrdiff_t ix = std::ptrdiff_t(ox + kx) - std::ptrdiff_t(pad);
              if (ix >= 0 && ix < std::ptrdiff_t(W)) dst[ix] += src[oy * Wo + ox];
            }
          }
        }
  }

  std::vector<Node> nodes_;
  std::vector<double> col_scratch_, colg_scratch_;
  std::map<Parameter*, std::size_t> param_nodes_;
  bool grad_enabled_;
  bool ran_backward_ = false;
};

}  // namespace spcm
