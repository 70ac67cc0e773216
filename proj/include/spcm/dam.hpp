#pragma once

#include <cmath>
#include <vector>

#include "spcm/autograd.hpp"
#include "spcm/layers.hpp"
#include "spcm/tensor.hpp"

namespace spcm {

// Directed attention over the stacked modality channels: a squeeze-excitation
// pair shared between two streams. The direct stream rescales the raw channels
// with the current weights treated as constants; the inverted stream is the
// trainable copy, supervised against group fixation density at half
// resolution through per-timestep heads.

struct DamHead {
  Parameter* k3 = nullptr;  // [32, C', 3, 3]
  Parameter* b3 = nullptr;  // [32]
  Parameter* k1 = nullptr;  // [1, 32, 1, 1]
  Parameter* b1 = nullptr;  // [1]
};

struct Dam {
  std::size_t channels = 0;  // C'
  std::size_t hidden = 0;    // max(2, C'/gamma)
  Parameter* w1 = nullptr;   // [hidden, C']
  Parameter* w2 = nullptr;   // [C', hidden]
  std::vector<DamHead> heads;

  static Dam build(ParamStore& store, std::size_t channels, std::size_t context,
                   std::size_t gamma, Rng& rng) {
    if (channels == 0) throw ConfigError("dam: zero channels");
    if (gamma == 0) throw ConfigError("dam: zero reduction ratio");
    Dam d;
    d.channels = channels;
    d.hidden = std::max<std::size_t>(2, channels / gamma);
    d.w1 = &store.glorot("dam/w1", {d.hidden, channels}, rng);
    d.w2 = &store.glorot("dam/w2", {channels, d.hidden}, rng);
    for (std::size_t t = 0; t < context; ++t) {
      DamHead h;
      h.k3 = &store.glorot(strf("dam/head%zu/k3", t), {32, channels, 3, 3}, rng);
      h.b3 = &store.zeros(strf("dam/head%zu/b3", t), {32});
      h.k1 = &store.glorot(strf("dam/head%zu/k1", t), {1, 32, 1, 1}, rng);
      h.b1 = &store.zeros(strf("dam/head%zu/b1", t), {1});
      d.heads.push_back(h);
    }
    return d;
  }

  std::vector<Parameter*> group() const {
    std::vector<Parameter*> g{w1, w2};
    for (const DamHead& h : heads) {
      g.push_back(h.k3);
      g.push_back(h.b3);
      g.push_back(h.k1);
      g.push_back(h.b1);
    }
    return g;
  }
};

// per-channel spatial mean, [C,H,W] -> [C]
inline Tensor dam_squeeze(const Tensor& r) {
  if (r.rank() != 3) throw ShapeError("dam_squeeze: want [C,H,W]");
  const std::size_t C = r.shape[0], HW = r.shape[1] * r.shape[2];
  Tensor out({C});
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < HW; ++i) s += r[c * HW + i];
    out[c] = s / double(HW);
  }
  return out;
}

// sigmoid(W2 * relu(W1 * l1)), plain evaluation
inline Tensor dam_excite(const Tensor& l1, const Tensor& w1, const Tensor& w2) {
  if (l1.rank() != 1 || w1.rank() != 2 || w2.rank() != 2)
    throw ShapeError("dam_excite: want l1 [C], w1 [h,C], w2 [C,h]");
  if (w1.shape[1] != l1.shape[0] || w2.shape[1] != w1.shape[0] ||
      w2.shape[0] != l1.shape[0])
    throw ShapeError("dam_excite: inconsistent shapes");
  const std::size_t h = w1.shape[0], C = l1.shape[0];
  std::vector<double> mid(h, 0.0);
  for (std::size_t i = 0; i < h; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < C; ++j) s += w1.at2(i, j) * l1[j];
    mid[i] = std::max(0.0, s);
  }
  Tensor out({C});
  for (std::size_t i = 0; i < C; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < h; ++j) s += w2.at2(i, j) * mid[j];
    out[i] = 1.0 / (1.0 + std::exp(-s));
  }
  return out;
}

// chromatic inversion: minus the per-channel spatial softmax
inline Tensor dam_invert(const Tensor& r) {
  if (r.rank() != 3) throw ShapeError("dam_invert: want [C,H,W]");
  const std::size_t C = r.shape[0], HW = r.shape[1] * r.shape[2];
  Tensor out = r;
  for (std::size_t c = 0; c < C; ++c) {
    double mx = -1e300;
    for (std::size_t i = 0; i < HW; ++i) mx = std::max(mx, r[c * HW + i]);
    double total = 0.0;
    for (std::size_t i = 0; i < HW; ++i) {
      const double e = std::exp(r[c * HW + i] - mx);
      out[c * HW + i] = e;
      total += e;
    }
    for (std::size_t i = 0; i < HW; ++i) out[c * HW + i] = -out[c * HW + i] / total;
  }
  return out;
}

inline Tensor dam_scale(const Tensor& r, const Tensor& gains) {
  if (r.rank() != 3 || gains.rank() != 1 || gains.shape[0] != r.shape[0])
    throw ShapeError("dam_scale: want [C,H,W] x [C]");
  const std::size_t HW = r.shape[1] * r.shape[2];
  Tensor out = r;
  for (std::size_t c = 0; c < r.shape[0]; ++c)
    for (std::size_t i = 0; i < HW; ++i) out[c * HW + i] *= gains[c];
  return out;
}

inline Tensor dam_direct_gains(const Dam& d, const Tensor& r) {
  return dam_excite(dam_squeeze(r), d.w1->value, d.w2->value);
}

// Direct stream: channels rescaled by gains computed from the current
// (trainable) weights, evaluated entirely off-tape so no gradient can reach
// them. Reading the live values at every call keeps the two streams tied.
inline std::vector<Tensor> dam_direct(const Dam& d, const std::vector<Tensor>& r_seq) {
  std::vector<Tensor> out;
  out.reserve(r_seq.size());
  for (const Tensor& r : r_seq) {
    if (r.rank() != 3 || r.shape[0] != d.channels)
      throw ShapeError(strf("dam_direct: want [%zu,H,W]", d.channels));
    out.push_back(dam_scale(r, dam_direct_gains(d, r)));
  }
  return out;
}

// Inverted stream head for one timestep: 3x3 conv to 32 channels, 2x2 max
// pool, 1x1 conv to one channel, spatial softmax.
inline Value dam_head_forward(Tape& tape, const DamHead& head, Value scaled_inv) {
  Value z = tape.conv2d(scaled_inv, tape.param(*head.k3), tape.param(*head.b3), 1);
  z = tape.maxpool2(z);
  z = tape.conv2d(z, tape.param(*head.k1), tape.param(*head.b1), 0);
  return tape.spatial_softmax(z);
}

// Trainable stream: cross-entropy of each head's half-resolution softmax
// against the 2x2-average-pooled, re-normalized density target. Returns the
// unweighted sum over timesteps and pixels.
inline Value dam_inverted_loss(Tape& tape, const Dam& d, const std::vector<Tensor>& r_seq,
                               const std::vector<Tensor>& density_targets) {
  if (r_seq.size() != d.heads.size())
    throw ShapeError(strf("dam: %zu timesteps but %zu heads", r_seq.size(), d.heads.size()));
  if (density_targets.size() != r_seq.size())
    throw DataError(strf("dam: %zu density targets for %zu timesteps", density_targets.size(),
                         r_seq.size()));
  std::optional<Value> total;
  for (std::size_t t = 0; t < r_seq.size(); ++t) {
    const Tensor& r = r_seq[t];
    if (r.rank() != 3 || r.shape[0] != d.channels)
      throw ShapeError(strf("dam: want [%zu,H,W] input", d.channels));
    if (r.shape[1] % 2 != 0 || r.shape[2] % 2 != 0)
      throw ShapeError(strf("dam: spatial extents %zux%zu must be even", r.shape[1],
                            r.shape[2]));
    const Tensor r_inv = dam_invert(r);
    const Tensor l1 = dam_squeeze(r_inv);
    Value gains = tape.sigmoid(tape.linear(
        tape.relu(tape.linear(tape.leaf(l1), tape.param(*d.w1), std::nullopt)),
        tape.param(*d.w2), std::nullopt));
    Value scaled = tape.scale_ch(tape.leaf(r_inv), gains);
    Value prob = dam_head_forward(tape, d.heads[t], scaled);

    Tensor target = density_targets[t];
    if (target.rank() != 3 || target.shape[0] != 1 || target.shape[1] != r.shape[1] ||
        target.shape[2] != r.shape[2])
      throw ShapeError("dam: density target must be [1,H,W] at input resolution");
    target = normalize_sum(avgpool2(target));
    Value ce = tape.affine(
        tape.sum_all(tape.mul(tape.leaf(target), tape.log_(tape.affine(prob, 1.0, 1e-12)))),
        -1.0, 0.0);
    total = total ? tape.add(*total, ce) : ce;
  }
  return *total;
}

}  // namespace spcm
