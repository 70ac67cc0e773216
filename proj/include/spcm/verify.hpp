#pragma once

#include <string>
#include <vector>

#include "spcm/gradcheck.hpp"
#include "spcm/metrics.hpp"
#include "spcm/train.hpp"

namespace spcm {

struct VerifyCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace verify_detail {

inline Tensor rand_tensor(const std::vector<std::size_t>& shape, Rng& rng, double lo = -1.0,
                          double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor rand_density(std::size_t H, std::size_t W, Rng& rng) {
  Tensor t({1, H, W});
  for (double& v : t.data) v = rng.uniform(0.05, 1.0);
  return normalize_sum(t);
}

inline VerifyCheck grad_check(const char* name, const std::vector<Parameter*>& params,
                              const std::function<double(bool)>& loss, double tol,
                              std::size_t coords, std::uint64_t seed,
                              double abs_floor = 1e-8) {
  GradCheckResult r = finite_diff_check(params, loss, 1e-5, coords, seed, abs_floor);
  return {name, r.max_rel_err < tol,
          strf("max rel err %.3e over %zu coords (tolerance %.0e, worst %s)", r.max_rel_err,
               r.coords_checked, tol, r.worst.empty() ? "-" : r.worst.c_str())};
}

// the attention stream reads its weights as constants from the prediction
// path, so the full-graph check runs per parameter group against the loss
// that actually reaches it
inline void model_graph_checks(std::vector<VerifyCheck>& out, const std::string& variant,
                               std::uint64_t seed) {
  ModelConfig cfg;
  cfg.variant = variant;
  cfg.modalities = {"a", "b"};
  cfg.context = 3;
  cfg.height = cfg.width = 6;
  cfg.init_seed = seed;
  ScanpathModel m = ScanpathModel::build(cfg);
  Rng rng(seed + 1);
  std::vector<std::vector<Tensor>> inputs(cfg.modalities.size());
  for (auto& seq : inputs)
    for (std::size_t t = 0; t < cfg.context; ++t)
      seq.push_back(rand_tensor({1, cfg.height, cfg.width}, rng, 0.0, 1.0));
  std::vector<Tensor> targets;
  for (std::size_t t = 0; t < cfg.context; ++t)
    targets.push_back(rand_density(cfg.height, cfg.width, rng));
  const Tensor kld_target = rand_density(cfg.height, cfg.width, rng);
  const FixationPoint fix{2, 3, "v", 0};
  const LossWeights w;

  auto full_loss = [&](bool with_grad) {
    Tape tape(with_grad);
    ForwardResult r = m.forward(tape, inputs, &targets);
    Value nll = loss_nll_graph(tape, r.pred, fix, w.nll);
    Value kld = loss_kld_graph(tape, r.pred_mass, kld_target, w.kld);
    Value total = tape.add(tape.add(nll, kld), tape.affine(*r.dam_loss, w.dam, 0.0));
    if (with_grad) tape.backward(total);
    return tape.val(total)[0];
  };
  auto dam_loss = [&](bool with_grad) {
    Tape tape(with_grad);
    ForwardResult r = m.forward(tape, inputs, &targets);
    if (with_grad) tape.backward(*r.dam_loss);
    return tape.val(*r.dam_loss)[0];
  };
  out.push_back(grad_check(strf("%s full graph (prediction path)", variant.c_str()).c_str(),
                           m.integrator_group(), full_loss, 1e-4, 2, seed + 2, 1e-3));
  out.push_back(grad_check(strf("%s full graph (attention path)", variant.c_str()).c_str(),
                           m.dam_group(), dam_loss, 1e-4, 2, seed + 3, 1e-3));
}

}  // namespace verify_detail

inline std::vector<VerifyCheck> verify_grad() {
  using namespace verify_detail;
  std::vector<VerifyCheck> out;

  {
    ParamStore store;
    Rng rng(21);
    Parameter& k = store.glorot("conv/k", {3, 2, 3, 3}, rng);
    Parameter& b = store.zeros("conv/b", {3});
    Tensor x = rand_tensor({2, 6, 6}, rng);
    auto loss = [&](bool with_grad) {
      Tape tape(with_grad);
      Value y = tape.conv2d(tape.leaf(x), tape.param(k), tape.param(b), 1);
      Value l = tape.sum_all(tape.mul(y, y));
      if (with_grad) tape.backward(l);
      return tape.val(l)[0];
    };
    out.push_back(grad_check("conv2d", {&k, &b}, loss, 1e-4, 6, 22));
  }
  {
    ParamStore store;
    Rng rng(23);
    Parameter& k = store.glorot("pool/k", {4, 2, 3, 3}, rng);
    Parameter& b = store.zeros("pool/b", {4});
    Tensor x = rand_tensor({2, 6, 6}, rng);
    auto loss = [&](bool with_grad) {
      Tape tape(with_grad);
      Value y = tape.maxpool2(tape.conv2d(tape.leaf(x), tape.param(k), tape.param(b), 1));
      Value l = tape.sum_all(tape.mul(y, y));
      if (with_grad) tape.backward(l);
      return tape.val(l)[0];
    };
    out.push_back(grad_check("maxpool2 through conv", {&k, &b}, loss, 1e-4, 6, 24));
  }
  {
    ParamStore store;
    Rng rng(25);
    AlstmParams p = AlstmParams::build(store, "alstm", 32, rng);
    Tensor x1 = rand_tensor({32, 4, 4}, rng, 0.0, 0.5);
    Tensor x2 = rand_tensor({32, 4, 4}, rng, 0.0, 0.5);
    auto loss = [&](bool with_grad) {
      Tape tape(with_grad);
      AlstmState s = alstm_init(tape, 4, 4);
      s = alstm_step(tape, p, tape.leaf(x1), s);
      s = alstm_step(tape, p, alstm_attend(tape, *s.q, tape.leaf(x2)), s);
      Value l = tape.sum_all(tape.mul(s.h, s.h));
      if (with_grad) tape.backward(l);
      return tape.val(l)[0];
    };
    out.push_back(grad_check("alstm step with attention", p.group(), loss, 1e-4, 3, 26));
  }
  {
    ParamStore store;
    Rng rng(27);
    GmuParams g = GmuParams::build(store, "gmu", {32, 32, 32}, rng);
    std::vector<Tensor> xs;
    for (int i = 0; i < 3; ++i) xs.push_back(rand_tensor({32, 4, 4}, rng));
    auto loss = [&](bool with_grad) {
      Tape tape(with_grad);
      std::vector<Value> in;
      for (const Tensor& x : xs) in.push_back(tape.leaf(x));
      Value y = gmu_fuse(tape, g, in);
      Value l = tape.sum_all(tape.mul(y, y));
      if (with_grad) tape.backward(l);
      return tape.val(l)[0];
    };
    out.push_back(grad_check("gmu fusion", g.group(), loss, 1e-4, 3, 28));
  }
  {
    ParamStore store;
    Rng rng(29);
    Dam d = Dam::build(store, 3, 2, 4, rng);
    std::vector<Tensor> r_seq{rand_tensor({3, 6, 6}, rng, 0.0, 1.0),
                              rand_tensor({3, 6, 6}, rng, 0.0, 1.0)};
    std::vector<Tensor> targets{rand_density(6, 6, rng), rand_density(6, 6, rng)};
    auto loss = [&](bool with_grad) {
      Tape tape(with_grad);
      Value l = dam_inverted_loss(tape, d, r_seq, targets);
      if (with_grad) tape.backward(l);
      return tape.val(l)[0];
    };
    out.push_back(grad_check("squeeze-excitation gains", {d.w1, d.w2}, loss, 1e-4, 4, 30));
    std::vector<Parameter*> head_params;
    for (const DamHead& h : d.heads) {
      head_params.push_back(h.k3);
      head_params.push_back(h.b3);
      head_params.push_back(h.k1);
      head_params.push_back(h.b1);
    }
    out.push_back(grad_check("attention heads", head_params, loss, 1e-4, 3, 31));
  }
  verify_detail::model_graph_checks(out, "argmu", 33);
  verify_detail::model_graph_checks(out, "largmu", 43);
  return out;
}

inline std::vector<VerifyCheck> verify_oracle() {
  using namespace verify_detail;
  std::vector<VerifyCheck> out;

  {
    Tensor t({1, 2, 2});
    t.data = {1, 0, 0, 0};
    auto z = nss({t, MapKind::prediction}, {0, 0, "o", 0});
    const double got = z.value_or(0.0);
    out.push_back({"nss frozen 2x2 example", z.has_value() && std::fabs(got - 1.7321) < 1e-4,
                   strf("got %.6f, expected 1.7321 within 1e-4", got)});
  }
  {
    Rng rng(51);
    double worst = 0;
    for (int i = 0; i < 1000; ++i) {
      Tensor t({1, 8, 8});
      for (double& v : t.data) v = rng.uniform();
      FixationPoint fix{rng.uniform_int(8), rng.uniform_int(8), "o", 0};
      double mu = 0;
      for (double v : t.data) mu += v;
      mu /= double(t.numel());
      double var = 0;
      for (double v : t.data) var += (v - mu) * (v - mu);
      var /= double(t.numel());
      const double hand = (t.at3(0, fix.y, fix.x) - mu) / std::sqrt(var);
      auto z = nss({t, MapKind::prediction}, fix);
      worst = std::max(worst, std::fabs(z.value_or(1e9) - hand));
    }
    out.push_back({"nss vs hand z-score, 1000 random 8x8", worst < 1e-9,
                   strf("max abs diff %.3e (tolerance 1e-9)", worst)});
  }
  {
    Rng rng(52);
    double worst = 0;
    for (int i = 0; i < 1000; ++i) {
      Tensor t({1, 8, 8});
      for (double& v : t.data) {
        v = rng.uniform();
        if (i % 2 == 0) v = std::floor(v * 6.0) / 6.0;  // force ties
      }
      std::vector<FixationPoint> fixes;
      const std::size_t n = 1 + rng.uniform_int(8);
      for (std::size_t k = 0; k < n; ++k)
        fixes.push_back({rng.uniform_int(8), rng.uniform_int(8), "o", 0});
      std::set<std::size_t> fixated;
      for (const FixationPoint& p : fixes) fixated.insert(p.y * 8 + p.x);
      double score = 0;
      std::size_t pairs = 0;
      for (std::size_t a = 0; a < t.numel(); ++a) {
        if (!fixated.count(a)) continue;
        for (std::size_t b = 0; b < t.numel(); ++b) {
          if (fixated.count(b)) continue;
          ++pairs;
          if (t[a] > t[b])
            score += 1.0;
          else if (t[a] == t[b])
            score += 0.5;
        }
      }
      const double oracle = score / double(pairs);
      worst = std::max(worst,
                       std::fabs(aucj({t, MapKind::prediction}, fixes) - oracle));
    }
    out.push_back({"aucj vs pairwise ranking oracle, 1000 random 8x8", worst < 1e-9,
                   strf("max abs diff %.3e (tolerance 1e-9)", worst)});
  }
  {
    Tensor flat = Tensor::full({1, 4, 4}, 0.3);
    const double got = aucj({flat, MapKind::prediction}, {{1, 1, "o", 0}});
    out.push_back(
        {"aucj constant map", got == 0.5, strf("got %.17g, expected exactly 0.5", got)});
  }
  {
    Rng rng(53);
    Tensor t({1, 8, 8});
    for (double& v : t.data) v = rng.uniform();
    t.at3(0, 5, 3) = t.max() + 1.0;
    const double got = aucj({t, MapKind::prediction}, {{3, 5, "o", 0}});
    out.push_back(
        {"aucj perfect oracle", got == 1.0, strf("got %.17g, expected exactly 1.0", got)});
  }
  {
    TTestResult r = paired_ttest({1, 2, 3}, {0, 0, 0});
    TTestResult same = paired_ttest({2, 2}, {2, 2});
    const bool ok = std::fabs(r.t - 3.4641) < 1e-4 && r.df == 2.0 && r.p > 0.0 && r.p < 1.0 &&
                    same.t == 0.0 && same.p == 1.0 && same.degenerate;
    out.push_back({"paired t-test frozen example", ok,
                   strf("t=%.4f df=%.0f p=%.4f; identical samples t=%.0f p=%.0f", r.t, r.df,
                        r.p, same.t, same.p)});
  }
  {
    Rng rng(54);
    double worst = 0;
    const LossWeights w;
    for (int i = 0; i < 20; ++i) {
      Tensor p = rand_density(6, 6, rng);
      worst = std::max(worst, std::fabs(loss_kld({p, MapKind::density},
                                                 {p, MapKind::density}, w)));
    }
    out.push_back({"divergence loss zero at equality", worst < 1e-9,
                   strf("max |loss| %.3e at pred == gt (tolerance 1e-9)", worst)});
  }
  return out;
}

inline bool verify_ok(const std::vector<VerifyCheck>& checks) {
  for (const VerifyCheck& c : checks)
    if (!c.pass) return false;
  return true;
}

}  // namespace spcm
