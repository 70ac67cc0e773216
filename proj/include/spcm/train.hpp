#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "spcm/adam.hpp"
#include "spcm/dataset.hpp"
#include "spcm/integrator.hpp"

namespace spcm {

struct LossWeights {
  double kld = 0.94;
  double nll = 0.03;
  double dam = 0.61;

  void validate() const {
    if (!(kld > 0) || !(nll > 0) || !(dam > 0)) throw DataError("loss weights must be > 0");
  }
};

struct TrainConfig {
  std::size_t batch = 48;
  std::size_t accumulation = 4;
  double alpha = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t epochs = 20;
  double delta_min = 0.0001;
  std::size_t patience = 3;
  double overlap = 0.9;
  std::string sampling = "unified";  // or "individual"
  ObserverId observer;               // required for individual sampling
  std::uint64_t seed = 1;
  LossWeights weights;

  void validate() const {
    weights.validate();
    if (batch < 1) throw DataError("train: batch must be >= 1");
    if (accumulation < 1 || accumulation > batch)
      throw DataError("train: accumulation must be in [1, batch]");
    if (!(overlap >= 0.0 && overlap < 1.0)) throw DataError("train: overlap must be in [0,1)");
    if (!(alpha > 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
      throw DataError("train: bad optimizer constants");
    if (!(delta_min >= 0)) throw DataError("train: delta_min must be >= 0");
    if (patience < 1) throw DataError("train: patience must be >= 1");
    if (sampling != "unified" && sampling != "individual")
      throw DataError(strf("train: unknown sampling mode '%s'", sampling.c_str()));
    if (sampling == "individual" && observer.empty())
      throw DataError("train: individual sampling needs an observer");
  }
};

// One supervised tuple: inputs plus the per-step group densities that drive
// the inverted attention heads.
struct TrainSample {
  CueWindow cues;
  FixationHistory history;
  FixationPoint target;
  PriorityMap kld_target;
  std::vector<Tensor> dam_targets;  // mass-1 grids, one per window step
};

struct LossBreakdown {
  double nll = 0, kld = 0, dam = 0, total = 0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    nll += o.nll;
    kld += o.kld;
    dam += o.dam;
    total += o.total;
    return *this;
  }
  LossBreakdown scaled(double s) const { return {nll * s, kld * s, dam * s, total * s}; }
};

// -lambda * sum[ m*log(p) + (1-m)*(1 - log(p)) ], m one-hot at the fixation,
// p clipped away from {0,1}
inline Value loss_nll_graph(Tape& tape, Value pred, const FixationPoint& fix, double lambda) {
  const Tensor& p = tape.val(pred);
  if (p.rank() != 3 || p.shape[0] != 1) throw ShapeError("nll: pred must be [1,H,W]");
  if (fix.y >= p.shape[1] || fix.x >= p.shape[2])
    throw DataError(strf("nll: fixation (%zu,%zu) outside %zux%zu", fix.x, fix.y, p.shape[2],
                         p.shape[1]));
  Tensor onehot(p.shape);
  onehot.at3(0, fix.y, fix.x) = 1.0;
  Tensor offhot = Tensor::full(p.shape, 1.0);
  offhot.at3(0, fix.y, fix.x) = 0.0;
  Value lp = tape.log_(tape.clip(pred, 1e-7, 1.0 - 1e-7));
  Value on = tape.sum_all(tape.mul(tape.leaf(onehot), lp));
  Value off = tape.sum_all(tape.mul(tape.leaf(offhot), tape.affine(lp, -1.0, 1.0)));
  Value loss = tape.affine(tape.add(on, off), -lambda, 0.0);
  if (!std::isfinite(tape.val(loss)[0])) throw Error("nll: non-finite loss");
  return loss;
}

// lambda * (L+ + L-) with L+ = sum m*(log m - log p) and
// L- = sum (1-m)*((1 - log m) - (1 - log p)); collapses to
// lambda * sum (2m - 1)*(log m - log p), zero when p == m
inline Value loss_kld_graph(Tape& tape, Value pred_mass, const Tensor& gt_mass, double lambda) {
  const Tensor& p = tape.val(pred_mass);
  require_same_shape(p, gt_mass, "kld");
  if (std::fabs(gt_mass.sum() - 1.0) > 1e-9)
    throw DataError(strf("kld: target mass %.12f, want 1", gt_mass.sum()));
  if (std::fabs(p.sum() - 1.0) > 1e-9)
    throw DataError(strf("kld: prediction mass %.12f, want 1", p.sum()));
  Tensor weight(gt_mass.shape);
  Tensor log_m(gt_mass.shape);
  for (std::size_t i = 0; i < gt_mass.numel(); ++i) {
    weight[i] = 2.0 * gt_mass[i] - 1.0;
    log_m[i] = std::log(gt_mass[i] + 1e-12);
  }
  Value log_p = tape.log_(tape.affine(pred_mass, 1.0, 1e-12));
  Value diff = tape.add(tape.leaf(log_m), tape.affine(log_p, -1.0, 0.0));
  return tape.affine(tape.sum_all(tape.mul(tape.leaf(weight), diff)), lambda, 0.0);
}

// forward/reverse divergence halves before weighting, same floors as the graph
inline std::pair<double, double> loss_kld_parts(const Tensor& pred_mass,
                                                const Tensor& gt_mass) {
  require_same_shape(pred_mass, gt_mass, "kld");
  double lp = 0, lm = 0;
  for (std::size_t i = 0; i < gt_mass.numel(); ++i) {
    const double d = std::log(gt_mass[i] + 1e-12) - std::log(pred_mass[i] + 1e-12);
    lp += gt_mass[i] * d;
    lm -= (1.0 - gt_mass[i]) * d;
  }
  return {lp, lm};
}

// numeric wrappers sharing the graph builders, for reporting and tests
inline double loss_nll(const PriorityMap& pred, const FixationPoint& fix,
                       const LossWeights& w) {
  Tape tape;
  return tape.val(loss_nll_graph(tape, tape.leaf(pred.grid), fix, w.nll))[0];
}

inline double loss_kld(const PriorityMap& pred, const PriorityMap& gt, const LossWeights& w) {
  if (std::fabs(pred.grid.sum() - 1.0) > 1e-9)
    throw DataError(strf("kld: prediction mass %.12f, want 1", pred.grid.sum()));
  Tape tape;
  return tape.val(loss_kld_graph(tape, tape.leaf(pred.grid), gt.grid, w.kld))[0];
}

inline double total_loss(double nll, double kld, double dam_raw, const LossWeights& w) {
  return nll + kld + w.dam * dam_raw;
}

// Valid window endpoints for one split at the configured overlap stride;
// endpoints leave room for a full teacher-forced history.
inline std::vector<std::pair<std::string, std::size_t>> sample_grid(
    const DatasetView& view, const std::vector<std::string>& split, std::size_t context,
    double overlap) {
  if (split.empty()) throw DataError("sample grid: empty split");
  const std::size_t stride =
      std::max<std::size_t>(1, std::size_t(std::llround((1.0 - overlap) * double(context))));
  std::vector<std::pair<std::string, std::size_t>> grid;
  for (const std::string& video : split) {
    const std::size_t n = view.sub_frames(video);
    for (std::size_t t_end = context; t_end < n; t_end += stride) grid.emplace_back(video, t_end);
  }
  if (grid.empty()) throw DataError("sample grid: no window fits any video in the split");
  return grid;
}

struct SampleRef {
  std::string video;
  std::size_t t_end = 0;
  ObserverId observer;
};

inline SampleRef sample_individual(const std::vector<std::pair<std::string, std::size_t>>& grid,
                                   const DatasetManifest& manifest, const ObserverId& observer,
                                   Rng& rng) {
  if (std::find(manifest.observers.begin(), manifest.observers.end(), observer) ==
      manifest.observers.end())
    throw DataError(strf("sample: no observer '%s'", observer.c_str()));
  const auto& [video, t_end] = grid[rng.uniform_int(grid.size())];
  return {video, t_end, observer};
}

inline SampleRef sample_unified(const std::vector<std::pair<std::string, std::size_t>>& grid,
                                const DatasetManifest& manifest, Rng& rng) {
  const auto& [video, t_end] = grid[rng.uniform_int(grid.size())];
  return {video, t_end, manifest.observers[rng.uniform_int(manifest.observers.size())]};
}

inline TrainSample load_sample(const DatasetView& view, const SampleRef& ref,
                               const ModelConfig& mc) {
  const std::size_t T = mc.effective_context();
  std::vector<std::string> cue_mods;
  for (const std::string& m : mc.modalities)
    if (m != "history") cue_mods.push_back(m);
  std::vector<Tensor> dam;
  for (PriorityMap& m : view.dam_targets(ref.video, ref.t_end, T)) dam.push_back(std::move(m.grid));
  return TrainSample{view.cue_window(ref.video, ref.t_end, T, cue_mods),
                     view.init_teacher_forced(ref.observer, ref.video, ref.t_end, T),
                     view.point(ref.observer, ref.video, ref.t_end),
                     view.kld_target(ref.observer, ref.video, ref.t_end),
                     std::move(dam)};
}

// Builds the full per-sample graph, backpropagates loss scaled by grad_scale,
// and reports the unscaled components.
inline LossBreakdown apply_sample(ScanpathModel& model, const TrainSample& sample,
                                  const LossWeights& w, double grad_scale) {
  Tape tape;
  std::vector<std::vector<Tensor>> inputs =
      assemble_inputs(sample.cues, sample.history, model.cfg.modalities);
  ForwardResult fr = model.forward(tape, inputs, &sample.dam_targets);
  Value nll = loss_nll_graph(tape, fr.pred, sample.target, w.nll);
  Value kld = loss_kld_graph(tape, fr.pred_mass, sample.kld_target.grid, w.kld);
  Value dam = tape.affine(*fr.dam_loss, w.dam, 0.0);
  Value total = tape.add(tape.add(nll, kld), dam);
  LossBreakdown out{tape.val(nll)[0], tape.val(kld)[0], tape.val(dam)[0], tape.val(total)[0]};
  if (grad_scale != 0.0) tape.backward(tape.affine(total, grad_scale, 0.0));
  return out;
}

inline LossBreakdown eval_sample(ScanpathModel& model, const TrainSample& sample,
                                 const LossWeights& w) {
  return apply_sample(model, sample, w, 0.0);
}

// Improvement-below-delta counter; the first observation always counts as an
// improvement, so a frozen loss stops after exactly patience+1 epochs.
class EarlyStopper {
 public:
  EarlyStopper(double delta_min, std::size_t patience)
      : delta_min_(delta_min), patience_(patience) {}

  bool update(double val) {
    if (!seen_ || best_ - val >= delta_min_) {
      best_ = std::min(val, seen_ ? best_ : val);
      streak_ = 0;
    } else {
      ++streak_;
    }
    seen_ = true;
    return streak_ >= patience_;
  }

  double best() const { return best_; }

 private:
  double delta_min_;
  std::size_t patience_;
  double best_ = 0;
  std::size_t streak_ = 0;
  bool seen_ = false;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  LossBreakdown loss;
  std::int64_t wall_ms = 0;
};

inline nlohmann::json epoch_record_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},          {"split", r.split}, {"loss", r.loss.total},
          {"nll", r.loss.nll},         {"kld", r.loss.kld}, {"dam", r.loss.dam},
          {"wall_ms", r.wall_ms}};
}

struct TrainResult {
  std::vector<EpochRecord> log;
  double best_val = 0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::filesystem::path checkpoint;  // of the best validation epoch
};

class Trainer {
 public:
  Trainer(const DatasetView& view, ScanpathModel& model, TrainConfig cfg)
      : view_(view),
        model_(model),
        cfg_(std::move(cfg)),
        grid_(sample_grid(view, view.manifest().split_train, model.cfg.effective_context(),
                          cfg_.overlap)),
        adam_(model.all_params(), cfg_.alpha, cfg_.beta1, cfg_.beta2, 1e-8, cfg_.accumulation),
        rng_(stream_key(cfg_.seed, "train")) {
    cfg_.validate();
    if (view.manifest().split_val.empty()) throw DataError("train: empty validation split");
  }

  const TrainConfig& config() const { return cfg_; }
  std::size_t steps_per_epoch() const {
    return std::max<std::size_t>(1, (grid_.size() + cfg_.batch - 1) / cfg_.batch);
  }

  SampleRef draw() {
    return cfg_.sampling == "individual"
               ? sample_individual(grid_, view_.manifest(), cfg_.observer, rng_)
               : sample_unified(grid_, view_.manifest(), rng_);
  }

  // one optimizer step over an accumulated batch; returns the mean breakdown
  LossBreakdown train_step() {
    LossBreakdown mean;
    const double scale = double(cfg_.accumulation) / double(cfg_.batch);
    std::size_t done = 0;
    for (std::size_t a = 0; a < cfg_.accumulation; ++a) {
      const std::size_t chunk = (cfg_.batch - done) / (cfg_.accumulation - a);
      for (std::size_t b = 0; b < chunk; ++b) {
        TrainSample sample = load_sample(view_, draw(), model_.cfg);
        mean += apply_sample(model_, sample, cfg_.weights, scale);
      }
      done += chunk;
      adam_.add_batch();
    }
    adam_.step();
    return mean.scaled(1.0 / double(cfg_.batch));
  }

  // deterministic mean loss over a split; unified mode walks observers
  // round-robin so every profile contributes
  LossBreakdown eval_split(const std::vector<std::string>& split) {
    auto grid = sample_grid(view_, split, model_.cfg.effective_context(), cfg_.overlap);
    const auto& observers = view_.manifest().observers;
    LossBreakdown mean;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      SampleRef ref{grid[i].first, grid[i].second,
                    cfg_.sampling == "individual" ? cfg_.observer
                                                  : observers[i % observers.size()]};
      mean += eval_sample(model_, load_sample(view_, ref, model_.cfg), cfg_.weights);
    }
    return mean.scaled(1.0 / double(grid.size()));
  }

  // Epoch loop with early stopping on validation loss. Parameters pass
  // through storage precision before each validation pass, so the saved
  // checkpoint reproduces the logged validation loss bitwise on reload.
  TrainResult run(const std::filesystem::path& out_dir, std::size_t epochs_override = 0) {
    std::filesystem::create_directories(out_dir);
    std::ofstream log_file(out_dir / "train_log.jsonl", std::ios::trunc);
    if (!log_file) throw IoError("train: cannot open log");
    const std::size_t epochs = epochs_override ? epochs_override : cfg_.epochs;
    EarlyStopper stopper(cfg_.delta_min, cfg_.patience);
    TrainResult result;
    result.checkpoint = out_dir / "best";
    double best_val = 0;
    bool have_best = false;
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      LossBreakdown train_mean;
      const std::size_t steps = steps_per_epoch();
      for (std::size_t s = 0; s < steps; ++s) train_mean += train_step();
      train_mean = train_mean.scaled(1.0 / double(steps));
      const auto t1 = std::chrono::steady_clock::now();
      EpochRecord tr{epoch, "train", train_mean,
                     std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count()};
      log_file << epoch_record_json(tr).dump() << "\n";
      result.log.push_back(tr);

      model_.round_to_storage();
      LossBreakdown val = eval_split(view_.manifest().split_val);
      const auto t2 = std::chrono::steady_clock::now();
      EpochRecord vr{epoch, "val", val,
                     std::chrono::duration_cast<std::chrono::milliseconds>(t2 - t1).count()};
      log_file << epoch_record_json(vr).dump() << "\n";
      result.log.push_back(vr);

      if (!have_best || val.total < best_val) {
        best_val = val.total;
        have_best = true;
        result.best_val = val.total;
        result.best_epoch = epoch;
        model_.save_checkpoint(result.checkpoint,
                               {{"val_loss", val.total}, {"epoch", epoch}});
      }
      result.epochs_run = epoch;
      if (stopper.update(val.total)) break;
    }
    return result;
  }

 private:
  const DatasetView& view_;
  ScanpathModel& model_;
  TrainConfig cfg_;
  std::vector<std::pair<std::string, std::size_t>> grid_;
  Adam adam_;
  Rng rng_;
};

}  // namespace spcm
