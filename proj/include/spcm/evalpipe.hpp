#pragma once

#include <functional>
#include <string>
#include <vector>

#include "spcm/metrics.hpp"

namespace spcm {

struct RolloutConfig {
  std::size_t steps_ahead = 5;  // predictions at t', t'+1, ..., t'+steps-1
  std::size_t context = 0;      // subsampled frames per cue window
  std::string variant;          // informational, used when building the model
  std::vector<ObserverId> observers;
  std::vector<std::string> videos;
  bool cheat = false;  // teacher-forced history at every step (test only)

  void validate() const {
    if (steps_ahead < 1) throw DataError("rollout config: steps_ahead must be >= 1");
    if (context < 1) throw DataError("rollout config: context must be >= 1");
  }
};

// prediction source that sees the rolled history; the cue window is implied
// by (video, t_end)
using StepPredictor = std::function<PriorityMap(const ObserverId&, const std::string&,
                                                std::size_t, const FixationHistory&)>;

inline StepPredictor model_step_predictor(ScanpathModel& model, const DatasetView& view) {
  return [&model, &view](const ObserverId&, const std::string& video, std::size_t t_end,
                         const FixationHistory& hist) {
    std::vector<std::string> cue_mods;
    for (const std::string& m : model.cfg.modalities)
      if (m != "history") cue_mods.push_back(m);
    CueWindow win = view.cue_window(video, t_end, model.cfg.context, cue_mods);
    Tape tape(false);
    ForwardResult fr = model.forward(tape, assemble_inputs(win, hist, model.cfg.modalities));
    return PriorityMap{tape.val(fr.pred), MapKind::prediction};
  };
}

// emits the observer's own blurred fixation; ignores the history
inline StepPredictor oracle_step_predictor(const DatasetView& view) {
  return [&view](const ObserverId& o, const std::string& v, std::size_t t,
                 const FixationHistory&) { return view.observer_blur(o, v, t); };
}

struct RolloutStep {
  std::size_t step = 0;
  std::size_t frame = 0;
  PriorityMap prediction;
  std::vector<EvalRecord> records;  // nss + aucj vs the observer's own point
};

// teacher-forced first step, then autoregressive: advance the cue window one
// subsampled frame and feed the previous prediction back as history
inline std::vector<RolloutStep> run_rollout(const StepPredictor& predict,
                                            const DatasetView& view, const ObserverId& observer,
                                            const std::string& video, std::size_t start,
                                            std::size_t context, std::size_t steps,
                                            bool cheat = false) {
  if (steps < 1) throw DataError("rollout: steps must be >= 1");
  const std::size_t n_sub = view.sub_frames(video);
  if (start < kWarmupFrames + context)
    throw DataError(strf("rollout: start %zu is inside warm-up, first valid frame is %zu",
                         start, kWarmupFrames + context));
  if (start + steps > n_sub)
    throw DataError(strf("rollout: video '%s' has %zu subsampled frames, %zu steps from %zu "
                         "need at least %zu",
                         video.c_str(), n_sub, steps, start, start + steps));

  FixationHistory hist = view.init_teacher_forced(observer, video, start, context);
  std::vector<RolloutStep> out;
  for (std::size_t n = 0; n < steps; ++n) {
    const std::size_t t = start + n;
    if (n > 0) {
      if (cheat)
        hist = view.init_teacher_forced(observer, video, t, context);
      else
        hist.push(out.back().prediction);
    }
    RolloutStep rs;
    rs.step = n;
    rs.frame = t;
    rs.prediction = predict(observer, video, t, hist);
    detail::score_into(rs.records, rs.prediction, observer, video, t, n,
                       view.point(observer, video, t), nullptr);
    out.push_back(std::move(rs));
  }
  return out;
}

// all rollouts for the configured observer and video sets, windows tiled
// without overlap
inline std::vector<EvalRecord> rollout_records(const StepPredictor& predict,
                                               const DatasetView& view,
                                               const RolloutConfig& cfg) {
  cfg.validate();
  if (cfg.observers.empty()) throw DataError("rollout: no observers");
  if (cfg.videos.empty()) throw DataError("rollout: no videos");
  std::vector<EvalRecord> records;
  for (const ObserverId& obs : cfg.observers) {
    for (const std::string& video : cfg.videos) {
      for (std::size_t start : eval_points(view.sub_frames(video), cfg.context, cfg.steps_ahead))
        for (RolloutStep& rs :
             run_rollout(predict, view, obs, video, start, cfg.context, cfg.steps_ahead,
                         cfg.cheat))
          records.insert(records.end(), rs.records.begin(), rs.records.end());
    }
  }
  if (records.empty()) throw DataError("rollout: no eval points fit any video");
  return records;
}

struct DegradationRow {
  std::size_t step = 0;
  double aucj_mean = 0;
  double aucj_pct = 0;  // percent change vs step 0
  double nss_mean = 0;
  double nss_pct = 0;
  std::size_t n = 0;  // defined aucj records at this step
};

inline std::vector<DegradationRow> degradation_report(const std::vector<EvalRecord>& records) {
  std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> by_step;
  for (const EvalRecord& r : records) {
    if (!r.defined) continue;
    if (r.metric == "aucj")
      by_step[r.step_ahead].first.push_back(r.value);
    else if (r.metric == "nss")
      by_step[r.step_ahead].second.push_back(r.value);
  }
  std::vector<DegradationRow> rows;
  for (const auto& [step, vals] : by_step) {
    DegradationRow row;
    row.step = step;
    for (double v : vals.first) row.aucj_mean += v;
    if (!vals.first.empty()) row.aucj_mean /= double(vals.first.size());
    for (double v : vals.second) row.nss_mean += v;
    if (!vals.second.empty()) row.nss_mean /= double(vals.second.size());
    row.n = vals.first.size();
    rows.push_back(row);
  }
  if (!rows.empty()) {
    const double a0 = rows.front().aucj_mean, n0 = rows.front().nss_mean;
    for (DegradationRow& row : rows) {
      row.aucj_pct = a0 != 0 ? 100.0 * (row.aucj_mean - a0) / a0 : 0.0;
      row.nss_pct = n0 != 0 ? 100.0 * (row.nss_mean - n0) / n0 : 0.0;
    }
  }
  return rows;
}

// wide layout: one row per metric statistic, one column per step
inline void save_degradation_csv(const std::filesystem::path& path,
                                 const std::vector<DegradationRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(strf("%s: cannot open for writing", path.string().c_str()));
  f << "metric";
  for (const DegradationRow& r : rows) f << strf(",step_%zu", r.step);
  f << "\n";
  auto line = [&](const char* name, auto get) {
    f << name;
    for (const DegradationRow& r : rows) f << strf(",%.6f", get(r));
    f << "\n";
  };
  line("aucj_mean", [](const DegradationRow& r) { return r.aucj_mean; });
  line("aucj_pct_change", [](const DegradationRow& r) { return r.aucj_pct; });
  line("nss_mean", [](const DegradationRow& r) { return r.nss_mean; });
  line("nss_pct_change", [](const DegradationRow& r) { return r.nss_pct; });
}

}  // namespace spcm
