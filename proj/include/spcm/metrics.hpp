#pragma once

#include <boost/math/distributions/students_t.hpp>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "spcm/dataset.hpp"
#include "spcm/integrator.hpp"

namespace spcm {

struct EvalRecord {
  ObserverId observer;
  std::string video;
  std::size_t frame = 0;       // prediction target index
  std::size_t step_ahead = 0;  // 0 = teacher forced
  std::string metric;
  double value = 0;
  bool defined = true;
};

// z-scored map value at the fixated pixel; population standard deviation.
// Constant maps have no z-score, reported as an undefined record upstream.
inline std::optional<double> nss(const PriorityMap& pred, const FixationPoint& fix) {
  const Tensor& m = pred.grid;
  if (m.rank() != 3 || m.shape[0] != 1) throw ShapeError("nss: pred must be [1,H,W]");
  if (fix.y >= m.shape[1] || fix.x >= m.shape[2])
    throw DataError(strf("nss: fixation (%zu,%zu) outside %zux%zu", fix.x, fix.y, m.shape[2],
                         m.shape[1]));
  if (m.max() == m.min()) return std::nullopt;
  const double mu = m.sum() / double(m.numel());
  double var = 0;
  for (double v : m.data) var += (v - mu) * (v - mu);
  var /= double(m.numel());
  if (!(var > 0)) return std::nullopt;
  return (m.at3(0, fix.y, fix.x) - mu) / std::sqrt(var);
}

// ROC area with the deduplicated fixated-pixel set as positives and every
// remaining pixel as a negative. The threshold sweep visits each distinct
// map value, so tie blocks cross the curve diagonally and the area equals
// the probability that a fixated pixel outranks a non-fixated one, with
// half credit for ties. Accumulated in integers, one rounding at the end.
inline double aucj(const PriorityMap& pred, const std::vector<FixationPoint>& fixes) {
  const Tensor& m = pred.grid;
  if (m.rank() != 3 || m.shape[0] != 1) throw ShapeError("aucj: pred must be [1,H,W]");
  if (fixes.empty()) throw DataError("aucj: no fixations");
  const std::size_t H = m.shape[1], W = m.shape[2];
  std::set<std::size_t> fixated;
  for (const FixationPoint& p : fixes) {
    if (p.y >= H || p.x >= W)
      throw DataError(strf("aucj: fixation (%zu,%zu) outside %zux%zu", p.x, p.y, W, H));
    fixated.insert(p.y * W + p.x);
  }
  const std::size_t P = fixated.size(), N = m.numel() - P;
  if (N == 0) throw DataError("aucj: every pixel is fixated");

  std::vector<std::pair<double, bool>> cells;
  cells.reserve(m.numel());
  for (std::size_t i = 0; i < m.numel(); ++i) cells.emplace_back(m[i], fixated.count(i) > 0);
  std::sort(cells.begin(), cells.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });

  std::uint64_t twice_area = 0;  // 2 * P * N * AUC
  std::size_t tp = 0, i = 0;
  while (i < cells.size()) {
    const double v = cells[i].first;
    std::size_t pos_here = 0, neg_here = 0;
    for (; i < cells.size() && cells[i].first == v; ++i)
      (cells[i].second ? pos_here : neg_here)++;
    twice_area += std::uint64_t(neg_here) * (2 * tp + pos_here);
    tp += pos_here;
  }
  return double(twice_area) / double(2 * P * N);
}

struct TTestResult {
  double t = 0;
  double df = 0;
  double p = 1;
  bool degenerate = false;  // zero-variance differences
};

// two-sided paired t-test on equal-length samples
inline TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw DataError(strf("t-test: %zu vs %zu samples", a.size(), b.size()));
  const std::size_t n = a.size();
  if (n < 2) throw DataError("t-test: need at least 2 pairs");
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= double(n);
  double ss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / double(n - 1));
  TTestResult r;
  r.df = double(n - 1);
  if (sd == 0.0) {
    r.degenerate = true;
    if (mean == 0.0) return r;  // identical samples: t=0, p=1
    r.t = mean > 0 ? std::numeric_limits<double>::infinity()
                   : -std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.t = mean / (sd / std::sqrt(double(n)));
  boost::math::students_t_distribution<double> dist(r.df);
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(r.t)));
  return r;
}

// ---- evaluation protocols ----

// frames consumed before the first prediction; kept as an index offset so
// frame arithmetic matches a warm-started live pipeline
constexpr std::size_t kWarmupFrames = 16;

// non-overlapping evaluation windows: first target after warm-up plus one
// full history, then one context apart; each start must leave room for
// `steps` consecutive predictions
inline std::vector<std::size_t> eval_points(std::size_t n_sub, std::size_t context,
                                            std::size_t steps) {
  if (steps < 1) throw DataError("eval points: steps must be >= 1");
  std::vector<std::size_t> out;
  for (std::size_t t = kWarmupFrames + context; t + steps - 1 < n_sub; t += context)
    out.push_back(t);
  return out;
}

inline PriorityMap predict_teacher_forced(ScanpathModel& model, const DatasetView& view,
                                          const ObserverId& observer, const std::string& video,
                                          std::size_t t_end) {
  const std::size_t T = model.cfg.effective_context();
  std::vector<std::string> cue_mods;
  for (const std::string& m : model.cfg.modalities)
    if (m != "history") cue_mods.push_back(m);
  CueWindow win = view.cue_window(video, t_end, T, cue_mods);
  FixationHistory hist = view.init_teacher_forced(observer, video, t_end, T);
  Tape tape(false);
  ForwardResult fr = model.forward(tape, assemble_inputs(win, hist, model.cfg.modalities));
  return {tape.val(fr.pred), MapKind::prediction};
}

// pluggable prediction source so the protocol machinery can be exercised
// against stubs as well as trained models
using Predictor =
    std::function<PriorityMap(const ObserverId&, const std::string&, std::size_t)>;

inline Predictor model_predictor(ScanpathModel& model, const DatasetView& view) {
  return [&model, &view](const ObserverId& o, const std::string& v, std::size_t t) {
    return predict_teacher_forced(model, view, o, v, t);
  };
}

namespace detail {

inline void score_into(std::vector<EvalRecord>& records, const PriorityMap& pred,
                       const ObserverId& observer, const std::string& video, std::size_t frame,
                       std::size_t step, const FixationPoint& own,
                       const std::vector<FixationPoint>* others) {
  EvalRecord n{observer, video, frame, step, "nss", 0, true};
  EvalRecord a{observer, video, frame, step, "aucj", 0, true};
  if (!others) {
    std::optional<double> z = nss(pred, own);
    n.defined = z.has_value();
    n.value = z.value_or(0.0);
    a.value = aucj(pred, {own});
  } else {
    // leave-one-out group: mean z-score over the others' points, positives =
    // the others' fixated pixels
    double sum = 0;
    std::size_t cnt = 0;
    bool ok = true;
    for (const FixationPoint& p : *others) {
      std::optional<double> z = nss(pred, p);
      if (!z) {
        ok = false;
        break;
      }
      sum += *z;
      ++cnt;
    }
    n.defined = ok && cnt > 0;
    n.value = n.defined ? sum / double(cnt) : 0.0;
    a.value = aucj(pred, *others);
  }
  records.push_back(n);
  records.push_back(a);
}

}  // namespace detail

// teacher-forced one-step predictions scored against the observer's own
// next fixation
inline std::vector<EvalRecord> evaluate_1v1(const Predictor& predict, const DatasetView& view,
                                            const ObserverId& observer,
                                            const std::vector<std::string>& videos,
                                            std::size_t context) {
  std::vector<EvalRecord> records;
  for (const std::string& video : videos) {
    for (std::size_t t : eval_points(view.sub_frames(video), context, 1)) {
      PriorityMap pred = predict(observer, video, t);
      detail::score_into(records, pred, observer, video, t, 0,
                         view.point(observer, video, t), nullptr);
    }
  }
  if (records.empty()) throw DataError("evaluate: no eval points fit any video");
  return records;
}

inline std::vector<EvalRecord> evaluate_1v1(ScanpathModel& model, const DatasetView& view,
                                            const ObserverId& observer,
                                            const std::vector<std::string>& videos) {
  return evaluate_1v1(model_predictor(model, view), view, observer, videos,
                      model.cfg.effective_context());
}

// the same predictions scored against the group with the observer left out
inline std::vector<EvalRecord> evaluate_1vinf(const Predictor& predict, const DatasetView& view,
                                              const ObserverId& observer,
                                              const std::vector<std::string>& videos,
                                              std::size_t context) {
  const auto& observers = view.manifest().observers;
  if (observers.size() < 2) throw DataError("1vinf: needs at least 2 observers");
  std::vector<EvalRecord> records;
  for (const std::string& video : videos) {
    for (std::size_t t : eval_points(view.sub_frames(video), context, 1)) {
      PriorityMap pred = predict(observer, video, t);
      std::vector<FixationPoint> others;
      for (const ObserverId& o : observers)
        if (o != observer) others.push_back(view.point(o, video, t));
      detail::score_into(records, pred, observer, video, t, 0,
                         view.point(observer, video, t), &others);
    }
  }
  if (records.empty()) throw DataError("evaluate: no eval points fit any video");
  return records;
}

inline std::vector<EvalRecord> evaluate_1vinf(ScanpathModel& model, const DatasetView& view,
                                              const ObserverId& observer,
                                              const std::vector<std::string>& videos) {
  return evaluate_1vinf(model_predictor(model, view), view, observer, videos,
                        model.cfg.effective_context());
}

// ---- aggregation and serialization ----

struct AggRow {
  std::vector<std::string> keys;
  std::string metric;
  double mean = 0;
  double stddev = 0;
  std::size_t n = 0;
};

struct AggTable {
  std::vector<std::string> key_names;
  std::vector<AggRow> rows;
  std::size_t excluded = 0;      // undefined records dropped
  std::size_t empty_groups = 0;  // groups with no defined records
};

namespace detail {

inline std::string record_key(const EvalRecord& r, const std::string& name) {
  if (name == "observer") return r.observer;
  if (name == "video") return r.video;
  if (name == "frame") return std::to_string(r.frame);
  if (name == "step_ahead") return std::to_string(r.step_ahead);
  throw DataError(strf("aggregate: unknown key '%s'", name.c_str()));
}

}  // namespace detail

// grouped mean and population std per metric; grouping by no keys gives the
// global per-metric summary
inline AggTable aggregate(const std::vector<EvalRecord>& records,
                          const std::vector<std::string>& keys) {
  AggTable table;
  table.key_names = keys;
  std::map<std::vector<std::string>, std::vector<double>> groups;
  std::map<std::vector<std::string>, std::size_t> seen;
  for (const EvalRecord& r : records) {
    std::vector<std::string> k;
    for (const std::string& name : keys) k.push_back(detail::record_key(r, name));
    k.push_back(r.metric);
    ++seen[k];
    if (!r.defined) {
      ++table.excluded;
      continue;
    }
    groups[k].push_back(r.value);
  }
  for (const auto& [k, cnt] : seen)
    if (!groups.count(k)) ++table.empty_groups;
  for (const auto& [k, vals] : groups) {
    AggRow row;
    row.keys.assign(k.begin(), k.end() - 1);
    row.metric = k.back();
    row.n = vals.size();
    for (double v : vals) row.mean += v;
    row.mean /= double(vals.size());
    double ss = 0;
    for (double v : vals) ss += (v - row.mean) * (v - row.mean);
    row.stddev = std::sqrt(ss / double(vals.size()));
    table.rows.push_back(row);
  }
  return table;
}

// per-observer spread across videos, then averaged over observers: one row
// per metric
inline std::vector<AggRow> cross_video_spread(const std::vector<EvalRecord>& records) {
  AggTable per = aggregate(records, {"observer", "video"});
  std::map<std::string, std::map<std::string, std::vector<double>>> by_metric_obs;
  for (const AggRow& r : per.rows) by_metric_obs[r.metric][r.keys[0]].push_back(r.mean);
  std::vector<AggRow> out;
  for (const auto& [metric, by_obs] : by_metric_obs) {
    double acc = 0;
    for (const auto& [obs, means] : by_obs) {
      double mu = 0;
      for (double v : means) mu += v;
      mu /= double(means.size());
      double ss = 0;
      for (double v : means) ss += (v - mu) * (v - mu);
      acc += std::sqrt(ss / double(means.size()));
    }
    AggRow row;
    row.metric = metric;
    row.mean = acc / double(by_obs.size());
    row.n = by_obs.size();
    out.push_back(row);
  }
  return out;
}

inline nlohmann::json record_json(const EvalRecord& r) {
  return {{"observer", r.observer},       {"video", r.video}, {"frame", r.frame},
          {"step_ahead", r.step_ahead},   {"metric", r.metric}, {"value", r.value},
          {"defined", r.defined}};
}

inline void save_records(const std::filesystem::path& path,
                         const std::vector<EvalRecord>& records) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(strf("%s: cannot open for writing", path.string().c_str()));
  for (const EvalRecord& r : records) f << record_json(r).dump() << "\n";
}

inline std::vector<EvalRecord> load_records(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(strf("%s: cannot open", path.string().c_str()));
  std::vector<EvalRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    out.push_back({j.at("observer").get<ObserverId>(), j.at("video").get<std::string>(),
                   j.at("frame").get<std::size_t>(), j.at("step_ahead").get<std::size_t>(),
                   j.at("metric").get<std::string>(), j.at("value").get<double>(),
                   j.at("defined").get<bool>()});
  }
  return out;
}

// fixed column order: group keys, metric, mean, std, n
inline void save_table_csv(const std::filesystem::path& path, const AggTable& table) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(strf("%s: cannot open for writing", path.string().c_str()));
  for (const std::string& k : table.key_names) f << k << ",";
  f << "metric,mean,std,n\n";
  for (const AggRow& r : table.rows) {
    for (const std::string& k : r.keys) f << k << ",";
    f << r.metric << "," << strf("%.6f", r.mean) << "," << strf("%.6f", r.stddev) << "," << r.n
      << "\n";
  }
}

}  // namespace spcm
