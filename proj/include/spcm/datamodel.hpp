#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "spcm/common.hpp"
#include "spcm/container.hpp"
#include "spcm/tensor.hpp"

namespace spcm {

using ObserverId = std::string;

enum class MapKind { prediction, ground_truth_blur, density };

// 2D priority map [1,H,W]. ground_truth_blur maps are peak-normalized (max 1),
// density maps mass-normalized (sum 1); predictions carry raw model outputs.
struct PriorityMap {
  Tensor grid;
  MapKind kind = MapKind::prediction;

  std::size_t height() const { return grid.shape[1]; }
  std::size_t width() const { return grid.shape[2]; }

  void validate() const {
    if (grid.rank() != 3 || grid.shape[0] != 1)
      throw ShapeError("priority map: grid must be [1,H,W]");
    grid.check_finite("priority map");
    for (double v : grid.data)
      if (v < 0.0) throw Error("priority map: negative value");
    if (kind == MapKind::density && std::fabs(grid.sum() - 1.0) > 1e-9)
      throw Error(strf("priority map: density mass %.12f != 1", grid.sum()));
  }
};

struct FixationPoint {
  std::size_t x = 0;  // column
  std::size_t y = 0;  // row
  ObserverId observer;
  std::size_t frame = 0;
};

struct ViewingGeometry {
  double distance_cm = 0;
  double monitor_diagonal_inch = 0;
  double aspect_w = 0, aspect_h = 0;
  std::size_t pixels_w = 0, pixels_h = 0;

  void validate() const {
    if (distance_cm <= 0 || monitor_diagonal_inch <= 0 || aspect_w <= 0 || aspect_h <= 0 ||
        pixels_w == 0 || pixels_h == 0)
      throw Error("viewing geometry: nonpositive field");
    const double pixel_ratio = double(pixels_w) / double(pixels_h);
    const double aspect_ratio = aspect_w / aspect_h;
    if (std::fabs(pixel_ratio / aspect_ratio - 1.0) > 0.01)
      throw Error(strf("viewing geometry: pixel ratio %.4f vs aspect %.4f beyond 1%%",
                       pixel_ratio, aspect_ratio));
  }

  double monitor_width_cm() const {
    return 2.54 * monitor_diagonal_inch * aspect_w / std::sqrt(aspect_w * aspect_w +
                                                               aspect_h * aspect_h);
  }
};

inline double pixels_per_degree(const ViewingGeometry& g) {
  g.validate();
  const double deg_half = 0.5 * M_PI / 180.0;
  const double cm_per_degree = 2.0 * g.distance_cm * std::tan(deg_half);
  return double(g.pixels_w) / g.monitor_width_cm() * cm_per_degree;
}

// Gaussian blob around one fixation, peak exactly 1 at the fixated pixel.
inline PriorityMap blur_fixation(const FixationPoint& p, std::size_t H, std::size_t W,
                                 double sigma_px) {
  if (p.x >= W || p.y >= H)
    throw Error(strf("blur_fixation: point (%zu,%zu) outside %zux%zu", p.x, p.y, W, H));
  if (!(sigma_px > 0.0)) throw Error("blur_fixation: sigma must be positive");
  PriorityMap m{Tensor({1, H, W}), MapKind::ground_truth_blur};
  const double inv2s2 = 1.0 / (2.0 * sigma_px * sigma_px);
  for (std::size_t y = 0; y < H; ++y) {
    const double dy = double(y) - double(p.y);
    for (std::size_t x = 0; x < W; ++x) {
      const double dx = double(x) - double(p.x);
      m.grid.at3(0, y, x) = std::exp(-(dx * dx + dy * dy) * inv2s2);
    }
  }
  return m;
}

// Group fixation density: sum of per-point blobs, mass-normalized.
inline PriorityMap density_from_group(const std::vector<FixationPoint>& points, std::size_t H,
                                      std::size_t W, double sigma_px) {
  if (points.empty()) throw Error("density_from_group: no points");
  Tensor acc({1, H, W});
  for (const FixationPoint& p : points) {
    PriorityMap blob = blur_fixation(p, H, W, sigma_px);
    for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += blob.grid[i];
  }
  return {normalize_sum(acc), MapKind::density};
}

// Fixed cue order; the fixation-history modality is appended after these by
// the model input assembly.
inline const std::vector<std::string>& cue_order() {
  static const std::vector<std::string> order = {"saliency", "gaze", "expression"};
  return order;
}

struct VideoEntry {
  std::string id;
  std::size_t frame_count = 0;
  double fps = 0;
  std::map<std::string, std::string> cue_files;  // modality -> relative path
  std::string fixation_file;                     // relative path
};

struct DatasetManifest {
  ViewingGeometry geometry;
  std::vector<std::string> modalities;
  std::vector<ObserverId> observers;
  std::vector<VideoEntry> videos;
  std::vector<std::string> split_train, split_val, split_test;

  const VideoEntry& video(const std::string& id) const {
    for (const auto& v : videos)
      if (v.id == id) return v;
    throw DataError(strf("manifest: no video '%s'", id.c_str()));
  }

  void validate() const {
    geometry.validate();
    if (modalities.empty()) throw DataError("manifest: no modalities");
    if (observers.empty()) throw DataError("manifest: no observers");
    if (videos.empty()) throw DataError("manifest: no videos");
    std::map<std::string, int> seen;
    auto check_split = [&](const std::vector<std::string>& split, const char* name) {
      for (const auto& id : split) {
        video(id);  // must exist
        if (++seen[id] > 1)
          throw DataError(strf("manifest: video '%s' in more than one split (%s)", id.c_str(),
                               name));
      }
    };
    check_split(split_train, "train");
    check_split(split_val, "val");
    check_split(split_test, "test");
    for (const auto& v : videos) {
      if (v.frame_count == 0) throw DataError(strf("manifest: video '%s' empty", v.id.c_str()));
      if (!(v.fps > 0)) throw DataError(strf("manifest: video '%s' bad fps", v.id.c_str()));
      for (const auto& m : modalities)
        if (!v.cue_files.count(m))
          throw DataError(strf("manifest: video '%s' missing cue '%s'", v.id.c_str(), m.c_str()));
      if (v.fixation_file.empty())
        throw DataError(strf("manifest: video '%s' missing fixation file", v.id.c_str()));
    }
  }
};

inline nlohmann::json geometry_to_json(const ViewingGeometry& g) {
  return {{"distance_cm", g.distance_cm},
          {"monitor_diagonal_inch", g.monitor_diagonal_inch},
          {"aspect_w", g.aspect_w},
          {"aspect_h", g.aspect_h},
          {"pixels_w", g.pixels_w},
          {"pixels_h", g.pixels_h}};
}

inline ViewingGeometry geometry_from_json(const nlohmann::json& j) {
  ViewingGeometry g;
  g.distance_cm = j.at("distance_cm").get<double>();
  g.monitor_diagonal_inch = j.at("monitor_diagonal_inch").get<double>();
  g.aspect_w = j.at("aspect_w").get<double>();
  g.aspect_h = j.at("aspect_h").get<double>();
  g.pixels_w = j.at("pixels_w").get<std::size_t>();
  g.pixels_h = j.at("pixels_h").get<std::size_t>();
  return g;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  nlohmann::json j;
  j["format"] = "spcm-manifest";
  j["version"] = 1;
  j["geometry"] = geometry_to_json(m.geometry);
  j["modalities"] = m.modalities;
  j["observers"] = m.observers;
  j["videos"] = nlohmann::json::array();
  for (const auto& v : m.videos) {
    nlohmann::json jv;
    jv["id"] = v.id;
    jv["frame_count"] = v.frame_count;
    jv["fps"] = v.fps;
    jv["cues"] = v.cue_files;
    jv["fixations"] = v.fixation_file;
    j["videos"].push_back(jv);
  }
  j["splits"] = {{"train", m.split_train}, {"val", m.split_val}, {"test", m.split_test}};
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(strf("%s: cannot open for writing", path.string().c_str()));
  f << j.dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(strf("%s: cannot open", path.string().c_str()));
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(strf("%s: %s", path.string().c_str(), e.what()));
  }
  if (j.value("format", "") != std::string("spcm-manifest"))
    throw IoError(strf("%s: not a dataset manifest", path.string().c_str()));
  if (j.value("version", 0) != 1)
    throw IoError(strf("%s: unsupported manifest version", path.string().c_str()));
  DatasetManifest m;
  m.geometry = geometry_from_json(j.at("geometry"));
  m.modalities = j.at("modalities").get<std::vector<std::string>>();
  m.observers = j.at("observers").get<std::vector<ObserverId>>();
  for (const auto& jv : j.at("videos")) {
    VideoEntry v;
    v.id = jv.at("id").get<std::string>();
    v.frame_count = jv.at("frame_count").get<std::size_t>();
    v.fps = jv.at("fps").get<double>();
    v.cue_files = jv.at("cues").get<std::map<std::string, std::string>>();
    v.fixation_file = jv.at("fixations").get<std::string>();
    m.videos.push_back(std::move(v));
  }
  m.split_train = j.at("splits").at("train").get<std::vector<std::string>>();
  m.split_val = j.at("splits").at("val").get<std::vector<std::string>>();
  m.split_test = j.at("splits").at("test").get<std::vector<std::string>>();
  m.validate();
  return m;
}

// Per-video fixation tables: observer -> one (x,y) per frame.
using FixationTable = std::map<ObserverId, std::vector<FixationPoint>>;

inline void save_fixations(const std::filesystem::path& path, const std::string& video_id,
                           const FixationTable& table) {
  nlohmann::json j;
  j["video"] = video_id;
  nlohmann::json obs = nlohmann::json::object();
  for (const auto& [id, points] : table) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : points) arr.push_back({p.x, p.y});
    obs[id] = arr;
  }
  j["observers"] = obs;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(strf("%s: cannot open for writing", path.string().c_str()));
  f << j.dump() << "\n";
}

inline FixationTable load_fixations(const std::filesystem::path& path,
                                    const std::string& video_id, std::size_t frame_count,
                                    std::size_t H, std::size_t W) {
  std::ifstream f(path);
  if (!f) throw IoError(strf("%s: cannot open", path.string().c_str()));
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(strf("%s: %s", path.string().c_str(), e.what()));
  }
  if (j.value("video", "") != video_id)
    throw DataError(strf("%s: fixation table labeled '%s', expected '%s'",
                         path.string().c_str(), j.value("video", "").c_str(), video_id.c_str()));
  FixationTable table;
  for (const auto& [id, arr] : j.at("observers").items()) {
    std::vector<FixationPoint> pts;
    pts.reserve(arr.size());
    for (std::size_t t = 0; t < arr.size(); ++t) {
      FixationPoint p;
      p.x = arr[t][0].get<std::size_t>();
      p.y = arr[t][1].get<std::size_t>();
      p.observer = id;
      p.frame = t;
      if (p.x >= W || p.y >= H)
        throw DataError(strf("%s: observer %s frame %zu fixation (%zu,%zu) outside %zux%zu",
                             path.string().c_str(), id.c_str(), t, p.x, p.y, W, H));
      pts.push_back(p);
    }
    if (pts.size() != frame_count)
      throw DataError(strf("%s: observer %s has %zu fixations, video has %zu frames",
                           path.string().c_str(), id.c_str(), pts.size(), frame_count));
    table[id] = std::move(pts);
  }
  return table;
}

struct CueWindow {
  Tensor maps;  // [T', K, 1, H, W]
  std::size_t t_end = 0;
  std::vector<std::string> modalities;

  std::size_t context() const { return maps.shape[0]; }

  Tensor step_map(std::size_t t, std::size_t k) const {
    if (t >= maps.shape[0] || k >= maps.shape[1])
      throw ShapeError(strf("cue window: (%zu,%zu) outside %zux%zu", t, k, maps.shape[0],
                            maps.shape[1]));
    const std::size_t H = maps.shape[3], W = maps.shape[4];
    Tensor out({1, H, W});
    const std::size_t off = ((t * maps.shape[1] + k) * maps.shape[2]) * H * W;
    std::copy(maps.data.begin() + off, maps.data.begin() + off + H * W, out.data.begin());
    return out;
  }
};

}  // namespace spcm
