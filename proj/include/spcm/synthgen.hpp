#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "spcm/common.hpp"
#include "spcm/datamodel.hpp"
#include "spcm/rng.hpp"

namespace spcm {

struct ActorTrack {
  std::vector<std::array<double, 2>> pos;  // per frame (x, y), sub-pixel
  double blob_std = 3.0;
  double expressiveness = 1.0;
  std::vector<int> gaze_target;            // per frame, actor index or -1
  std::vector<std::uint8_t> speaking;      // per frame
};

struct ObserverProfile {
  ObserverId id;
  std::vector<double> preferences;  // per actor, >= 0, not all zero
  double center_bias_weight = 0.0;
  double inertia = 0.0;      // [0,1): probability of keeping the previous target
  double temperature = 1.0;  // ~0 -> argmax
  std::uint64_t seed = 0;

  void validate() const {
    if (preferences.empty()) throw Error("observer profile: no preferences");
    double total = 0.0;
    for (double p : preferences) {
      if (p < 0.0) throw Error("observer profile: negative preference");
      total += p;
    }
    if (!(total > 0.0)) throw Error("observer profile: all-zero preferences");
    if (inertia < 0.0 || inertia >= 1.0) throw Error("observer profile: inertia outside [0,1)");
    if (temperature < 0.0) throw Error("observer profile: negative temperature");
  }
};

// Smooth bounded random walks around well-separated anchors, one speaker at a
// time with dwell >= 10 frames. Fully determined by the seed.
inline std::vector<ActorTrack> generate_scene(std::uint64_t seed, std::size_t n_actors,
                                              std::size_t n_frames, std::size_t H,
                                              std::size_t W) {
  if (n_actors == 0) throw Error("generate_scene: need at least one actor");
  if (n_frames == 0) throw Error("generate_scene: need at least one frame");
  if (H < 8 || W < 8) throw Error(strf("generate_scene: frame %zux%zu below 8x8", W, H));
  Rng rng(seed);
  const double mind = double(std::min(H, W));
  const double cx = 0.5 * double(W - 1), cy = 0.5 * double(H - 1);
  const double ring = 0.22 * mind;
  const double walk_radius = 0.08 * mind;
  const double phase = rng.uniform(0.0, 2.0 * M_PI);

  std::vector<ActorTrack> tracks(n_actors);
  for (std::size_t a = 0; a < n_actors; ++a) {
    ActorTrack& tr = tracks[a];
    tr.blob_std = mind * rng.uniform(0.055, 0.08);
    tr.expressiveness = rng.uniform(0.3, 1.0);
    const double ang = phase + 2.0 * M_PI * double(a) / double(n_actors);
    const double ax = cx + (n_actors == 1 ? 0.0 : ring * std::cos(ang));
    const double ay = cy + (n_actors == 1 ? 0.0 : ring * std::sin(ang));
    double x = ax + rng.uniform(-0.3, 0.3) * walk_radius;
    double y = ay + rng.uniform(-0.3, 0.3) * walk_radius;
    double vx = 0.0, vy = 0.0;
    tr.pos.reserve(n_frames);
    for (std::size_t t = 0; t < n_frames; ++t) {
      tr.pos.push_back({x, y});
      vx = 0.85 * vx + 0.5 * rng.normal();
      vy = 0.85 * vy + 0.5 * rng.normal();
      const double sp = std::hypot(vx, vy);
      if (sp > 2.0) {  // per-frame displacement cap
        vx *= 2.0 / sp;
        vy *= 2.0 / sp;
      }
      x = std::clamp(x + vx, ax - walk_radius, ax + walk_radius);
      y = std::clamp(y + vy, ay - walk_radius, ay + walk_radius);
      x = std::clamp(x, 1.0, double(W - 2));
      y = std::clamp(y, 1.0, double(H - 2));
    }
  }

  // speaker schedule with dwell in [10,20]; everyone gazes at the speaker,
  // the speaker looks back at whoever spoke before
  std::size_t speaker = rng.uniform_int(n_actors);
  int prev_speaker = -1;
  std::size_t dwell = 10 + rng.uniform_int(11);
  for (auto& tr : tracks) {
    tr.speaking.assign(n_frames, 0);
    tr.gaze_target.assign(n_frames, -1);
  }
  for (std::size_t t = 0; t < n_frames; ++t) {
    if (dwell == 0) {
      if (n_actors > 1) {
        prev_speaker = int(speaker);
        std::size_t next = rng.uniform_int(n_actors - 1);
        speaker = next >= speaker ? next + 1 : next;
      }
      dwell = 10 + rng.uniform_int(11);
    }
    --dwell;
    tracks[speaker].speaking[t] = 1;
    for (std::size_t a = 0; a < n_actors; ++a)
      tracks[a].gaze_target[t] = (a == speaker) ? prev_speaker : int(speaker);
  }
  return tracks;
}

struct CueFrames {
  std::vector<Tensor> saliency;    // mass-normalized, sum 1
  std::vector<Tensor> gaze;        // peak-normalized or all-zero
  std::vector<Tensor> expression;  // peak-normalized or all-zero

  std::size_t frames() const { return saliency.size(); }
  const std::vector<Tensor>& by_name(const std::string& m) const {
    if (m == "saliency") return saliency;
    if (m == "gaze") return gaze;
    if (m == "expression") return expression;
    throw Error(strf("render_cues: unknown modality '%s'", m.c_str()));
  }
};

namespace detail {
inline void add_blob(Tensor& map, double px, double py, double std_px, double scale) {
  const std::size_t H = map.shape[1], W = map.shape[2];
  const double inv2s2 = 1.0 / (2.0 * std_px * std_px);
  for (std::size_t y = 0; y < H; ++y) {
    const double dy = double(y) - py;
    for (std::size_t x = 0; x < W; ++x) {
      const double dx = double(x) - px;
      map.at3(0, y, x) += scale * std::exp(-(dx * dx + dy * dy) * inv2s2);
    }
  }
}
}  // namespace detail

inline CueFrames render_cues(const std::vector<ActorTrack>& tracks, std::size_t H,
                             std::size_t W) {
  if (tracks.empty()) throw Error("render_cues: no tracks");
  const std::size_t n_frames = tracks[0].pos.size();
  CueFrames cues;
  for (std::size_t t = 0; t < n_frames; ++t) {
    Tensor sal({1, H, W}), gaze({1, H, W}), expr({1, H, W});
    for (const ActorTrack& tr : tracks) {
      const double w = tr.speaking[t] ? 2.0 : 1.0;  // speaker weighted 2:1
      detail::add_blob(sal, tr.pos[t][0], tr.pos[t][1], tr.blob_std, w);
      detail::add_blob(expr, tr.pos[t][0], tr.pos[t][1], tr.blob_std, tr.expressiveness);
      const int tgt = tr.gaze_target[t];
      if (tgt >= 0 && std::size_t(tgt) < tracks.size()) {
        const ActorTrack& other = tracks[std::size_t(tgt)];
        detail::add_blob(gaze, other.pos[t][0], other.pos[t][1], other.blob_std, 1.0);
      }
    }
    cues.saliency.push_back(normalize_sum(sal));
    cues.gaze.push_back(normalize_peak(gaze));
    cues.expression.push_back(normalize_peak(expr));
  }
  return cues;
}

// Per frame: with probability inertia keep the previous target actor, else
// resample from softmax over actors of log saliency + log preference +
// center-bias at the profile temperature; fixate the target with 1 px jitter.
inline std::vector<FixationPoint> simulate_scanpath(const ObserverProfile& profile,
                                                    const std::vector<ActorTrack>& tracks,
                                                    const CueFrames& cues, std::size_t H,
                                                    std::size_t W) {
  profile.validate();
  if (profile.preferences.size() < tracks.size())
    throw Error("simulate_scanpath: fewer preferences than actors");
  Rng rng(profile.seed);
  const double cx = 0.5 * double(W - 1), cy = 0.5 * double(H - 1);
  const double cb_scale = 0.25 * double(std::min(H, W));
  std::vector<FixationPoint> path;
  std::size_t target = 0;
  for (std::size_t t = 0; t < cues.frames(); ++t) {
    const bool keep = t > 0 && rng.uniform() < profile.inertia;
    if (!keep) {
      std::vector<double> logits(tracks.size());
      for (std::size_t a = 0; a < tracks.size(); ++a) {
        const auto& p = tracks[a].pos[t];
        const std::size_t px = std::size_t(std::clamp(std::llround(p[0]), 0LL, (long long)W - 1));
        const std::size_t py = std::size_t(std::clamp(std::llround(p[1]), 0LL, (long long)H - 1));
        const double sal = cues.saliency[t].at3(0, py, px);
        const double d = std::hypot(p[0] - cx, p[1] - cy) / cb_scale;
        logits[a] = std::log(sal + 1e-9) + std::log(profile.preferences[a] + 1e-9) -
                    profile.center_bias_weight * 0.5 * d * d;
      }
      if (profile.temperature <= 1e-6) {
        target = 0;
        for (std::size_t a = 1; a < logits.size(); ++a)
          if (logits[a] > logits[target]) target = a;
      } else {
        const double mx = *std::max_element(logits.begin(), logits.end());
        std::vector<double> w(logits.size());
        for (std::size_t a = 0; a < logits.size(); ++a)
          w[a] = std::exp((logits[a] - mx) / profile.temperature);
        target = rng.categorical(w);
      }
    }
    const auto& p = tracks[target].pos[t];
    const double jx = p[0] + rng.normal();
    const double jy = p[1] + rng.normal();
    FixationPoint fp;
    fp.x = std::size_t(std::clamp(std::llround(jx), 0LL, (long long)W - 1));
    fp.y = std::size_t(std::clamp(std::llround(jy), 0LL, (long long)H - 1));
    fp.observer = profile.id;
    fp.frame = t;
    path.push_back(fp);
  }
  return path;
}

struct GenConfig {
  std::uint64_t seed = 1;
  std::size_t videos = 20;
  std::size_t frames = 40;
  std::size_t actors = 3;
  std::size_t observers = 6;
  std::size_t height = 64;
  std::size_t width = 64;
  double fps = 10.0;
  // fraction of frames on which a cue map is blanked, per cue, to mimic
  // per-detector dropouts
  double cue_dropout = 0.15;
  double inertia = 0.85;
  double temperature = 0.35;
  double center_bias = 0.1;
  double preferred_weight = 1.0;
  double other_weight = 0.15;
  ViewingGeometry geometry{120.0, 23.0, 1.0, 1.0, 64, 64};

  void validate() const {
    if (videos == 0 || frames == 0 || actors == 0 || observers == 0)
      throw ConfigError("generator: zero count");
    if (height < 8 || width < 8) throw ConfigError("generator: frame below 8x8");
    if (cue_dropout < 0.0 || cue_dropout >= 1.0)
      throw ConfigError("generator: cue_dropout outside [0,1)");
    if (geometry.pixels_w != width || geometry.pixels_h != height)
      throw ConfigError("generator: geometry pixels must match frame size");
    geometry.validate();
  }
};

inline std::string video_name(std::size_t i) { return strf("v%03zu", i); }
inline std::string observer_name(std::size_t i) { return strf("obs%02zu", i); }

inline ObserverProfile make_profile(const GenConfig& cfg, std::size_t obs_index) {
  ObserverProfile p;
  p.id = observer_name(obs_index);
  p.preferences.assign(cfg.actors, cfg.other_weight);
  p.preferences[obs_index % cfg.actors] = cfg.preferred_weight;
  p.center_bias_weight = cfg.center_bias;
  p.inertia = cfg.inertia;
  p.temperature = cfg.temperature;
  p.seed = 0;  // per-video seed assigned at emit time
  return p;
}

// Writes cue containers, fixation tables, and the manifest; 70/10/20 split by
// video order. Byte-identical output for a fixed (seed, config).
inline DatasetManifest emit_dataset(const GenConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError(strf("%s: cannot create directory", out_dir.string().c_str()));

  DatasetManifest manifest;
  manifest.geometry = cfg.geometry;
  manifest.modalities = cue_order();
  for (std::size_t o = 0; o < cfg.observers; ++o)
    manifest.observers.push_back(observer_name(o));

  for (std::size_t v = 0; v < cfg.videos; ++v) {
    const std::string vid = video_name(v);
    auto tracks = generate_scene(stream_key(cfg.seed, vid), cfg.actors, cfg.frames, cfg.height,
                                 cfg.width);
    auto cues = render_cues(tracks, cfg.height, cfg.width);

    FixationTable table;
    for (std::size_t o = 0; o < cfg.observers; ++o) {
      ObserverProfile profile = make_profile(cfg, o);
      profile.seed = stream_key(cfg.seed, vid, profile.id);
      table[profile.id] = simulate_scanpath(profile, tracks, cues, cfg.height, cfg.width);
    }

    // observers react to the clean cues above; the stored maps model flaky
    // detectors via per-cue dropout
    Rng drop(stream_key(cfg.seed, vid, "dropout"));
    VideoEntry entry;
    entry.id = vid;
    entry.frame_count = cfg.frames;
    entry.fps = cfg.fps;
    for (const std::string& mod : manifest.modalities) {
      const auto& frames = cues.by_name(mod);
      Tensor packed({cfg.frames, 1, cfg.height, cfg.width});
      const std::size_t hw = cfg.height * cfg.width;
      for (std::size_t t = 0; t < cfg.frames; ++t) {
        const bool dropped = drop.uniform() < cfg.cue_dropout;
        if (!dropped)
          std::copy(frames[t].data.begin(), frames[t].data.end(),
                    packed.data.begin() + t * hw);
      }
      const std::string file = strf("%s_%s.spcm", vid.c_str(), mod.c_str());
      save_container(out_dir / file, {{"maps", packed}});
      entry.cue_files[mod] = file;
    }
    entry.fixation_file = strf("%s_fixations.json", vid.c_str());
    save_fixations(out_dir / entry.fixation_file, vid, table);
    manifest.videos.push_back(entry);
  }

  const std::size_t n = cfg.videos;
  std::size_t n_test = std::max<std::size_t>(n >= 2 ? 1 : 0, std::size_t(std::llround(0.2 * n)));
  std::size_t n_val = std::max<std::size_t>(n >= 3 ? 1 : 0, std::size_t(std::llround(0.1 * n)));
  while (n_test + n_val >= n) {  // keep at least one training video
    if (n_val > 0)
      --n_val;
    else
      --n_test;
  }
  const std::size_t n_train = n - n_val - n_test;
  for (std::size_t v = 0; v < n; ++v) {
    const std::string vid = video_name(v);
    if (v < n_train)
      manifest.split_train.push_back(vid);
    else if (v < n_train + n_val)
      manifest.split_val.push_back(vid);
    else
      manifest.split_test.push_back(vid);
  }

  manifest.validate();
  save_manifest(out_dir / "manifest.json", manifest);
  return manifest;
}

}  // namespace spcm
