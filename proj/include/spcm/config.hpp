#pragma once

#include <json.hpp>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "spcm/evalpipe.hpp"
#include "spcm/synthgen.hpp"
#include "spcm/train.hpp"

namespace spcm {

// One JSON document drives every command. Each section is optional and
// falls back to defaults; unknown keys anywhere are rejected so typos
// cannot silently change a run.
struct RunConfig {
  std::uint64_t seed = 1;
  GenConfig data;
  ModelConfig model;
  TrainConfig train;
  RolloutConfig eval;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const char* where) {
  if (!j.is_object()) throw ConfigError(strf("config: '%s' must be an object", where));
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw ConfigError(strf("config: unknown key '%s' in '%s'", key.c_str(), where));
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline ViewingGeometry parse_geometry(const nlohmann::json& j, const ViewingGeometry& base) {
  detail::check_keys(j,
                     {"distance_cm", "monitor_diagonal_inch", "aspect_w", "aspect_h", "pixels_w",
                      "pixels_h"},
                     "data.geometry");
  ViewingGeometry g = base;
  detail::maybe(j, "distance_cm", g.distance_cm);
  detail::maybe(j, "monitor_diagonal_inch", g.monitor_diagonal_inch);
  detail::maybe(j, "aspect_w", g.aspect_w);
  detail::maybe(j, "aspect_h", g.aspect_h);
  detail::maybe(j, "pixels_w", g.pixels_w);
  detail::maybe(j, "pixels_h", g.pixels_h);
  return g;
}

inline GenConfig parse_gen_config(const nlohmann::json& j, std::uint64_t run_seed) {
  detail::check_keys(j,
                     {"seed", "videos", "frames", "actors", "observers", "height", "width",
                      "fps", "cue_dropout", "inertia", "temperature", "center_bias",
                      "preferred_weight", "other_weight", "geometry"},
                     "data");
  GenConfig c;
  c.seed = run_seed;
  detail::maybe(j, "seed", c.seed);
  detail::maybe(j, "videos", c.videos);
  detail::maybe(j, "frames", c.frames);
  detail::maybe(j, "actors", c.actors);
  detail::maybe(j, "observers", c.observers);
  detail::maybe(j, "height", c.height);
  detail::maybe(j, "width", c.width);
  detail::maybe(j, "fps", c.fps);
  detail::maybe(j, "cue_dropout", c.cue_dropout);
  detail::maybe(j, "inertia", c.inertia);
  detail::maybe(j, "temperature", c.temperature);
  detail::maybe(j, "center_bias", c.center_bias);
  detail::maybe(j, "preferred_weight", c.preferred_weight);
  detail::maybe(j, "other_weight", c.other_weight);
  // geometry tracks the frame size unless overridden
  c.geometry.pixels_w = c.width;
  c.geometry.pixels_h = c.height;
  if (j.contains("geometry")) c.geometry = parse_geometry(j.at("geometry"), c.geometry);
  c.validate();
  return c;
}

inline ModelConfig parse_model_config(const nlohmann::json& j, std::uint64_t run_seed) {
  detail::check_keys(
      j, {"variant", "modalities", "context", "height", "width", "gamma", "largmu_group_split",
          "init_seed"},
      "model");
  ModelConfig c;
  c.modalities = cue_order();
  c.modalities.push_back("history");
  c.init_seed = run_seed;
  detail::maybe(j, "variant", c.variant);
  detail::maybe(j, "modalities", c.modalities);
  detail::maybe(j, "context", c.context);
  detail::maybe(j, "height", c.height);
  detail::maybe(j, "width", c.width);
  detail::maybe(j, "gamma", c.gamma);
  detail::maybe(j, "largmu_group_split", c.largmu_group_split);
  detail::maybe(j, "init_seed", c.init_seed);
  c.validate();
  return c;
}

inline TrainConfig parse_train_config(const nlohmann::json& j, std::uint64_t run_seed) {
  detail::check_keys(j,
                     {"batch", "accumulation", "alpha", "beta1", "beta2", "epochs", "delta_min",
                      "patience", "overlap", "sampling", "observer", "seed", "weights"},
                     "train");
  TrainConfig c;
  c.seed = run_seed;
  detail::maybe(j, "batch", c.batch);
  detail::maybe(j, "accumulation", c.accumulation);
  detail::maybe(j, "alpha", c.alpha);
  detail::maybe(j, "beta1", c.beta1);
  detail::maybe(j, "beta2", c.beta2);
  detail::maybe(j, "epochs", c.epochs);
  detail::maybe(j, "delta_min", c.delta_min);
  detail::maybe(j, "patience", c.patience);
  detail::maybe(j, "overlap", c.overlap);
  detail::maybe(j, "sampling", c.sampling);
  detail::maybe(j, "observer", c.observer);
  detail::maybe(j, "seed", c.seed);
  if (j.contains("weights")) {
    const nlohmann::json& w = j.at("weights");
    detail::check_keys(w, {"kld", "nll", "dam"}, "train.weights");
    detail::maybe(w, "kld", c.weights.kld);
    detail::maybe(w, "nll", c.weights.nll);
    detail::maybe(w, "dam", c.weights.dam);
  }
  c.validate();
  return c;
}

inline RolloutConfig parse_rollout_config(const nlohmann::json& j) {
  detail::check_keys(j, {"steps_ahead", "context", "variant", "observers", "videos", "cheat"},
                     "eval");
  RolloutConfig c;
  detail::maybe(j, "steps_ahead", c.steps_ahead);
  detail::maybe(j, "context", c.context);
  detail::maybe(j, "variant", c.variant);
  detail::maybe(j, "observers", c.observers);
  detail::maybe(j, "videos", c.videos);
  detail::maybe(j, "cheat", c.cheat);
  if (c.steps_ahead < 1) throw ConfigError("config: eval.steps_ahead must be >= 1");
  return c;
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::check_keys(j, {"seed", "data", "model", "train", "eval"}, "run config");
  RunConfig c;
  detail::maybe(j, "seed", c.seed);
  c.data = parse_gen_config(j.contains("data") ? j.at("data") : nlohmann::json::object(),
                            c.seed);
  c.model = parse_model_config(j.contains("model") ? j.at("model") : nlohmann::json::object(),
                               c.seed);
  c.train = parse_train_config(j.contains("train") ? j.at("train") : nlohmann::json::object(),
                               c.seed);
  c.eval = parse_rollout_config(j.contains("eval") ? j.at("eval") : nlohmann::json::object());
  if (c.eval.context == 0) c.eval.context = c.model.effective_context();
  if (c.eval.context != c.model.effective_context())
    throw ConfigError(strf("config: eval.context %zu does not match the model context %zu",
                           c.eval.context, c.model.effective_context()));
  if (c.eval.variant.empty()) c.eval.variant = c.model.variant;
  if (c.eval.variant != c.model.variant)
    throw ConfigError(strf("config: eval.variant '%s' does not match the model variant '%s'",
                           c.eval.variant.c_str(), c.model.variant.c_str()));
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(strf("%s: cannot open config", path.string().c_str()));
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(strf("%s: %s", path.string().c_str(), e.what()));
  }
  return parse_run_config(j);
}

// every default materialized, suitable for embedding in command outputs
inline nlohmann::json run_config_json(const RunConfig& c) {
  nlohmann::json geometry = {{"distance_cm", c.data.geometry.distance_cm},
                             {"monitor_diagonal_inch", c.data.geometry.monitor_diagonal_inch},
                             {"aspect_w", c.data.geometry.aspect_w},
                             {"aspect_h", c.data.geometry.aspect_h},
                             {"pixels_w", c.data.geometry.pixels_w},
                             {"pixels_h", c.data.geometry.pixels_h}};
  nlohmann::json data = {{"seed", c.data.seed},
                         {"videos", c.data.videos},
                         {"frames", c.data.frames},
                         {"actors", c.data.actors},
                         {"observers", c.data.observers},
                         {"height", c.data.height},
                         {"width", c.data.width},
                         {"fps", c.data.fps},
                         {"cue_dropout", c.data.cue_dropout},
                         {"inertia", c.data.inertia},
                         {"temperature", c.data.temperature},
                         {"center_bias", c.data.center_bias},
                         {"preferred_weight", c.data.preferred_weight},
                         {"other_weight", c.data.other_weight},
                         {"geometry", geometry}};
  nlohmann::json train = {{"batch", c.train.batch},
                          {"accumulation", c.train.accumulation},
                          {"alpha", c.train.alpha},
                          {"beta1", c.train.beta1},
                          {"beta2", c.train.beta2},
                          {"epochs", c.train.epochs},
                          {"delta_min", c.train.delta_min},
                          {"patience", c.train.patience},
                          {"overlap", c.train.overlap},
                          {"sampling", c.train.sampling},
                          {"observer", c.train.observer},
                          {"seed", c.train.seed},
                          {"weights",
                           {{"kld", c.train.weights.kld},
                            {"nll", c.train.weights.nll},
                            {"dam", c.train.weights.dam}}}};
  nlohmann::json eval = {{"steps_ahead", c.eval.steps_ahead},
                         {"context", c.eval.context},
                         {"variant", c.eval.variant},
                         {"observers", c.eval.observers},
                         {"videos", c.eval.videos},
                         {"cheat", c.eval.cheat}};
  return {{"seed", c.seed},
          {"data", data},
          {"model", model_config_to_json(c.model)},
          {"train", train},
          {"eval", eval}};
}

inline void save_run_config(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(strf("%s: cannot open for writing", path.string().c_str()));
  f << run_config_json(c).dump(2) << "\n";
}

}  // namespace spcm
