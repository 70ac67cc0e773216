#include <CLI11.hpp>
#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "spcm/config.hpp"
#include "spcm/evalpipe.hpp"
#include "spcm/verify.hpp"

using namespace spcm;
namespace fs = std::filesystem;

namespace {

// SPCM_THREADS wins over the flag so batch jobs can pin the worker count
// without touching per-command invocations
std::size_t resolve_workers(std::size_t flag_value) {
  if (const char* env = std::getenv("SPCM_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1)
      throw ConfigError(strf("SPCM_THREADS='%s' is not a positive integer", env));
    return std::size_t(n);
  }
  return flag_value < 1 ? 1 : flag_value;
}

// index-ordered results stay deterministic regardless of scheduling
void run_parallel(std::size_t workers, std::size_t n,
                  const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::vector<std::string> test_videos(const DatasetManifest& manifest) {
  if (!manifest.split_test.empty()) return manifest.split_test;
  throw DataError("dataset has no test split");
}

void emit(const nlohmann::json& j) { std::cout << j.dump() << "\n"; }

int cmd_gen(const fs::path& config, const fs::path& out) {
  RunConfig rc = load_run_config(config);
  fs::create_directories(out);
  DatasetManifest manifest = emit_dataset(rc.data, out);
  save_run_config(out / "run_config.json", rc);
  emit({{"command", "gen"},
        {"out", out.string()},
        {"videos", manifest.videos.size()},
        {"observers", manifest.observers.size()},
        {"modalities", manifest.modalities}});
  return 0;
}

int cmd_train(const fs::path& config, const fs::path& data, const fs::path& out) {
  RunConfig rc = load_run_config(config);
  fs::create_directories(out);
  DatasetView view(data, rc.model.height, rc.model.width);
  ScanpathModel model = ScanpathModel::build(rc.model);
  Trainer trainer(view, model, rc.train);
  TrainResult result = trainer.run(out);
  save_run_config(out / "run_config.json", rc);
  emit({{"command", "train"},
        {"out", out.string()},
        {"epochs_run", result.epochs_run},
        {"best_epoch", result.best_epoch},
        {"best_val", result.best_val}});
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data, const std::string& protocol,
             const fs::path& out, std::size_t workers) {
  if (protocol != "1v1" && protocol != "1vinf")
    throw ConfigError(strf("unknown protocol '%s', want 1v1 or 1vinf", protocol.c_str()));
  nlohmann::json meta;
  ScanpathModel model = ScanpathModel::load_checkpoint(checkpoint, &meta);
  DatasetView view(data, model.cfg.height, model.cfg.width);
  const std::vector<std::string> videos = test_videos(view.manifest());
  const std::vector<ObserverId>& observers = view.manifest().observers;

  std::vector<std::vector<EvalRecord>> per_observer(observers.size());
  run_parallel(resolve_workers(workers), observers.size(), [&](std::size_t i) {
    per_observer[i] = protocol == "1v1"
                          ? evaluate_1v1(model, view, observers[i], videos)
                          : evaluate_1vinf(model, view, observers[i], videos);
  });
  std::vector<EvalRecord> records;
  for (const auto& part : per_observer)
    records.insert(records.end(), part.begin(), part.end());

  fs::create_directories(out);
  save_records(out / "records.jsonl", records);
  AggTable by_observer = aggregate(records, {"observer"});
  save_table_csv(out / "by_observer.csv", by_observer);
  AggTable overall = aggregate(records, {});
  save_table_csv(out / "overall.csv", overall);
  {
    std::ofstream f(out / "eval_meta.json", std::ios::trunc);
    f << nlohmann::json{{"checkpoint", checkpoint.string()},
                        {"data", data.string()},
                        {"protocol", protocol},
                        {"videos", videos},
                        {"model", model_config_to_json(model.cfg)},
                        {"checkpoint_meta", meta}}
             .dump(2)
      << "\n";
  }
  nlohmann::json summary{{"command", "eval"},
                         {"protocol", protocol},
                         {"records", records.size()},
                         {"excluded", overall.excluded}};
  for (const AggRow& row : overall.rows) summary[row.metric + "_mean"] = row.mean;
  emit(summary);
  return 0;
}

int cmd_rollout(const fs::path& checkpoint, const fs::path& data, std::size_t steps,
                const fs::path& out, std::size_t workers) {
  nlohmann::json meta;
  ScanpathModel model = ScanpathModel::load_checkpoint(checkpoint, &meta);
  DatasetView view(data, model.cfg.height, model.cfg.width);
  RolloutConfig rc;
  rc.steps_ahead = steps;
  rc.context = model.cfg.context;
  rc.variant = model.cfg.variant;
  rc.observers = view.manifest().observers;
  rc.videos = test_videos(view.manifest());
  rc.validate();

  StepPredictor predictor = model_step_predictor(model, view);
  std::vector<std::pair<ObserverId, std::string>> tasks;
  for (const ObserverId& obs : rc.observers)
    for (const std::string& video : rc.videos) tasks.emplace_back(obs, video);
  std::vector<std::vector<EvalRecord>> per_task(tasks.size());
  run_parallel(resolve_workers(workers), tasks.size(), [&](std::size_t i) {
    std::vector<EvalRecord>& sink = per_task[i];
    for (std::size_t start :
         eval_points(view.sub_frames(tasks[i].second), rc.context, rc.steps_ahead))
      for (RolloutStep& rs : run_rollout(predictor, view, tasks[i].first, tasks[i].second,
                                         start, rc.context, rc.steps_ahead, rc.cheat))
        sink.insert(sink.end(), rs.records.begin(), rs.records.end());
  });
  std::vector<EvalRecord> records;
  for (const auto& part : per_task) records.insert(records.end(), part.begin(), part.end());
  if (records.empty()) throw DataError("rollout: no eval points fit any video");

  fs::create_directories(out);
  save_records(out / "rollout_records.jsonl", records);
  std::vector<DegradationRow> report = degradation_report(records);
  save_degradation_csv(out / "degradation.csv", report);
  {
    std::ofstream f(out / "rollout_meta.json", std::ios::trunc);
    f << nlohmann::json{{"checkpoint", checkpoint.string()},
                        {"data", data.string()},
                        {"steps_ahead", steps},
                        {"videos", rc.videos},
                        {"model", model_config_to_json(model.cfg)},
                        {"checkpoint_meta", meta}}
             .dump(2)
      << "\n";
  }
  nlohmann::json summary{{"command", "rollout"}, {"steps", steps}, {"records", records.size()}};
  for (const DegradationRow& row : report) {
    summary["aucj_step_" + std::to_string(row.step)] = row.aucj_mean;
    summary["nss_step_" + std::to_string(row.step)] = row.nss_mean;
  }
  emit(summary);
  return 0;
}

// every non-empty subset, smaller subsets first, lexicographic within a size
std::vector<std::vector<std::string>> cue_subsets(const std::vector<std::string>& cues) {
  std::vector<std::vector<std::string>> out;
  const std::size_t n = cues.size();
  for (std::size_t mask = 1; mask < (std::size_t(1) << n); ++mask) {
    std::vector<std::string> subset;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (std::size_t(1) << i)) subset.push_back(cues[i]);
    out.push_back(subset);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.size() != b.size()) return a.size() < b.size();
    return a < b;
  });
  return out;
}

std::string subset_key(const std::vector<std::string>& subset) {
  std::string key;
  for (const std::string& cue : subset) {
    if (!key.empty()) key += "+";
    key += cue;
  }
  return key;
}

int cmd_ablate(const fs::path& config, const std::string& cues_flag, const fs::path& data_flag,
               const fs::path& out) {
  RunConfig rc = load_run_config(config);
  fs::create_directories(out);

  std::vector<std::string> pool;
  if (!cues_flag.empty()) {
    std::stringstream ss(cues_flag);
    std::string item;
    while (std::getline(ss, item, ',' ))
      if (!item.empty()) pool.push_back(item);
  } else {
    for (const std::string& m : rc.model.modalities)
      if (m != "history") pool.push_back(m);
  }
  if (pool.empty()) throw ConfigError("ablate: no cues to ablate");
  for (const std::string& cue : pool)
    if (cue == "history")
      throw ConfigError("ablate: the fixation history is always on and cannot be ablated");

  fs::path data = data_flag;
  if (data.empty()) {
    data = out / "dataset";
    fs::create_directories(data);
    emit_dataset(rc.data, data);
  }

  save_run_config(out / "run_config.json", rc);
  std::ofstream table(out / "ablation.csv", std::ios::trunc);
  if (!table) throw IoError("ablation.csv: cannot open for writing");
  table << "cues,n_cues,metric,mean,std,n\n";

  nlohmann::json summary{{"command", "ablate"}, {"out", out.string()}};
  nlohmann::json rows = nlohmann::json::array();
  for (const std::vector<std::string>& subset : cue_subsets(pool)) {
    const std::string key = subset_key(subset);
    ModelConfig mc = rc.model;
    mc.modalities = subset;
    mc.modalities.push_back("history");
    mc.validate();

    const fs::path subset_dir = out / key;
    fs::create_directories(subset_dir);
    DatasetView view(data, mc.height, mc.width);
    ScanpathModel model = ScanpathModel::build(mc);
    Trainer trainer(view, model, rc.train);
    trainer.run(subset_dir);

    std::vector<EvalRecord> records;
    for (const ObserverId& obs : view.manifest().observers) {
      std::vector<EvalRecord> part =
          evaluate_1v1(model, view, obs, test_videos(view.manifest()));
      records.insert(records.end(), part.begin(), part.end());
    }
    save_records(subset_dir / "records.jsonl", records);
    AggTable agg = aggregate(records, {});
    for (const AggRow& row : agg.rows) {
      table << key << "," << subset.size() << "," << row.metric << ","
            << strf("%.6f", row.mean) << "," << strf("%.6f", row.stddev) << "," << row.n
            << "\n";
      if (row.metric == "aucj")
        rows.push_back({{"cues", key}, {"n_cues", subset.size()}, {"aucj_mean", row.mean}});
    }
  }
  summary["subsets"] = rows;
  emit(summary);
  return 0;
}

int cmd_verify(const std::string& level) {
  if (level != "grad" && level != "oracle" && level != "all")
    throw ConfigError(strf("unknown verify level '%s', want grad, oracle or all", level.c_str()));
  std::vector<VerifyCheck> checks;
  if (level == "grad" || level == "all")
    for (VerifyCheck& c : verify_grad()) checks.push_back(std::move(c));
  if (level == "oracle" || level == "all")
    for (VerifyCheck& c : verify_oracle()) checks.push_back(std::move(c));
  for (const VerifyCheck& c : checks)
    std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << ": " << c.detail << "\n";
  const bool ok = verify_ok(checks);
  std::cout << (ok ? "verification passed" : "verification FAILED") << " (" << checks.size()
            << " checks)\n";
  return ok ? 0 : 1;
}

int error_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const ShapeError*>(&e) || dynamic_cast<const DataError*>(&e)) return 3;
  if (dynamic_cast<const IoError*>(&e)) return 4;
  return 1;
}

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const DataError*>(&e)) return "data";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  return "internal";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"social scanpath prediction workbench"};
  app.require_subcommand(1);

  std::string config, checkpoint, data, out, protocol = "1v1", cues, level = "all";
  std::size_t steps = 5, workers = 1;
  int rc = 0;

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--config", config, "run config JSON")->required();
  gen->add_option("--out", out, "output dataset directory")->required();
  gen->callback([&] { rc = cmd_gen(config, out); });

  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config, "run config JSON")->required();
  train->add_option("--data", data, "dataset directory")->required();
  train->add_option("--out", out, "output directory for checkpoint and log")->required();
  train->callback([&] { rc = cmd_train(config, data, out); });

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval->add_option("--checkpoint", checkpoint, "checkpoint prefix (without .spcm)")->required();
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--protocol", protocol, "1v1 or 1vinf");
  eval->add_option("--out", out, "output directory")->required();
  eval->add_option("--workers", workers, "worker threads (default 1, deterministic)");
  eval->callback([&] { rc = cmd_eval(checkpoint, data, protocol, out, workers); });

  CLI::App* rollout = app.add_subcommand("rollout", "autoregressive multi-step evaluation");
  rollout->add_option("--checkpoint", checkpoint, "checkpoint prefix")->required();
  rollout->add_option("--data", data, "dataset directory")->required();
  rollout->add_option("--steps", steps, "steps ahead (default 5)");
  rollout->add_option("--out", out, "output directory")->required();
  rollout->add_option("--workers", workers, "worker threads (default 1, deterministic)");
  rollout->callback([&] { rc = cmd_rollout(checkpoint, data, steps, out, workers); });

  CLI::App* ablate = app.add_subcommand("ablate", "train and evaluate every cue subset");
  ablate->add_option("--config", config, "run config JSON")->required();
  ablate->add_option("--cues", cues, "comma-separated cue pool (default: all model cues)");
  ablate->add_option("--data", data, "existing dataset directory (default: generate)");
  ablate->add_option("--out", out, "output directory")->required();
  ablate->callback([&] { rc = cmd_ablate(config, cues, data, out); });

  CLI::App* verify = app.add_subcommand("verify", "run the self-verification suite");
  verify->add_option("--level", level, "grad, oracle or all");
  verify->callback([&] { rc = cmd_verify(level); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << nlohmann::json{{"error", "usage"}, {"message", e.what()}}.dump() << std::endl;
    return 64;
  } catch (const Error& e) {
    std::cerr << nlohmann::json{{"error", error_kind(e)}, {"message", e.what()}}.dump()
              << std::endl;
    return error_code(e);
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump()
              << std::endl;
    return 1;
  }
  return rc;
}
