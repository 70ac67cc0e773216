#include <catch2/catch_amalgamated.hpp>

#include <spcm/config.hpp>
#include <spcm/metrics.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>

#ifndef SPCM_CLI_PATH
#error "SPCM_CLI_PATH must point at the spcm binary"
#endif

using namespace spcm;
using nlohmann::json;

namespace {

namespace fs = std::filesystem;

struct CmdResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

CmdResult run_cli(const std::string& args, const std::string& env = "") {
  static int serial = 0;
  const fs::path out = fs::temp_directory_path() / ("spcm_cli_out_" + std::to_string(serial));
  const fs::path err = fs::temp_directory_path() / ("spcm_cli_err_" + std::to_string(serial));
  ++serial;
  const std::string cmd = env + (env.empty() ? "" : " ") + SPCM_CLI_PATH + " " + args + " > " +
                          out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  CmdResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  fs::remove(out);
  fs::remove(err);
  return r;
}

struct Workspace {
  fs::path dir;
  fs::path config;

  Workspace() {
    dir = fs::temp_directory_path() /
          ("spcm_cli_" + std::to_string(std::rand()) + std::to_string(::getpid()));
    fs::create_directories(dir);
    const json doc = {
        {"seed", 7},
        {"data",
         {{"videos", 4}, {"frames", 24}, {"actors", 2}, {"observers", 3}, {"width", 32},
          {"height", 32}, {"cue_dropout", 0.0}}},
        {"model",
         {{"variant", "argmu"}, {"modalities", {"saliency", "history"}}, {"context", 3},
          {"height", 12}, {"width", 12}}},
        {"train", {{"epochs", 1}, {"batch", 4}, {"accumulation", 1}}},
        {"eval", {{"steps_ahead", 2}}}};
    config = dir / "run.json";
    std::ofstream(config) << doc.dump(2);
  }
  ~Workspace() { fs::remove_all(dir); }

  std::string path(const char* name) const { return (dir / name).string(); }
};

// the shared fixture runs the full pipeline once; cases below inspect the outputs
const Workspace& pipeline() {
  static Workspace ws;
  static bool done = false;
  if (!done) {
    done = true;
    REQUIRE(run_cli("gen --config " + ws.config.string() + " --out " + ws.path("data")).code ==
            0);
    REQUIRE(run_cli("train --config " + ws.config.string() + " --data " + ws.path("data") +
                    " --out " + ws.path("run"))
                .code == 0);
  }
  return ws;
}

std::string strip_wall(std::string s) {
  return std::regex_replace(s, std::regex("\"wall_ms\":[0-9]+"), "\"wall_ms\":0");
}

}  // namespace

TEST_CASE("gen writes a dataset plus the resolved config") {
  const Workspace& ws = pipeline();
  CHECK(fs::exists(ws.dir / "data" / "manifest.json"));
  CHECK(fs::exists(ws.dir / "data" / "v000_saliency.spcm"));
  const RunConfig rc = load_run_config(ws.dir / "data" / "run_config.json");
  CHECK(rc.data.videos == 4);
  CHECK(rc.seed == 7);

  json summary = json::parse(run_cli("gen --config " + ws.config.string() + " --out " +
                                     ws.path("data2"))
                                 .out);
  CHECK(summary.at("videos") == 4);
  CHECK(summary.at("observers") == 3);
}

TEST_CASE("train writes checkpoint, log and config") {
  const Workspace& ws = pipeline();
  CHECK(fs::exists(ws.dir / "run" / "best.spcm"));
  CHECK(fs::exists(ws.dir / "run" / "best.json"));
  CHECK(fs::exists(ws.dir / "run" / "run_config.json"));
  const std::string log = slurp(ws.dir / "run" / "train_log.jsonl");
  CHECK(log.find("\"split\":\"val\"") != std::string::npos);
}

TEST_CASE("eval produces records and tables for both protocols") {
  const Workspace& ws = pipeline();
  for (const std::string proto : {"1v1", "1vinf"}) {
    const std::string out = ws.path(("eval_" + proto).c_str());
    const CmdResult r = run_cli("eval --checkpoint " + ws.path("run/best") + " --data " +
                                ws.path("data") + " --out " + out + " --protocol " + proto);
    REQUIRE(r.code == 0);
    const json summary = json::parse(r.out);
    CHECK(summary.at("protocol") == proto);
    CHECK(summary.at("records").get<int>() > 0);
    const auto records = load_records(fs::path(out) / "records.jsonl");
    CHECK(records.size() == summary.at("records").get<std::size_t>());
    CHECK(slurp(fs::path(out) / "overall.csv").rfind("metric,mean,std,n", 0) == 0);
    CHECK(slurp(fs::path(out) / "by_observer.csv").rfind("observer,metric", 0) == 0);
    const json meta = json::parse(slurp(fs::path(out) / "eval_meta.json"));
    CHECK(meta.at("protocol") == proto);
  }
  CHECK(run_cli("eval --checkpoint " + ws.path("run/best") + " --data " + ws.path("data") +
                " --out " + ws.path("evx") + " --protocol bogus")
            .code == 2);
}

TEST_CASE("rollout reports per-step degradation") {
  const Workspace& ws = pipeline();
  const CmdResult r = run_cli("rollout --checkpoint " + ws.path("run/best") + " --data " +
                              ws.path("data") + " --out " + ws.path("roll") + " --steps 2");
  REQUIRE(r.code == 0);
  const std::string csv = slurp(ws.dir / "roll" / "degradation.csv");
  CHECK(csv.rfind("metric,step_0,step_1", 0) == 0);
  const auto records = load_records(ws.dir / "roll" / "rollout_records.jsonl");
  std::size_t max_step = 0;
  for (const auto& rec : records) max_step = std::max(max_step, rec.step_ahead);
  CHECK(max_step == 1);
  const json summary = json::parse(r.out);
  CHECK(summary.contains("aucj_step_0"));
  CHECK(summary.contains("aucj_step_1"));
}

TEST_CASE("ablate trains one model per cue subset") {
  const Workspace& ws = pipeline();
  const CmdResult r = run_cli("ablate --config " + ws.config.string() + " --data " +
                              ws.path("data") + " --out " + ws.path("abl") +
                              " --cues saliency,gaze");
  REQUIRE(r.code == 0);
  const json summary = json::parse(r.out);
  REQUIRE(summary.at("subsets").size() == 3);
  CHECK(summary.at("subsets")[0].at("cues") == "gaze");
  CHECK(summary.at("subsets")[1].at("cues") == "saliency");
  CHECK(summary.at("subsets")[2].at("cues") == "saliency+gaze");
  for (const char* key : {"gaze", "saliency", "saliency+gaze"})
    CHECK(fs::exists(ws.dir / "abl" / key / "records.jsonl"));
  const std::string csv = slurp(ws.dir / "abl" / "ablation.csv");
  CHECK(csv.rfind("cues,n_cues,metric", 0) == 0);

  CHECK(run_cli("ablate --config " + ws.config.string() + " --data " + ws.path("data") +
                " --out " + ws.path("ablh") + " --cues history")
            .code == 2);
}

TEST_CASE("verify level oracle passes") {
  const CmdResult r = run_cli("verify --level oracle");
  CHECK(r.code == 0);
  CHECK(r.out.find("[PASS]") != std::string::npos);
  CHECK(r.out.find("[FAIL]") == std::string::npos);
  CHECK(run_cli("verify --level bogus").code == 2);
}

TEST_CASE("same config and seed reproduce training byte for byte") {
  const Workspace& ws = pipeline();
  REQUIRE(run_cli("train --config " + ws.config.string() + " --data " + ws.path("data") +
                  " --out " + ws.path("run_b"))
              .code == 0);
  CHECK(strip_wall(slurp(ws.dir / "run" / "train_log.jsonl")) ==
        strip_wall(slurp(ws.dir / "run_b" / "train_log.jsonl")));
  CHECK(slurp(ws.dir / "run" / "best.spcm") == slurp(ws.dir / "run_b" / "best.spcm"));

  const std::string ev = "eval --checkpoint " + ws.path("run/best") + " --data " +
                         ws.path("data") + " --protocol 1v1 --out ";
  REQUIRE(run_cli(ev + ws.path("det_a")).code == 0);
  REQUIRE(run_cli(ev + ws.path("det_b"), "SPCM_THREADS=3").code == 0);
  CHECK(slurp(ws.dir / "det_a" / "records.jsonl") == slurp(ws.dir / "det_b" / "records.jsonl"));
  CHECK(slurp(ws.dir / "det_a" / "overall.csv") == slurp(ws.dir / "det_b" / "overall.csv"));
}

TEST_CASE("errors surface as machine-readable JSON with mapped exit codes") {
  const Workspace& ws = pipeline();

  const fs::path bad = ws.dir / "bad.json";
  std::ofstream(bad) << R"({"sede": 1})";
  CmdResult r = run_cli("gen --config " + bad.string() + " --out " + ws.path("bad_out"));
  CHECK(r.code == 2);
  json err = json::parse(r.err);
  CHECK(err.at("error") == "config");
  CHECK(err.at("message").get<std::string>().find("sede") != std::string::npos);

  r = run_cli("eval --checkpoint " + ws.path("nope") + " --data " + ws.path("data") +
              " --out " + ws.path("nope_out"));
  CHECK(r.code == 4);
  CHECK(json::parse(r.err).at("error") == "io");

  r = run_cli("frobnicate");
  CHECK(r.code == 64);
  CHECK(json::parse(r.err).at("error") == "usage");

  r = run_cli("verify --level oracle", "SPCM_THREADS=0");
  CHECK(r.code == 0);  // verify has no worker pool, env is ignored
  r = run_cli("eval --checkpoint " + ws.path("run/best") + " --data " + ws.path("data") +
                  " --out " + ws.path("thr_out"),
              "SPCM_THREADS=zero");
  CHECK(r.code == 2);
  CHECK(json::parse(r.err).at("error") == "config");
}
