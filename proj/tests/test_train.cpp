#include <unistd.h>

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>

#include "spcm/synthgen.hpp"
#include "spcm/train.hpp"

using namespace spcm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() / strf("spcm_tr_%s_%d", tag, int(getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

GenConfig tiny_config() {
  GenConfig cfg;
  cfg.seed = 77;
  cfg.videos = 4;
  cfg.frames = 20;
  cfg.actors = 2;
  cfg.observers = 3;
  cfg.height = 32;
  cfg.width = 32;
  cfg.cue_dropout = 0.0;
  cfg.geometry = {100.0, 20.0, 1.0, 1.0, 32, 32};
  return cfg;
}

struct Fixture {
  fs::path dir;
  DatasetManifest manifest;
  DatasetView view;
  Fixture(const char* tag, std::size_t model_res = 12)
      : dir(temp_dir(tag)),
        manifest(emit_dataset(tiny_config(), dir)),
        view(dir, model_res, model_res) {}
};

ModelConfig tiny_model(const std::string& variant = "argmu") {
  ModelConfig mc;
  mc.variant = variant;
  mc.modalities = {"saliency", "history"};
  mc.context = 3;
  mc.height = 12;
  mc.width = 12;
  mc.init_seed = 5;
  return mc;
}

TrainConfig tiny_train() {
  TrainConfig tc;
  tc.batch = 4;
  tc.accumulation = 2;
  tc.epochs = 3;
  tc.seed = 9;
  return tc;
}

PriorityMap mass_map(std::vector<double> v, std::size_t H, std::size_t W) {
  Tensor t({1, H, W}, std::move(v));
  return {normalize_sum(t), MapKind::density};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::string strip_wall(std::string s) {
  return std::regex_replace(s, std::regex("\"wall_ms\":\\d+"), "\"wall_ms\":0");
}

}  // namespace

TEST_CASE("config validation rejects bad settings") {
  TrainConfig tc;
  tc.observer = "obs00";
  tc.sampling = "individual";
  REQUIRE_NOTHROW(tc.validate());
  tc.sampling = "mixed";
  REQUIRE_THROWS_AS(tc.validate(), DataError);
  tc.sampling = "individual";
  tc.observer.clear();
  REQUIRE_THROWS_AS(tc.validate(), DataError);
  tc.sampling = "unified";
  tc.overlap = 1.0;
  REQUIRE_THROWS_AS(tc.validate(), DataError);
  tc.overlap = 0.9;
  tc.accumulation = 100;
  REQUIRE_THROWS_AS(tc.validate(), DataError);
  tc.accumulation = 4;
  tc.weights.dam = 0.0;
  REQUIRE_THROWS_AS(tc.validate(), DataError);
}

TEST_CASE("nll loss reproduces the uniform-map value") {
  LossWeights w;
  PriorityMap pred{Tensor::full({1, 2, 2}, 0.5), MapKind::prediction};
  FixationPoint fix{0, 0, "o", 0};
  const double term = std::log(0.5) + 3.0 * (1.0 - std::log(0.5));
  REQUIRE(loss_nll(pred, fix, w) == Catch::Approx(-w.nll * term).epsilon(1e-12));
  REQUIRE(loss_nll(pred, fix, w) == Catch::Approx(-0.13158883).margin(1e-7));
}

TEST_CASE("nll gradient is -lambda/p at the fixation and +lambda/p elsewhere") {
  LossWeights w;
  ParamStore store;
  Parameter& p = store.constant("pred", {1, 3, 3}, 0.0);
  for (std::size_t i = 0; i < 9; ++i) p.value[i] = 0.1 + 0.08 * double(i);
  FixationPoint fix{1, 2, "o", 0};
  Tape tape;
  Value loss = loss_nll_graph(tape, tape.param(p), fix, w.nll);
  tape.backward(loss);
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 3; ++x) {
      const double v = p.value.at3(0, y, x);
      const double expect = (x == fix.x && y == fix.y) ? -w.nll / v : w.nll / v;
      REQUIRE(p.grad.at3(0, y, x) == Catch::Approx(expect).epsilon(1e-10));
    }
}

TEST_CASE("nll rejects non-finite predictions") {
  LossWeights w;
  Tape tape;
  Tensor bad = Tensor::full({1, 2, 2}, 0.5);
  bad[3] = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(loss_nll_graph(tape, tape.leaf(bad), {0, 0, "o", 0}, w.nll), Error);
}

TEST_CASE("kld loss is zero at equality and matches its two halves") {
  LossWeights w;
  PriorityMap gt = mass_map({3, 1, 2, 2}, 2, 2);
  REQUIRE(loss_kld(gt, gt, w) == 0.0);

  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> a(16), b(16);
    for (auto& v : a) v = rng.uniform(0.01, 1.0);
    for (auto& v : b) v = rng.uniform(0.01, 1.0);
    PriorityMap pm = mass_map(a, 4, 4), gm = mass_map(b, 4, 4);
    auto [lp, lm] = loss_kld_parts(pm.grid, gm.grid);
    REQUIRE(lp >= -1e-9);  // forward half stays a divergence
    REQUIRE(loss_kld(pm, gm, w) == Catch::Approx(w.kld * (lp + lm)).margin(1e-12));
  }
}

TEST_CASE("kld forward half of the two-pixel case is log 2") {
  PriorityMap gt = mass_map({1, 0}, 1, 2);
  PriorityMap pred = mass_map({1, 1}, 1, 2);
  auto [lp, lm] = loss_kld_parts(pred.grid, gt.grid);
  REQUIRE(lp == Catch::Approx(std::log(2.0)).margin(1e-9));
  (void)lm;
}

TEST_CASE("kld rejects unnormalized inputs") {
  LossWeights w;
  PriorityMap gt = mass_map({1, 1}, 1, 2);
  PriorityMap bad{Tensor::full({1, 1, 2}, 0.6), MapKind::prediction};
  REQUIRE_THROWS_AS(loss_kld(bad, gt, w), DataError);
  REQUIRE_THROWS_AS(loss_kld(gt, bad, w), DataError);
}

TEST_CASE("total loss is additive in its components") {
  LossWeights w;
  REQUIRE(total_loss(0, 0, 0, w) == 0.0);
  REQUIRE(total_loss(0.25, 1.5, 2.0, w) == 0.25 + 1.5 + w.dam * 2.0);
}

TEST_CASE("sample grid honors the overlap stride and split bounds") {
  Fixture fx("grid");
  auto grid = sample_grid(fx.view, fx.manifest.split_train, 4, 0.5);
  REQUIRE(!grid.empty());
  std::map<std::string, std::vector<std::size_t>> per_video;
  for (const auto& [vid, t] : grid) per_video[vid].push_back(t);
  REQUIRE(per_video.size() == fx.manifest.split_train.size());
  for (const auto& [vid, ts] : per_video) {
    REQUIRE(ts.front() == 4);
    REQUIRE(ts.back() < fx.view.sub_frames(vid));
    for (std::size_t i = 1; i < ts.size(); ++i) REQUIRE(ts[i] - ts[i - 1] == 2);
  }
  // 90% overlap of a length-4 window keeps unit stride
  auto dense = sample_grid(fx.view, fx.manifest.split_train, 4, 0.9);
  REQUIRE(dense.size() > grid.size());
  REQUIRE_THROWS_AS(sample_grid(fx.view, {}, 4, 0.9), DataError);
  REQUIRE_THROWS_AS(sample_grid(fx.view, fx.manifest.split_train, 100, 0.9), DataError);
}

TEST_CASE("individual sampling pins the observer, unified stays uniform") {
  Fixture fx("sampling");
  auto grid = sample_grid(fx.view, fx.manifest.split_train, 3, 0.9);

  Rng rng(41);
  for (int i = 0; i < 50; ++i) {
    SampleRef ref = sample_individual(grid, fx.manifest, "obs01", rng);
    REQUIRE(ref.observer == "obs01");
    REQUIRE(ref.t_end >= 3);
  }
  REQUIRE_THROWS_AS(sample_individual(grid, fx.manifest, "ghost", rng), DataError);

  std::map<ObserverId, std::size_t> counts;
  Rng u(42);
  const std::size_t draws = 10000;
  for (std::size_t i = 0; i < draws; ++i) ++counts[sample_unified(grid, fx.manifest, u).observer];
  REQUIRE(counts.size() == 3);
  const double expect = double(draws) / 3.0;
  double chi2 = 0;
  for (const auto& [obs, n] : counts) chi2 += (double(n) - expect) * (double(n) - expect) / expect;
  REQUIRE(chi2 < 16.0);  // df=2, far beyond the 0.1% tail would flag bias

  // deterministic under a fixed seed
  Rng a(7), b(7);
  for (int i = 0; i < 20; ++i) {
    SampleRef ra = sample_unified(grid, fx.manifest, a);
    SampleRef rb = sample_unified(grid, fx.manifest, b);
    REQUIRE(ra.video == rb.video);
    REQUIRE(ra.t_end == rb.t_end);
    REQUIRE(ra.observer == rb.observer);
  }
}

TEST_CASE("per-sample graph feeds both parameter groups") {
  Fixture fx("groups");
  ScanpathModel model = ScanpathModel::build(tiny_model());
  TrainSample sample = load_sample(fx.view, {"v000", 5, "obs00"}, model.cfg);
  REQUIRE(sample.dam_targets.size() == 3);

  LossBreakdown lb = apply_sample(model, sample, LossWeights{}, 1.0);
  REQUIRE(std::isfinite(lb.total));
  REQUIRE(lb.total == Catch::Approx(lb.nll + lb.kld + lb.dam).margin(1e-12));
  double dam_norm = 0, integ_norm = 0;
  for (Parameter* p : model.dam_group())
    for (double g : p->grad.data) dam_norm += g * g;
  for (Parameter* p : model.integrator_group())
    for (double g : p->grad.data) integ_norm += g * g;
  REQUIRE(dam_norm > 0.0);
  REQUIRE(integ_norm > 0.0);

  for (Parameter* p : model.all_params()) p->zero_grad();
  LossBreakdown quiet = eval_sample(model, sample, LossWeights{});
  REQUIRE(quiet.total == Catch::Approx(lb.total).margin(1e-12));
  for (Parameter* p : model.all_params())
    for (double g : p->grad.data) REQUIRE(g == 0.0);
}

TEST_CASE("early stopper tolerates slow starts and halts on a plateau") {
  EarlyStopper s(1e-4, 3);
  REQUIRE(!s.update(5.0));   // first value always counts as improvement
  REQUIRE(!s.update(4.0));
  REQUIRE(!s.update(4.0));      // streak 1
  REQUIRE(!s.update(3.99995));  // below delta_min, streak 2
  REQUIRE(s.update(3.99993));   // streak 3 -> stop
  REQUIRE(s.best() == 4.0);

  EarlyStopper frozen(1e-4, 3);
  std::size_t epochs = 0;
  while (!frozen.update(1.25)) ++epochs;
  REQUIRE(epochs + 1 == 4);  // patience + 1 evaluations in total
}

TEST_CASE("training strictly reduces the loss on a pinned sample set") {
  Fixture fx("descent");
  ScanpathModel model = ScanpathModel::build(tiny_model());
  TrainConfig tc = tiny_train();
  Trainer trainer(fx.view, model, tc);

  double first = 0, last = 0;
  for (int i = 0; i < 3; ++i) first += trainer.train_step().total;
  for (int i = 0; i < 20; ++i) trainer.train_step();
  for (int i = 0; i < 3; ++i) last += trainer.train_step().total;
  REQUIRE(std::isfinite(last));
  REQUIRE(last < first);
}

TEST_CASE("train loop logs epochs, checkpoints the best model, and reloads bitwise") {
  Fixture fx("loop");
  ScanpathModel model = ScanpathModel::build(tiny_model());
  TrainConfig tc = tiny_train();
  fs::path out = temp_dir("loop_out");
  Trainer trainer(fx.view, model, tc);
  TrainResult result = trainer.run(out);

  REQUIRE(result.epochs_run >= 1);
  REQUIRE(result.best_epoch >= 1);
  REQUIRE(fs::exists(out / "best.spcm"));
  REQUIRE(fs::exists(out / "best.json"));
  REQUIRE(fs::exists(out / "train_log.jsonl"));

  std::ifstream log(out / "train_log.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    REQUIRE(j.at("epoch").get<std::size_t>() >= 1);
    std::string split = j.at("split").get<std::string>();
    REQUIRE((split == "train" || split == "val"));
    REQUIRE(std::isfinite(j.at("loss").get<double>()));
    for (const char* k : {"nll", "kld", "dam", "wall_ms"}) REQUIRE(j.contains(k));
    ++lines;
  }
  REQUIRE(lines == 2 * result.epochs_run);

  nlohmann::json meta;
  ScanpathModel loaded = ScanpathModel::load_checkpoint(out / "best", &meta);
  REQUIRE(meta.at("val_loss").get<double>() == result.best_val);
  Trainer probe(fx.view, loaded, tc);
  LossBreakdown revalidated = probe.eval_split(fx.manifest.split_val);
  REQUIRE(revalidated.total == result.best_val);
}

TEST_CASE("a vanishing learning rate freezes validation and trips early stop") {
  Fixture fx("freeze");
  ScanpathModel model = ScanpathModel::build(tiny_model());
  TrainConfig tc = tiny_train();
  tc.alpha = 1e-30;  // rounds away at storage precision, so val never moves
  tc.epochs = 20;
  Trainer trainer(fx.view, model, tc);
  TrainResult result = trainer.run(temp_dir("freeze_out"));
  REQUIRE(result.epochs_run == tc.patience + 1);
}

TEST_CASE("same seed reproduces the training log and checkpoint byte for byte") {
  Fixture fx("repro");
  TrainConfig tc = tiny_train();
  tc.epochs = 2;

  fs::path out_a = temp_dir("repro_a"), out_b = temp_dir("repro_b");
  ScanpathModel ma = ScanpathModel::build(tiny_model());
  Trainer(fx.view, ma, tc).run(out_a);
  ScanpathModel mb = ScanpathModel::build(tiny_model());
  Trainer(fx.view, mb, tc).run(out_b);

  REQUIRE(strip_wall(slurp(out_a / "train_log.jsonl")) ==
          strip_wall(slurp(out_b / "train_log.jsonl")));
  REQUIRE(slurp(out_a / "best.spcm") == slurp(out_b / "best.spcm"));

  TrainConfig other = tc;
  other.seed = 1234;
  fs::path out_c = temp_dir("repro_c");
  ScanpathModel mc = ScanpathModel::build(tiny_model());
  Trainer(fx.view, mc, other).run(out_c);
  REQUIRE(strip_wall(slurp(out_a / "train_log.jsonl")) !=
          strip_wall(slurp(out_c / "train_log.jsonl")));
}
