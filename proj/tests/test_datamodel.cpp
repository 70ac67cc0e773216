#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "spcm/datamodel.hpp"
#include "spcm/rng.hpp"

using namespace spcm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() / strf("spcm_dm_%s_%d", tag, int(getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// straight trig, kept separate from the library formula on purpose
double ppd_oracle(double dist_cm, double diag_inch, double aw, double ah, double px_w) {
  const double width_cm = diag_inch * 2.54 * aw / std::hypot(aw, ah);
  const double one_degree_cm = 2.0 * dist_cm * std::tan(0.5 * M_PI / 180.0);
  return px_w / width_cm * one_degree_cm;
}

}  // namespace

TEST_CASE("pixels_per_degree matches hand trig on reference geometries") {
  ViewingGeometry mvva{55.0, 23.0, 16.0, 9.0, 1280, 720};
  ViewingGeometry findwho{60.0, 23.8, 16.0, 9.0, 1280, 720};
  CHECK(pixels_per_degree(mvva) == Catch::Approx(24.13).margin(0.05));
  CHECK(pixels_per_degree(findwho) == Catch::Approx(25.44).margin(0.05));
  CHECK(pixels_per_degree(mvva) ==
        Catch::Approx(ppd_oracle(55.0, 23.0, 16.0, 9.0, 1280.0)).epsilon(1e-12));
  CHECK(pixels_per_degree(findwho) ==
        Catch::Approx(ppd_oracle(60.0, 23.8, 16.0, 9.0, 1280.0)).epsilon(1e-12));
}

TEST_CASE("pixels_per_degree doubles with distance in the small-angle limit") {
  ViewingGeometry near{55.0, 23.0, 16.0, 9.0, 1280, 720};
  ViewingGeometry far = near;
  far.distance_cm = 110.0;
  const double ratio = pixels_per_degree(far) / pixels_per_degree(near);
  CHECK(std::fabs(ratio - 2.0) < 0.002);
}

TEST_CASE("viewing geometry validation") {
  ViewingGeometry g{55.0, 23.0, 16.0, 9.0, 1280, 720};
  CHECK_NOTHROW(g.validate());
  ViewingGeometry zero = g;
  zero.distance_cm = 0.0;
  CHECK_THROWS_AS(zero.validate(), Error);
  ViewingGeometry mismatch = g;
  mismatch.pixels_h = 1000;  // 1280x1000 is not 16:9
  CHECK_THROWS_AS(mismatch.validate(), Error);
}

TEST_CASE("blur_fixation peak, symmetry, falloff") {
  FixationPoint c{4, 4, "o", 0};
  PriorityMap m = blur_fixation(c, 9, 9, 2.0);
  m.validate();
  CHECK(m.grid.at3(0, 4, 4) == 1.0);
  CHECK(m.grid.max() == 1.0);
  for (std::size_t y = 0; y < 9; ++y)
    for (std::size_t x = 0; x < 9; ++x) {
      CHECK(m.grid.at3(0, y, x) == m.grid.at3(0, 8 - y, x));
      CHECK(m.grid.at3(0, y, x) == m.grid.at3(0, y, 8 - x));
      CHECK(m.grid.at3(0, y, x) == m.grid.at3(0, x, y));
    }
  CHECK(m.grid.at3(0, 4, 6) == Catch::Approx(std::exp(-0.5)).epsilon(1e-12));
  CHECK(m.grid.at3(0, 6, 4) == Catch::Approx(std::exp(-0.5)).epsilon(1e-12));

  PriorityMap sharp = blur_fixation(c, 9, 9, 0.5);
  CHECK(sharp.grid.at3(0, 4, 7) < 1e-6);  // 3 px = 6 sigma
}

TEST_CASE("blur_fixation rejects bad inputs") {
  CHECK_THROWS_AS(blur_fixation({9, 0, "o", 0}, 9, 9, 1.0), Error);
  CHECK_THROWS_AS(blur_fixation({0, 9, "o", 0}, 9, 9, 1.0), Error);
  CHECK_THROWS_AS(blur_fixation({0, 0, "o", 0}, 9, 9, 0.0), Error);
  CHECK_THROWS_AS(blur_fixation({0, 0, "o", 0}, 9, 9, -1.0), Error);
}

TEST_CASE("blur_fixation is translation-equivariant") {
  PriorityMap a = blur_fixation({5, 6, "o", 0}, 16, 16, 1.5);
  PriorityMap b = blur_fixation({7, 9, "o", 0}, 16, 16, 1.5);
  // shift (dx,dy) = (2,3); compare where both maps are defined
  for (std::size_t y = 0; y + 3 < 16; ++y)
    for (std::size_t x = 0; x + 2 < 16; ++x)
      CHECK(a.grid.at3(0, y, x) == b.grid.at3(0, y + 3, x + 2));
}

TEST_CASE("density_from_group normalization and maxima") {
  FixationPoint p{3, 3, "o", 0};
  PriorityMap one = density_from_group({p}, 16, 16, 1.0);
  one.validate();
  CHECK(one.grid.sum() == Catch::Approx(1.0).margin(1e-12));

  PriorityMap blob = blur_fixation(p, 16, 16, 1.0);
  Tensor expect = normalize_sum(blob.grid);
  for (std::size_t i = 0; i < expect.numel(); ++i)
    CHECK(one.grid[i] == Catch::Approx(expect[i]).margin(1e-15));

  PriorityMap twice = density_from_group({p, p}, 16, 16, 1.0);
  for (std::size_t i = 0; i < expect.numel(); ++i)
    CHECK(twice.grid[i] == Catch::Approx(one.grid[i]).margin(1e-12));

  PriorityMap two = density_from_group({{3, 3, "a", 0}, {12, 12, "b", 0}}, 16, 16, 1.0);
  std::size_t maxima = 0;
  for (std::size_t y = 1; y < 15; ++y)
    for (std::size_t x = 1; x < 15; ++x) {
      const double v = two.grid.at3(0, y, x);
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          if (two.grid.at3(0, y + dy, x + dx) >= v) {
            is_max = false;
            break;
          }
        }
      if (is_max) ++maxima;
    }
  CHECK(maxima == 2);
  CHECK(two.grid.at3(0, 3, 3) == Catch::Approx(two.grid.at3(0, 12, 12)).epsilon(1e-12));
}

TEST_CASE("density mass is 1 for any point multiset") {
  Rng rng(77);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<FixationPoint> pts;
    const std::size_t n = 1 + rng.uniform_int(10);
    for (std::size_t i = 0; i < n; ++i)
      pts.push_back({rng.uniform_int(20), rng.uniform_int(12), "o", i});
    PriorityMap d = density_from_group(pts, 12, 20, 0.5 + rng.uniform(0.0, 3.0));
    CHECK(std::fabs(d.grid.sum() - 1.0) <= 1e-9);
  }
  CHECK_THROWS_AS(density_from_group({}, 8, 8, 1.0), Error);
}

TEST_CASE("priority map validation") {
  PriorityMap bad_rank{Tensor({2, 4, 4}), MapKind::prediction};
  CHECK_THROWS_AS(bad_rank.validate(), ShapeError);

  PriorityMap neg{Tensor({1, 2, 2}), MapKind::prediction};
  neg.grid[1] = -0.1;
  CHECK_THROWS_AS(neg.validate(), Error);

  PriorityMap density{Tensor::full({1, 2, 2}, 0.3), MapKind::density};
  CHECK_THROWS_AS(density.validate(), Error);
  density.grid = Tensor::full({1, 2, 2}, 0.25);
  CHECK_NOTHROW(density.validate());
}

TEST_CASE("cue order is fixed") {
  const auto& order = cue_order();
  REQUIRE(order.size() == 3);
  CHECK(order[0] == "saliency");
  CHECK(order[1] == "gaze");
  CHECK(order[2] == "expression");
}

TEST_CASE("manifest round-trip and validation") {
  fs::path dir = temp_dir("manifest");
  DatasetManifest m;
  m.geometry = {55.0, 23.0, 16.0, 9.0, 1280, 720};
  m.modalities = cue_order();
  m.observers = {"obs00", "obs01"};
  for (int i = 0; i < 3; ++i) {
    VideoEntry v;
    v.id = strf("v%03d", i);
    v.frame_count = 12;
    v.fps = 10.0;
    for (const auto& mod : m.modalities) v.cue_files[mod] = v.id + "_" + mod + ".spcm";
    v.fixation_file = v.id + "_fixations.json";
    m.videos.push_back(v);
  }
  m.split_train = {"v000", "v001"};
  m.split_val = {};
  m.split_test = {"v002"};
  CHECK_NOTHROW(m.validate());

  save_manifest(dir / "manifest.json", m);
  DatasetManifest r = load_manifest(dir / "manifest.json");
  CHECK(r.observers == m.observers);
  CHECK(r.modalities == m.modalities);
  CHECK(r.split_train == m.split_train);
  CHECK(r.split_test == m.split_test);
  REQUIRE(r.videos.size() == 3);
  CHECK(r.videos[1].cue_files == m.videos[1].cue_files);
  CHECK(r.geometry.pixels_w == 1280);
  CHECK(pixels_per_degree(r.geometry) == Catch::Approx(pixels_per_degree(m.geometry)));

  DatasetManifest overlap = m;
  overlap.split_val = {"v002"};
  CHECK_THROWS_AS(overlap.validate(), DataError);

  DatasetManifest ghost = m;
  ghost.split_train.push_back("v999");
  CHECK_THROWS_AS(ghost.validate(), DataError);

  DatasetManifest missing_cue = m;
  missing_cue.videos[0].cue_files.erase("gaze");
  CHECK_THROWS_AS(missing_cue.validate(), DataError);

  CHECK_THROWS_AS(m.video("nope"), DataError);
  CHECK_THROWS_AS(load_manifest(dir / "absent.json"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("fixation table round-trip and validation") {
  fs::path dir = temp_dir("fix");
  FixationTable table;
  for (std::size_t t = 0; t < 5; ++t) {
    table["obsA"].push_back({t, t + 1, "obsA", t});
    table["obsB"].push_back({2 * t, 3, "obsB", t});
  }
  save_fixations(dir / "f.json", "v000", table);
  FixationTable r = load_fixations(dir / "f.json", "v000", 5, 16, 16);
  REQUIRE(r.size() == 2);
  REQUIRE(r["obsA"].size() == 5);
  CHECK(r["obsA"][3].x == 3);
  CHECK(r["obsA"][3].y == 4);
  CHECK(r["obsA"][3].frame == 3);
  CHECK(r["obsB"][4].x == 8);

  CHECK_THROWS_AS(load_fixations(dir / "f.json", "v001", 5, 16, 16), DataError);
  CHECK_THROWS_AS(load_fixations(dir / "f.json", "v000", 6, 16, 16), DataError);
  CHECK_THROWS_AS(load_fixations(dir / "f.json", "v000", 5, 16, 8), DataError);
  fs::remove_all(dir);
}

TEST_CASE("cue window slicing") {
  CueWindow w;
  w.maps = Tensor({2, 3, 1, 2, 2});
  for (std::size_t i = 0; i < w.maps.numel(); ++i) w.maps[i] = double(i);
  w.modalities = cue_order();
  CHECK(w.context() == 2);
  Tensor s = w.step_map(1, 2);
  REQUIRE(s.shape == std::vector<std::size_t>({1, 2, 2}));
  CHECK(s[0] == double((1 * 3 + 2) * 4));
  CHECK(s[3] == double((1 * 3 + 2) * 4 + 3));
  CHECK_THROWS_AS(w.step_map(2, 0), ShapeError);
  CHECK_THROWS_AS(w.step_map(0, 3), ShapeError);
}
