#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "spcm/container.hpp"
#include "spcm/rng.hpp"
#include "spcm/tensor.hpp"

using namespace spcm;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
  fs::path dir = fs::temp_directory_path() / "spcm_tensor_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(s.data(), std::streamsize(s.size()));
}

}  // namespace

TEST_CASE("tensor shape validation") {
  CHECK_NOTHROW(Tensor({1}));
  CHECK_NOTHROW(Tensor({2, 3, 4, 5, 6}));
  CHECK_THROWS_AS(Tensor(std::vector<std::size_t>{}), ShapeError);
  CHECK_THROWS_AS(Tensor({1, 2, 3, 4, 5, 6}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST_CASE("tensor views and reductions") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.at2(1, 2) == 6.0);
  CHECK(t.sum() == 21.0);
  CHECK(t.max() == 6.0);
  CHECK(t.min() == 1.0);
  t.at2(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(t.check_finite("test"), Error);
}

TEST_CASE("area_resample keeps constants constant") {
  for (auto [ih, iw, oh, ow] : {std::array<std::size_t, 4>{4, 4, 2, 2},
                                {5, 7, 3, 2},
                                {24, 24, 24, 24},
                                {64, 64, 24, 24},
                                {3, 3, 5, 5}}) {
    Tensor src = Tensor::full({1, ih, iw}, 0.375);
    Tensor dst = area_resample(src, oh, ow);
    REQUIRE(dst.shape == std::vector<std::size_t>({1, oh, ow}));
    for (double v : dst.data) CHECK(v == Catch::Approx(0.375).margin(1e-12));
  }
}

TEST_CASE("area_resample 2x downscale equals window means") {
  Tensor src({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) src[i] = double(i);
  Tensor dst = area_resample(src, 2, 2);
  CHECK(dst.at3(0, 0, 0) == Catch::Approx((0 + 1 + 4 + 5) / 4.0));
  CHECK(dst.at3(0, 0, 1) == Catch::Approx((2 + 3 + 6 + 7) / 4.0));
  CHECK(dst.at3(0, 1, 0) == Catch::Approx((8 + 9 + 12 + 13) / 4.0));
  CHECK(dst.at3(0, 1, 1) == Catch::Approx((10 + 11 + 14 + 15) / 4.0));
  CHECK(avgpool2(src).data == dst.data);
  CHECK_THROWS_AS(avgpool2(Tensor({1, 3, 4})), ShapeError);
}

TEST_CASE("area_resample conserves total mass up to cell area") {
  Rng rng(7);
  Tensor src({1, 10, 14});
  for (double& v : src.data) v = rng.uniform();
  Tensor dst = area_resample(src, 6, 5);
  // mean value is preserved exactly for full-coverage box filters
  CHECK(dst.sum() / dst.numel() == Catch::Approx(src.sum() / src.numel()).epsilon(1e-12));
}

TEST_CASE("normalizers") {
  Tensor t({1, 2, 2}, {1, 1, 1, 1});
  CHECK(normalize_sum(t).sum() == Catch::Approx(1.0));
  CHECK(normalize_peak(Tensor({1, 2, 2}, {0.5, 2.0, 1.0, 0.0})).max() == 1.0);
  Tensor z({1, 2, 2});
  CHECK(normalize_peak(z).sum() == 0.0);  // all-zero stays zero
  CHECK_THROWS_AS(normalize_sum(z), Error);
}

TEST_CASE("container empty round-trip") {
  auto p = temp_file("empty.spcm");
  save_container(p, {});
  CHECK(load_container(p).empty());
}

TEST_CASE("container random round-trips are bit-exact at f32") {
  auto p = temp_file("roundtrip.spcm");
  Rng rng(42);
  for (int iter = 0; iter < 100; ++iter) {
    std::vector<ContainerEntry> entries;
    const std::size_t n_entries = 1 + rng.uniform_int(3);
    for (std::size_t e = 0; e < n_entries; ++e) {
      const std::size_t rank = 1 + rng.uniform_int(5);
      std::vector<std::size_t> shape(rank);
      for (auto& ext : shape) ext = 1 + rng.uniform_int(4);
      Tensor t(shape);
      for (double& v : t.data) v = rng.uniform(-1e3, 1e3);
      entries.push_back({strf("t%d_%zu", iter, e), std::move(t)});
    }
    save_container(p, entries);
    auto loaded = load_container(p);
    REQUIRE(loaded.size() == entries.size());
    for (std::size_t e = 0; e < entries.size(); ++e) {
      CHECK(loaded[e].name == entries[e].name);
      REQUIRE(loaded[e].tensor.shape == entries[e].tensor.shape);
      for (std::size_t i = 0; i < entries[e].tensor.numel(); ++i)
        CHECK(loaded[e].tensor[i] == double(float(entries[e].tensor[i])));
    }
    // second save/load cycle is byte-stable
    auto p2 = temp_file("roundtrip2.spcm");
    save_container(p2, loaded);
    CHECK(slurp(p) == slurp(p2));
  }
}

TEST_CASE("container rejects empty names") {
  auto p = temp_file("badname.spcm");
  CHECK_THROWS_AS(save_container(p, {{"", Tensor({1})}}), IoError);
}

TEST_CASE("container reports truncation with byte counts") {
  auto p = temp_file("trunc.spcm");
  save_container(p, {{"x", Tensor({2, 2}, {1, 2, 3, 4})}});
  std::string bytes = slurp(p);
  spit(p, bytes.substr(0, bytes.size() - 5));
  try {
    load_container(p);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("truncated") != std::string::npos);
    CHECK(msg.find("expected") != std::string::npos);
  }
}

TEST_CASE("container rejects bad magic and version") {
  auto p = temp_file("magic.spcm");
  save_container(p, {{"x", Tensor({1}, {1.0})}});
  std::string bytes = slurp(p);

  std::string bad = bytes;
  bad[0] = 'X';
  spit(p, bad);
  try {
    load_container(p);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("magic") != std::string::npos);
    CHECK(std::string(e.what()).find("byte 0") != std::string::npos);
  }

  bad = bytes;
  bad[4] = 9;
  spit(p, bad);
  try {
    load_container(p);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
    CHECK(std::string(e.what()).find("byte 4") != std::string::npos);
  }
}

TEST_CASE("container rejects trailing bytes") {
  auto p = temp_file("trail.spcm");
  save_container(p, {{"x", Tensor({1}, {1.0})}});
  spit(p, slurp(p) + "zz");
  CHECK_THROWS_AS(load_container(p), IoError);
}

TEST_CASE("rng streams are stable and well-behaved") {
  Rng a(123), b(123), c(124);
  for (int i = 0; i < 100; ++i) {
    const double va = a.uniform();
    CHECK(va == b.uniform());
    CHECK(va >= 0.0);
    CHECK(va < 1.0);
  }
  CHECK(a.uniform() != c.uniform());
  CHECK(stream_key(1, "v000") != stream_key(1, "v001"));
  CHECK(stream_key(1, "v000", "obs0") != stream_key(1, "v000", "obs1"));
  CHECK(stream_key(1, "v000") == stream_key(1, "v000"));

  Rng r(9);
  double mean = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) mean += r.normal();
  mean /= n;
  CHECK(std::fabs(mean) < 0.05);

  Rng cat(11);
  std::vector<int> counts(3, 0);
  for (int i = 0; i < 3000; ++i) ++counts[cat.categorical({1.0, 2.0, 1.0})];
  CHECK(counts[1] > counts[0]);
  CHECK(counts[1] > counts[2]);
  CHECK_THROWS_AS(cat.categorical({0.0, 0.0}), Error);
}
