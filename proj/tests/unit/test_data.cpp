#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "odseg/data.hpp"
#include "support/components.hpp"
#include "support/tempdir.hpp"

using namespace odseg;
using odseg::testing::TempDir;

namespace {

std::array<long, 3> ext(const Grid& g) { return {static_cast<long>(g[0]), static_cast<long>(g[1]), static_cast<long>(g[2])}; }

Volume random_volume(Index channels, const Grid& e, std::uint64_t seed, float lo = -2.0f, float hi = 3.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Volume v = Volume::zeros(channels, e);
  for (auto& x : v.values) x = u(rng);
  return v;
}

LabelMask random_mask(const Grid& e, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LabelMask m = LabelMask::zeros(e);
  for (auto& l : m.labels) l = static_cast<std::uint8_t>(rng() % 4);
  return m;
}

std::map<std::uint8_t, Index> histogram(const LabelMask& m) {
  std::map<std::uint8_t, Index> h;
  for (auto l : m.labels) ++h[l];
  return h;
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& b) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_CASE("phantom generation is deterministic per seed") {
  PhantomSpec spec;
  spec.seed = 11;
  const auto [v1, m1] = generate_phantom(spec);
  const auto [v2, m2] = generate_phantom(spec);
  REQUIRE(v1.values.size() == v2.values.size());
  CHECK(std::memcmp(v1.values.data(), v2.values.data(), v1.values.size() * sizeof(float)) == 0);
  CHECK(m1.labels == m2.labels);
  spec.seed = 12;
  const auto [v3, m3] = generate_phantom(spec);
  CHECK(v3.values != v1.values);
  CHECK(v1.channels == 4);
  CHECK(v1.extents == spec.extents);
}

TEST_CASE("phantom regions nest: every necrotic component reaches enhancing tumor") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    PhantomSpec spec;
    spec.seed = seed;
    const auto [v, m] = generate_phantom(spec);
    m.validate();
    std::vector<std::uint8_t> tc(m.labels.size()), wt(m.labels.size());
    Index ne = 0, et = 0, ed = 0;
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
      tc[i] = m.labels[i] == kNecrosis || m.labels[i] == kEnhancing;
      wt[i] = m.labels[i] != kBackground;
      ne += m.labels[i] == kNecrosis;
      et += m.labels[i] == kEnhancing;
      ed += m.labels[i] == kEdema;
    }
    CHECK(et > 0);
    CHECK(ed > 0);
    int tc_count = 0, wt_count = 0;
    const auto tc_id = odseg::testing::union_find_components(tc, ext(m.extents), 26, &tc_count);
    const auto wt_id = odseg::testing::union_find_components(wt, ext(m.extents), 26, &wt_count);
    CHECK(wt_count >= 1);
    CHECK(wt_count <= 3);
    std::set<int> with_et, with_ne;
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
      if (m.labels[i] == kEnhancing) with_et.insert(tc_id[i]);
      if (m.labels[i] == kNecrosis) with_ne.insert(tc_id[i]);
    }
    for (int c : with_ne) CHECK(with_et.count(c) == 1);
    // Each lesion is edema around a core: every core component lies in a
    // whole-tumor component that also holds edema.
    std::set<int> wt_with_ed;
    for (std::size_t i = 0; i < m.labels.size(); ++i)
      if (m.labels[i] == kEdema) wt_with_ed.insert(wt_id[i]);
    for (std::size_t i = 0; i < m.labels.size(); ++i)
      if (tc[i]) CHECK(wt_with_ed.count(wt_id[i]) == 1);

    // Zero outside the head, non-zero inside every lesion.
    const auto fg = nonzero_mask(v);
    for (std::size_t i = 0; i < m.labels.size(); ++i)
      if (wt[i]) REQUIRE(fg.bits[i] == 1);
    CHECK(fg.count() < v.voxels());
  }
}

TEST_CASE("enhancing tumor is brightest on the T1C-like channel") {
  double et_sum = 0, ed_sum = 0;
  Index et_n = 0, ed_n = 0;
  int per_seed_ok = 0;
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    PhantomSpec spec;
    spec.seed = seed;
    const auto [v, m] = generate_phantom(spec);
    double s_et = 0, s_ed = 0;
    Index n_et = 0, n_ed = 0;
    const float* t1c = v.channel(1);
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
      if (m.labels[i] == kEnhancing) s_et += t1c[i], ++n_et;
      if (m.labels[i] == kEdema) s_ed += t1c[i], ++n_ed;
    }
    per_seed_ok += n_et > 0 && n_ed > 0 && s_et / n_et > s_ed / n_ed;
    et_sum += s_et, et_n += n_et, ed_sum += s_ed, ed_n += n_ed;
  }
  CHECK(per_seed_ok == 20);
  CHECK(et_sum / et_n > ed_sum / ed_n);
}

TEST_CASE("phantom spec validation") {
  PhantomSpec spec;
  spec.extents = {16, 16, 16};
  CHECK_THROWS_AS(generate_phantom(spec), ConfigError);
  spec = PhantomSpec{};
  spec.edema_radius = {9.0, 5.0};
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = PhantomSpec{};
  spec.core_fraction = {0.9, 0.95};
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = PhantomSpec{};
  spec.max_tumors = 4;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = PhantomSpec{};
  spec.mean.push_back({1.0, 1.0, 1.0, 1.0});
  const auto [v, m] = generate_phantom(spec);
  CHECK(v.channels == 5);
}

TEST_CASE("zscore normalisation") {
  const Grid e{6, 7, 8};
  BinaryMask all = BinaryMask::zeros(e);
  std::fill(all.bits.begin(), all.bits.end(), 1);

  SUBCASE("statistics on a random volume") {
    const auto v = random_volume(3, e, 1, 5.0f, 9.0f);
    const auto out = zscore_normalize(v, all);
    for (Index c = 0; c < 3; ++c) {
      double s = 0, sq = 0;
      for (Index i = 0; i < out.voxels(); ++i) s += out.channel(c)[i];
      const double mu = s / out.voxels();
      for (Index i = 0; i < out.voxels(); ++i) sq += (out.channel(c)[i] - mu) * (out.channel(c)[i] - mu);
      CHECK(std::abs(mu) <= 1e-5);
      CHECK(std::abs(std::sqrt(sq / out.voxels()) - 1.0) <= 1e-4);
    }
  }
  SUBCASE("normalised input is unchanged") {
    const auto once = zscore_normalize(random_volume(2, e, 2), all);
    const auto twice = zscore_normalize(once, all);
    for (std::size_t i = 0; i < once.values.size(); ++i) CHECK(std::abs(twice.values[i] - once.values[i]) <= 1e-6f);
  }
  SUBCASE("constant channel maps to zero") {
    Volume v = Volume::zeros(1, e);
    std::fill(v.values.begin(), v.values.end(), 4.25f);
    const auto out = zscore_normalize(v, all);
    for (float x : out.values) CHECK(x == 0.0f);
  }
  SUBCASE("statistics come from the foreground only") {
    Volume v = Volume::zeros(1, e);
    BinaryMask fg = BinaryMask::zeros(e);
    for (Index i = 0; i < v.voxels(); ++i) {
      fg.bits[i] = i % 2;
      v.values[i] = fg.bits[i] ? (i % 4 == 1 ? 1.0f : 3.0f) : 100.0f;
    }
    const auto out = zscore_normalize(v, fg);
    for (Index i = 0; i < v.voxels(); ++i) {
      const float want = fg.bits[i] ? (i % 4 == 1 ? -1.0f : 1.0f) : 98.0f;
      CHECK(out.values[i] == doctest::Approx(want).epsilon(1e-6));
    }
  }
  SUBCASE("empty foreground") {
    CHECK_THROWS_AS(zscore_normalize(random_volume(1, e, 3), BinaryMask::zeros(e)), ValueError);
    CHECK_THROWS_AS(zscore_normalize(random_volume(1, e, 3), BinaryMask::zeros({2, 2, 2})), ShapeError);
  }
}

TEST_CASE("augment with every probability zero is the identity") {
  const Grid e{7, 9, 8};
  const auto v = random_volume(2, e, 5);
  const auto m = random_mask(e, 6);
  std::mt19937_64 rng(1);
  const auto [av, am] = augment(v, m, AugmentConfig::none(), rng);
  CHECK(av.values == v.values);
  CHECK(am.labels == m.labels);
  CHECK(av.extents == e);
}

TEST_CASE("flip is an involution and preserves the label histogram") {
  const Grid e{5, 6, 7};
  const auto v = random_volume(2, e, 7);
  const auto m = random_mask(e, 8);
  for (int axis = 0; axis < 3; ++axis) {
    CHECK(flip(flip(v, axis), axis).values == v.values);
    CHECK(flip(flip(m, axis), axis).labels == m.labels);
    CHECK(flip(v, axis).values != v.values);
  }
  CHECK(flip(v, 0).at(1, 0, 2, 3) == v.at(1, 4, 2, 3));
  CHECK(flip(v, 2).at(0, 1, 2, 0) == v.at(0, 1, 2, 6));
  CHECK_THROWS_AS(flip(v, 3), ValueError);

  AugmentConfig cfg = AugmentConfig::none();
  cfg.p_flip = 0.5;
  std::mt19937_64 rng(9);
  const auto before = histogram(m);
  std::set<std::vector<std::uint8_t>> seen;
  for (int i = 0; i < 100; ++i) {
    const auto [av, am] = augment(v, m, cfg, rng);
    CHECK(histogram(am) == before);
    seen.insert(am.labels);
  }
  CHECK(seen.size() == 8);
}

TEST_CASE("unit zoom with nearest resampling leaves the mask unchanged") {
  const Grid e{8, 8, 8};
  const auto v = random_volume(1, e, 10);
  const auto m = random_mask(e, 11);
  AugmentConfig cfg = AugmentConfig::none();
  cfg.p_zoom = 1.0;
  cfg.zoom_range = {1.0, 1.0};
  std::mt19937_64 rng(3);
  const auto [av, am] = augment(v, m, cfg, rng);
  CHECK(am.labels == m.labels);
  CHECK(av.values == v.values);
}

TEST_CASE("zoom resamples within the source range and never adds labels") {
  const Grid e{12, 12, 12};
  const auto v = random_volume(2, e, 12);
  LabelMask m = LabelMask::zeros(e);
  for (Index z = 3; z < 8; ++z)
    for (Index y = 3; y < 8; ++y)
      for (Index x = 3; x < 8; ++x) m.at(z, y, x) = z < 5 ? kEdema : kEnhancing;
  AugmentConfig cfg = AugmentConfig::none();
  cfg.p_zoom = 1.0;
  std::mt19937_64 rng(4);
  const auto [lo, hi] = std::minmax_element(v.values.begin(), v.values.end());
  for (int i = 0; i < 20; ++i) {
    const auto [av, am] = augment(v, m, cfg, rng);
    for (float x : av.values) {
      CHECK(x >= *lo - 1e-5f);
      CHECK(x <= *hi + 1e-5f);
    }
    for (auto l : am.labels) CHECK((l == kBackground || l == kEdema || l == kEnhancing));
  }
}

TEST_CASE("spatial augmentation keeps volume and mask registered") {
  // Channel 0 tags each voxel with its source index.
  const Grid e{10, 11, 12};
  Volume v = Volume::zeros(2, e);
  for (Index i = 0; i < v.voxels(); ++i) v.values[i] = static_cast<float>(i);
  const auto m = random_mask(e, 13);
  AugmentConfig cfg = AugmentConfig::none();
  cfg.crop_size = {6, 7, 5};
  cfg.p_crop = 1.0;
  cfg.p_flip = 0.5;
  std::mt19937_64 rng(14);
  std::set<std::vector<float>> distinct;
  for (int draw = 0; draw < 200; ++draw) {
    const auto [av, am] = augment(v, m, cfg, rng);
    REQUIRE(av.extents == cfg.crop_size);
    for (Index i = 0; i < am.voxels(); ++i) {
      const auto src = static_cast<std::size_t>(av.channel(0)[i]);
      REQUIRE(src < m.labels.size());
      CHECK(am.labels[i] == m.labels[src]);
    }
    distinct.insert(std::vector<float>(av.values.begin(), av.values.begin() + av.voxels()));
  }
  CHECK(distinct.size() > 50);
}

TEST_CASE("full augmentation keeps labels, extents and determinism") {
  PhantomSpec spec;
  spec.seed = 3;
  const auto [v, m] = generate_phantom(spec);
  AugmentConfig cfg;
  cfg.crop_size = {32, 32, 32};
  cfg.p_zoom = cfg.p_noise = cfg.p_blur = cfg.p_brightness = cfg.p_contrast = 0.5;
  std::set<std::uint8_t> source(m.labels.begin(), m.labels.end());
  std::mt19937_64 a(21), b(21);
  for (int i = 0; i < 20; ++i) {
    const auto [av, am] = augment(v, m, cfg, a);
    const auto [bv, bm] = augment(v, m, cfg, b);
    CHECK(av.values == bv.values);
    CHECK(am.labels == bm.labels);
    CHECK(av.extents == cfg.crop_size);
    av.validate();
    for (auto l : am.labels) CHECK(source.count(l) == 1);
  }
}

TEST_CASE("intensity transforms") {
  const Grid e{6, 6, 6};
  Volume v = Volume::zeros(1, e);
  std::fill(v.values.begin(), v.values.end(), 2.0f);
  const auto m = random_mask(e, 1);
  std::mt19937_64 rng(2);

  AugmentConfig blur = AugmentConfig::none();
  blur.p_blur = 1.0;
  for (float x : augment(v, m, blur, rng).first.values) CHECK(x == doctest::Approx(2.0).epsilon(1e-6));

  AugmentConfig contrast = AugmentConfig::none();
  contrast.p_contrast = 1.0;
  for (float x : augment(v, m, contrast, rng).first.values) CHECK(x == doctest::Approx(2.0).epsilon(1e-6));

  AugmentConfig bright = AugmentConfig::none();
  bright.p_brightness = 1.0;
  const auto shifted = augment(v, m, bright, rng);
  CHECK(std::abs(shifted.first.values[0] - 2.0f) <= 0.2f + 1e-6f);
  for (float x : shifted.first.values) CHECK(x == shifted.first.values[0]);
  CHECK(shifted.second.labels == m.labels);

  AugmentConfig noise = AugmentConfig::none();
  noise.p_noise = 1.0;
  const auto noisy = augment(v, m, noise, rng).first;
  double sq = 0;
  for (float x : noisy.values) sq += (x - 2.0) * (x - 2.0);
  CHECK(std::sqrt(sq / noisy.values.size()) <= 0.1 * 1.3);
}

TEST_CASE("augment rejects bad configuration") {
  const Grid e{6, 6, 6};
  const auto v = random_volume(1, e, 1);
  const auto m = random_mask(e, 2);
  std::mt19937_64 rng(0);
  AugmentConfig cfg = AugmentConfig::none();
  cfg.crop_size = {7, 6, 6};
  CHECK_THROWS_AS(augment(v, m, cfg, rng), ShapeError);
  cfg = AugmentConfig::none();
  cfg.crop_size = {4, 0, 4};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AugmentConfig::none();
  cfg.p_flip = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AugmentConfig::none();
  cfg.zoom_range = {0.5, 1.0};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AugmentConfig::none();
  cfg.noise_max_sigma = 0.2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AugmentConfig::none();
  cfg.blur_sigma = {0.5, 2.0};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AugmentConfig::none();
  cfg.contrast_range = {1.2, 1.1};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_NOTHROW(AugmentConfig{}.validate());
}

TEST_CASE("patch sampling") {
  const Grid e{10, 12, 14};
  const auto v = random_volume(2, e, 30);
  std::mt19937_64 rng(31);

  SUBCASE("whole-volume patch") {
    const auto m = random_mask(e, 32);
    const auto d = sample_patch(v, m, e, rng, 0.5);
    CHECK(d.volume.values == v.values);
    CHECK(d.mask.labels == m.labels);
  }
  SUBCASE("single tumor voxel is always inside with bias 1") {
    for (const Grid at : {Grid{0, 0, 0}, Grid{9, 11, 13}, Grid{5, 2, 12}}) {
      LabelMask m = LabelMask::zeros(e);
      m.at(at[0], at[1], at[2]) = kEnhancing;
      for (int i = 0; i < 200; ++i) {
        const auto d = sample_patch(v, m, {4, 5, 6}, rng, 1.0);
        CHECK(d.foreground_centered);
        Index count = 0;
        for (auto l : d.mask.labels) count += l == kEnhancing;
        CHECK(count == 1);
        for (int k = 0; k < 3; ++k) {
          CHECK(d.origin[k] <= at[k]);
          CHECK(at[k] < d.origin[k] + Grid{4, 5, 6}[k]);
        }
      }
    }
  }
  SUBCASE("foreground-centred fraction tracks the bias") {
    const auto m = random_mask(e, 33);
    for (double bias : {0.0, 0.33, 0.5, 0.8, 1.0}) {
      int hits = 0;
      for (int i = 0; i < 1000; ++i) hits += sample_patch(v, m, {4, 4, 4}, rng, bias).foreground_centered;
      CHECK(std::abs(hits / 1000.0 - bias) <= 0.05);
    }
  }
  SUBCASE("no tumor falls back to uniform") {
    const auto m = LabelMask::zeros(e);
    const auto d = sample_patch(v, m, {3, 3, 3}, rng, 1.0);
    CHECK_FALSE(d.foreground_centered);
  }
  SUBCASE("patch content matches the origin") {
    const auto m = random_mask(e, 34);
    for (int i = 0; i < 50; ++i) {
      const auto d = sample_patch(v, m, {3, 4, 5}, rng, 0.5);
      for (int k = 0; k < 3; ++k) CHECK(d.origin[k] + Grid{3, 4, 5}[k] <= e[k]);
      CHECK(d.volume.at(1, 2, 3, 4) == v.at(1, d.origin[0] + 2, d.origin[1] + 3, d.origin[2] + 4));
      CHECK(d.mask.at(2, 1, 0) == m.at(d.origin[0] + 2, d.origin[1] + 1, d.origin[2]));
    }
  }
  SUBCASE("errors") {
    const auto m = random_mask(e, 35);
    CHECK_THROWS_AS(sample_patch(v, m, {11, 4, 4}, rng, 0.5), ShapeError);
    CHECK_THROWS_AS(sample_patch(v, m, {4, 4, 4}, rng, 1.5), ConfigError);
  }
  SUBCASE("training draw has patch extents") {
    const auto m = random_mask(e, 36);
    AugmentConfig cfg;
    for (int i = 0; i < 10; ++i) {
      const auto [pv, pm] = draw_training_patch(v, m, {8, 8, 8}, 4, cfg, 0.5, rng);
      CHECK(pv.extents == Grid{8, 8, 8});
      CHECK(pm.extents == Grid{8, 8, 8});
    }
  }
}

TEST_CASE("ODSV round trip is bit-exact") {
  TempDir dir;
  Volume v = random_volume(3, {4, 5, 6}, 40);
  v.spacing = {1.0f, 0.5f, 2.25f};
  v.values[7] = -0.0f;
  v.values[8] = std::numeric_limits<float>::denorm_min();
  save_volume(v, dir.file("v.odsv"));
  const auto back = load_volume(dir.file("v.odsv"));
  CHECK(back.channels == 3);
  CHECK(back.extents == v.extents);
  CHECK(back.spacing == v.spacing);
  REQUIRE(back.values.size() == v.values.size());
  CHECK(std::memcmp(back.values.data(), v.values.data(), v.values.size() * sizeof(float)) == 0);

  LabelMask m = random_mask({3, 2, 5}, 41);
  m.spacing = {0.9f, 0.9f, 3.0f};
  save_mask(m, dir.file("m.odsv"));
  const auto mb = load_mask(dir.file("m.odsv"));
  CHECK(mb.labels == m.labels);
  CHECK(mb.extents == m.extents);
  CHECK(mb.spacing == m.spacing);

  // Header layout: magic, version, dtype, ndim, extents, spacing, payload.
  const auto bytes = read_bytes(dir.file("m.odsv"));
  REQUIRE(bytes.size() == 4 + 4 + 1 + 1 + 3 * 4 + 3 * 4 + 30);
  CHECK(std::memcmp(bytes.data(), "ODSV", 4) == 0);
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 1);
  CHECK(bytes[9] == 3);
  CHECK(bytes[10] == 3);
}

TEST_CASE("ODSV reader rejects malformed files") {
  TempDir dir;
  const Volume v = random_volume(1, {3, 3, 3}, 50);
  save_volume(v, dir.file("ok.odsv"));
  const auto good = read_bytes(dir.file("ok.odsv"));
  const auto expect_format_error = [&](std::vector<std::uint8_t> bytes, const char* name) {
    write_bytes(dir.file(name), bytes);
    CHECK_THROWS_AS(load_volume(dir.file(name)), FormatError);
  };
  auto b = good;
  b[0] = 'X';
  expect_format_error(b, "magic.odsv");
  b = good;
  b[4] = 2;
  expect_format_error(b, "version.odsv");
  b = good;
  b[8] = 9;
  expect_format_error(b, "dtype.odsv");
  b = good;
  b.resize(b.size() - 3);
  expect_format_error(b, "short.odsv");
  b = good;
  b.push_back(0);
  expect_format_error(b, "long.odsv");
  b = good;
  b.resize(12);
  expect_format_error(b, "header.odsv");
  b = good;
  for (int i = 10; i < 14; ++i) b[i] = 0xFF;  // channels = 2^32 - 1
  expect_format_error(b, "huge.odsv");
  b = good;
  b[9] = 3;
  expect_format_error(b, "rank.odsv");
  b = good;
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(b.data() + b.size() - 4, &nan, 4);
  expect_format_error(b, "nan.odsv");

  CHECK_THROWS_AS(load_mask(dir.file("ok.odsv")), FormatError);
  CHECK_THROWS_AS(load_volume(dir.file("missing.odsv")), FormatError);

  LabelMask m = LabelMask::zeros({2, 2, 2});
  save_mask(m, dir.file("m.odsv"));
  CHECK_THROWS_AS(load_volume(dir.file("m.odsv")), FormatError);
  auto mb = read_bytes(dir.file("m.odsv"));
  mb.back() = 7;
  write_bytes(dir.file("bad_label.odsv"), mb);
  CHECK_THROWS_AS(load_mask(dir.file("bad_label.odsv")), FormatError);
}
