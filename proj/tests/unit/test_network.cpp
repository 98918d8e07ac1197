#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "odseg/network.hpp"
#include "support/random.hpp"
#include "support/tempdir.hpp"

using namespace odseg;
using odseg::testing::random_tensor;

namespace {

NetworkConfig tiny_config(bool odconv, bool multiscale) {
  NetworkConfig c;
  c.base_features = 2;
  c.num_stages = 3;
  c.use_odconv = odconv;
  c.use_multiscale = multiscale;
  c.odconv.experts = 2;
  c.odconv.reduction = 2;
  c.odconv.temperature = 4.0;
  c.patch_size = {8, 8, 8};
  return c;
}

// Closed-form parameter count, written independently of the network code.
Index block_count(Index ci, Index co, bool dynamic, const ODConvSettings& s) {
  Index n = 2 * co;  // norm affine
  if (!dynamic) return n + co * ci * 27 + co;
  const Index cr = std::max<Index>(1, ci / s.reduction);
  n += s.experts * co * ci * 27;      // expert bank
  n += cr * ci + cr;                  // squeeze
  n += 27 * cr + 27;                  // spatial head
  n += ci * cr + ci;                  // input-channel head
  n += co * cr + co;                  // output-filter head
  n += s.experts * cr + s.experts;    // expert head
  return n + co;                      // output bias
}

Index expected_parameter_count(const NetworkConfig& c) {
  auto feats = [&](int s) { return c.base_features * (Index{1} << s); };
  Index encoder = 0;
  Index prev = c.in_channels;
  for (int s = 0; s < c.num_stages; ++s) {
    encoder += block_count(prev, feats(s), c.use_odconv, c.odconv) + block_count(feats(s), feats(s), c.use_odconv, c.odconv);
    prev = feats(s);
  }
  Index total = encoder;
  if (c.use_multiscale) {
    const Index f = feats(c.num_stages - 1);
    const Index dm = c.attention_dim ? c.attention_dim : f;
    total += encoder + 4 * dm * f * (c.bidirectional_fusion ? 2 : 1);
  }
  for (int s = c.num_stages - 2; s >= 0; --s) {
    const Index deep = feats(s + 1), skip = feats(s);
    total += deep * skip * 8 + skip;
    total += block_count(2 * skip, skip, false, c.odconv) + block_count(skip, skip, false, c.odconv);
  }
  return total + c.num_classes * c.base_features + c.num_classes;
}

std::vector<std::uint8_t> random_labels(Index n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, 3);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n));
  for (auto& l : out) l = static_cast<std::uint8_t>(d(rng));
  return out;
}

// Labels with a blob structure so the toy problem is learnable.
std::vector<std::uint8_t> blob_labels(Index s) {
  std::vector<std::uint8_t> out;
  for (Index z = 0; z < s; ++z)
    for (Index y = 0; y < s; ++y)
      for (Index x = 0; x < s; ++x) {
        const double r = std::hypot(z - s / 2.0 + 0.5, y - s / 2.0 + 0.5, x - s / 2.0 + 0.5);
        out.push_back(static_cast<std::uint8_t>(r < s * 0.15 ? 1 : r < s * 0.25 ? 3 : r < s * 0.4 ? 2 : 0));
      }
  return out;
}

template <typename T>
Tensor<T> input_for(const std::vector<std::uint8_t>& labels, Index s, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 0.3);
  std::vector<T> x(static_cast<std::size_t>(4 * s * s * s));
  const Index n = s * s * s;
  for (Index c = 0; c < 4; ++c)
    for (Index i = 0; i < n; ++i)
      x[static_cast<std::size_t>(c * n + i)] =
          static_cast<T>((labels[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0) + noise(rng));
  return Tensor<T>::from_data({4, s, s, s}, std::move(x));
}

template <typename T>
std::vector<T> flat_params(const Network<T>& net) {
  std::vector<T> out;
  for (const auto& [name, t] : net.parameters()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

std::vector<std::uint8_t> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("build is deterministic and names are unique") {
  const auto cfg = tiny_config(true, true);
  auto a = Network<float>::build(cfg, 11);
  auto b = Network<float>::build(cfg, 11);
  CHECK(flat_params(a) == flat_params(b));
  CHECK(flat_params(a) != flat_params(Network<float>::build(cfg, 12)));

  std::set<std::string> names;
  for (const auto& [name, t] : a.parameters()) {
    CHECK(names.insert(name).second);
    CHECK(t.requires_grad());
  }
}

TEST_CASE("parameter count matches the closed form") {
  for (bool od : {false, true})
    for (bool ms : {false, true})
      for (bool bi : {false, true}) {
        if (bi && !ms) continue;
        auto cfg = tiny_config(od, ms);
        cfg.bidirectional_fusion = bi;
        CHECK(Network<double>::build(cfg, 0).parameter_count() == expected_parameter_count(cfg));
      }
  NetworkConfig desk;  // default desk-scale config
  CHECK(Network<float>::build(desk, 0).parameter_count() == expected_parameter_count(desk));

  // Each ablation flag adds parameters.
  const auto count = [](bool od, bool ms) { return Network<float>::build(tiny_config(od, ms), 0).parameter_count(); };
  CHECK(count(false, false) < count(true, false));
  CHECK(count(false, false) < count(false, true));
  CHECK(count(true, false) < count(true, true));
  CHECK(count(false, true) < count(true, true));
}

TEST_CASE("config validation") {
  auto cfg = tiny_config(true, true);
  cfg.patch_size = {8, 12, 8};
  CHECK_THROWS_AS(Network<float>::build(cfg, 0), ConfigError);
  cfg = tiny_config(true, true);
  cfg.num_classes = 3;
  CHECK_THROWS_AS(Network<float>::build(cfg, 0), ConfigError);

  const auto entries = network_config_entries(tiny_config(true, false));
  const auto back = network_config_from_entries(entries);
  CHECK(network_config_entries(back) == entries);
  CHECK_THROWS_AS(network_config_from_entries({{"network.base_featurs", "3"}}), ConfigError);
}

TEST_CASE("forward shape contract") {
  std::mt19937_64 rng(2);
  for (bool od : {false, true})
    for (bool ms : {false, true}) {
      auto net = Network<float>::build(tiny_config(od, ms), 3);
      NoGradGuard guard;
      for (Index s : {8, 16}) {
        auto y = net.forward(random_tensor<float>({4, s, s, 8}, rng));
        CHECK(y.shape() == Shape{4, s, s, 8});
      }
    }
  auto net = Network<float>::build(tiny_config(true, true), 3);
  CHECK_THROWS_AS(net.forward(Tensor<float>::zeros({3, 8, 8, 8})), ChannelMismatchError);
  CHECK_THROWS_AS(net.forward(Tensor<float>::zeros({4, 8, 12, 8})), ShapeError);
}

TEST_CASE("end-to-end gradient check on a 4x8^3 patch") {
  std::mt19937_64 rng(5);
  for (bool bi : {false, true}) {
    auto cfg = tiny_config(true, true);
    cfg.bidirectional_fusion = bi;
    auto net = Network<double>::build(cfg, 17);
    const auto labels = random_labels(512, rng);
    auto x = random_tensor<double>({4, 8, 8, 8}, rng);
    std::vector<Tensor<double>> inputs{x};
    for (auto& [name, t] : net.parameters()) inputs.push_back(t);
    GradCheckOptions opts;
    opts.samples = 200;
    opts.seed = 9;
    const auto res =
        finite_difference_check([&] { return segmentation_loss(net.forward(x), labels).total; }, inputs, opts);
    CHECK(res.coordinates == 200);
    CHECK(res.max_rel_error <= 1e-3);
  }
}

TEST_CASE("loss") {
  SUBCASE("confident correct logits approach the floor of zero") {
    std::mt19937_64 rng(1);
    const auto labels = random_labels(64, rng);
    std::vector<double> l(4 * 64, 0.0);
    for (Index i = 0; i < 64; ++i) l[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)] * 64 + i)] = 20.0;
    const auto terms = segmentation_loss(Tensor<double>::from_data({4, 4, 4, 4}, l), labels);
    // Per voxel the true class gets p = e^20 / (e^20 + 3).
    const double p = std::exp(20.0) / (std::exp(20.0) + 3.0);
    CHECK(terms.ce_term == doctest::Approx(-std::log(p)).epsilon(1e-9));
    CHECK(terms.total.item() > 0.0);
    CHECK(terms.total.item() < 0.01);
  }
  SUBCASE("uniform logits give ln 4 cross-entropy") {
    const auto terms = segmentation_loss(Tensor<double>::zeros({4, 1, 1, 2}), {0, 2});
    CHECK(terms.ce_term == doctest::Approx(std::log(4.0)).epsilon(1e-14));
    // Dice for class 2: (2 * 0.25 + eps) / (0.5 + 1 + eps); classes 1 and 3: eps / (0.5 + eps).
    const double e = kDiceSmoothing;
    const double dice = ((0.5 + e) / (1.5 + e) + 2 * e / (0.5 + e)) / 3.0;
    CHECK(terms.dice_term == doctest::Approx(1.0 - dice).epsilon(1e-12));
  }
  SUBCASE("joint voxel permutation leaves the loss unchanged") {
    std::mt19937_64 rng(2);
    auto logits = random_tensor<double>({4, 3, 3, 3}, rng, -3, 3);
    auto labels = random_labels(27, rng);
    std::vector<std::size_t> perm(27);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> pl(4 * 27);
    std::vector<std::uint8_t> plab(27);
    for (std::size_t i = 0; i < 27; ++i) {
      plab[i] = labels[perm[i]];
      for (std::size_t c = 0; c < 4; ++c) pl[c * 27 + i] = logits.data()[c * 27 + perm[i]];
    }
    const double a = segmentation_loss(logits, labels).total.item();
    const double b = segmentation_loss(Tensor<double>::from_data({4, 3, 3, 3}, pl), plab).total.item();
    CHECK(a == doctest::Approx(b).epsilon(1e-13));
  }
  SUBCASE("gradient") {
    std::mt19937_64 rng(3);
    auto logits = random_tensor<double>({4, 3, 4, 3}, rng, -2, 2);
    const auto labels = random_labels(36, rng);
    GradCheckOptions opts;
    opts.samples = 144;
    const auto res = finite_difference_check(
        [&](const Tensor<double>& l) { return segmentation_loss(l, labels).total; }, logits, opts);
    CHECK(res.max_rel_error <= 1e-4);
    CHECK(res.median_rel_error <= 1e-5);
  }
  CHECK_THROWS_AS(segmentation_loss(Tensor<double>::zeros({4, 1, 1, 2}), {0, 4}), ValueError);
  CHECK_THROWS_AS(segmentation_loss(Tensor<double>::zeros({4, 1, 1, 2}), {0}), ShapeError);
}

TEST_CASE("poly learning-rate schedule") {
  TrainerConfig cfg;
  cfg.total_steps = 250;
  CHECK(poly_lr(cfg, 0) == 1e-2);
  CHECK(std::abs(poly_lr(cfg, 250)) <= 1e-9);
  CHECK(poly_lr(cfg, 125) == doctest::Approx(1e-2 * std::pow(0.5, 0.9)).epsilon(1e-14));
  for (std::int64_t s = 1; s <= 250; ++s) CHECK(poly_lr(cfg, s) < poly_lr(cfg, s - 1));
}

TEST_CASE("training on a fixed batch lowers the loss") {
  auto net = Network<double>::build(tiny_config(true, true), 4);
  TrainerConfig tc;
  tc.total_steps = 50;
  Trainer<double> trainer(net, tc, 1);
  std::mt19937_64 rng(6);
  const auto labels = blob_labels(8);
  std::vector<TrainingSample<double>> batch{{input_for<double>(labels, 8, rng), labels}};
  std::vector<double> losses;
  for (int i = 0; i < 50; ++i) losses.push_back(trainer.step(batch).loss);
  CHECK(trainer.steps_done() == 50);
  for (std::size_t i = 1; i < losses.size(); ++i) CHECK(losses[i] < losses[i - 1]);
  for (const auto& [name, t] : net.parameters()) CHECK_FALSE(t.has_grad());
}

TEST_CASE("checkpoints") {
  odseg::testing::TempDir dir;
  const auto cfg = tiny_config(true, true);
  std::mt19937_64 data_rng(8);
  const auto labels = blob_labels(8);
  const auto x = input_for<float>(labels, 8, data_rng);
  TrainerConfig tc;
  tc.total_steps = 20;

  // Draws a fresh noisy copy from the trainer's own stream, so the RNG state
  // matters for continuation.
  auto run = [&](Trainer<float>& trainer, int steps) {
    for (int i = 0; i < steps; ++i) {
      std::normal_distribution<float> jitter(0.0f, 0.05f);
      std::vector<float> v(x.data().begin(), x.data().end());
      for (auto& e : v) e += jitter(trainer.rng());
      trainer.step({{Tensor<float>::from_data(x.shape(), v), labels}});
    }
  };

  SUBCASE("forward round trip and determinism") {
    auto net = Network<float>::build(cfg, 21);
    Trainer<float> trainer(net, tc, 5);
    run(trainer, 3);
    save_checkpoint(dir.file("a.odsc"), trainer);
    const auto data = read_checkpoint(dir.file("a.odsc"));
    CHECK(data.step == 3);
    auto loaded = network_from_checkpoint<float>(data);
    {
      NoGradGuard guard;
      const auto y0 = net.forward(x);
      const auto y1 = loaded.forward(x);
      CHECK(std::equal(y0.data().begin(), y0.data().end(), y1.data().begin()));
    }

    auto net2 = Network<float>::build(cfg, 21);
    Trainer<float> trainer2(net2, tc, 5);
    run(trainer2, 3);
    save_checkpoint(dir.file("b.odsc"), trainer2);
    CHECK(file_bytes(dir.file("a.odsc")) == file_bytes(dir.file("b.odsc")));

    save_checkpoint(dir.file("c.odsc"), loaded);
    CHECK(read_checkpoint(dir.file("c.odsc")).tensors.size() == net.parameters().size());
  }
  SUBCASE("split run equals continuous run") {
    auto net_a = Network<float>::build(cfg, 21);
    Trainer<float> continuous(net_a, tc, 5);
    run(continuous, 20);
    save_checkpoint(dir.file("continuous.odsc"), continuous);

    auto net_b = Network<float>::build(cfg, 21);
    Trainer<float> first(net_b, tc, 5);
    run(first, 10);
    save_checkpoint(dir.file("half.odsc"), first);
    const auto data = read_checkpoint(dir.file("half.odsc"));
    auto net_c = network_from_checkpoint<float>(data);
    Trainer<float> second(net_c, data.trainer, data.seed);
    restore_trainer(second, data);
    run(second, 10);
    save_checkpoint(dir.file("split.odsc"), second);
    CHECK(file_bytes(dir.file("continuous.odsc")) == file_bytes(dir.file("split.odsc")));
  }
  SUBCASE("malformed files raise FormatError") {
    auto net = Network<float>::build(cfg, 21);
    save_checkpoint(dir.file("ok.odsc"), net);
    auto bytes = file_bytes(dir.file("ok.odsc"));

    auto write = [&](const std::string& name, const std::vector<std::uint8_t>& b) {
      std::ofstream out(dir.file(name), std::ios::binary);
      out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
      return dir.file(name);
    };
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(read_checkpoint(write("magic.odsc", bad_magic)), FormatError);
    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(read_checkpoint(write("version.odsc", bad_version)), FormatError);
    for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
      std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
      CHECK_THROWS_AS(read_checkpoint(write("cut.odsc", truncated)), FormatError);
    }
    CHECK_THROWS_AS(read_checkpoint(dir.file("missing.odsc")), FormatError);

    auto data = read_checkpoint(dir.file("ok.odsc"));
    auto extra = data;
    extra.tensors["decoder.9.up.weight"] = {{1}, {0.0}};
    CHECK_THROWS_AS(network_from_checkpoint<float>(extra), FormatError);
    auto missing = data;
    missing.tensors.erase("head.weight");
    CHECK_THROWS_AS(network_from_checkpoint<float>(missing), FormatError);
    CHECK_THROWS_AS(network_from_checkpoint<double>(data), FormatError);
  }
}

TEST_CASE("tile placement") {
  CHECK(tile_starts(32, 32) == std::vector<Index>{0});
  CHECK(tile_starts(48, 32) == std::vector<Index>{0, 16});
  CHECK(tile_starts(40, 32) == std::vector<Index>{0, 8});
  CHECK(tile_starts(70, 32) == std::vector<Index>{0, 13, 25, 38});
  for (Index extent = 8; extent < 90; ++extent) {
    const auto s = tile_starts(extent, 8);
    CHECK(s.front() == 0);
    CHECK(s.back() == extent - 8);
    for (std::size_t i = 1; i < s.size(); ++i) CHECK((s[i] > s[i - 1] && s[i] - s[i - 1] <= 4));
  }
  const auto w = gaussian_importance({8, 8, 8});
  CHECK(*std::max_element(w.begin(), w.end()) == 1.0);
  CHECK(*std::min_element(w.begin(), w.end()) > 0.0);
  CHECK(w[0] == w[511]);  // symmetric corners
}

TEST_CASE("sliding-window prediction") {
  std::mt19937_64 rng(12);
  auto cfg = tiny_config(true, true);
  cfg.patch_size = {16, 16, 16};
  auto net = Network<float>::build(cfg, 2);

  SUBCASE("single tile equals softmax of forward") {
    Volume v = Volume::zeros(4, {16, 16, 16});
    auto x = random_tensor<float>({4, 16, 16, 16}, rng);
    std::copy(x.data().begin(), x.data().end(), v.values.begin());
    const auto probs = sliding_window_predict(net, v);
    NoGradGuard guard;
    const auto ref = softmax(net.forward(x), 0);
    CHECK(std::equal(probs.values.begin(), probs.values.end(), ref.data().begin()));
  }
  SUBCASE("probabilities sum to one per voxel") {
    for (const Grid& g : {Grid{24, 16, 20}, Grid{10, 16, 33}}) {
      Volume v = Volume::zeros(4, g);
      std::normal_distribution<float> d;
      for (auto& e : v.values) e = d(rng);
      const auto probs = sliding_window_predict(net, v);
      CHECK(probs.extents == g);
      CHECK(probs.channels == 4);
      const Index n = probs.voxels();
      double worst = 0;
      for (Index i = 0; i < n; ++i) {
        double s = 0;
        for (Index k = 0; k < 4; ++k) s += probs.values[static_cast<std::size_t>(k * n + i)];
        worst = std::max(worst, std::abs(s - 1.0));
      }
      CHECK(worst <= 1e-5);
    }
  }
  SUBCASE("constant input gives a translation-periodic interior") {
    // 48 = 16 + 4 * 8: tiles start every 8 voxels. Away from the volume
    // border every voxel sees the same tile arrangement as its neighbour one
    // step further on, so the blended output repeats exactly.
    Volume v = Volume::zeros(4, {48, 48, 48});
    std::fill(v.values.begin(), v.values.end(), 0.7f);
    const auto probs = sliding_window_predict(net, v);
    Index mismatches = 0;
    for (Index k = 0; k < 4; ++k)
      for (Index z = 8; z < 24; ++z)
        for (Index y = 8; y < 24; ++y)
          for (Index x = 8; x < 24; ++x) {
            const float p = probs.at(k, z, y, x);
            mismatches += p != probs.at(k, z + 8, y, x);
            mismatches += p != probs.at(k, z, y + 8, x);
            mismatches += p != probs.at(k, z + 8, y + 8, x + 8);
          }
    CHECK(mismatches == 0);

    // Blending never widens the spread seen inside a single tile.
    Volume one = Volume::zeros(4, {16, 16, 16});
    std::fill(one.values.begin(), one.values.end(), 0.7f);
    const auto single = sliding_window_predict(net, one);
    for (Index k = 0; k < 4; ++k) {
      float lo = 1, hi = 0, slo = 1, shi = 0;
      for (Index z = 8; z < 40; ++z)
        for (Index y = 8; y < 40; ++y)
          for (Index x = 8; x < 40; ++x) {
            lo = std::min(lo, probs.at(k, z, y, x));
            hi = std::max(hi, probs.at(k, z, y, x));
          }
      for (Index i = 0; i < single.voxels(); ++i) {
        slo = std::min(slo, single.values[static_cast<std::size_t>(k * single.voxels() + i)]);
        shi = std::max(shi, single.values[static_cast<std::size_t>(k * single.voxels() + i)]);
      }
      CHECK(hi - lo <= shi - slo);
    }
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(sliding_window_predict(net, Volume::zeros(3, {16, 16, 16})), ChannelMismatchError);
  }
}

TEST_CASE("logits_to_mask") {
  Volume p = Volume::zeros(4, {1, 1, 3});
  // voxel 0: one-hot class 2; voxel 1: uniform tie; voxel 2: tie between 1 and 3
  const float vals[4][3] = {{0, 0.25f, 0.1f}, {0, 0.25f, 0.4f}, {1, 0.25f, 0.1f}, {0, 0.25f, 0.4f}};
  for (int k = 0; k < 4; ++k)
    for (int i = 0; i < 3; ++i) p.at(k, 0, 0, i) = vals[k][i];
  const auto m = logits_to_mask(p);
  CHECK(m.labels == std::vector<std::uint8_t>{2, 0, 1});

  std::mt19937_64 rng(4);
  Volume r = Volume::zeros(4, {4, 5, 6});
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : r.values) v = u(rng);
  Volume t = r;
  for (auto& v : t.values) v = std::exp(3.0f * v) + 2.0f;  // strictly monotone
  CHECK(logits_to_mask(r).labels == logits_to_mask(t).labels);
}
