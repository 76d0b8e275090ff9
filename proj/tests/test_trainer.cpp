#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "snet/dataset.hpp"
#include "snet/error.hpp"
#include "snet/image_io.hpp"
#include "snet/losses.hpp"
#include "snet/network.hpp"
#include "snet/rng.hpp"
#include "snet/synth.hpp"
#include "snet/tensor.hpp"
#include "snet/trainer.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using snet::Tensor;

namespace {

fs::path temp_dir() {
  static int counter = 0;
  const fs::path p = fs::temp_directory_path() /
                     ("snet_train_" + std::to_string(::getpid()) + "_" +
                      std::to_string(counter++));
  fs::create_directories(p);
  return p;
}

snet::NetworkConfig tiny_config() {
  snet::NetworkConfig cfg;
  cfg.channels = 4;
  cfg.led_channels = 4;
  cfg.led_depth = 2;
  cfg.led_growth = 4;
  cfg.asf_sizes = {3, 7};
  return cfg;
}

// In-memory pair whose planes encode position/index so crops are checkable.
snet::DatasetItem coded_item(const std::string& name, int64_t h, int64_t w,
                             float offset = 0.0f) {
  snet::DatasetItem item;
  item.name = name;
  item.low = Tensor::zeros({1, 3, h, w});
  auto v = item.low.values();
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < h * w; ++i)
      v[static_cast<size_t>(c * h * w + i)] =
          offset + static_cast<float>(i) / static_cast<float>(h * w);
  item.high = snet::mul(item.low, 2.0f).detached();
  item.led_target = snet::mul(item.low, 3.0f).detached();
  return item;
}

// A small on-disk dataset: one smooth normal-light image, self-darkened.
fs::path smoke_dataset(int64_t h, int64_t w) {
  const fs::path dir = temp_dir();
  fs::create_directories(dir / "low");
  fs::create_directories(dir / "high");
  fs::create_directories(dir / "led_target");
  Tensor high = Tensor::zeros({1, 3, h, w});
  auto v = high.values();
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        v[static_cast<size_t>((c * h + y) * w + x)] = static_cast<float>(
            0.35 + 0.15 * c + 0.3 * std::sin(0.5 * x + 0.3 * y + c));
  for (auto& f : v) f = std::min(1.0f, std::max(0.0f, f));
  Tensor low = snet::darken(high, {0.95, 0.7, 2.2});
  snet::write_image((dir / "high" / "a.ppm").string(), high);
  snet::write_image((dir / "low" / "a.ppm").string(), low);
  snet::write_image((dir / "led_target" / "a.ppm").string(), low);
  return dir;
}

struct MetricsLine {
  int64_t step = 0;
  double loss = 0.0, l_ssim = 0.0, l_char = 0.0, l_dists = 0.0, l_l = 0.0;
  std::string raw;
};

std::vector<MetricsLine> read_metrics(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::vector<MetricsLine> lines;
  std::string raw;
  while (std::getline(in, raw)) {
    if (raw.empty()) continue;
    MetricsLine m;
    m.raw = raw;
    std::istringstream ss(raw);
    REQUIRE((ss >> m.step >> m.loss >> m.l_ssim >> m.l_char >> m.l_dists >>
             m.l_l));
    lines.push_back(std::move(m));
  }
  return lines;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("adam leaves parameters alone on zero gradients") {
  std::vector<Tensor> params{
      Tensor::from_values({3}, {1.0f, -2.0f, 3.0f}, true)};
  params[0].zero_grad();
  snet::AdamState state = snet::make_adam_state(params);
  CHECK(snet::adam_step(params, state, {}));
  CHECK(state.step == 1);
  CHECK(params[0].values()[0] == 1.0f);
  CHECK(params[0].values()[1] == -2.0f);
  CHECK(params[0].values()[2] == 3.0f);
}

TEST_CASE("adam update magnitude approaches lr times the gradient sign") {
  std::vector<Tensor> params{Tensor::scalar(5.0f, true)};
  snet::AdamState state = snet::make_adam_state(params);
  const snet::AdamConfig cfg;
  float prev = params[0].values()[0];
  double last_delta = 0.0;
  for (int step = 0; step < 400; ++step) {
    params[0].zero_grad();
    {
      snet::Tape tape;
      Tensor loss = snet::mul(params[0], 2.5f);  // constant gradient 2.5
      tape.backward(loss);
    }
    CHECK(snet::adam_step(params, state, cfg));
    const float cur = params[0].values()[0];
    last_delta = static_cast<double>(prev) - cur;  // positive: descending
    prev = cur;
  }
  CHECK(last_delta > 0.0);
  CHECK(std::fabs(last_delta - cfg.lr) < 0.02 * cfg.lr);
}

TEST_CASE("adam walks a quadratic bowl under 1e-3") {
  std::vector<Tensor> params{Tensor::scalar(1.0f, true)};
  snet::AdamState state = snet::make_adam_state(params);
  double best = 1.0;
  for (int step = 0; step < 5000; ++step) {
    params[0].zero_grad();
    {
      snet::Tape tape;
      Tensor loss = snet::mul(params[0], params[0]);
      tape.backward(loss);
    }
    REQUIRE(snet::adam_step(params, state, {}));
    best = std::min(best, std::fabs(static_cast<double>(
                              params[0].values()[0])));
  }
  CHECK(best < 1e-3);
}

TEST_CASE("adam skips whole steps on non-finite gradients") {
  std::vector<Tensor> params{
      Tensor::from_values({2}, {1.0f, 2.0f}, true)};
  snet::AdamState state = snet::make_adam_state(params);
  params[0].zero_grad();
  params[0].impl()->grad_ref()[1] = std::numeric_limits<float>::infinity();
  std::ostringstream log;
  CHECK(!snet::adam_step(params, state, {}, &log));
  CHECK(state.step == 0);
  CHECK(params[0].values()[0] == 1.0f);
  CHECK(params[0].values()[1] == 2.0f);
  CHECK(log.str().find("non-finite") != std::string::npos);
  CHECK(state.m[0].values()[1] == 0.0f);  // moments untouched too
}

TEST_CASE("sample_batch is deterministic and keeps crops aligned") {
  snet::PairedDataset data;
  data.items.push_back(coded_item("a", 20, 28));
  data.items.push_back(coded_item("b", 24, 20));

  snet::Rng r1(42), r2(42);
  snet::Batch x = snet::sample_batch(data, r1, 5, 9);
  snet::Batch y = snet::sample_batch(data, r2, 5, 9);
  auto xv = x.low.values();
  auto yv = y.low.values();
  for (size_t i = 0; i < xv.size(); ++i) CHECK(xv[i] == yv[i]);

  CHECK(x.low.shape() == snet::Shape{5, 3, 9, 9});
  auto hv = x.high.values();
  auto tv = x.led_target.values();
  for (size_t i = 0; i < xv.size(); ++i) {
    CHECK(hv[i] == 2.0f * xv[i]);  // same window in every stream
    CHECK(tv[i] == 3.0f * xv[i]);
  }

  snet::Rng r3(43);
  snet::Batch z = snet::sample_batch(data, r3, 5, 9);
  auto zv = z.low.values();
  bool all_same = true;
  for (size_t i = 0; i < xv.size(); ++i)
    if (zv[i] != xv[i]) all_same = false;
  CHECK(!all_same);
}

TEST_CASE("crop windows cover the valid offsets uniformly") {
  // One 24x24 image, 16x16 patches: 9x9 valid offsets = 81 cells. 10^4 draws
  // give E = 123.46 per cell; chi-square with 80 dof stays under the p=0.01
  // critical value 112.33 for a uniform sampler.
  snet::PairedDataset data;
  data.items.push_back(coded_item("a", 24, 24));
  std::vector<int64_t> cells(81, 0);
  int64_t draws = 0;
  for (int call = 0; call < 2500; ++call) {
    snet::Rng rng(snet::mix_seed(7, static_cast<uint64_t>(call)));
    snet::Batch b = snet::sample_batch(data, rng, 4, 16);
    auto v = b.low.values();
    for (int64_t s = 0; s < 4; ++s) {
      const float top_left =
          v[static_cast<size_t>(((s * 3 + 0) * 16 + 0) * 16 + 0)];
      const int64_t flat = std::llround(static_cast<double>(top_left) * 576.0);
      const int64_t oy = flat / 24, ox = flat % 24;
      REQUIRE(oy >= 0);
      REQUIRE(oy <= 8);
      REQUIRE(ox >= 0);
      REQUIRE(ox <= 8);
      cells[static_cast<size_t>(oy * 9 + ox)] += 1;
      ++draws;
    }
  }
  CHECK(draws == 10000);
  const double expected = 10000.0 / 81.0;
  double chi2 = 0.0;
  for (int64_t c : cells) {
    const double d = static_cast<double>(c) - expected;
    chi2 += d * d / expected;
  }
  CHECK(chi2 < 112.329);

  // Image choice is uniform as well: 5 equal images, 10^4 draws, 4 dof.
  snet::PairedDataset multi;
  for (int i = 0; i < 5; ++i)
    multi.items.push_back(
        coded_item("i" + std::to_string(i), 16, 16, static_cast<float>(i)));
  std::vector<int64_t> counts(5, 0);
  for (int call = 0; call < 2500; ++call) {
    snet::Rng rng(snet::mix_seed(8, static_cast<uint64_t>(call)));
    snet::Batch b = snet::sample_batch(multi, rng, 4, 16);
    auto v = b.low.values();
    for (int64_t s = 0; s < 4; ++s) {
      const float base = v[static_cast<size_t>(((s * 3) * 16) * 16)];
      const int64_t idx = static_cast<int64_t>(base);  // offset encodes index
      REQUIRE(idx >= 0);
      REQUIRE(idx < 5);
      counts[static_cast<size_t>(idx)] += 1;
    }
  }
  const double e5 = 10000.0 / 5.0;
  double chi2_idx = 0.0;
  for (int64_t c : counts) {
    const double d = static_cast<double>(c) - e5;
    chi2_idx += d * d / e5;
  }
  CHECK(chi2_idx < 13.277);  // p = 0.01 critical value at 4 dof
}

TEST_CASE("undersized images are skipped with a warning") {
  snet::PairedDataset data;
  data.items.push_back(coded_item("small", 8, 8));
  data.items.push_back(coded_item("big", 32, 32, 5.0f));
  std::ostringstream warn;
  snet::Rng rng(1);
  snet::Batch b = snet::sample_batch(data, rng, 6, 16, &warn);
  CHECK(warn.str().find("small") != std::string::npos);
  auto v = b.low.values();
  for (float f : v) CHECK(f >= 5.0f);  // every crop came from "big"

  snet::PairedDataset none;
  none.items.push_back(coded_item("small", 8, 8));
  snet::Rng rng2(1);
  CHECK_THROWS_AS(snet::sample_batch(none, rng2, 2, 16), snet::Error);
}

TEST_CASE("training overfits a single pair and logs well-formed metrics") {
  const fs::path ds = smoke_dataset(16, 16);
  const fs::path out = temp_dir();
  snet::TrainConfig cfg;
  cfg.net = tiny_config();
  cfg.dataset_dir = ds.string();
  cfg.out_dir = out.string();
  cfg.batch_size = 2;
  cfg.patch = 16;
  cfg.steps = 120;
  cfg.seed = 3;
  cfg.checkpoint_every = 1000;  // only the end-of-run save
  std::ostringstream log, err;
  const snet::TrainResult res = snet::train(cfg, log, err);
  CHECK(res.steps_run == 120);

  const auto lines = read_metrics(res.metrics_path);
  REQUIRE(lines.size() == 120);
  for (size_t i = 0; i < lines.size(); ++i) {
    CHECK(lines[i].step == static_cast<int64_t>(i) + 1);
    CHECK(std::isfinite(lines[i].loss));
    CHECK(std::fabs(lines[i].loss - (lines[i].l_ssim + lines[i].l_char +
                                     lines[i].l_dists + lines[i].l_l)) <
          1e-12);
    CHECK(lines[i].l_l > 0.0);  // LES is on by default
  }
  CHECK(lines[109].loss < 0.7 * lines[9].loss);

  // The checkpoint reproduces the trained network bitwise.
  snet::NetworkParams net = snet::make_network(cfg.net, 999);
  snet::load_checkpoint(net, res.checkpoint_path);
  const snet::PairedDataset data = snet::load_paired_dataset(ds.string());
  const snet::NetworkOutput o =
      snet::surroundnet_forward(data.items[0].low, net, false);
  const snet::EvalReport report = snet::evaluate(net, data);
  REQUIRE(report.rows.size() == 1);
  CHECK(report.rows[0].psnr == snet::psnr(o.enhanced, data.items[0].high));

  fs::remove_all(ds);
  fs::remove_all(out);
}

TEST_CASE("use_les gates exactly the denoiser term") {
  const fs::path ds = smoke_dataset(16, 16);
  const fs::path out_on = temp_dir();
  const fs::path out_off = temp_dir();
  snet::TrainConfig cfg;
  cfg.net = tiny_config();
  cfg.dataset_dir = ds.string();
  cfg.batch_size = 2;
  cfg.patch = 16;
  cfg.steps = 3;
  cfg.seed = 5;
  std::ostringstream log, err;

  cfg.out_dir = out_on.string();
  cfg.use_les = true;
  snet::train(cfg, log, err);
  cfg.out_dir = out_off.string();
  cfg.use_les = false;
  snet::train(cfg, log, err);

  const auto on = read_metrics(out_on / "metrics.log");
  const auto off = read_metrics(out_off / "metrics.log");
  REQUIRE(on.size() == 3);
  REQUIRE(off.size() == 3);
  // Identical parameters and batch at step 1: the enhanced-pair terms agree
  // exactly and the switch removes only the denoiser contribution.
  CHECK(on[0].l_ssim == off[0].l_ssim);
  CHECK(on[0].l_char == off[0].l_char);
  CHECK(on[0].l_dists == off[0].l_dists);
  CHECK(off[0].l_l == 0.0);
  CHECK(on[0].l_l > 0.0);
  CHECK(on[0].loss - on[0].l_l == off[0].loss);

  fs::remove_all(ds);
  fs::remove_all(out_on);
  fs::remove_all(out_off);
}

TEST_CASE("freezing the denoiser holds its weights and its loss term still") {
  const fs::path ds = smoke_dataset(16, 16);
  const fs::path out = temp_dir();
  snet::TrainConfig cfg;
  cfg.net = tiny_config();
  cfg.dataset_dir = ds.string();
  cfg.out_dir = out.string();
  cfg.batch_size = 1;
  cfg.patch = 16;  // one image at full size: every batch is identical
  cfg.steps = 8;
  cfg.seed = 7;
  cfg.freeze_led = true;
  std::ostringstream log, err;
  const snet::TrainResult res = snet::train(cfg, log, err);

  const auto lines = read_metrics(res.metrics_path);
  REQUIRE(lines.size() == 8);
  for (size_t i = 1; i < lines.size(); ++i) CHECK(lines[i].l_l == lines[0].l_l);
  CHECK(lines[7].loss < lines[0].loss);  // the enhancement path still learns

  // Frozen parameters ended up bitwise equal to their seeded initialization.
  snet::NetworkParams trained = snet::make_network(cfg.net, cfg.seed);
  snet::load_checkpoint(trained, res.checkpoint_path);
  const snet::NetworkParams fresh = snet::make_network(cfg.net, cfg.seed);
  const auto trained_names = snet::named_parameters(trained);
  const auto fresh_names = snet::named_parameters(fresh);
  bool led_equal = true, rest_equal = true;
  for (size_t i = 0; i < trained_names.size(); ++i) {
    auto a = trained_names[i].tensor.values();
    auto b = fresh_names[i].tensor.values();
    bool same = true;
    for (size_t j = 0; j < a.size(); ++j)
      if (a[j] != b[j]) same = false;
    if (trained_names[i].name.rfind("led.", 0) == 0)
      led_equal = led_equal && same;
    else
      rest_equal = rest_equal && same;
  }
  CHECK(led_equal);
  CHECK(!rest_equal);

  fs::remove_all(ds);
  fs::remove_all(out);
}

TEST_CASE("resuming mid-run reproduces the uninterrupted run bitwise") {
  const fs::path ds = smoke_dataset(16, 16);
  const fs::path out_full = temp_dir();
  const fs::path out_split = temp_dir();
  snet::TrainConfig cfg;
  cfg.net = tiny_config();
  cfg.dataset_dir = ds.string();
  cfg.batch_size = 2;
  cfg.patch = 16;
  cfg.seed = 11;
  cfg.checkpoint_every = 1000;
  std::ostringstream log, err;

  cfg.out_dir = out_full.string();
  cfg.steps = 14;
  snet::train(cfg, log, err);

  cfg.out_dir = out_split.string();
  cfg.steps = 7;
  snet::train(cfg, log, err);
  cfg.steps = 14;
  cfg.init_checkpoint = (out_split / "checkpoint.srnd").string();
  cfg.resume = true;
  snet::train(cfg, log, err);

  CHECK(slurp(out_full / "metrics.log") == slurp(out_split / "metrics.log"));
  CHECK(slurp(out_full / "checkpoint.srnd") ==
        slurp(out_split / "checkpoint.srnd"));
  CHECK(slurp(out_full / "checkpoint.srnd.opt") ==
        slurp(out_split / "checkpoint.srnd.opt"));

  fs::remove_all(ds);
  fs::remove_all(out_full);
  fs::remove_all(out_split);
}

TEST_CASE("a non-finite loss aborts and leaves no fresh checkpoint") {
  const fs::path ds = smoke_dataset(16, 16);
  const fs::path out = temp_dir();
  const fs::path poison_path = out / "poison.srnd";
  {
    snet::NetworkParams net = snet::make_network(tiny_config(), 0);
    // Poison the output conv bias: nothing downstream can mask the NaN
    // (relu would turn a NaN feature into 0 on comparison).
    net.out.bias.values()[0] = std::numeric_limits<float>::quiet_NaN();
    snet::save_checkpoint(net, poison_path.string());
  }
  snet::TrainConfig cfg;
  cfg.net = tiny_config();
  cfg.dataset_dir = ds.string();
  cfg.out_dir = (out / "run").string();
  cfg.batch_size = 1;
  cfg.patch = 16;
  cfg.steps = 5;
  cfg.init_checkpoint = poison_path.string();
  std::ostringstream log, err;
  CHECK_THROWS_WITH_AS(snet::train(cfg, log, err),
                       doctest::Contains("non-finite"), snet::Error);
  CHECK(!fs::exists(out / "run" / "checkpoint.srnd"));

  fs::remove_all(ds);
  fs::remove_all(out);
}

TEST_CASE("train validates its configuration") {
  snet::TrainConfig cfg;
  cfg.net = tiny_config();
  cfg.dataset_dir = "unused";
  cfg.out_dir = "unused";
  std::ostringstream log, err;

  cfg.patch = 8;  // below the 2*7-1 = 13 surround footprint
  cfg.steps = 1;
  CHECK_THROWS_WITH_AS(snet::train(cfg, log, err),
                       doctest::Contains("footprint"), snet::Error);

  cfg.patch = 16;
  cfg.steps = 0;
  cfg.epochs = 0;
  CHECK_THROWS_WITH_AS(snet::train(cfg, log, err),
                       doctest::Contains("steps or epochs"), snet::Error);

  cfg.steps = 1;
  cfg.resume = true;
  cfg.init_checkpoint.clear();
  CHECK_THROWS_WITH_AS(snet::train(cfg, log, err),
                       doctest::Contains("resume"), snet::Error);
}
