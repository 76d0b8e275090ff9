#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "snet/cli.hpp"
#include "snet/dataset.hpp"
#include "snet/image_io.hpp"
#include "snet/network.hpp"
#include "snet/rng.hpp"
#include "snet/synth.hpp"
#include "snet/tensor.hpp"

namespace fs = std::filesystem;
using snet::Tensor;

namespace {

fs::path temp_dir() {
  static int counter = 0;
  const fs::path dir = fs::temp_directory_path() /
                       ("snet_cli_" + std::to_string(::getpid()) + "_" +
                        std::to_string(counter++));
  fs::create_directories(dir);
  return dir;
}

struct CliRun {
  int code = 0;
  std::string out;
  std::string err;
};

CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliRun r;
  r.code = snet::run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Key-value lines ("alpha 0.95") into a map; non-matching lines skipped.
std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const size_t sp = line.find(' ');
    if (sp != std::string::npos && line.rfind(' ') == sp)
      kv[line.substr(0, sp)] = line.substr(sp + 1);
  }
  return kv;
}

Tensor smooth_image(int64_t h, int64_t w, double phase) {
  Tensor img = Tensor::zeros({1, 3, h, w});
  auto v = img.values();
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double t =
            0.5 + 0.4 * std::sin(phase + 2.2 * (c + 1) * x / double(w)) *
                      std::cos(1.7 * y / double(h));
        v[(c * h + y) * w + x] = static_cast<float>(t);
      }
  return img;
}

// Zero conv weights and biases; adaptive surround raws stay at their
// init (all ones) so kernel normalization stays defined.
void zero_conv_tensors(snet::NetworkParams& net) {
  for (auto& nt : snet::named_parameters(net)) {
    if (contains(nt.name, "asf")) continue;
    for (float& x : nt.tensor.values()) x = 0.0f;
  }
}

}  // namespace

TEST_CASE("help exits zero and lists every subcommand") {
  const CliRun top = cli({"--help"});
  CHECK(top.code == 0);
  for (const char* sub : {"enhance", "train", "synth", "fit", "eval", "ssr",
                          "gradcheck", "params"})
    CHECK(contains(top.out, sub));
}

TEST_CASE("per-subcommand help documents every flag") {
  const std::map<std::string, std::vector<std::string>> flags = {
      {"enhance",
       {"--input", "--checkpoint", "--output", "--config", "--channels",
        "--led-channels", "--led-depth", "--led-growth", "--asf-sizes",
        "--eca", "--no-eca", "--plain-blocks", "--no-plain-blocks"}},
      {"train",
       {"--config", "--dataset-dir", "--eval-dir", "--out-dir",
        "--init-checkpoint", "--resume", "--no-resume", "--batch-size",
        "--patch", "--steps", "--epochs", "--seed", "--les", "--no-les",
        "--freeze-led", "--checkpoint-every", "--eval-every", "--lr",
        "--beta1", "--beta2", "--eps", "--channels", "--led-channels",
        "--led-depth", "--led-growth", "--asf-sizes", "--eca",
        "--plain-blocks"}},
      {"synth", {"--input", "--output", "--seed"}},
      {"fit", {"--low", "--high", "--seed"}},
      {"eval", {"--test", "--ref"}},
      {"ssr", {"--input", "--output", "--sigma", "--scales"}},
      {"gradcheck", {"--seed", "--eps", "--tol"}},
      {"params",
       {"--config", "--channels", "--led-channels", "--led-depth",
        "--led-growth", "--asf-sizes", "--eca", "--plain-blocks"}},
  };
  for (const auto& [sub, names] : flags) {
    const CliRun r = cli({sub, "--help"});
    CAPTURE(sub);
    CHECK(r.code == 0);
    for (const std::string& name : names) {
      CAPTURE(name);
      CHECK(contains(r.out, name));
    }
  }
}

TEST_CASE("usage mistakes exit with code one") {
  CHECK(cli({}).code == 1);
  CHECK(cli({"bogus"}).code == 1);
  CHECK(cli({"params", "--not-a-flag"}).code == 1);
  CHECK(cli({"enhance"}).code == 1);  // missing required options
  const CliRun r = cli({"fit", "--low", "x.ppm"});
  CHECK(r.code == 1);
  CHECK(!r.err.empty());
}

TEST_CASE("params prints per-module counts and the documented totals") {
  const CliRun def = cli({"params"});
  CHECK(def.code == 0);
  for (const char* group :
       {"led ", "shallow ", "blocks.0 ", "blocks.1 ", "blocks.2 ",
        "blocks.3 ", "eca 18", "out "})
    CHECK(contains(def.out, group));
  CHECK(contains(def.out, "total 144748"));

  const CliRun no_eca = cli({"params", "--no-eca"});
  CHECK(contains(no_eca.out, "total 144730"));  // attention costs exactly 18

  const CliRun plain = cli({"params", "--plain-blocks"});
  CHECK(contains(plain.out, "total 136392"));
  CHECK(contains(plain.out, "blocks.0 27744"));

  const CliRun tiny = cli({"params", "--channels", "8", "--led-channels", "8",
                           "--led-depth", "2", "--led-growth", "4"});
  CHECK(tiny.code == 0);
  CHECK(contains(tiny.out, "total "));
}

TEST_CASE("a zero checkpoint enhances everything to black") {
  const fs::path dir = temp_dir();
  snet::NetworkParams net = snet::make_network({}, 0);
  zero_conv_tensors(net);
  const std::string ckpt = (dir / "zero.srnd").string();
  snet::save_checkpoint(net, ckpt);

  const Tensor img = smooth_image(20, 24, 0.4);
  snet::write_image((dir / "in.ppm").string(), img);

  const CliRun r = cli({"enhance", "--input", (dir / "in.ppm").string(),
                        "--checkpoint", ckpt, "--output",
                        (dir / "out").string()});
  CHECK(r.code == 0);
  const Tensor back = snet::read_image((dir / "out" / "in.ppm").string());
  REQUIRE(back.shape() == snet::Shape{1, 3, 20, 24});  // dims preserved
  for (float v : back.values()) CHECK(v == 0.0f);

  fs::remove_all(dir);
}

TEST_CASE("enhance reports per-file failures and keeps going") {
  const fs::path dir = temp_dir();
  snet::NetworkParams net = snet::make_network({}, 0);
  const std::string ckpt = (dir / "net.srnd").string();
  snet::save_checkpoint(net, ckpt);

  fs::create_directories(dir / "in");
  snet::write_image((dir / "in" / "good.ppm").string(), smooth_image(16, 16, 0.1));
  std::ofstream(dir / "in" / "corrupt.ppm", std::ios::binary) << "P6\n4 4\n255\nxx";

  const CliRun r = cli({"enhance", "--input", (dir / "in").string(),
                        "--checkpoint", ckpt, "--output",
                        (dir / "out").string()});
  CHECK(r.code == 2);
  CHECK(contains(r.err, "corrupt.ppm"));
  CHECK(contains(r.err, "1 input(s) failed"));
  CHECK(fs::exists(dir / "out" / "good.ppm"));
  CHECK(!fs::exists(dir / "out" / "corrupt.ppm"));

  fs::remove_all(dir);
}

TEST_CASE("enhancing twice is not a projection") {
  const fs::path dir = temp_dir();
  snet::NetworkParams net = snet::make_network({}, 3);
  const std::string ckpt = (dir / "net.srnd").string();
  snet::save_checkpoint(net, ckpt);
  snet::write_image((dir / "a.ppm").string(), smooth_image(20, 20, 0.9));

  CHECK(cli({"enhance", "--input", (dir / "a.ppm").string(), "--checkpoint",
             ckpt, "--output", (dir / "once").string()})
            .code == 0);
  CHECK(cli({"enhance", "--input", (dir / "once" / "a.ppm").string(),
             "--checkpoint", ckpt, "--output", (dir / "twice").string()})
            .code == 0);
  CHECK(slurp(dir / "once" / "a.ppm") != slurp(dir / "twice" / "a.ppm"));

  fs::remove_all(dir);
}

TEST_CASE("eval on identical directories prints the caps") {
  const fs::path dir = temp_dir();
  fs::create_directories(dir / "imgs");
  snet::write_image((dir / "imgs" / "x.ppm").string(), smooth_image(12, 12, 0.2));
  snet::write_image((dir / "imgs" / "y.ppm").string(), smooth_image(12, 12, 1.2));

  const CliRun r = cli({"eval", "--test", (dir / "imgs").string(), "--ref",
                        (dir / "imgs").string()});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "x.ppm 100 1"));
  CHECK(contains(r.out, "y.ppm 100 1"));
  CHECK(contains(r.out, "mean 100 1"));

  fs::create_directories(dir / "other");
  snet::write_image((dir / "other" / "z.ppm").string(), smooth_image(12, 12, 0.2));
  const CliRun bad = cli({"eval", "--test", (dir / "imgs").string(), "--ref",
                          (dir / "other").string()});
  CHECK(bad.code == 2);
  CHECK(contains(bad.err, "identically named"));

  fs::remove_all(dir);
}

TEST_CASE("fit recovers the identifiable quantities through 8-bit files") {
  const fs::path dir = temp_dir();
  const Tensor high = smooth_image(48, 48, 0.7);
  const snet::DarkeningParams truth{0.92, 0.81, 2.6};
  const Tensor low = snet::darken(high, truth);
  snet::write_image((dir / "high.ppm").string(), high);
  snet::write_image((dir / "low.ppm").string(), low);

  const CliRun r = cli({"fit", "--low", (dir / "low.ppm").string(), "--high",
                        (dir / "high.ppm").string()});
  CHECK(r.code == 0);
  auto kv = parse_kv(r.out);
  REQUIRE(kv.count("gamma") == 1);
  REQUIRE(kv.count("gain") == 1);
  REQUIRE(kv.count("rms") == 1);
  CHECK(kv["converged"] == "true");
  const double gamma = std::stod(kv["gamma"]);
  const double gain = std::stod(kv["gain"]);
  const double rms = std::stod(kv["rms"]);
  const double true_gain = truth.beta * std::pow(truth.alpha, truth.gamma);
  // 8-bit quantization adds ~1.1e-3 RMS noise; tolerances sit well above it.
  CHECK(gamma == doctest::Approx(truth.gamma).epsilon(0.02));
  CHECK(gain == doctest::Approx(true_gain).epsilon(0.01));
  CHECK(rms < 2e-3);

  fs::remove_all(dir);
}

TEST_CASE("synth is deterministic per seed through the CLI") {
  const fs::path dir = temp_dir();
  fs::create_directories(dir / "normal");
  snet::write_image((dir / "normal" / "a.ppm").string(), smooth_image(24, 24, 0.3));
  snet::write_image((dir / "normal" / "b.ppm").string(), smooth_image(24, 24, 1.9));

  const CliRun r1 = cli({"synth", "--input", (dir / "normal").string(),
                         "--output", (dir / "ds1").string(), "--seed", "9"});
  const CliRun r2 = cli({"synth", "--input", (dir / "normal").string(),
                         "--output", (dir / "ds2").string(), "--seed", "9"});
  const CliRun r3 = cli({"synth", "--input", (dir / "normal").string(),
                         "--output", (dir / "ds3").string(), "--seed", "10"});
  CHECK(r1.code == 0);
  CHECK(contains(r1.out, "2 pair(s)"));
  CHECK(slurp(dir / "ds1" / "manifest.txt") == slurp(dir / "ds2" / "manifest.txt"));
  CHECK(slurp(dir / "ds1" / "manifest.txt") != slurp(dir / "ds3" / "manifest.txt"));
  CHECK(slurp(dir / "ds1" / "low" / "a.ppm") == slurp(dir / "ds2" / "low" / "a.ppm"));
  CHECK(fs::exists(dir / "ds1" / "led_target" / "b.ppm"));

  fs::remove_all(dir);
}

TEST_CASE("train runs from a config file and flags override it") {
  const fs::path dir = temp_dir();
  fs::create_directories(dir / "normal");
  snet::write_image((dir / "normal" / "a.ppm").string(), smooth_image(24, 24, 0.5));
  REQUIRE(cli({"synth", "--input", (dir / "normal").string(), "--output",
               (dir / "ds").string(), "--seed", "4"})
              .code == 0);

  std::ofstream cfg(dir / "train.cfg");
  cfg << "dataset_dir = " << (dir / "ds").string() << "\n"
      << "out_dir = " << (dir / "run").string() << "\n"
      << "steps = 6\n"
      << "batch_size = 2\n"
      << "patch = 16\n"
      << "seed = 2\n"
      << "channels = 4\nled_channels = 4\nled_depth = 2\nled_growth = 4\n"
      << "asf_sizes = 3,7\n"
      << "# comment lines and blanks are fine\n\n"
      << "checkpoint_every = 100\n";
  cfg.close();

  const CliRun r = cli({"train", "--config", (dir / "train.cfg").string()});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "trained 6 step(s)"));
  {
    std::ifstream metrics(dir / "run" / "metrics.log");
    int lines = 0;
    std::string line;
    while (std::getline(metrics, line)) ++lines;
    CHECK(lines == 6);
  }

  // The --steps flag wins over the file value.
  const CliRun r2 = cli({"train", "--config", (dir / "train.cfg").string(),
                         "--steps", "2", "--out-dir", (dir / "run2").string()});
  CHECK(r2.code == 0);
  CHECK(contains(r2.out, "trained 2 step(s)"));

  fs::remove_all(dir);
}

TEST_CASE("config files reject unknown keys and malformed lines") {
  const fs::path dir = temp_dir();
  std::ofstream(dir / "bad.cfg") << "stepz = 10\n";
  const CliRun r = cli({"train", "--config", (dir / "bad.cfg").string()});
  CHECK(r.code == 1);
  CHECK(contains(r.err, "unknown config key 'stepz'"));

  std::ofstream(dir / "bad2.cfg") << "steps 10\n";
  const CliRun r2 = cli({"train", "--config", (dir / "bad2.cfg").string()});
  CHECK(r2.code == 1);
  CHECK(contains(r2.err, "key = value"));

  const CliRun r3 = cli({"train", "--config", (dir / "missing.cfg").string()});
  CHECK(r3.code == 2);

  fs::remove_all(dir);
}

TEST_CASE("ssr writes a normalized deterministic image") {
  const fs::path dir = temp_dir();
  snet::write_image((dir / "a.ppm").string(), smooth_image(20, 28, 0.8));

  const CliRun r1 = cli({"ssr", "--input", (dir / "a.ppm").string(),
                         "--output", (dir / "r1.ppm").string(), "--sigma", "5"});
  const CliRun r2 = cli({"ssr", "--input", (dir / "a.ppm").string(),
                         "--output", (dir / "r2.ppm").string(), "--sigma", "5"});
  CHECK(r1.code == 0);
  CHECK(slurp(dir / "r1.ppm") == slurp(dir / "r2.ppm"));
  const Tensor out = snet::read_image((dir / "r1.ppm").string());
  CHECK(out.shape() == snet::Shape{1, 3, 20, 28});

  const CliRun multi = cli({"ssr", "--input", (dir / "a.ppm").string(),
                            "--output", (dir / "m.ppm").string(), "--scales",
                            "3,5,9"});
  CHECK(multi.code == 0);
  CHECK(slurp(dir / "m.ppm") != slurp(dir / "r1.ppm"));

  const CliRun both = cli({"ssr", "--input", (dir / "a.ppm").string(),
                           "--output", (dir / "x.ppm").string(), "--sigma",
                           "5", "--scales", "3,5"});
  CHECK(both.code == 1);

  fs::remove_all(dir);
}

TEST_CASE("gradcheck passes at defaults and fails loudly at absurd tolerance") {
  const CliRun ok = cli({"gradcheck"});
  CHECK(ok.code == 0);
  CHECK(contains(ok.out, "all gradient checks passed"));
  CHECK(contains(ok.out, "conv2d"));
  CHECK(contains(ok.out, "network"));

  const CliRun strict = cli({"gradcheck", "--tol", "1e-9"});
  CHECK(strict.code == 3);
  CHECK(contains(strict.err, "gradient check"));
}
