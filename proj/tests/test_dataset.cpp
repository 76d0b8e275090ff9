#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "snet/dataset.hpp"
#include "snet/error.hpp"
#include "snet/image_io.hpp"
#include "snet/rng.hpp"
#include "snet/synth.hpp"
#include "snet/tensor.hpp"

namespace fs = std::filesystem;
using snet::Tensor;

namespace {

fs::path temp_dir() {
  static int counter = 0;
  const fs::path p = fs::temp_directory_path() /
                     ("snet_data_" + std::to_string(::getpid()) + "_" +
                      std::to_string(counter++));
  fs::create_directories(p);
  return p;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto av = a.values();
  auto bv = b.values();
  for (size_t i = 0; i < av.size(); ++i)
    if (av[i] != bv[i]) return false;
  return true;
}

// Values on the representable byte grid so a write/read round-trip is exact.
Tensor grid_image(snet::Rng& rng, int64_t h, int64_t w) {
  Tensor t = Tensor::zeros({1, 3, h, w});
  for (auto& v : t.values())
    v = static_cast<float>(rng.bounded(256)) / 255.0f;
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("image write/read round-trips byte-grid values exactly") {
  const fs::path dir = temp_dir();
  snet::Rng rng(1);
  Tensor img = grid_image(rng, 13, 17);
  const std::string path = (dir / "a.ppm").string();
  snet::write_image(path, img);
  Tensor back = snet::read_image(path);
  CHECK(bitwise_equal(back, img));

  // Rank-3 writes are accepted and produce the same file.
  Tensor chw = Tensor::zeros({3, 13, 17});
  auto src = img.values();
  auto dst = chw.values();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i];
  snet::write_image((dir / "b.ppm").string(), chw);
  CHECK(slurp(dir / "a.ppm") == slurp(dir / "b.ppm"));
  fs::remove_all(dir);
}

TEST_CASE("image writer rounds and clamps to bytes") {
  const fs::path dir = temp_dir();
  Tensor img = Tensor::zeros({1, 3, 1, 2});
  auto v = img.values();
  v[0] = 0.5f;      // R of px0: 127.5 rounds to 128
  v[1] = -0.25f;    // R of px1: clamps to 0
  v[2] = 1.75f;     // G of px0: clamps to 255
  v[3] = 0.1f;      // G of px1: 25.5 rounds to 26 (lround half-up)
  v[4] = 0.0f;
  v[5] = 1.0f;
  const std::string path = (dir / "px.ppm").string();
  snet::write_image(path, img);
  const std::string data = slurp(path);
  REQUIRE(data.size() == 17);  // "P6\n2 1\n255\n" header + 6 raster bytes
  CHECK(data.substr(0, 11) == "P6\n2 1\n255\n");
  const unsigned char* px =
      reinterpret_cast<const unsigned char*>(data.data() + data.size() - 6);
  CHECK(px[0] == 128);  // px0 R
  CHECK(px[1] == 255);  // px0 G
  CHECK(px[2] == 0);    // px0 B
  CHECK(px[3] == 0);    // px1 R
  CHECK(px[4] == 26);   // px1 G
  CHECK(px[5] == 255);  // px1 B
  fs::remove_all(dir);
}

TEST_CASE("image reader accepts comments and rejects bad files") {
  const fs::path dir = temp_dir();
  auto write_file = [&](const std::string& name, const std::string& bytes) {
    std::ofstream out(dir / name, std::ios::binary);
    out << bytes;
  };

  write_file("ok.ppm", "P6 # comment\n# another\n2 1\n255\n" +
                           std::string(6, '\x40'));
  Tensor t = snet::read_image((dir / "ok.ppm").string());
  CHECK(t.dim(3) == 2);
  CHECK(t.values()[0] == 64.0f / 255.0f);

  write_file("ascii.ppm", "P3\n1 1\n255\n1 2 3\n");
  CHECK_THROWS_WITH_AS(snet::read_image((dir / "ascii.ppm").string()),
                       doctest::Contains("P3"), snet::Error);

  write_file("deep.ppm", "P6\n1 1\n65535\n" + std::string(6, 'x'));
  CHECK_THROWS_WITH_AS(snet::read_image((dir / "deep.ppm").string()),
                       doctest::Contains("16-bit"), snet::Error);

  write_file("lowmax.ppm", "P6\n1 1\n15\n" + std::string(3, 'x'));
  CHECK_THROWS_WITH_AS(snet::read_image((dir / "lowmax.ppm").string()),
                       doctest::Contains("maxval"), snet::Error);

  write_file("short.ppm", "P6\n2 2\n255\nxxx");
  CHECK_THROWS_WITH_AS(snet::read_image((dir / "short.ppm").string()),
                       doctest::Contains("truncated"), snet::Error);

  write_file("magic.ppm", "Q6\n1 1\n255\nxxx");
  CHECK_THROWS_AS(snet::read_image((dir / "magic.ppm").string()), snet::Error);

  CHECK_THROWS_WITH_AS(snet::read_image((dir / "absent.ppm").string()),
                       doctest::Contains("cannot open"), snet::Error);

  CHECK_THROWS_AS(snet::write_image((dir / "bad.ppm").string(),
                                    Tensor::zeros({2, 3, 4, 4})),
                  snet::Error);
  fs::remove_all(dir);
}

TEST_CASE("list_images sorts and filters") {
  const fs::path dir = temp_dir();
  snet::Rng rng(2);
  snet::write_image((dir / "b.ppm").string(), grid_image(rng, 4, 4));
  snet::write_image((dir / "a.ppm").string(), grid_image(rng, 4, 4));
  std::ofstream(dir / "notes.txt") << "ignored";
  const std::vector<std::string> names = snet::list_images(dir.string());
  REQUIRE(names.size() == 2);
  CHECK(names[0] == "a.ppm");
  CHECK(names[1] == "b.ppm");
  CHECK_THROWS_AS(snet::list_images((dir / "missing").string()), snet::Error);
  fs::remove_all(dir);
}

TEST_CASE("synthetic generation writes the full layout deterministically") {
  const fs::path normal = temp_dir();
  snet::Rng rng(3);
  for (const char* name : {"n1.ppm", "n2.ppm", "n3.ppm"})
    snet::write_image((normal / name).string(), grid_image(rng, 20, 24));

  const fs::path out_a = temp_dir();
  const auto recs =
      snet::generate_synthetic_dataset(normal.string(), out_a.string(), 11);
  REQUIRE(recs.size() == 3);
  for (const auto& r : recs) {
    CHECK(r.params.beta >= 0.5);
    CHECK(r.params.beta < 1.0);
    CHECK(r.params.alpha >= 0.9);
    CHECK(r.params.alpha < 1.0);
    CHECK(r.params.gamma >= 1.5);
    CHECK(r.params.gamma < 5.0);
  }
  for (const char* sub : {"low", "high", "led_target"})
    CHECK(snet::list_images((out_a / sub).string()).size() == 3);

  // Noise-free synthesis: the dark image is its own denoiser target.
  for (const auto& r : recs)
    CHECK(slurp(out_a / "low" / r.name) == slurp(out_a / "led_target" / r.name));
  // The normal-light copy is lossless (inputs sat on the byte grid).
  CHECK(slurp(out_a / "high" / "n1.ppm") == slurp(normal / "n1.ppm"));

  const fs::path out_b = temp_dir();
  snet::generate_synthetic_dataset(normal.string(), out_b.string(), 11);
  CHECK(slurp(out_a / "manifest.txt") == slurp(out_b / "manifest.txt"));
  CHECK(slurp(out_a / "low" / "n2.ppm") == slurp(out_b / "low" / "n2.ppm"));

  const fs::path out_c = temp_dir();
  snet::generate_synthetic_dataset(normal.string(), out_c.string(), 12);
  CHECK(slurp(out_a / "manifest.txt") != slurp(out_c / "manifest.txt"));

  // Manifest darkening params reproduce the written low images.
  std::ifstream manifest(out_a / "manifest.txt");
  std::string name;
  snet::DarkeningParams p;
  int parsed = 0;
  while (manifest >> name >> p.alpha >> p.beta >> p.gamma) {
    Tensor high = snet::read_image((out_a / "high" / name).string());
    Tensor low = snet::read_image((out_a / "low" / name).string());
    Tensor redone = snet::darken(high, p);
    auto lv = low.values();
    auto rv = redone.values();
    for (size_t i = 0; i < lv.size(); ++i)
      CHECK(std::fabs(lv[i] - rv[i]) <= 0.5f / 255.0f + 1e-6f);
    ++parsed;
  }
  CHECK(parsed == 3);

  fs::remove_all(normal);
  fs::remove_all(out_a);
  fs::remove_all(out_b);
  fs::remove_all(out_c);
}

TEST_CASE("paired loading reads targets or reconstructs them") {
  const fs::path normal = temp_dir();
  snet::Rng rng(5);
  snet::write_image((normal / "x.ppm").string(), grid_image(rng, 18, 18));
  snet::write_image((normal / "y.ppm").string(), grid_image(rng, 18, 22));
  const fs::path ds = temp_dir();
  snet::generate_synthetic_dataset(normal.string(), ds.string(), 21);

  std::ostringstream warn;
  snet::PairedDataset data = snet::load_paired_dataset(ds.string(), &warn);
  REQUIRE(data.items.size() == 2);
  CHECK(data.items[0].name == "x.ppm");
  CHECK(data.items[1].name == "y.ppm");
  CHECK(warn.str().empty());  // targets came from disk
  for (const auto& item : data.items) {
    CHECK(item.low.shape() == item.high.shape());
    CHECK(bitwise_equal(item.led_target, item.low));
  }

  // Drop led_target/: loading reconstructs via the darkening fit and says so.
  fs::remove_all(ds / "led_target");
  std::ostringstream warn2;
  snet::PairedDataset rebuilt = snet::load_paired_dataset(ds.string(), &warn2);
  CHECK(warn2.str().find("reconstructing") != std::string::npos);
  for (size_t i = 0; i < rebuilt.items.size(); ++i) {
    const auto& item = rebuilt.items[i];
    CHECK(item.led_target.shape() == item.low.shape());
    // The reconstruction re-darkens the clean image with the fitted params;
    // it should sit close to the (noise-free) low image.
    auto a = item.led_target.values();
    auto b = item.low.values();
    double err = 0.0;
    for (size_t j = 0; j < a.size(); ++j)
      err += (a[j] - b[j]) * (a[j] - b[j]);
    CHECK(std::sqrt(err / static_cast<double>(a.size())) < 0.02);
  }

  // Asymmetric names are a hard error.
  fs::remove(ds / "high" / "y.ppm");
  CHECK_THROWS_WITH_AS(snet::load_paired_dataset(ds.string()),
                       doctest::Contains("identically named"), snet::Error);

  fs::remove_all(normal);
  fs::remove_all(ds);
}
