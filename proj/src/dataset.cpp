#include "snet/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "snet/error.hpp"
#include "snet/image_io.hpp"
#include "snet/rng.hpp"

namespace snet {

namespace fs = std::filesystem;

std::vector<std::string> list_images(const std::string& dir) {
  if (!fs::is_directory(dir)) data_error("not a directory: " + dir);
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm")
      names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  return names;
}

PairedDataset load_paired_dataset(const std::string& dir,
                                  std::ostream* warn) {
  const fs::path root(dir);
  const std::vector<std::string> low_names = list_images((root / "low").string());
  const std::vector<std::string> high_names =
      list_images((root / "high").string());
  if (low_names != high_names)
    data_error("low/ and high/ in " + dir +
               " do not hold identically named images");
  if (low_names.empty()) data_error("no .ppm images under " + dir);

  const bool has_led = fs::is_directory(root / "led_target");
  if (!has_led && warn)
    *warn << "note: " << dir
          << " has no led_target/, reconstructing targets from the pairs\n";

  PairedDataset data;
  for (const std::string& name : low_names) {
    DatasetItem item;
    item.name = name;
    item.low = read_image((root / "low" / name).string());
    item.high = read_image((root / "high" / name).string());
    if (item.low.shape() != item.high.shape())
      data_error("pair " + name + " in " + dir + " has mismatched sizes");
    if (has_led) {
      item.led_target = read_image((root / "led_target" / name).string());
      if (item.led_target.shape() != item.low.shape())
        data_error("led_target " + name + " in " + dir +
                   " has a mismatched size");
    } else {
      item.led_target = make_led_target(item.low, item.high);
    }
    data.items.push_back(std::move(item));
  }
  return data;
}

std::vector<SynthRecord> generate_synthetic_dataset(
    const std::string& normal_dir, const std::string& out_dir,
    uint64_t seed) {
  const std::vector<std::string> names = list_images(normal_dir);
  if (names.empty()) data_error("no .ppm images under " + normal_dir);

  const fs::path root(out_dir);
  fs::create_directories(root / "low");
  fs::create_directories(root / "high");
  fs::create_directories(root / "led_target");

  std::ofstream manifest(root / "manifest.txt", std::ios::trunc);
  if (!manifest) data_error("cannot write manifest under " + out_dir);
  manifest.precision(17);

  Rng rng(seed);
  std::vector<SynthRecord> records;
  for (const std::string& name : names) {
    const Tensor normal = read_image((fs::path(normal_dir) / name).string());
    const DarkeningParams p = sample_params(rng);
    const Tensor dark = darken(normal, p);
    write_image((root / "high" / name).string(), normal);
    write_image((root / "low" / name).string(), dark);
    // Noise-free by construction, so the dark image is its own target.
    write_image((root / "led_target" / name).string(), make_led_target(dark));
    manifest << name << " " << p.alpha << " " << p.beta << " " << p.gamma
             << "\n";
    records.push_back({name, p});
  }
  manifest.flush();
  if (!manifest) data_error("failed writing manifest under " + out_dir);
  return records;
}

}  // namespace snet
