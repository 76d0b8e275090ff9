#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "snet/synth.hpp"
#include "snet/tensor.hpp"

namespace snet {

// Paired layout on disk: <dir>/low/ and <dir>/high/ hold identically named
// images; an optional <dir>/led_target/ holds the matching noise-free dark
// targets. When that directory is absent the target is reconstructed per
// pair by fitting the darkening model to (low, high).

struct DatasetItem {
  std::string name;
  Tensor low, high, led_target;  // each [1, 3, H, W], same shape per item
};

struct PairedDataset {
  std::vector<DatasetItem> items;
};

// Sorted names of the .ppm files directly inside dir.
std::vector<std::string> list_images(const std::string& dir);

// Loads every pair, sorted by name. The two (or three) directories must hold
// exactly the same file names; per-item shapes must match. Notes on `warn`
// when LED targets are being reconstructed.
PairedDataset load_paired_dataset(const std::string& dir,
                                  std::ostream* warn = nullptr);

struct SynthRecord {
  std::string name;
  DarkeningParams params;
};

// Darkens every normal-light image in normal_dir with its own sampled
// triple and writes out_dir/{low,high,led_target}/<name> plus
// out_dir/manifest.txt lines "<name> <alpha> <beta> <gamma>". The synthetic
// low image is noise-free, so it doubles as its own LED target. Deterministic
// per seed; images are processed in sorted name order.
std::vector<SynthRecord> generate_synthetic_dataset(
    const std::string& normal_dir, const std::string& out_dir, uint64_t seed);

}  // namespace snet
