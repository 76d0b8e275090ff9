#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "snet/dataset.hpp"
#include "snet/network.hpp"
#include "snet/rng.hpp"
#include "snet/tensor.hpp"

namespace snet {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter first/second moments, aligned index-for-index with the
// parameter list they were created from. step counts applied updates only.
struct AdamState {
  std::vector<Tensor> m, v;
  int64_t step = 0;
};

AdamState make_adam_state(const std::vector<Tensor>& params);

// One bias-corrected Adam update from the parameters' accumulated gradients.
// If any gradient value is non-finite the whole step is skipped, the state
// is left untouched, the incident is described on `log`, and false returns.
bool adam_step(std::vector<Tensor>& params, AdamState& state,
               const AdamConfig& cfg, std::ostream* log = nullptr);

struct Batch {
  Tensor low, high, led_target;  // [B, 3, patch, patch]
};

// batch_size aligned random crops: per sample one image index and one crop
// window, shared across low/high/led_target. Images smaller than the patch
// are skipped (noted once per call on `warn`). Draw order per sample is
// image, then row offset, then column offset.
Batch sample_batch(const PairedDataset& data, Rng& rng, int64_t batch_size,
                   int64_t patch, std::ostream* warn = nullptr);

struct TrainConfig {
  NetworkConfig net;
  std::string dataset_dir;
  std::string eval_dir;         // optional held-out pairs
  std::string out_dir;          // metrics/eval logs and checkpoints
  std::string init_checkpoint;  // optional warm start
  bool resume = false;          // with init_checkpoint: restore optimizer too
  int64_t batch_size = 8;
  int64_t patch = 64;
  int64_t steps = 0;   // 0: derive from epochs
  int64_t epochs = 0;  // one epoch = ceil(pairs / batch) steps
  uint64_t seed = 0;
  bool use_les = true;
  bool freeze_led = false;
  int64_t checkpoint_every = 500;
  int64_t eval_every = 0;  // 0: no held-out evaluation
  AdamConfig adam;
};

struct TrainResult {
  int64_t steps_run = 0;
  double final_loss = 0.0;
  std::string checkpoint_path;
  std::string metrics_path;
};

// Full seeded loop: batches are keyed by (seed, step) so runs are
// reproducible and resumable mid-stream. Per step one metrics record
// `step loss l_ssim l_char l_dists l_l` is appended; the model checkpoint
// and an optimizer sibling (<checkpoint>.opt) are written every
// checkpoint_every steps and at the end. A non-finite loss aborts with a
// numeric error, leaving the last written checkpoint in place.
TrainResult train(const TrainConfig& cfg, std::ostream& out,
                  std::ostream& err);

struct EvalRow {
  std::string name;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;  // sorted by name
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

// Enhances every low image at inference settings and scores it against the
// paired high image.
EvalReport evaluate(const NetworkParams& params, const PairedDataset& data);

}  // namespace snet
