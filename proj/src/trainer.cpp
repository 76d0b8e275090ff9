#include "snet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <unordered_map>

#include "snet/error.hpp"
#include "snet/losses.hpp"

namespace snet {

namespace fs = std::filesystem;

AdamState make_adam_state(const std::vector<Tensor>& params) {
  AdamState state;
  for (const Tensor& p : params) {
    if (!p.defined()) usage_error("optimizer state needs defined parameters");
    state.m.push_back(Tensor::zeros(p.shape()));
    state.v.push_back(Tensor::zeros(p.shape()));
  }
  return state;
}

bool adam_step(std::vector<Tensor>& params, AdamState& state,
               const AdamConfig& cfg, std::ostream* log) {
  if (params.size() != state.m.size() || params.size() != state.v.size())
    usage_error("optimizer state does not match the parameter list");

  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != state.m[i].shape())
      usage_error("optimizer moment shape does not match its parameter");
    for (float g : params[i].grad_values()) {
      if (!std::isfinite(g)) {
        if (log)
          *log << "warning: non-finite gradient, optimizer step skipped\n";
        return false;
      }
    }
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].values();
    auto g = params[i].grad_values();
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    for (size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update =
          cfg.lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      p[j] = static_cast<float>(p[j] - update);
    }
  }
  return true;
}

Batch sample_batch(const PairedDataset& data, Rng& rng, int64_t batch_size,
                   int64_t patch, std::ostream* warn) {
  if (batch_size < 1) usage_error("batch size must be positive");
  if (patch < 1) usage_error("patch size must be positive");

  std::vector<size_t> usable;
  for (size_t i = 0; i < data.items.size(); ++i) {
    const Tensor& low = data.items[i].low;
    if (low.dim(2) >= patch && low.dim(3) >= patch) {
      usable.push_back(i);
    } else if (warn) {
      *warn << "warning: " << data.items[i].name << " ("
            << low.dim(3) << "x" << low.dim(2)
            << ") is smaller than the patch, skipped\n";
    }
  }
  if (usable.empty())
    data_error("no image is at least " + std::to_string(patch) + "x" +
               std::to_string(patch));

  Batch batch;
  batch.low = Tensor::zeros({batch_size, 3, patch, patch});
  batch.high = Tensor::zeros({batch_size, 3, patch, patch});
  batch.led_target = Tensor::zeros({batch_size, 3, patch, patch});
  auto bl = batch.low.values();
  auto bh = batch.high.values();
  auto bt = batch.led_target.values();

  for (int64_t b = 0; b < batch_size; ++b) {
    const DatasetItem& item =
        data.items[usable[rng.bounded(usable.size())]];
    const int64_t h = item.low.dim(2), w = item.low.dim(3);
    const int64_t oy =
        static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(h - patch + 1)));
    const int64_t ox =
        static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(w - patch + 1)));
    auto lo = item.low.values();
    auto hi = item.high.values();
    auto tg = item.led_target.values();
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < patch; ++y)
        for (int64_t x = 0; x < patch; ++x) {
          const size_t src =
              static_cast<size_t>((c * h + oy + y) * w + ox + x);
          const size_t dst = static_cast<size_t>(
              ((b * 3 + c) * patch + y) * patch + x);
          bl[dst] = lo[src];
          bh[dst] = hi[src];
          bt[dst] = tg[src];
        }
  }
  return batch;
}

namespace {

// The two counters ride along in the optimizer container as 1-element float
// tensors; exact below 2^24 steps, far past any run this trainer does.
std::vector<NamedTensor> optimizer_tensors(
    const std::vector<NamedTensor>& trainable, const AdamState& state,
    int64_t loop_step) {
  std::vector<NamedTensor> out;
  for (size_t i = 0; i < trainable.size(); ++i) {
    out.push_back({"m." + trainable[i].name, state.m[i]});
    out.push_back({"v." + trainable[i].name, state.v[i]});
  }
  out.push_back({"adam.step",
                 Tensor::full({1}, static_cast<float>(state.step))});
  out.push_back({"loop.step",
                 Tensor::full({1}, static_cast<float>(loop_step))});
  return out;
}

int64_t load_optimizer(const std::string& path,
                       const std::vector<NamedTensor>& trainable,
                       AdamState& state) {
  const std::vector<NamedTensor> stored = read_tensor_file(path);
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const NamedTensor& nt : stored) {
    if (!by_name.emplace(nt.name, &nt.tensor).second)
      data_error("duplicate tensor " + nt.name + " in " + path);
  }
  if (stored.size() != trainable.size() * 2 + 2)
    data_error("optimizer file " + path +
               " does not match the trainable parameter set");
  auto fetch = [&](const std::string& name, const Shape& shape) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      data_error("optimizer file " + path + " is missing " + name);
    if (it->second->shape() != shape)
      data_error("optimizer tensor " + name + " in " + path +
                 " has the wrong shape");
    return *it->second;
  };
  for (size_t i = 0; i < trainable.size(); ++i) {
    const Tensor m = fetch("m." + trainable[i].name, state.m[i].shape());
    const Tensor v = fetch("v." + trainable[i].name, state.v[i].shape());
    auto md = state.m[i].values();
    auto vd = state.v[i].values();
    std::copy(m.values().begin(), m.values().end(), md.begin());
    std::copy(v.values().begin(), v.values().end(), vd.begin());
  }
  const Tensor adam_step = fetch("adam.step", {1});
  const Tensor loop_step = fetch("loop.step", {1});
  state.step = static_cast<int64_t>(adam_step.values()[0]);
  return static_cast<int64_t>(loop_step.values()[0]);
}

}  // namespace

TrainResult train(const TrainConfig& cfg, std::ostream& out,
                  std::ostream& err) {
  if (cfg.dataset_dir.empty()) usage_error("training needs a dataset dir");
  if (cfg.out_dir.empty()) usage_error("training needs an output dir");
  if (cfg.batch_size < 1) usage_error("batch size must be positive");
  int64_t max_k = 0;
  for (int64_t k : cfg.net.asf_sizes) max_k = std::max(max_k, k);
  const int64_t min_patch = 2 * max_k - 1;
  if (cfg.patch < min_patch)
    usage_error("patch " + std::to_string(cfg.patch) +
                " is smaller than the largest surround footprint " +
                std::to_string(min_patch));
  if (cfg.resume && cfg.init_checkpoint.empty())
    usage_error("resume needs an init checkpoint");
  if (cfg.steps <= 0 && cfg.epochs <= 0) usage_error("set steps or epochs");

  const PairedDataset data = load_paired_dataset(cfg.dataset_dir, &err);
  int64_t steps = cfg.steps;
  if (steps <= 0) {
    const int64_t per_epoch =
        (static_cast<int64_t>(data.items.size()) + cfg.batch_size - 1) /
        cfg.batch_size;
    steps = cfg.epochs * per_epoch;
  }

  PairedDataset eval_data;
  if (cfg.eval_every > 0) {
    if (cfg.eval_dir.empty())
      usage_error("eval cadence set but no eval dir given");
    eval_data = load_paired_dataset(cfg.eval_dir, &err);
  }

  NetworkParams net = make_network(cfg.net, cfg.seed);
  if (!cfg.init_checkpoint.empty()) load_checkpoint(net, cfg.init_checkpoint);

  std::vector<NamedTensor> trainable;
  for (const NamedTensor& nt : named_parameters(net)) {
    if (cfg.freeze_led && nt.name.rfind("led.", 0) == 0) continue;
    trainable.push_back(nt);
  }
  std::vector<Tensor> train_tensors;
  for (const NamedTensor& nt : trainable) train_tensors.push_back(nt.tensor);
  AdamState state = make_adam_state(train_tensors);

  int64_t start_step = 0;
  if (cfg.resume)
    start_step = load_optimizer(cfg.init_checkpoint + ".opt", trainable,
                                state);

  fs::create_directories(cfg.out_dir);
  const std::string ckpt_path =
      (fs::path(cfg.out_dir) / "checkpoint.srnd").string();
  const std::string metrics_path =
      (fs::path(cfg.out_dir) / "metrics.log").string();
  std::ofstream metrics(metrics_path,
                        cfg.resume ? std::ios::app : std::ios::trunc);
  if (!metrics) data_error("cannot write " + metrics_path);
  metrics.precision(17);
  std::ofstream eval_log;
  if (cfg.eval_every > 0) {
    eval_log.open((fs::path(cfg.out_dir) / "eval.log").string(),
                  cfg.resume ? std::ios::app : std::ios::trunc);
    eval_log.precision(17);
  }

  auto save_all = [&](int64_t loop_step) {
    save_checkpoint(net, ckpt_path);
    write_tensor_file(optimizer_tensors(trainable, state, loop_step),
                      ckpt_path + ".opt");
  };

  std::vector<Tensor> all_params;
  for (const NamedTensor& nt : named_parameters(net))
    all_params.push_back(nt.tensor);

  const PyramidExtractor extractor;
  TrainResult result;
  result.checkpoint_path = ckpt_path;
  result.metrics_path = metrics_path;

  for (int64_t step = start_step + 1; step <= steps; ++step) {
    Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(step)));
    Batch batch = sample_batch(data, rng, cfg.batch_size, cfg.patch,
                               step == start_step + 1 ? &err : nullptr);

    for (Tensor& p : all_params) p.zero_grad();

    LossTerms terms;
    {
      Tape tape;
      NetworkOutput o = surroundnet_forward(batch.low, net, true);
      terms = total_loss(o.enhanced, batch.high, o.led_out, batch.led_target,
                         extractor, cfg.use_les);
      if (!std::isfinite(terms.l_t)) {
        metrics.flush();
        numeric_error("loss became non-finite at step " +
                      std::to_string(step) +
                      "; last written checkpoint retained");
      }
      tape.backward(terms.total);
    }

    adam_step(train_tensors, state, cfg.adam, &err);

    metrics << step << " " << terms.l_t << " " << terms.l_ssim << " "
            << terms.l_char << " " << terms.l_dists << " " << terms.l_l
            << "\n";
    metrics.flush();

    if (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
      const EvalReport report = evaluate(net, eval_data);
      eval_log << step << " " << report.mean_psnr << " " << report.mean_ssim
               << "\n";
      eval_log.flush();
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      save_all(step);

    result.final_loss = terms.l_t;
    result.steps_run += 1;
  }

  save_all(steps);
  out << "trained " << result.steps_run << " step(s), final loss "
      << result.final_loss << ", checkpoint " << ckpt_path << "\n";
  return result;
}

EvalReport evaluate(const NetworkParams& params, const PairedDataset& data) {
  if (data.items.empty()) data_error("nothing to evaluate");
  EvalReport report;
  for (const DatasetItem& item : data.items) {
    const NetworkOutput o = surroundnet_forward(item.low, params, false);
    EvalRow row;
    row.name = item.name;
    row.psnr = psnr(o.enhanced, item.high);
    row.ssim = ssim_index(o.enhanced, item.high);
    report.mean_psnr += row.psnr;
    report.mean_ssim += row.ssim;
    report.rows.push_back(std::move(row));
  }
  report.mean_psnr /= static_cast<double>(report.rows.size());
  report.mean_ssim /= static_cast<double>(report.rows.size());
  return report;
}

}  // namespace snet
