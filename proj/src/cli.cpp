#include "snet/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "snet/dataset.hpp"
#include "snet/error.hpp"
#include "snet/image_io.hpp"
#include "snet/losses.hpp"
#include "snet/network.hpp"
#include "snet/rng.hpp"
#include "snet/surround.hpp"
#include "snet/synth.hpp"
#include "snet/tensor.hpp"
#include "snet/trainer.hpp"

namespace snet {
namespace {

namespace fs = std::filesystem;

// ---- config file ------------------------------------------------------

std::string trim(const std::string& s) {
  const size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int64_t parse_int(const std::string& key, const std::string& value) {
  size_t used = 0;
  int64_t v = 0;
  try {
    v = std::stoll(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty())
    usage_error(key + " expects an integer, got '" + value + "'");
  return v;
}

double parse_double(const std::string& key, const std::string& value) {
  size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty())
    usage_error(key + " expects a number, got '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  usage_error(key + " expects true or false, got '" + value + "'");
}

std::vector<int64_t> parse_sizes(const std::string& key,
                                 const std::string& value) {
  std::vector<int64_t> sizes;
  std::string item;
  std::stringstream ss(value);
  while (std::getline(ss, item, ',')) {
    const int64_t k = parse_int(key, trim(item));
    if (k < 1) usage_error(key + " entries must be positive");
    sizes.push_back(k);
  }
  if (sizes.empty()) usage_error(key + " expects a comma-separated list");
  return sizes;
}

// One `key = value` assignment; the same vocabulary backs the config file
// and the train flags. Unknown keys are hard errors so typos cannot
// silently fall back to defaults.
void apply_key(TrainConfig& cfg, const std::string& key,
               const std::string& value) {
  if (key == "dataset_dir") cfg.dataset_dir = value;
  else if (key == "eval_dir") cfg.eval_dir = value;
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "init_checkpoint") cfg.init_checkpoint = value;
  else if (key == "resume") cfg.resume = parse_bool(key, value);
  else if (key == "batch_size") cfg.batch_size = parse_int(key, value);
  else if (key == "patch") cfg.patch = parse_int(key, value);
  else if (key == "steps") cfg.steps = parse_int(key, value);
  else if (key == "epochs") cfg.epochs = parse_int(key, value);
  else if (key == "seed")
    cfg.seed = static_cast<uint64_t>(parse_int(key, value));
  else if (key == "use_les") cfg.use_les = parse_bool(key, value);
  else if (key == "freeze_led") cfg.freeze_led = parse_bool(key, value);
  else if (key == "checkpoint_every")
    cfg.checkpoint_every = parse_int(key, value);
  else if (key == "eval_every") cfg.eval_every = parse_int(key, value);
  else if (key == "lr") cfg.adam.lr = parse_double(key, value);
  else if (key == "beta1") cfg.adam.beta1 = parse_double(key, value);
  else if (key == "beta2") cfg.adam.beta2 = parse_double(key, value);
  else if (key == "eps") cfg.adam.eps = parse_double(key, value);
  else if (key == "channels") cfg.net.channels = parse_int(key, value);
  else if (key == "led_channels")
    cfg.net.led_channels = parse_int(key, value);
  else if (key == "led_depth") cfg.net.led_depth = parse_int(key, value);
  else if (key == "led_growth") cfg.net.led_growth = parse_int(key, value);
  else if (key == "asf_sizes") cfg.net.asf_sizes = parse_sizes(key, value);
  else if (key == "use_eca") cfg.net.use_eca = parse_bool(key, value);
  else if (key == "plain_blocks")
    cfg.net.plain_blocks = parse_bool(key, value);
  else
    usage_error("unknown config key '" + key + "'");
}

// Line-based `key = value`; blank lines and lines starting with # skipped.
void load_config_file(TrainConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) data_error("cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    const size_t eq = text.find('=');
    if (eq == std::string::npos)
      usage_error(path + ":" + std::to_string(lineno) +
                  " is not a key = value line");
    apply_key(cfg, trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
  }
}

// ---- shared flag plumbing ----------------------------------------------

// Network-shape flags used by enhance and params; train mirrors the same
// vocabulary through the config keys.
struct NetFlags {
  std::string config_path;
  std::string asf_sizes;
  NetworkConfig net;
  CLI::Option* o_channels = nullptr;
  CLI::Option* o_led_channels = nullptr;
  CLI::Option* o_led_depth = nullptr;
  CLI::Option* o_led_growth = nullptr;
  CLI::Option* o_asf_sizes = nullptr;
  CLI::Option* o_eca = nullptr;
  CLI::Option* o_plain = nullptr;
};

void add_net_flags(CLI::App* sub, NetFlags& f) {
  sub->add_option("--config", f.config_path,
                  "key = value file; explicit flags override it");
  f.o_channels = sub->add_option("--channels", f.net.channels,
                                 "branch feature width (default 32)");
  f.o_led_channels =
      sub->add_option("--led-channels", f.net.led_channels,
                      "denoiser feature width (default 16)");
  f.o_led_depth = sub->add_option("--led-depth", f.net.led_depth,
                                  "dense layers per denoiser block (default 4)");
  f.o_led_growth =
      sub->add_option("--led-growth", f.net.led_growth,
                      "channels each dense layer adds (default 8)");
  f.o_asf_sizes =
      sub->add_option("--asf-sizes", f.asf_sizes,
                      "comma list of surround half sizes (default 3,7,11,15)");
  f.o_eca = sub->add_flag("--eca,!--no-eca", f.net.use_eca,
                          "channel attention over the branch concat (default on)");
  f.o_plain =
      sub->add_flag("--plain-blocks,!--no-plain-blocks", f.net.plain_blocks,
                    "swap retinex branches for plain conv stacks (default off)");
}

NetworkConfig resolve_net(const NetFlags& f) {
  TrainConfig file_cfg;
  if (!f.config_path.empty()) load_config_file(file_cfg, f.config_path);
  NetworkConfig net = file_cfg.net;
  if (*f.o_channels) net.channels = f.net.channels;
  if (*f.o_led_channels) net.led_channels = f.net.led_channels;
  if (*f.o_led_depth) net.led_depth = f.net.led_depth;
  if (*f.o_led_growth) net.led_growth = f.net.led_growth;
  if (*f.o_asf_sizes) net.asf_sizes = parse_sizes("asf_sizes", f.asf_sizes);
  if (*f.o_eca) net.use_eca = f.net.use_eca;
  if (*f.o_plain) net.plain_blocks = f.net.plain_blocks;
  return net;
}

// ---- enhance ------------------------------------------------------------

int run_enhance(const std::string& input, const std::string& checkpoint,
                const std::string& output, const NetworkConfig& net_cfg,
                std::ostream& out, std::ostream& err) {
  NetworkParams net = make_network(net_cfg, 0);
  load_checkpoint(net, checkpoint);

  std::vector<fs::path> inputs;
  const fs::path in_path(input);
  if (fs::is_directory(in_path)) {
    for (const std::string& name : list_images(input))
      inputs.push_back(in_path / name);
  } else {
    inputs.push_back(in_path);
  }
  fs::create_directories(output);

  std::vector<std::string> failures;
  for (const fs::path& p : inputs) {
    try {
      const Tensor img = read_image(p.string());
      const NetworkOutput o = surroundnet_forward(img, net, false);
      const std::string dest = (fs::path(output) / p.filename()).string();
      write_image(dest, o.enhanced);
      out << p.filename().string() << " -> " << dest << "\n";
    } catch (const Error& e) {
      failures.push_back(p.filename().string() + ": " + e.what());
    }
  }
  if (!failures.empty()) {
    err << failures.size() << " input(s) failed:\n";
    for (const std::string& f : failures) err << "  " << f << "\n";
    return static_cast<int>(ErrorKind::data);
  }
  return 0;
}

// ---- fit ----------------------------------------------------------------

void run_fit(const std::string& low, const std::string& high, uint64_t seed,
             std::ostream& out, std::ostream& err) {
  const Tensor low_img = read_image(low);
  const Tensor high_img = read_image(high);
  const FitResult r = fit_darkening_params(low_img, high_img, {}, 65536, seed);
  if (r.ill_posed)
    err << "warning: the reference image is constant; the fit is ill-posed\n";
  out.precision(10);
  out << "alpha " << r.params.alpha << "\n";
  out << "beta " << r.params.beta << "\n";
  out << "gamma " << r.params.gamma << "\n";
  // The product beta * alpha^gamma is what the pixel data pins down; alpha
  // and beta individually trade off along an exactly flat ridge.
  out << "gain " << r.params.beta * std::pow(r.params.alpha, r.params.gamma)
      << "\n";
  out << "rms " << r.rms << "\n";
  out << "iterations " << r.iterations << "\n";
  out << "converged " << (r.converged ? "true" : "false") << "\n";
}

// ---- eval ---------------------------------------------------------------

void run_eval(const std::string& test_dir, const std::string& ref_dir,
              std::ostream& out) {
  const std::vector<std::string> names = list_images(test_dir);
  const std::vector<std::string> ref_names = list_images(ref_dir);
  if (names != ref_names)
    data_error("test and ref directories do not hold identically named images");
  out.precision(10);
  double sum_psnr = 0.0, sum_ssim = 0.0;
  for (const std::string& name : names) {
    const Tensor t = read_image((fs::path(test_dir) / name).string());
    const Tensor r = read_image((fs::path(ref_dir) / name).string());
    const double p = psnr(t, r);
    const double s = ssim_index(t, r);
    sum_psnr += p;
    sum_ssim += s;
    out << name << " " << p << " " << s << "\n";
  }
  const double n = static_cast<double>(names.size());
  out << "mean " << sum_psnr / n << " " << sum_ssim / n << "\n";
}

// ---- ssr ----------------------------------------------------------------

void run_ssr(const std::string& input, const std::string& output,
             double sigma, const std::string& scales, std::ostream& out) {
  const Tensor img = read_image(input);
  Tensor refl;
  if (!scales.empty()) {
    std::vector<SurroundKernel1D> kernels;
    std::string item;
    std::stringstream ss(scales);
    while (std::getline(ss, item, ',')) {
      const double s = parse_double("scales", trim(item));
      if (s <= 0.0) usage_error("scales must be positive");
      kernels.push_back(gaussian_kernel(s, gaussian_auto_half_size(s)));
    }
    if (kernels.empty()) usage_error("scales expects a comma-separated list");
    const std::vector<double> weights(kernels.size(),
                                      1.0 / static_cast<double>(kernels.size()));
    refl = msr(img, kernels, weights);
  } else {
    if (sigma <= 0.0) usage_error("sigma must be positive");
    refl = ssr(img, gaussian_kernel(sigma, gaussian_auto_half_size(sigma)));
  }

  // Log-reflectance is signed and unbounded; min-max map it onto [0,1] for
  // the 8-bit file. A constant result (flat input) renders mid-gray.
  Tensor shown = refl.detached().clone();
  auto v = shown.values();
  float lo = v[0], hi = v[0];
  for (float x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  const float span = hi - lo;
  for (float& x : v) x = span > 1e-12f ? (x - lo) / span : 0.5f;
  write_image(output, shown);
  out << "wrote " << output << "\n";
}

// ---- gradcheck ----------------------------------------------------------

void fill_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
}

Tensor filled(const Shape& shape, Rng& rng, double lo, double hi,
              bool trainable = false) {
  Tensor t = Tensor::zeros(shape, trainable);
  fill_uniform(t, rng, lo, hi);
  return t;
}

// Finite difference along one joint random unit direction over all leaves,
// compared against the analytic directional derivative. Robust where
// per-coordinate probes drown in float32 noise (deep graphs, normalization
// cancellations).
double directional_rel_err(const std::function<Tensor()>& f,
                           const std::vector<Tensor>& leaves, double eps,
                           uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<float>> dir(leaves.size());
  double norm_sq = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    dir[li].resize(static_cast<size_t>(leaves[li].numel()));
    for (float& d : dir[li]) {
      d = static_cast<float>(rng.normal());
      norm_sq += static_cast<double>(d) * d;
    }
  }
  const double inv_norm = 1.0 / std::sqrt(norm_sq);
  for (auto& block : dir)
    for (float& d : block) d = static_cast<float>(d * inv_norm);

  // Tensor handles share storage, so a by-value copy gives writable views.
  std::vector<Tensor> mut(leaves.begin(), leaves.end());
  for (Tensor& leaf : mut) leaf.zero_grad();
  double analytic = 0.0;
  {
    Tape tape;
    Tensor y = f();
    tape.backward(y);
  }
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto g = leaves[li].grad_values();
    for (size_t i = 0; i < g.size(); ++i)
      analytic += static_cast<double>(g[i]) * dir[li][i];
  }

  auto shift = [&](double t) {
    for (size_t li = 0; li < mut.size(); ++li) {
      auto v = mut[li].values();
      for (size_t i = 0; i < v.size(); ++i)
        v[i] = static_cast<float>(v[i] + t * dir[li][i]);
    }
  };
  shift(eps);
  const double yp = f().value();
  shift(-2.0 * eps);
  const double ym = f().value();
  shift(eps);
  const double numeric = (yp - ym) / (2.0 * eps);
  const double denom = std::max(std::fabs(analytic), std::fabs(numeric));
  return denom < 1e-12 ? 0.0 : std::fabs(analytic - numeric) / denom;
}

int run_gradcheck(uint64_t seed, double eps, double tol, std::ostream& out) {
  Rng rng(seed);
  int failures = 0;
  out.precision(3);

  // Per-coordinate probes. Instances live on domains where every sampled
  // coordinate's gradient is bounded well away from the float32 noise
  // floor, for any seed.
  auto coord_case = [&](const std::string& name,
                        const std::function<Tensor()>& f,
                        const std::vector<Tensor>& leaves) {
    const GradCheckReport rep = gradient_check(f, leaves, eps, tol, 0, seed);
    out << (rep.pass ? "[ok]   " : "[FAIL] ") << name << " max_rel "
        << rep.max_rel_err << " (" << rep.coords_checked << " coords)\n";
    if (!rep.pass) ++failures;
  };

  {
    // Denominators below ~0.5 put the central-difference truncation term
    // (h/b)^2 for div within reach of the tolerance, so start at 0.5.
    Tensor a = filled({3, 4}, rng, 0.5, 1.5, true);
    Tensor b = filled({3, 4}, rng, 0.5, 1.5, true);
    coord_case("add", [&] { return sum(add(a, b)); }, {a, b});
    coord_case("sub", [&] { return sum(sub(a, b)); }, {a, b});
    coord_case("mul", [&] { return sum(mul(a, b)); }, {a, b});
    coord_case("div", [&] { return sum(div(a, b)); }, {a, b});
  }
  {
    Tensor x = filled({3, 4}, rng, 0.3, 1.5, true);
    coord_case("log", [&] { return sum(log(x)); }, {x});
    coord_case("log1p", [&] { return sum(log1p(x)); }, {x});
    coord_case("sqrt", [&] { return sum(sqrt(x)); }, {x});
    coord_case("pow", [&] { return sum(pow(x, 2.7f)); }, {x});
    coord_case("abs", [&] { return sum(abs(x)); }, {x});
    coord_case("relu", [&] { return sum(relu(x)); }, {x});
  }
  {
    Tensor x = filled({3, 4}, rng, -1.5, 1.5, true);
    coord_case("exp", [&] { return sum(exp(x)); }, {x});
    coord_case("sigmoid", [&] { return sum(sigmoid(x)); }, {x});
  }
  {
    Tensor x = filled({2, 6}, rng, 0.3, 1.0, true);
    Tensor c = filled({2, 6}, rng, 0.5, 1.5);
    coord_case("cumsum_last", [&] { return sum(mul(cumsum_last(x), c)); },
               {x});
    coord_case("flip_last", [&] { return sum(mul(flip_last(x), c)); }, {x});
    coord_case("mean", [&] { return mul(mean(x), Tensor::scalar(12.0f)); },
               {x});
  }
  {
    Tensor a = filled({2, 3}, rng, 0.3, 1.0, true);
    Tensor b = filled({2, 2}, rng, 0.3, 1.0, true);
    Tensor c = filled({2, 5}, rng, 0.5, 1.5);
    coord_case("concat_slice",
               [&] {
                 Tensor j = concat({a, b}, 1);
                 return sum(mul(slice(j, 1, 0, 5), c));
               },
               {a, b});
  }
  {
    Tensor x = filled({1, 2, 8, 8}, rng, 0.3, 1.5, true);
    Tensor s = filled({1, 2}, rng, 0.5, 1.5, true);
    // Coefficients of order H*W keep the pooled gradient per pixel O(1).
    Tensor c = filled({1, 2}, rng, 32.0, 96.0);
    coord_case("global_avg_pool",
               [&] { return sum(mul(global_avg_pool(x), c)); }, {x});
    Tensor cs = filled({1, 2, 8, 8}, rng, 0.5, 1.5);
    coord_case("scale_channels",
               [&] { return sum(mul(scale_channels(x, s), cs)); }, {x, s});
  }
  {
    Tensor x = filled({2, 9}, rng, 0.3, 1.0, true);
    Tensor w = filled({3}, rng, 0.3, 1.0, true);
    coord_case("conv1d_last",
               [&] { return sum(conv1d_last(x, w, 1)); }, {x, w});
  }
  {
    // Positive cone: no relu-style kinks exist here, but small positive
    // weights keep each output O(1) so the probe resolves every coordinate.
    Tensor x = filled({1, 3, 6, 6}, rng, 0.2, 1.0, true);
    Tensor w = filled({4, 3, 3, 3}, rng, 0.02, 0.1, true);
    Tensor b = Tensor::full({4}, 0.3f, true);
    Tensor c = filled({1, 4, 6, 6}, rng, 0.5, 1.5);
    coord_case("conv2d",
               [&] {
                 return sum(mul(conv2d(x, w, b, Pad2{1, 1, 1, 1}, 1, 1), c));
               },
               {x, w, b});
    Tensor wg = filled({3, 1, 3, 3}, rng, 0.02, 0.1, true);
    Tensor cg = filled({1, 3, 6, 6}, rng, 0.5, 1.5);
    coord_case("conv2d_grouped_dilated",
               [&] {
                 return sum(
                     mul(conv2d(x, wg, Tensor(), Pad2{2, 2, 2, 2}, 2, 3), cg));
               },
               {x, wg});
  }
  {
    AsfParams asf = make_asf_params(4);
    fill_uniform(asf.raw, rng, 0.5, 1.5);
    Tensor feat = filled({1, 2, 8, 8}, rng, 0.3, 1.3, true);
    Tensor c = filled({1, 2, 8, 8}, rng, 0.5, 1.5);
    coord_case("asf_smooth",
               [&] {
                 return sum(mul(apply_separable(feat, build_asf_1d(asf)), c));
               },
               {feat});
  }

  // Directional probes for the deep composites, where normalization and
  // smoothing cancel individual coordinates but the joint derivative stays
  // well conditioned.
  auto dir_case = [&](const std::string& name,
                      const std::function<Tensor()>& f,
                      const std::vector<Tensor>& leaves) {
    const double dir_tol = std::max(tol, 1e-2);
    double worst = 0.0;
    for (uint64_t probe = 1; probe <= 3; ++probe)
      worst = std::max(worst,
                       directional_rel_err(f, leaves, 3e-3, seed * 131 + probe));
    const bool pass = worst <= dir_tol;
    out << (pass ? "[ok]   " : "[FAIL] ") << name << " max_rel " << worst
        << " (3 directions)\n";
    if (!pass) ++failures;
  };

  {
    AsfParams asf = make_asf_params(4);
    fill_uniform(asf.raw, rng, 0.5, 1.5);
    Tensor feat = filled({1, 2, 8, 8}, rng, 0.3, 1.3);
    Tensor c = filled({1, 2, 8, 8}, rng, 0.5, 1.5);
    dir_case("asf_kernel",
             [&] {
               return sum(mul(apply_separable(feat, build_asf_1d(asf)), c));
             },
             {asf.raw});
  }
  {
    Tensor img = filled({1, 3, 10, 10}, rng, 0.1, 1.0, true);
    Tensor c = filled({1, 3, 10, 10}, rng, 0.5, 1.5);
    const SurroundKernel1D k = gaussian_kernel(2.0, 5);
    dir_case("ssr", [&] { return sum(mul(ssr(img, k), c)); }, {img});
  }
  {
    NetworkConfig cfg;
    cfg.channels = 4;
    cfg.led_channels = 4;
    cfg.led_depth = 2;
    cfg.led_growth = 4;
    cfg.asf_sizes = {3, 5};
    NetworkParams net = make_network(cfg, seed);
    for (auto& nt : named_parameters(net)) {
      const std::string& n = nt.name;
      if (n.size() > 7 && n.compare(n.size() - 7, 7, ".weight") == 0)
        for (float& v : nt.tensor.values()) v *= 0.3f;
      if (n.size() > 5 && n.compare(n.size() - 5, 5, ".bias") == 0)
        for (float& v : nt.tensor.values()) v = 0.5f;
    }
    Tensor img = filled({1, 3, 12, 12}, rng, 0.1, 0.9, true);
    Tensor c = filled({1, 3, 12, 12}, rng, 0.5, 1.5);
    std::vector<Tensor> leaves{img};
    for (const auto& nt : named_parameters(net)) leaves.push_back(nt.tensor);
    dir_case("network",
             [&] {
               const NetworkOutput o = surroundnet_forward(img, net, true);
               return sum(mul(o.enhanced, c));
             },
             leaves);
  }

  if (failures > 0)
    numeric_error(std::to_string(failures) + " gradient check(s) failed");
  out << "all gradient checks passed\n";
  return 0;
}

// ---- params -------------------------------------------------------------

void run_params(const NetworkConfig& net_cfg, std::ostream& out) {
  const NetworkParams net = make_network(net_cfg, 0);
  std::vector<std::pair<std::string, int64_t>> groups;
  for (const NamedTensor& nt : named_parameters(net)) {
    const size_t first = nt.name.find('.');
    std::string group = nt.name.substr(0, first);
    if (group == "blocks") {
      const size_t second = nt.name.find('.', first + 1);
      group = nt.name.substr(0, second);
    }
    if (groups.empty() || groups.back().first != group)
      groups.emplace_back(group, 0);
    groups.back().second += nt.tensor.numel();
  }
  for (const auto& [group, count] : groups)
    out << group << " " << count << "\n";
  out << "total " << param_count(net) << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"surround-retinex low-light image enhancement toolkit"};
  app.name("snet");
  app.require_subcommand(1);
  int exit_code = 0;

  // enhance
  std::string en_input, en_checkpoint, en_output;
  NetFlags en_net;
  CLI::App* en = app.add_subcommand("enhance", "enhance images with a trained checkpoint");
  en->add_option("--input", en_input, "image file or directory of .ppm images")
      ->required();
  en->add_option("--checkpoint", en_checkpoint, "trained model checkpoint")
      ->required();
  en->add_option("--output", en_output, "directory for enhanced images")
      ->required();
  add_net_flags(en, en_net);
  en->callback([&] {
    exit_code =
        run_enhance(en_input, en_checkpoint, en_output, resolve_net(en_net), out, err);
  });

  // train
  std::string tr_config;
  TrainConfig tr_flags;
  std::string tr_asf_sizes;
  CLI::App* tr = app.add_subcommand("train", "train a network on a paired dataset");
  tr->add_option("--config", tr_config,
                 "key = value file; explicit flags override it");
  CLI::Option* t_dataset = tr->add_option("--dataset-dir", tr_flags.dataset_dir,
                                          "paired dataset (low/, high/)");
  CLI::Option* t_eval_dir =
      tr->add_option("--eval-dir", tr_flags.eval_dir, "held-out paired dataset");
  CLI::Option* t_out_dir =
      tr->add_option("--out-dir", tr_flags.out_dir, "logs and checkpoints");
  CLI::Option* t_init = tr->add_option("--init-checkpoint",
                                       tr_flags.init_checkpoint, "warm start");
  CLI::Option* t_resume = tr->add_flag("--resume,!--no-resume", tr_flags.resume,
                                       "restore the optimizer state too");
  CLI::Option* t_batch =
      tr->add_option("--batch-size", tr_flags.batch_size, "patches per step (default 8)");
  CLI::Option* t_patch =
      tr->add_option("--patch", tr_flags.patch, "square crop side (default 64)");
  CLI::Option* t_steps = tr->add_option("--steps", tr_flags.steps, "total optimizer steps");
  CLI::Option* t_epochs =
      tr->add_option("--epochs", tr_flags.epochs, "dataset passes (if steps unset)");
  CLI::Option* t_seed = tr->add_option("--seed", tr_flags.seed,
                                       "seed for init and batch order (default 0)");
  CLI::Option* t_les = tr->add_flag("--les,!--no-les", tr_flags.use_les,
                                    "supervise the denoiser output (default on)");
  CLI::Option* t_freeze = tr->add_flag(
      "--freeze-led,!--no-freeze-led", tr_flags.freeze_led,
      "exclude denoiser parameters from updates (default off)");
  CLI::Option* t_ck_every = tr->add_option(
      "--checkpoint-every", tr_flags.checkpoint_every, "steps between saves (default 500)");
  CLI::Option* t_ev_every = tr->add_option(
      "--eval-every", tr_flags.eval_every, "steps between held-out evals (default off)");
  CLI::Option* t_lr = tr->add_option("--lr", tr_flags.adam.lr, "Adam learning rate (default 0.001)");
  CLI::Option* t_b1 = tr->add_option("--beta1", tr_flags.adam.beta1, "Adam beta1 (default 0.9)");
  CLI::Option* t_b2 = tr->add_option("--beta2", tr_flags.adam.beta2, "Adam beta2 (default 0.999)");
  CLI::Option* t_eps = tr->add_option("--eps", tr_flags.adam.eps, "Adam epsilon (default 1e-8)");
  CLI::Option* t_channels =
      tr->add_option("--channels", tr_flags.net.channels, "branch feature width (default 32)");
  CLI::Option* t_led_ch = tr->add_option("--led-channels", tr_flags.net.led_channels,
                                         "denoiser feature width (default 16)");
  CLI::Option* t_led_depth = tr->add_option("--led-depth", tr_flags.net.led_depth,
                                            "dense layers per denoiser block (default 4)");
  CLI::Option* t_led_growth = tr->add_option(
      "--led-growth", tr_flags.net.led_growth, "channels each dense layer adds (default 8)");
  CLI::Option* t_asf = tr->add_option(
      "--asf-sizes", tr_asf_sizes, "comma list of surround half sizes (default 3,7,11,15)");
  CLI::Option* t_eca = tr->add_flag("--eca,!--no-eca", tr_flags.net.use_eca,
                                    "channel attention over the branch concat (default on)");
  CLI::Option* t_plain =
      tr->add_flag("--plain-blocks,!--no-plain-blocks", tr_flags.net.plain_blocks,
                   "swap retinex branches for plain conv stacks (default off)");
  tr->callback([&] {
    TrainConfig cfg;
    if (!tr_config.empty()) load_config_file(cfg, tr_config);
    if (*t_dataset) cfg.dataset_dir = tr_flags.dataset_dir;
    if (*t_eval_dir) cfg.eval_dir = tr_flags.eval_dir;
    if (*t_out_dir) cfg.out_dir = tr_flags.out_dir;
    if (*t_init) cfg.init_checkpoint = tr_flags.init_checkpoint;
    if (*t_resume) cfg.resume = tr_flags.resume;
    if (*t_batch) cfg.batch_size = tr_flags.batch_size;
    if (*t_patch) cfg.patch = tr_flags.patch;
    if (*t_steps) cfg.steps = tr_flags.steps;
    if (*t_epochs) cfg.epochs = tr_flags.epochs;
    if (*t_seed) cfg.seed = tr_flags.seed;
    if (*t_les) cfg.use_les = tr_flags.use_les;
    if (*t_freeze) cfg.freeze_led = tr_flags.freeze_led;
    if (*t_ck_every) cfg.checkpoint_every = tr_flags.checkpoint_every;
    if (*t_ev_every) cfg.eval_every = tr_flags.eval_every;
    if (*t_lr) cfg.adam.lr = tr_flags.adam.lr;
    if (*t_b1) cfg.adam.beta1 = tr_flags.adam.beta1;
    if (*t_b2) cfg.adam.beta2 = tr_flags.adam.beta2;
    if (*t_eps) cfg.adam.eps = tr_flags.adam.eps;
    if (*t_channels) cfg.net.channels = tr_flags.net.channels;
    if (*t_led_ch) cfg.net.led_channels = tr_flags.net.led_channels;
    if (*t_led_depth) cfg.net.led_depth = tr_flags.net.led_depth;
    if (*t_led_growth) cfg.net.led_growth = tr_flags.net.led_growth;
    if (*t_asf) cfg.net.asf_sizes = parse_sizes("asf_sizes", tr_asf_sizes);
    if (*t_eca) cfg.net.use_eca = tr_flags.net.use_eca;
    if (*t_plain) cfg.net.plain_blocks = tr_flags.net.plain_blocks;
    train(cfg, out, err);
  });

  // synth
  std::string sy_input, sy_output;
  uint64_t sy_seed = 0;
  CLI::App* sy = app.add_subcommand(
      "synth", "darken normal-light images into a synthetic paired dataset");
  sy->add_option("--input", sy_input, "directory of normal-light .ppm images")
      ->required();
  sy->add_option("--output", sy_output, "dataset directory to create")
      ->required();
  sy->add_option("--seed", sy_seed, "seed for the sampled darkening params (default 0)");
  sy->callback([&] {
    const auto records = generate_synthetic_dataset(sy_input, sy_output, sy_seed);
    out << "synthesized " << records.size() << " pair(s) into " << sy_output
        << " (see manifest.txt)\n";
  });

  // fit
  std::string fi_low, fi_high;
  uint64_t fi_seed = 0;
  CLI::App* fi = app.add_subcommand(
      "fit", "recover darkening parameters from a (low, high) image pair");
  fi->add_option("--low", fi_low, "dark image")->required();
  fi->add_option("--high", fi_high, "reference image")->required();
  fi->add_option("--seed", fi_seed, "seed for pixel subsampling (default 0)");
  fi->callback([&] { run_fit(fi_low, fi_high, fi_seed, out, err); });

  // eval
  std::string ev_test, ev_ref;
  CLI::App* ev = app.add_subcommand(
      "eval", "PSNR/SSIM of a directory of images against references");
  ev->add_option("--test", ev_test, "directory of images to score")->required();
  ev->add_option("--ref", ev_ref, "directory of reference images")->required();
  ev->callback([&] { run_eval(ev_test, ev_ref, out); });

  // ssr
  std::string sr_input, sr_output, sr_scales;
  double sr_sigma = 80.0;
  CLI::App* sr = app.add_subcommand(
      "ssr", "classical surround retinex baseline (log-reflectance image)");
  sr->add_option("--input", sr_input, "image to process")->required();
  sr->add_option("--output", sr_output, "where to write the normalized result")
      ->required();
  CLI::Option* sr_sig =
      sr->add_option("--sigma", sr_sigma, "Gaussian surround scale (default 80)");
  CLI::Option* sr_sc = sr->add_option(
      "--scales", sr_scales, "comma list of scales for the multi-scale variant");
  sr_sig->excludes(sr_sc);
  sr->callback([&] { run_ssr(sr_input, sr_output, sr_sigma, sr_scales, out); });

  // gradcheck
  uint64_t gc_seed = 0;
  double gc_eps = 1e-2, gc_tol = 1e-3;
  CLI::App* gc = app.add_subcommand(
      "gradcheck", "finite-difference check of every differentiable operation");
  gc->add_option("--seed", gc_seed, "seed for the probe instances (default 0)");
  gc->add_option("--eps", gc_eps, "finite-difference step (default 0.01)");
  gc->add_option("--tol", gc_tol, "relative error tolerance (default 0.001)");
  gc->callback([&] { exit_code = run_gradcheck(gc_seed, gc_eps, gc_tol, out); });

  // params
  NetFlags pa_net;
  CLI::App* pa =
      app.add_subcommand("params", "per-module and total parameter counts");
  add_net_flags(pa, pa_net);
  pa->callback([&] { run_params(resolve_net(pa_net), out); });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    app.exit(e, out, err);
    return static_cast<int>(ErrorKind::usage);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::numeric);
  }
  return exit_code;
}

}  // namespace snet
