// SPDX-License-Identifier: Apache-2.0
//
// spf: train / infer / grad-check / bench for the strip-attention deblurrer.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "stripformer/png_io.hpp"
#include "stripformer/stripformer.hpp"

namespace fs = std::filesystem;
using namespace stripformer;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNanAbort = 3;
constexpr int kExitCheckpoint = 4;

// ---------------------------------------------------------------------------
// Run configuration: defaults <- config file <- command-line flags. The
// resolved config is echoed into the output directory so a run can be
// reproduced from its artifacts alone.

struct RunConfig {
  uint64_t seed = 1;
  std::string out = "runs/default";

  StripformerConfig model;

  double lambda1 = 0.05;
  double lambda2 = 0.0005;
  double charbonnier_eps = 1e-3;
  uint64_t psi_seed = FeatureExtractor<float>::kDefaultSeed;

  int64_t steps = 200;
  int64_t batch = 2;
  int64_t crop = 64;
  double lr_init = 1e-4;
  double lr_final = 1e-7;
  std::string dataset = "synthetic";
  int64_t pairs = 4;
  double noise_sigma = 0.0;
  int64_t blur_min = 3;
  int64_t blur_max = 9;
  bool augment = true;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto to_i = [&](int64_t& dst) { dst = std::stoll(value); };
  auto to_u = [&](uint64_t& dst) { dst = std::stoull(value); };
  auto to_d = [&](double& dst) { dst = std::stod(value); };
  auto to_b = [&](bool& dst) { dst = (value == "1" || value == "true"); };

  if (key == "run.seed") to_u(cfg.seed);
  else if (key == "run.out") cfg.out = value;
  else if (key == "model.c1") to_i(cfg.model.c1);
  else if (key == "model.c2") to_i(cfg.model.c2);
  else if (key == "model.c3") to_i(cfg.model.c3);
  else if (key == "model.blocks_per_scale") to_i(cfg.model.blocks_per_scale);
  else if (key == "model.heads") to_i(cfg.model.heads);
  else if (key == "model.mlp_ratio") to_i(cfg.model.mlp_ratio);
  else if (key == "loss.lambda1") to_d(cfg.lambda1);
  else if (key == "loss.lambda2") to_d(cfg.lambda2);
  else if (key == "loss.charbonnier_eps") to_d(cfg.charbonnier_eps);
  else if (key == "loss.psi_seed") to_u(cfg.psi_seed);
  else if (key == "train.steps") to_i(cfg.steps);
  else if (key == "train.batch") to_i(cfg.batch);
  else if (key == "train.crop") to_i(cfg.crop);
  else if (key == "train.lr_init") to_d(cfg.lr_init);
  else if (key == "train.lr_final") to_d(cfg.lr_final);
  else if (key == "train.dataset") cfg.dataset = value;
  else if (key == "train.pairs") to_i(cfg.pairs);
  else if (key == "train.noise_sigma") to_d(cfg.noise_sigma);
  else if (key == "train.blur_min") to_i(cfg.blur_min);
  else if (key == "train.blur_max") to_i(cfg.blur_max);
  else if (key == "train.augment") to_b(cfg.augment);
  else throw ConfigError("unknown config key '" + key + "'");
}

void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + " is not 'key = value'");
    }
    const std::string key = section + "." + trim(line.substr(0, eq));
    apply_config_entry(cfg, key, trim(line.substr(eq + 1)));
  }
}

void echo_config(const RunConfig& c, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  os << "[run]\n"
     << "seed = " << c.seed << "\n"
     << "out = " << c.out << "\n\n"
     << "[model]\n"
     << "c1 = " << c.model.c1 << "\n"
     << "c2 = " << c.model.c2 << "\n"
     << "c3 = " << c.model.c3 << "\n"
     << "blocks_per_scale = " << c.model.blocks_per_scale << "\n"
     << "heads = " << c.model.heads << "\n"
     << "mlp_ratio = " << c.model.mlp_ratio << "\n\n"
     << "[loss]\n";
  char buf[64];
  auto put = [&](const char* key, double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << key << " = " << buf << "\n";
  };
  put("lambda1", c.lambda1);
  put("lambda2", c.lambda2);
  put("charbonnier_eps", c.charbonnier_eps);
  os << "psi_seed = " << c.psi_seed << "\n\n"
     << "[train]\n"
     << "steps = " << c.steps << "\n"
     << "batch = " << c.batch << "\n"
     << "crop = " << c.crop << "\n";
  put("lr_init", c.lr_init);
  put("lr_final", c.lr_final);
  os << "dataset = " << c.dataset << "\n"
     << "pairs = " << c.pairs << "\n";
  put("noise_sigma", c.noise_sigma);
  os << "blur_min = " << c.blur_min << "\n"
     << "blur_max = " << c.blur_max << "\n"
     << "augment = " << (c.augment ? 1 : 0) << "\n";
}

std::vector<ImagePair<float>> build_dataset(const RunConfig& cfg) {
  if (cfg.dataset != "synthetic") return load_image_pairs(cfg.dataset);
  if (cfg.pairs < 1) throw ConfigError("train.pairs must be >= 1");
  if (cfg.blur_min < 1 || cfg.blur_max < cfg.blur_min) {
    throw ConfigError("blur length range [" + std::to_string(cfg.blur_min) + ", " +
                      std::to_string(cfg.blur_max) + "] is invalid");
  }
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<ImagePair<float>> pairs;
  for (int64_t i = 0; i < cfg.pairs; ++i) {
    Tensor<float> sharp = random_sharp_image<float>(cfg.crop, cfg.crop, rng);
    const int64_t len =
        cfg.blur_min + static_cast<int64_t>(rng() % uint64_t(cfg.blur_max - cfg.blur_min + 1));
    const double theta = std::numbers::pi * (double(rng() % 36000) / 36000.0);
    pairs.push_back(synth_blur(sharp, len, theta, cfg.noise_sigma, rng));
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const RunConfig& cfg) {
  cfg.model.validate();
  fs::create_directories(cfg.out);
  echo_config(cfg, (fs::path(cfg.out) / "config.cfg").string());

  auto dataset = build_dataset(cfg);
  Rng rng(cfg.seed);
  StripformerParams<float> params = init_params<float>(cfg.model, rng);
  FeatureExtractor<float> psi(cfg.psi_seed);
  LossWeights<float> weights{static_cast<float>(cfg.lambda1), static_cast<float>(cfg.lambda2),
                             static_cast<float>(cfg.charbonnier_eps)};
  TrainOptions opts;
  opts.steps = cfg.steps;
  opts.batch = cfg.batch;
  opts.crop = cfg.crop;
  opts.seed = cfg.seed;
  opts.augment = cfg.augment;
  opts.schedule = {cfg.lr_init, cfg.lr_final, std::max<int64_t>(cfg.steps, 1)};
  opts.checkpoint_path = (fs::path(cfg.out) / "checkpoint.spfm").string();

  TrainResult result = train_loop(cfg.model, params, dataset, weights, psi, opts);
  write_metrics_csv((fs::path(cfg.out) / "metrics.csv").string(), result.records);
  if (result.nan_abort) {
    std::cerr << "error: loss became non-finite at step " << result.records.size() + 1
              << "; last-good checkpoint retained at " << opts.checkpoint_path << "\n";
    return kExitNanAbort;
  }
  const auto& last = result.records.back();
  std::printf("trained %lld steps: total %.6g, psnr %.2f dB\n",
              static_cast<long long>(last.step), last.total, last.psnr_val);
  std::printf("artifacts: %s/{checkpoint.spfm, metrics.csv, config.cfg}\n", cfg.out.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// infer

int cmd_infer(const std::string& checkpoint, const std::string& input, const std::string& output,
              const std::string& reference, int runs) {
  auto [cfg, params] = load_model<float>(checkpoint);
  Tensor<float> img = read_png_rgb(input);
  const int64_t h = img.extent(1), w = img.extent(2);
  const int64_t ph = (4 - h % 4) % 4, pw = (4 - w % 4) % 4;
  Tensor<float> x = reshape(img, {1, 3, h, w});
  if (ph || pw) x = reflect_pad2d(x, 0, pw, 0, ph);

  Tensor<float> out = forward(x, params, cfg);  // warm-up
  std::vector<double> times;
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    out = forward(x, params, cfg);
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  const double median = times[times.size() / 2];

  Tensor<float> restored({3, h, w});
  auto od = out.data();
  auto rd = restored.data_mut();
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xx = 0; xx < w; ++xx)
        rd[(c * h + y) * w + xx] =
            std::clamp(od[(c * (h + ph) + y) * (w + pw) + xx], 0.0f, 1.0f);
  write_png_rgb(output, restored);
  std::printf("inference: %.2f ms (median of %d after 1 warm-up), %lldx%lld\n", median, runs,
              static_cast<long long>(w), static_cast<long long>(h));
  if (!reference.empty()) {
    Tensor<float> ref = read_png_rgb(reference);
    std::printf("psnr(restored, reference) = %.2f dB\n", psnr(restored, ref));
    std::printf("psnr(input, reference)    = %.2f dB\n", psnr(img, ref));
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// grad-check

using Leaves = std::vector<std::pair<std::string, Tensor<double>>>;

void collect_strip_block_leaves(StripBlockParams<double>& p, Leaves& leaves) {
  detail::visit_strip_block<double>("", p, [&](const std::string& name, Tensor<double>& t) {
    leaves.emplace_back(name.substr(1), t);  // drop leading '.'
  });
}

int cmd_grad_check(const std::string& block, const std::string& dims_csv, uint64_t seed,
                   int64_t heads, int64_t ratio) {
  std::vector<int64_t> dims;
  std::stringstream ss(dims_csv);
  for (std::string part; std::getline(ss, part, ',');) dims.push_back(std::stoll(part));
  if (dims.size() != 4) throw UsageError("--dims must be N,C,H,W");
  const int64_t n = dims[0], c = dims[1], h = dims[2], w = dims[3];
  Rng rng(seed);

  Leaves leaves;
  std::function<Tensor<double>()> make_loss;
  const double threshold = (block == "losses") ? 1e-5 : 1e-4;

  if (block == "intra" || block == "inter") {
    auto params = make_strip_block_params<double>(c, heads, ratio, rng);
    auto x = Tensor<double>::uniform({n, c, h, w}, rng);
    leaves.emplace_back("input", x);
    collect_strip_block_leaves(params, leaves);
    const bool intra = block == "intra";
    make_loss = [x, params, intra] {
      Tensor<double> y = intra ? intra_sa_block(x, params) : inter_sa_block(x, params);
      return mean_all(mul(y, y));
    };
  } else if (block == "mlp") {
    auto params = make_mlp_params<double>(c, ratio, rng);
    auto x = Tensor<double>::uniform({n, c, h, w}, rng);
    leaves = {{"input", x},         {"norm.gamma", params.norm_gamma},
              {"norm.beta", params.norm_beta}, {"fc1.w", params.fc1_w},
              {"fc1.b", params.fc1_b},         {"fc2.w", params.fc2_w},
              {"fc2.b", params.fc2_b},         {"cpe.w", params.cpe_w}};
    make_loss = [x, params] {
      Tensor<double> y = mlp_block(x, params);
      return mean_all(mul(y, y));
    };
  } else if (block == "feb") {
    auto params = make_feb_params<double>(c, 2 * c, rng);
    auto x = Tensor<double>::uniform({n, c, h, w}, rng);
    leaves.emplace_back("input", x);
    detail::visit_feb<double>("feb", params, [&](const std::string& nm, Tensor<double>& t) {
      leaves.emplace_back(nm, t);
    });
    make_loss = [x, params] {
      Tensor<double> y = feb(x, params);
      return mean_all(mul(y, y));
    };
  } else if (block == "resblock") {
    auto params = make_residual_block_params<double>(c, rng);
    auto x = Tensor<double>::uniform({n, c, h, w}, rng);
    leaves = {{"input", x}, {"w1", params.w1}, {"b1", params.b1}, {"w2", params.w2},
              {"b2", params.b2}};
    make_loss = [x, params] {
      Tensor<double> y = residual_block(x, params);
      return mean_all(mul(y, y));
    };
  } else if (block == "model") {
    StripformerConfig mc{8, 8, 8, 1, 2, 2};
    auto params = init_params<double>(mc, rng);
    auto x = Tensor<double>::uniform({n, 3, h, w}, rng, 0.0, 1.0);
    leaves.emplace_back("input", x);
    visit_params<double>(params, [&](const std::string& nm, Tensor<double>& t) {
      leaves.emplace_back(nm, t);
    });
    make_loss = [x, params, mc] {
      Tensor<double> y = forward(x, params, mc);
      return mean_all(mul(y, y));
    };
  } else if (block == "losses") {
    FeatureExtractor<double> psi(seed);
    LossWeights<double> lw;
    auto x = Tensor<double>::uniform({1, 3, 8, 8}, rng, 0.0, 1.0);
    auto r = Tensor<double>::uniform({1, 3, 8, 8}, rng, 0.0, 1.0);
    auto s = Tensor<double>::uniform({1, 3, 8, 8}, rng, 0.0, 1.0);
    leaves.emplace_back("restored", r);
    make_loss = [x, r, s, lw, psi] { return total_loss(x, r, s, lw, psi); };
  } else {
    std::cerr << "unknown block '" << block
              << "'; expected intra|inter|mlp|feb|resblock|model|losses\n";
    return kExitUsage;
  }

  GradCheckReport report = finite_difference_check(leaves, make_loss);
  for (const auto& leaf : report.leaves) {
    std::printf("  %-16s max rel err %.3e\n", leaf.name.c_str(), leaf.max_rel_err);
  }
  std::printf("%s: max rel err %.3e (threshold %.0e)\n", block.c_str(), report.max_rel_err,
              threshold);
  return report.max_rel_err < threshold ? kExitOk : kExitError;
}

// ---------------------------------------------------------------------------
// bench

int cmd_bench(const std::string& sizes_csv, int64_t heads, int64_t channels,
              const std::string& mechanisms_csv, int64_t cap) {
  std::vector<int64_t> sizes;
  {
    std::stringstream ss(sizes_csv);
    for (std::string part; std::getline(ss, part, ',');) sizes.push_back(std::stoll(part));
  }
  std::vector<std::string> mechanisms;
  {
    std::stringstream ss(mechanisms_csv);
    for (std::string part; std::getline(ss, part, ',');) mechanisms.push_back(part);
  }
  AttentionConfig ac{channels, heads};
  ac.validate();
  const int64_t d = ac.branch_width();

  std::printf("%4s %4s  %-8s %12s %12s %12s %10s\n", "H", "W", "mech", "measured", "predicted",
              "peak_elems", "time_us");
  bool all_ok = true;
  Rng rng(7);
  for (int64_t h : sizes) {
    for (int64_t w : sizes) {
      for (const auto& mech : mechanisms) {
        if (mech == "vanilla" && h * w > cap) {
          std::printf("%4lld %4lld  %-8s skipped (H*W=%lld exceeds %lld-token cap)\n",
                      static_cast<long long>(h), static_cast<long long>(w), mech.c_str(),
                      static_cast<long long>(h * w), static_cast<long long>(cap));
          continue;
        }
        Tensor<float> x = Tensor<float>::uniform({1, d, h, w}, rng);
        ProjectionWeights<float> pw = make_projection_weights<float>(d, rng);
        AttentionStats stats;
        int64_t predicted = 0;
        const auto t0 = std::chrono::steady_clock::now();
        if (mech == "intra") {
          intra_strip_attention_h(x, pw, heads, &stats);
          intra_strip_attention_v(x, pw, heads, &stats);
          predicted = intra_score_entries(h, w, heads);
        } else if (mech == "inter") {
          inter_strip_attention_h(x, pw, heads, &stats);
          inter_strip_attention_v(x, pw, heads, &stats);
          predicted = inter_score_entries(h, w, heads);
        } else if (mech == "vanilla") {
          vanilla_attention_reference(x, pw, heads, &stats, cap);
          predicted = vanilla_score_entries(h, w, heads);
        } else {
          throw UsageError("unknown mechanism '" + mech + "'");
        }
        const auto t1 = std::chrono::steady_clock::now();
        const double us = std::chrono::duration<double, std::micro>(t1 - t0).count();
        const bool ok = stats.score_entries == predicted;
        all_ok = all_ok && ok;
        std::printf("%4lld %4lld  %-8s %12lld %12lld %12lld %10.1f%s\n",
                    static_cast<long long>(h), static_cast<long long>(w), mech.c_str(),
                    static_cast<long long>(stats.score_entries),
                    static_cast<long long>(predicted),
                    static_cast<long long>(stats.peak_activation_elements), us,
                    ok ? "" : "  MISMATCH");
      }
    }
  }
  if (!all_ok) {
    std::cerr << "error: measured attention-score counts diverged from the closed forms\n";
    return kExitError;
  }
  std::printf("all measured score counts match the closed forms\n");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"strip-attention image deblurring"};
  app.require_subcommand(1);

  RunConfig cfg;
  std::string config_file;

  auto* train = app.add_subcommand("train", "optimize a model and write artifacts");
  train->add_option("--config", config_file, "key=value config file with [sections]");
  train->add_option("--seed", cfg.seed);
  train->add_option("--out", cfg.out);
  train->add_option("--c1", cfg.model.c1);
  train->add_option("--c2", cfg.model.c2);
  train->add_option("--c3", cfg.model.c3);
  train->add_option("--blocks", cfg.model.blocks_per_scale);
  train->add_option("--heads", cfg.model.heads);
  train->add_option("--mlp-ratio", cfg.model.mlp_ratio);
  train->add_option("--lambda1", cfg.lambda1);
  train->add_option("--lambda2", cfg.lambda2);
  train->add_option("--charbonnier-eps", cfg.charbonnier_eps);
  train->add_option("--psi-seed", cfg.psi_seed);
  train->add_option("--steps", cfg.steps);
  train->add_option("--batch", cfg.batch);
  train->add_option("--crop", cfg.crop);
  train->add_option("--lr-init", cfg.lr_init);
  train->add_option("--lr-final", cfg.lr_final);
  train->add_option("--data", cfg.dataset);
  train->add_flag_callback("--synthetic", [&cfg] { cfg.dataset = "synthetic"; });
  train->add_option("--pairs", cfg.pairs);
  train->add_option("--noise-sigma", cfg.noise_sigma);
  train->add_option("--blur-min", cfg.blur_min);
  train->add_option("--blur-max", cfg.blur_max);
  train->add_flag("--augment,!--no-augment", cfg.augment);

  std::string in_checkpoint, in_image, out_image, ref_image;
  int timing_runs = 5;
  auto* infer = app.add_subcommand("infer", "restore one PNG through a checkpoint");
  infer->add_option("--checkpoint", in_checkpoint)->required();
  infer->add_option("--input", in_image)->required();
  infer->add_option("--output", out_image)->required();
  infer->add_option("--reference", ref_image, "sharp reference for PSNR reporting");
  infer->add_option("--runs", timing_runs, "timed forward passes (median reported)");

  std::string block = "intra", dims = "1,4,3,3";
  uint64_t gc_seed = 1;
  int64_t gc_heads = 2, gc_ratio = 2;
  auto* gradcheck = app.add_subcommand("grad-check", "finite-difference gradient verification");
  gradcheck->add_option("block", block, "intra|inter|mlp|feb|resblock|model|losses");
  gradcheck->add_option("--dims", dims, "N,C,H,W of the probe input");
  gradcheck->add_option("--seed", gc_seed);
  gradcheck->add_option("--heads", gc_heads);
  gradcheck->add_option("--mlp-ratio", gc_ratio);

  std::string sizes = "4,8,16,32", mechanisms = "intra,inter,vanilla";
  int64_t bench_heads = 2, bench_channels = 20, bench_cap = 4096;
  auto* bench = app.add_subcommand("bench", "attention score-count instrumentation table");
  bench->add_option("--sizes", sizes, "comma list; all (H,W) pairs are benched");
  bench->add_option("--heads", bench_heads);
  bench->add_option("--channels", bench_channels);
  bench->add_option("--mechanisms", mechanisms);
  bench->add_option("--cap", bench_cap, "vanilla token cap (rows above are skipped)");

  try {
    // Parse twice when a config file is given: file values become the new
    // defaults, then flags re-apply on top.
    app.parse(argc, argv);
    if (train->parsed() && !config_file.empty()) {
      RunConfig merged;
      load_config_file(merged, config_file);
      cfg = merged;
      app.clear();
      app.parse(argc, argv);
    }

    if (train->parsed()) return cmd_train(cfg);
    if (infer->parsed()) return cmd_infer(in_checkpoint, in_image, out_image, ref_image, timing_runs);
    if (gradcheck->parsed()) return cmd_grad_check(block, dims, gc_seed, gc_heads, gc_ratio);
    if (bench->parsed()) return cmd_bench(sizes, bench_heads, bench_channels, mechanisms, bench_cap);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitOk;
}
