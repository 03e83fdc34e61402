// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "stripformer/checkpoint.hpp"
#include "stripformer/data.hpp"
#include "stripformer/losses.hpp"
#include "stripformer/metrics.hpp"
#include "stripformer/optim.hpp"

namespace stripformer {

struct TrainOptions {
  int64_t steps = 200;
  int64_t batch = 2;
  int64_t crop = 64;
  uint64_t seed = 1;
  bool augment = true;
  Schedule schedule{1e-4, 1e-7, 200};
  std::string checkpoint_path;  // written at the end (and on NaN abort) if set
};

struct TrainStepRecord {
  int64_t step;
  double lr, l_char, l_edge, l_con, total, psnr_val;
};

struct TrainResult {
  std::vector<TrainStepRecord> records;
  bool nan_abort = false;
};

// Single-writer optimization loop. Deterministic for a fixed seed: sampling,
// augmentation, and every op run in a fixed order. A non-finite loss aborts
// before the optimizer step, so the checkpoint on disk is the last good
// parameter state.
template <typename T>
TrainResult train_loop(const StripformerConfig& cfg, StripformerParams<T>& params,
                       const std::vector<ImagePair<T>>& dataset, const LossWeights<T>& weights,
                       const FeatureExtractor<T>& psi, const TrainOptions& opts) {
  if (dataset.empty()) throw UsageError("train: dataset is empty");
  cfg.validate();
  weights.validate();
  ParamRegistry<T> registry = collect_params(params);
  AdamState<T> adam(registry);
  Rng rng(opts.seed);
  TrainResult result;
  result.records.reserve(static_cast<size_t>(opts.steps));

  for (int64_t step = 1; step <= opts.steps; ++step) {
    const double lr = cosine_lr(step - 1, opts.schedule);

    Tensor<T> bx({opts.batch, 3, opts.crop, opts.crop});
    Tensor<T> bs({opts.batch, 3, opts.crop, opts.crop});
    for (int64_t b = 0; b < opts.batch; ++b) {
      const size_t idx = dataset.size() == 1 ? 0 : static_cast<size_t>(rng() % dataset.size());
      const ImagePair<T>& src = dataset[idx];
      ImagePair<T> sample = opts.augment ? augment(src, opts.crop, rng) : src;
      if (sample.sharp.extent(1) != opts.crop || sample.sharp.extent(2) != opts.crop) {
        throw UsageError("train: sample is " + shape_str(sample.sharp.shape()) +
                         " but crop is " + std::to_string(opts.crop) + " (enable augment or resize)");
      }
      const int64_t plane = 3 * opts.crop * opts.crop;
      std::copy(sample.blurred.data().begin(), sample.blurred.data().end(),
                bx.data_mut().begin() + b * plane);
      std::copy(sample.sharp.data().begin(), sample.sharp.data().end(),
                bs.data_mut().begin() + b * plane);
    }

    GradTape<T> tape;
    double l_char, l_edge, l_con, total, psnr_val;
    {
      TapeScope<T> scope(tape);
      Tensor<T> out = forward(bx, params, cfg);
      LossBreakdown<T> parts = total_loss_parts(bx, out, bs, weights, psi);
      l_char = parts.l_char.item();
      l_edge = parts.l_edge.item();
      l_con = parts.l_con.item();
      total = parts.total.item();
      if (!std::isfinite(total)) {
        if (!opts.checkpoint_path.empty()) save_checkpoint(opts.checkpoint_path, cfg, registry);
        result.nan_abort = true;
        return result;
      }
      Tensor<T> shown = out.clone();
      for (auto& v : shown.data_mut()) v = std::clamp(v, T(0), T(1));
      psnr_val = psnr(shown, bs);
      tape.backward(parts.total);
    }
    adam.step(registry, lr);
    for (auto& [name, p] : registry) p.zero_grad();

    result.records.push_back({step, lr, l_char, l_edge, l_con, total, psnr_val});
  }

  if (!opts.checkpoint_path.empty()) save_checkpoint(opts.checkpoint_path, cfg, registry);
  return result;
}

inline void write_metrics_csv(const std::string& path, const std::vector<TrainStepRecord>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw UsageError("cannot open metrics file '" + path + "'");
  os << "step,lr,l_char,l_edge,l_con,total,psnr_val\n";
  char line[256];
  for (const auto& r : records) {
    std::snprintf(line, sizeof(line), "%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  static_cast<long long>(r.step), r.lr, r.l_char, r.l_edge, r.l_con, r.total,
                  r.psnr_val);
    os << line;
  }
}

}  // namespace stripformer
