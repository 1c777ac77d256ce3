#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pef/matching.hpp"
#include "pef/model.hpp"
#include "pef/optim.hpp"
#include "pef/tensor.hpp"

namespace pef {

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

template <class Real>
struct TrainSample {
  Tensor<Real> image;        // (H, W, 3), standardized
  std::vector<Joint> gt;     // labeled joints, crop-normalized
};

struct TrainLogEntry {
  int epoch = 0;
  int step = 0;  // global step
  double total = 0, class_term = 0, coord_term = 0;
};

inline std::string format_log_entry(const TrainLogEntry& e) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d %d %.17g %.17g %.17g", e.epoch, e.step,
                e.total, e.class_term, e.coord_term);
  return buf;
}

template <class Real>
struct TrainOptions {
  ScheduleConfig schedule;
  MatchingConfig matching;
  std::uint64_t seed = 0;
  double grad_clip = 0.0;  // 0 = off
  // called after each optimizer step, e.g. for streaming the loss log
  std::function<void(const TrainLogEntry&)> on_step;
  // called after each epoch, e.g. for periodic checkpointing
  std::function<void(int epoch, PoseModel<Real>&, AdamW<Real>&)> on_epoch;
};

// One optimizer step over a batch: forward, match, set loss, backward,
// AdamW with per-group learning rate. Returns the batch-mean breakdown.
template <class Real>
TrainLogEntry train_batch(PoseModel<Real>& model,
                          std::vector<std::pair<std::string, Tensor<Real>>>& params,
                          AdamW<Real>& opt,
                          const std::vector<const TrainSample<Real>*>& batch,
                          double encoder_lr, double decoder_lr,
                          const MatchingConfig& mc, double grad_clip = 0.0) {
  for (auto& [name, p] : params) p.zero_grad();
  const Real inv_b = Real(1) / static_cast<Real>(batch.size());
  TrainLogEntry entry;
  for (const TrainSample<Real>* sample : batch) {
    PredictionSet<Real> pred = model.forward(sample->image);
    Assignment assignment = hungarian(match_cost(pred, sample->gt, mc));
    LossBreakdown<Real> loss = set_loss(pred, sample->gt, assignment, mc);
    entry.total += static_cast<double>(loss.total.item()) / batch.size();
    entry.class_term += static_cast<double>(loss.class_term.item()) / batch.size();
    entry.coord_term += static_cast<double>(loss.coord_term.item()) / batch.size();
    backward(scale(loss.total, inv_b));
  }
  if (!std::isfinite(entry.total))
    throw NumericError("non-finite loss: total=" + std::to_string(entry.total) +
                       " class=" + std::to_string(entry.class_term) +
                       " coord=" + std::to_string(entry.coord_term));
  if (grad_clip > 0) clip_grad_norm(params, grad_clip);
  opt.step(params, [&](const std::string& name) {
    return name.rfind("encoder.", 0) == 0 ? encoder_lr : decoder_lr;
  });
  return entry;
}

template <class Real>
void clip_grad_norm(std::vector<std::pair<std::string, Tensor<Real>>>& params,
                    double max_norm) {
  double ss = 0;
  for (auto& [name, p] : params)
    for (Real g : p.grad()) ss += static_cast<double>(g) * g;
  const double norm = std::sqrt(ss);
  if (norm <= max_norm) return;
  const Real f = static_cast<Real>(max_norm / norm);
  for (auto& [name, p] : params)
    for (Real& g : p.grad()) g *= f;
}

// Epoch-structured training: per-epoch seeded shuffle, batches in order,
// per-group learning rates from the schedule. The provider materializes
// sample `index` for a given epoch (e.g. with fresh augmentation drawn
// from a hash of seed/epoch/index). Single-threaded and bit-reproducible
// for a fixed seed.
template <class Real>
std::vector<TrainLogEntry> train_model(
    PoseModel<Real>& model, AdamW<Real>& opt, std::size_t sample_count,
    const std::function<TrainSample<Real>(int epoch, std::size_t index)>& sample_at,
    const TrainOptions<Real>& options) {
  if (sample_count == 0) throw ValueError("train: no samples");
  auto params = model.named_params();
  const auto& sched = options.schedule;
  std::vector<TrainLogEntry> log;
  std::vector<std::size_t> order(sample_count);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  int global_step = 0;
  for (int epoch = 0; epoch < sched.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(sample_rng_seed(options.seed, static_cast<std::uint64_t>(epoch), 0x5u));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const auto [enc_lr, dec_lr] = lr_at(epoch, sched);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(sched.batch_size)) {
      const std::size_t end = std::min(order.size(),
          start + static_cast<std::size_t>(sched.batch_size));
      std::vector<TrainSample<Real>> storage;
      storage.reserve(end - start);
      for (std::size_t i = start; i < end; ++i)
        storage.push_back(sample_at(epoch, order[i]));
      std::vector<const TrainSample<Real>*> batch;
      for (const auto& s : storage) batch.push_back(&s);
      TrainLogEntry entry;
      try {
        entry = train_batch(model, params, opt, batch, enc_lr, dec_lr,
                            options.matching, options.grad_clip);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " step " +
                           std::to_string(global_step) + ": " + e.what());
      }
      entry.epoch = epoch;
      entry.step = global_step++;
      log.push_back(entry);
      if (options.on_step) options.on_step(entry);
    }
    if (options.on_epoch) options.on_epoch(epoch, model, opt);
  }
  return log;
}

// Fixed-sample convenience overload.
template <class Real>
std::vector<TrainLogEntry> train_model(PoseModel<Real>& model,
                                       AdamW<Real>& opt,
                                       const std::vector<TrainSample<Real>>& samples,
                                       const TrainOptions<Real>& options) {
  return train_model<Real>(
      model, opt, samples.size(),
      [&samples](int, std::size_t i) { return samples[i]; }, options);
}

}  // namespace pef
