#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "pef/data.hpp"
#include "pef/image.hpp"
#include "pef/model.hpp"
#include "pef/tensor.hpp"

namespace pef {

struct JointPrediction {
  double x = 0, y = 0;       // crop-normalized
  double confidence = 0;     // class probability of the selected query
};

using PosePrediction = std::vector<JointPrediction>;  // one entry per class

// A predictor maps a crop (plus its gt instance, for stub oracles) to K
// joint predictions. Model-backed and stub predictors share this type.
using Predictor =
    std::function<PosePrediction(const Image&, const KeypointInstance&)>;

// Query -> joint selection: per class k, the highest class-k probability
// among queries whose argmax is k; fallback to the overall class-k max.
template <class Real>
PosePrediction select_joints(const PredictionSet<Real>& pred, int k,
                             bool argmax_filtered = true) {
  const int m = pred.logits.dim(0);
  const int classes = pred.logits.dim(1);
  std::vector<double> probs(static_cast<std::size_t>(m) * classes);
  std::vector<int> argmax(static_cast<std::size_t>(m), 0);
  for (int q = 0; q < m; ++q) {
    const std::size_t base = static_cast<std::size_t>(q) * classes;
    double mx = static_cast<double>(pred.logits.at(base));
    for (int c = 1; c < classes; ++c)
      mx = std::max(mx, static_cast<double>(pred.logits.at(base + c)));
    double sum = 0;
    for (int c = 0; c < classes; ++c) {
      probs[base + c] = std::exp(static_cast<double>(pred.logits.at(base + c)) - mx);
      sum += probs[base + c];
    }
    int best = 0;
    for (int c = 0; c < classes; ++c) {
      probs[base + c] /= sum;
      if (probs[base + c] > probs[base + best]) best = c;
    }
    argmax[static_cast<std::size_t>(q)] = best;
  }
  PosePrediction out(static_cast<std::size_t>(k));
  for (int cls = 0; cls < k; ++cls) {
    int pick = -1;
    if (argmax_filtered) {
      for (int q = 0; q < m; ++q) {
        if (argmax[static_cast<std::size_t>(q)] != cls) continue;
        if (pick < 0 || probs[static_cast<std::size_t>(q) * classes + cls] >
                            probs[static_cast<std::size_t>(pick) * classes + cls])
          pick = q;
      }
    }
    if (pick < 0) {
      pick = 0;
      for (int q = 1; q < m; ++q)
        if (probs[static_cast<std::size_t>(q) * classes + cls] >
            probs[static_cast<std::size_t>(pick) * classes + cls])
          pick = q;
    }
    out[static_cast<std::size_t>(cls)].x =
        static_cast<double>(pred.coords.at(static_cast<std::size_t>(pick) * 2));
    out[static_cast<std::size_t>(cls)].y =
        static_cast<double>(pred.coords.at(static_cast<std::size_t>(pick) * 2 + 1));
    out[static_cast<std::size_t>(cls)].confidence =
        probs[static_cast<std::size_t>(pick) * classes + cls];
  }
  return out;
}

// Horizontal mirror through the crop center (x -> width - x), matching
// the flip convention of the augmentation pipeline.
inline Image flip_image(const Image& img) {
  Affine2 a = Affine2::translation(-img.width / 2.0, 0)
                  .then(Affine2::scaling(-1, 1))
                  .then(Affine2::translation(img.width / 2.0, 0));
  return warp(img, a, img.width, img.height);
}

// K joint coordinates with confidences; with flip_test the horizontally
// mirrored crop is also run, coordinates un-flipped (x -> 1-x), classes
// remapped, and the two sets averaged.
template <class Real>
PosePrediction predict_joints(const PoseModel<Real>& model, const Image& crop,
                              bool flip_test, const FlipMap& flip_map,
                              bool argmax_filtered = true) {
  const int k = model.config().joints;
  PosePrediction base =
      select_joints(model.forward(image_to_tensor<Real>(crop)), k,
                    argmax_filtered);
  if (!flip_test) return base;
  PosePrediction mirrored =
      select_joints(model.forward(image_to_tensor<Real>(flip_image(crop))), k,
                    argmax_filtered);
  PosePrediction out(base.size());
  for (int cls = 0; cls < k; ++cls) {
    const JointPrediction& a = base[static_cast<std::size_t>(cls)];
    // class cls in the original appears as flip_map(cls) in the mirror
    const JointPrediction& b = mirrored[static_cast<std::size_t>(flip_map(cls))];
    out[static_cast<std::size_t>(cls)].x = 0.5 * (a.x + (1.0 - b.x));
    out[static_cast<std::size_t>(cls)].y = 0.5 * (a.y + b.y);
    out[static_cast<std::size_t>(cls)].confidence =
        0.5 * (a.confidence + b.confidence);
  }
  return out;
}

template <class Real>
Predictor model_predictor(const PoseModel<Real>& model, bool flip_test,
                          const FlipMap& flip_map) {
  return [&model, flip_test, flip_map](const Image& crop,
                                       const KeypointInstance&) {
    return predict_joints(model, crop, flip_test, flip_map);
  };
}

// Object keypoint similarity over the labeled gt joints. Distances are
// taken in crop pixels; s^2 is the instance area (crop px^2), k_i = 2*sigma_i.
inline double oks(const PosePrediction& pred, const KeypointInstance& gt,
                  const std::vector<double>& sigmas, int crop_w, int crop_h) {
  double sum = 0;
  int labeled = 0;
  const double s2 = std::max(gt.area, 1e-12);
  for (const auto& j : gt.joints) {
    if (j.visibility <= 0) continue;
    const auto& p = pred.at(static_cast<std::size_t>(j.cls));
    const double dx = (p.x - j.x) * crop_w;
    const double dy = (p.y - j.y) * crop_h;
    const double k = 2.0 * sigmas.at(static_cast<std::size_t>(j.cls));
    sum += std::exp(-(dx * dx + dy * dy) / (2.0 * s2 * k * k));
    ++labeled;
  }
  if (labeled == 0) throw ValueError("oks: no labeled ground-truth joints");
  return sum / labeled;
}

struct EvalMetrics {
  double ap = 0, ar = 0;
  std::vector<double> ap_per_threshold, ar_per_threshold;
  std::vector<double> thresholds;
  double mean_l1 = 0;
  std::size_t samples = 0;
};

struct EvalSample {
  Image crop;
  KeypointInstance instance;  // crop-normalized coords, area in crop px^2
};

// Single-instance protocol: each crop contributes one prediction scored
// against its own ground truth; AP_t is the all-point interpolated area
// under the precision/recall curve at OKS threshold t, AR_t the recall.
inline EvalMetrics evaluate(const Predictor& predict,
                            const std::vector<EvalSample>& dataset,
                            const std::vector<double>& sigmas, int jobs = 1) {
  if (dataset.empty()) throw ValueError("evaluate: empty dataset");
  struct Scored {
    double oks = 0;
    double score = 0;
    double l1_sum = 0;
    std::size_t l1_count = 0;
    std::size_t index = 0;
  };
  std::vector<Scored> scored(dataset.size());
  auto score_one = [&](std::size_t i) {
    const auto& sample = dataset[i];
    const PosePrediction pred = predict(sample.crop, sample.instance);
    Scored s;
    s.index = i;
    s.oks = oks(pred, sample.instance, sigmas, sample.crop.width,
                sample.crop.height);
    double conf = 0;
    for (const auto& jp : pred) conf += jp.confidence;
    s.score = conf / static_cast<double>(pred.size());
    for (const auto& j : sample.instance.joints) {
      if (j.visibility <= 0) continue;
      const auto& p = pred.at(static_cast<std::size_t>(j.cls));
      s.l1_sum += std::abs(p.x - j.x) + std::abs(p.y - j.y);
      ++s.l1_count;
    }
    scored[i] = s;
  };
  if (jobs <= 1 || dataset.size() < 2) {
    for (std::size_t i = 0; i < dataset.size(); ++i) score_one(i);
  } else {
    // model forward is read-only on parameters; results land in fixed
    // index slots, so the reduction order below is deterministic
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const int workers = std::min<int>(jobs, static_cast<int>(dataset.size()));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&]() {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= dataset.size()) return;
          score_one(i);
        }
      });
    for (auto& t : pool) t.join();
  }
  double l1_sum = 0;
  std::size_t l1_count = 0;
  for (const auto& s : scored) {
    l1_sum += s.l1_sum;
    l1_count += s.l1_count;
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });

  EvalMetrics m;
  m.samples = dataset.size();
  m.mean_l1 = l1_count ? l1_sum / static_cast<double>(l1_count) : 0.0;
  const double n = static_cast<double>(scored.size());
  for (int t = 0; t < 10; ++t) {
    const double thr = 0.50 + 0.05 * t;
    double tp = 0, ap = 0;
    for (std::size_t r = 0; r < scored.size(); ++r) {
      if (scored[r].oks >= thr) {
        tp += 1;
        ap += tp / static_cast<double>(r + 1);
      }
    }
    m.thresholds.push_back(thr);
    m.ap_per_threshold.push_back(ap / n);
    m.ar_per_threshold.push_back(tp / n);
  }
  m.ap = std::accumulate(m.ap_per_threshold.begin(), m.ap_per_threshold.end(),
                         0.0) / m.ap_per_threshold.size();
  m.ar = std::accumulate(m.ar_per_threshold.begin(), m.ar_per_threshold.end(),
                         0.0) / m.ar_per_threshold.size();
  return m;
}

// Machine-readable key-value report.
inline std::string metrics_report(const EvalMetrics& m) {
  char buf[96];
  std::string out;
  std::snprintf(buf, sizeof(buf), "AP = %.6f\n", m.ap);
  out += buf;
  std::snprintf(buf, sizeof(buf), "AR = %.6f\n", m.ar);
  out += buf;
  for (std::size_t i = 0; i < m.thresholds.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "AP@%.2f = %.6f\n", m.thresholds[i],
                  m.ap_per_threshold[i]);
    out += buf;
    std::snprintf(buf, sizeof(buf), "AR@%.2f = %.6f\n", m.thresholds[i],
                  m.ar_per_threshold[i]);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "mean_l1 = %.6f\n", m.mean_l1);
  out += buf;
  std::snprintf(buf, sizeof(buf), "samples = %zu\n", m.samples);
  out += buf;
  return out;
}

// Per-class sigma table: COCO constants for the 17-joint skeleton,
// uniform 0.05 otherwise.
inline std::vector<double> sigmas_for_joint_count(int k) {
  if (k == 17) return coco_sigmas();
  return std::vector<double>(static_cast<std::size_t>(k), 0.05);
}

}  // namespace pef
