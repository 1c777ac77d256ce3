#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pef/tensor.hpp"

namespace pef {

// AdamW with decoupled weight decay: p -= lr*wd*p before the
// bias-corrected moment update.
template <class Real>
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
  std::int64_t step_count = 0;
  std::map<std::string, std::vector<Real>> m, v;

  void step(std::vector<std::pair<std::string, Tensor<Real>>>& params,
            const std::function<double(const std::string&)>& lr_for) {
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (auto& [name, p] : params) {
      const double lr = lr_for(name);
      auto& mom1 = m[name];
      auto& mom2 = v[name];
      if (mom1.size() != p.size()) mom1.assign(p.size(), Real(0));
      if (mom2.size() != p.size()) mom2.assign(p.size(), Real(0));
      auto& value = p.data();
      auto& grad = p.grad();
      for (std::size_t i = 0; i < value.size(); ++i) {
        value[i] -= static_cast<Real>(lr * weight_decay) * value[i];
        const double g = static_cast<double>(grad[i]);
        mom1[i] = static_cast<Real>(beta1 * mom1[i] + (1.0 - beta1) * g);
        mom2[i] = static_cast<Real>(beta2 * mom2[i] + (1.0 - beta2) * g * g);
        const double mhat = static_cast<double>(mom1[i]) / bc1;
        const double vhat = static_cast<double>(mom2[i]) / bc2;
        value[i] -= static_cast<Real>(lr * mhat / (std::sqrt(vhat) + epsilon));
      }
    }
  }

  void step(std::vector<std::pair<std::string, Tensor<Real>>>& params,
            double lr) {
    step(params, [lr](const std::string&) { return lr; });
  }
};

struct ScheduleConfig {
  double encoder_lr = 1e-5;
  double decoder_lr = 1e-4;
  double drop_factor = 10.0;
  int drop_epoch = 50;   // first epoch at the dropped rate
  int epochs = 80;
  int batch_size = 42;

  void validate() const {
    if (drop_epoch >= epochs)
      throw ValueError("schedule: drop epoch must precede total epochs");
    if (epochs <= 0 || batch_size <= 0)
      throw ValueError("schedule: epochs and batch size must be positive");
  }
};

// Piecewise-constant schedule with a single /drop_factor step.
inline std::pair<double, double> lr_at(int epoch, const ScheduleConfig& s) {
  const double div = epoch >= s.drop_epoch ? s.drop_factor : 1.0;
  return {s.encoder_lr / div, s.decoder_lr / div};
}

}  // namespace pef
