#pragma once

// AdamW with decoupled weight decay and a reduce-on-plateau schedule.

#include <cmath>
#include <limits>
#include <vector>

#include "xres/layers.hpp"

namespace xres {

struct AdamWSettings {
  double lr = 0.01;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <class T>
class AdamW {
 public:
  AdamW(ParamSet<T>& params, AdamWSettings s) : params_(&params), s_(s) {
    for (const auto& e : params.entries()) {
      m_.emplace_back(e.tensor.numel(), 0.0);
      v_.emplace_back(e.tensor.numel(), 0.0);
    }
  }

  double lr() const { return s_.lr; }
  void set_lr(double lr) { s_.lr = lr; }
  std::size_t steps() const { return t_; }

  // Gradients are divided by `grad_scale` (e.g. the batch size) first.
  void step(double grad_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
    auto& entries = params_->entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& t = entries[i].tensor;
      if (!t.has_grad()) continue;
      auto w = t.mutable_data();
      auto g = t.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]) / grad_scale;
        m[j] = s_.beta1 * m[j] + (1 - s_.beta1) * gj;
        v[j] = s_.beta2 * v[j] + (1 - s_.beta2) * gj * gj;
        double wj = static_cast<double>(w[j]);
        wj -= s_.lr * s_.weight_decay * wj;
        wj -= s_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + s_.eps);
        w[j] = static_cast<T>(wj);
      }
    }
  }

 private:
  ParamSet<T>* params_;
  AdamWSettings s_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// After `patience` epochs without a new best loss the rate is multiplied by
// `factor` and the counter restarts.
class PlateauSchedule {
 public:
  PlateauSchedule(std::size_t patience, double factor) : patience_(patience), factor_(factor) {}

  // Returns true when the rate was reduced.
  bool update(double loss, double& lr) {
    if (loss < best_) {
      best_ = loss;
      stale_ = 0;
      return false;
    }
    if (++stale_ >= patience_) {
      lr *= factor_;
      stale_ = 0;
      return true;
    }
    return false;
  }

  double best() const { return best_; }
  std::size_t stale() const { return stale_; }

 private:
  std::size_t patience_;
  double factor_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
};

}  // namespace xres
