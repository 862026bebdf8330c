#pragma once

#include <vector>

#include "dupl/tensor.hpp"

namespace dupl {

struct AdamWConfig {
  double lr = 6e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay: p <- p * (1 - lr * wd) before the bias-corrected
// Adam update. Moment buffers start at zero; step() counts from 1.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, const AdamWConfig& config);

  void step();
  void zero_grad();
  int steps_taken() const { return step_; }
  void set_lr(double lr) { config_.lr = lr; }
  const AdamWConfig& config() const { return config_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> exp_avg_;
  std::vector<std::vector<T>> exp_avg_sq_;
  AdamWConfig config_;
  int step_ = 0;
};

// One stateless AdamW update of a single tensor at step `step` (>= 1).
template <typename T>
void adamw_step(std::span<T> param, std::span<const T> grad,
                std::span<T> exp_avg, std::span<T> exp_avg_sq,
                const AdamWConfig& config, int step);

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace dupl
