#include "dupl/optim.hpp"

#include <cmath>

#include "dupl/error.hpp"
#include "dupl/kernels/kernels.hpp"

namespace dupl {
namespace {

void validate(const AdamWConfig& c) {
  if (!(c.lr > 0)) throw ConfigError("AdamW: learning rate must be positive");
  if (c.beta1 < 0 || c.beta1 >= 1 || c.beta2 < 0 || c.beta2 >= 1) {
    throw ConfigError("AdamW: betas must lie in [0, 1)");
  }
  if (c.eps <= 0 || c.weight_decay < 0) {
    throw ConfigError("AdamW: eps must be positive, weight decay non-negative");
  }
}

}  // namespace

template <typename T>
void adamw_step(std::span<T> param, std::span<const T> grad,
                std::span<T> exp_avg, std::span<T> exp_avg_sq,
                const AdamWConfig& config, int step) {
  validate(config);
  if (step < 1) throw ConfigError("AdamW: step must be >= 1");
  const kernels::AdamWCoeffs k{config.lr,
                               config.beta1,
                               config.beta2,
                               config.eps,
                               config.weight_decay,
                               1.0 - std::pow(config.beta1, step),
                               1.0 - std::pow(config.beta2, step)};
  kernels::adamw_update<T>(param, grad, exp_avg, exp_avg_sq, k);
}

template <typename T>
AdamW<T>::AdamW(std::vector<Tensor<T>> params, const AdamWConfig& config)
    : params_(std::move(params)), config_(config) {
  validate(config_);
  for (const auto& p : params_) {
    if (!p.requires_grad()) throw ConfigError("AdamW: parameter without grad");
    exp_avg_.emplace_back(p.numel(), T(0));
    exp_avg_sq_.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step() {
  ++step_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T>& p = params_[i];
    adamw_step<T>(p.data(), std::span<const T>(p.grad()), exp_avg_[i],
                  exp_avg_sq_[i], config_, step_);
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template void adamw_step<float>(std::span<float>, std::span<const float>,
                                std::span<float>, std::span<float>,
                                const AdamWConfig&, int);
template void adamw_step<double>(std::span<double>, std::span<const double>,
                                 std::span<double>, std::span<double>,
                                 const AdamWConfig&, int);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace dupl
