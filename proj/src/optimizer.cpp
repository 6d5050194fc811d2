#include "dcn/optimizer.hpp"

#include <cmath>

namespace dcn {

template <typename T>
Optimizer<T>::Optimizer(OptimizerConfig config, std::vector<Tensor<T>> params)
    : config_(config), params_(std::move(params)) {
  if (config_.learning_rate <= 0.0) throw std::invalid_argument("optimizer: learning rate must be positive");
  if (config_.decay_interval == 0) throw std::invalid_argument("optimizer: decay interval must be >= 1");
  for (const auto& p : params_) {
    first_.emplace_back(p.numel(), 0.0);
    second_.emplace_back(config_.kind == OptimizerKind::adam ? p.numel() : 0, 0.0);
  }
}

template <typename T>
double Optimizer<T>::current_rate() const {
  return config_.learning_rate *
         std::pow(config_.decay, static_cast<double>(steps_ / config_.decay_interval));
}

template <typename T>
void Optimizer<T>::check_ready() const {
  for (std::size_t k = 0; k < params_.size(); ++k)
    if (!params_[k].has_grad())
      throw GraphError("optimizer: parameter '" +
                       (params_[k].name().empty() ? "#" + std::to_string(k) : params_[k].name()) +
                       "' has no gradient");
}

template <typename T>
void Optimizer<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
void Optimizer<T>::step() {
  check_ready();
  const double rate = current_rate();
  ++steps_;
  if (config_.kind == OptimizerKind::sgd_momentum) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto values = params_[k].mutable_values();
      auto grad = params_[k].grad();
      auto& velocity = first_[k];
      for (std::size_t i = 0; i < values.size(); ++i) {
        velocity[i] = config_.momentum * velocity[i] + static_cast<double>(grad[i]);
        values[i] = static_cast<T>(values[i] - rate * velocity[i]);
      }
    }
    return;
  }
  const double t = static_cast<double>(steps_);
  const double correction1 = 1.0 - std::pow(config_.beta1, t);
  const double correction2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto values = params_[k].mutable_values();
    auto grad = params_[k].grad();
    auto& m = first_[k];
    auto& v = second_[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      values[i] = static_cast<T>(values[i] - rate * m_hat / (std::sqrt(v_hat) + config_.epsilon));
    }
  }
}

template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace dcn
