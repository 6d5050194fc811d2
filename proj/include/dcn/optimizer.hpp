#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcn/tensor.hpp"

namespace dcn {

enum class OptimizerKind { adam, sgd_momentum };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.9;
  // rate = learning_rate * decay^(steps / decay_interval), integer division.
  double decay = 1.0;
  std::uint64_t decay_interval = 1;

  static OptimizerConfig adam(double lr = 1e-3) {
    OptimizerConfig c;
    c.learning_rate = lr;
    return c;
  }
  static OptimizerConfig sgd(double lr, double momentum = 0.9, double decay = 0.97,
                             std::uint64_t decay_interval = 1) {
    OptimizerConfig c;
    c.kind = OptimizerKind::sgd_momentum;
    c.learning_rate = lr;
    c.momentum = momentum;
    c.decay = decay;
    c.decay_interval = decay_interval;
    return c;
  }
};

/// Updates a fixed parameter group in place from its accumulated gradients.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Tensor<T>> params);

  /// Throws GraphError naming the first parameter with no gradient; in that
  /// case no parameter is touched.
  void step();
  void check_ready() const;
  void zero_grad();

  double current_rate() const;
  std::uint64_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  OptimizerConfig config_;
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::uint64_t steps_ = 0;
};

extern template class Optimizer<float>;
extern template class Optimizer<double>;

}  // namespace dcn
