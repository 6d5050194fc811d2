// End-to-end training: cross-entropy on the refined model plus the hint term
// pulling coarse vectors toward (constant) fine vectors on the selected patches.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dcn/attention.hpp"
#include "dcn/data.hpp"
#include "dcn/model.hpp"
#include "dcn/optimizer.hpp"

namespace dcn {

enum class ModelKind { coarse, fine, dcn };

const char* model_kind_name(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

struct TrainConfig {
  ModelKind model = ModelKind::dcn;
  std::size_t k = 8;
  std::size_t batch_size = 32;
  std::size_t epochs = 5;
  double lambda = 0.5;  // total = (1 - lambda) * cross-entropy + lambda * hint
  OptimizerConfig coarse_optimizer = OptimizerConfig::adam();
  OptimizerConfig fine_optimizer = OptimizerConfig::adam();
  OptimizerConfig top_optimizer = OptimizerConfig::adam();
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // epochs; 0 disables
  std::filesystem::path checkpoint_dir;
  std::size_t eval_batch_size = 128;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Mean over the batch of -log p[label], inputs clamped at 1e-12. `pred` is [N, C].
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& pred, std::span<const std::size_t> labels);

/// Sum over rows of ||c - f||^2 with f treated as a constant. Both [P, D, ...].
template <typename T>
Tensor<T> hint_loss(const Tensor<T>& coarse_vectors, const Tensor<T>& fine_vectors);

template <typename T>
struct Optimizers {
  Optimizer<T> coarse;
  Optimizer<T> fine;
  Optimizer<T> top;

  Optimizers(const TrainConfig& config, const DcnStacks<T>& stacks);
};

struct StepResult {
  double loss = 0.0;
  double cross_entropy = 0.0;
  double hint = 0.0;  // mean squared distance per selected patch
};

/// One update on a batch. Selection runs with inference-mode stacks; the
/// refined forward and backward use train mode. If anything fails before the
/// optimizers run, no parameter changes.
template <typename T>
StepResult train_step(const Tensor<T>& images, std::span<const std::size_t> labels,
                      const TrainConfig& config, const DcnConfig& dcn, DcnStacks<T>& stacks,
                      Optimizers<T>& optimizers);

struct EvalResult {
  double error = 0.0;
  double hint_distance = 0.0;  // DCN only: mean ||c - f||^2 over selected patches
  std::size_t count = 0;
};

/// Inference-mode classification error of a model kind; k applies to DCN.
template <typename T>
EvalResult evaluate(const Dataset& data, const DcnStacks<T>& stacks, ModelKind model,
                    std::size_t k, const DcnConfig& dcn, std::size_t batch_size = 128);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_error = 0.0;
  double hint_distance = 0.0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  /// "epoch,train_loss,test_error,hint_distance" with round-trip precision.
  void write_csv(std::ostream& os) const;
  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

/// Epoch loop with a seeded shuffle. `on_epoch` sees each record as it lands.
template <typename T>
TrainLog train(DcnStacks<T>& stacks, const Dataset& train_set, const Dataset& test_set,
               const TrainConfig& config, const DcnConfig& dcn,
               const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Digit labels of single-digit datasets.
std::vector<std::size_t> class_labels(const Dataset& data, std::span<const std::size_t> indices);

}  // namespace dcn
