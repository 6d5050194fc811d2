// Multi-digit sequence model: six softmaxes per position (length over 1..5,
// then five digit heads over 0..9 plus null), probability maps, inverse-entropy
// soft attention, fine-only DCN aggregation and multi-scale inference.
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dcn/data.hpp"
#include "dcn/model.hpp"
#include "dcn/optimizer.hpp"
#include "dcn/training.hpp"

namespace dcn {

inline constexpr std::size_t kLengthClasses = 5;
inline constexpr std::size_t kDigitClasses = 11;
inline constexpr std::size_t kSequenceChannels = kLengthClasses + 5 * kDigitClasses;
inline constexpr double kEntropyFloor = 1e-8;

struct SequenceDist {
  std::array<double, kLengthClasses> length{};                     // p(S0 = 1..5)
  std::array<std::array<double, kDigitClasses>, 5> digits{};       // p(Si = 0..9, null)

  /// Head 0 is the length head, 1..5 the digit heads.
  std::span<const double> head(std::size_t index) const;
  std::span<double> head(std::size_t index);
  /// Throws std::invalid_argument unless every head is a distribution within 1e-6.
  void validate() const;

  static SequenceDist from_channels(std::span<const double> channels);
  static SequenceDist uniform();
};

struct ProbabilityMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<SequenceDist> cells;  // row-major

  const SequenceDist& at(std::size_t i, std::size_t j) const { return cells.at(i * cols + j); }
};

/// Per-position distributions of example n of a [N, 60, d1, d2] map.
template <typename T>
ProbabilityMap probability_map(const Tensor<T>& map, std::size_t n = 0);

/// p(S0 = n) * prod_i p(Si = s_i). Throws std::invalid_argument for an empty,
/// overlong or non-digit sequence.
double sequence_probability(const SequenceDist& dist, std::span<const std::uint8_t> sequence);

SequenceDist average_pool_predictions(const ProbabilityMap& map);

/// Entropy of one head (0 = length).
double head_entropy(const SequenceDist& dist, std::size_t head);
/// Sum of the five digit-head entropies; the length head is excluded.
double summed_entropy(const SequenceDist& dist);

/// w = (1/H) / sum(1/H) over positions for one head, H floored at 1e-8.
std::vector<double> inverse_entropy_weights(const ProbabilityMap& map, std::size_t head);
SequenceDist soft_attention_predict(const ProbabilityMap& map);

struct DecodedSequence {
  std::vector<std::uint8_t> digits;
  double probability = 0.0;
};

/// Most probable sequence: for each length the best non-null digits, then the
/// best length.
DecodedSequence decode(const SequenceDist& dist);

/// "length digit1 ... digitN p(sequence)".
void write_prediction_line(std::ostream& os, const DecodedSequence& seq);

// The fine baselines run the fine stack on the patch of every coarse-grid
// position, so DCN with k = grid size matches fine_soft_attention.
enum class SequenceModel {
  coarse_average,
  coarse_soft_attention,
  fine_average,
  fine_soft_attention,
  dcn,
};

const char* sequence_model_name(SequenceModel model);
SequenceModel parse_sequence_model(const std::string& name);

/// Fine-only DCN on one image [1, C, H, W]: per scale, coarse map, summed-entropy
/// saliency below the coarse output, top-k, fine stack on the patches and
/// inverse-entropy aggregation; the per-scale results are averaged. Scales the
/// image is too small for are skipped with a warning; if all are, throws.
template <typename T>
SequenceDist dcn_sequence_infer(const Tensor<T>& image, const DcnStacks<T>& stacks, std::size_t k,
                                std::span<const double> scales, const DcnConfig& config,
                                std::vector<std::string>* warnings = nullptr);

/// Any of the sequence models on one image, averaged over scales.
template <typename T>
SequenceDist sequence_predict(const Tensor<T>& image, const DcnStacks<T>& stacks,
                              SequenceModel model, std::size_t k, std::span<const double> scales,
                              const DcnConfig& config, std::vector<std::string>* warnings = nullptr);

/// Exact-match error of decoded sequences.
template <typename T>
double sequence_error(const Dataset& data, const DcnStacks<T>& stacks, SequenceModel model,
                      std::size_t k, std::span<const double> scales, const DcnConfig& config,
                      std::vector<DecodedSequence>* predictions = nullptr);

/// -log p(S = s | x) with null targets for the heads past the length, averaged
/// over the batch. `pred` is [N, 60].
template <typename T>
Tensor<T> sequence_loss(const Tensor<T>& pred, std::span<const std::vector<std::uint8_t>> labels);

struct SequenceTrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  OptimizerConfig optimizer = OptimizerConfig::sgd(0.05, 0.9, 0.9, 1);
  std::uint64_t seed = 0;
  std::size_t eval_batch_size = 128;
};

/// Trains `bottom` (coarse or fine) with `top` on full canvases. The log's
/// test_error is the exact-match error of g(bottom(x)) on `test_set`.
template <typename T>
TrainLog train_sequence(LayerStack<T>& bottom, LayerStack<T>& top, const Dataset& train_set,
                        const Dataset& test_set, const SequenceTrainConfig& config,
                        const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace dcn
