#include "dcn/seq_head.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "dcn/attention.hpp"
#include "dcn/cost_model.hpp"
#include "dcn/parallel.hpp"

namespace dcn {

std::span<const double> SequenceDist::head(std::size_t index) const {
  if (index == 0) return length;
  if (index > 5) throw std::out_of_range("sequence head " + std::to_string(index));
  return digits[index - 1];
}

std::span<double> SequenceDist::head(std::size_t index) {
  if (index == 0) return length;
  if (index > 5) throw std::out_of_range("sequence head " + std::to_string(index));
  return digits[index - 1];
}

void SequenceDist::validate() const {
  for (std::size_t h = 0; h < 6; ++h) {
    double total = 0.0;
    for (double p : head(h)) {
      if (!(p >= 0.0)) throw std::invalid_argument("sequence head " + std::to_string(h) +
                                                   " has a negative or NaN entry");
      total += p;
    }
    if (std::abs(total - 1.0) > kNormalizationTolerance)
      throw std::invalid_argument("sequence head " + std::to_string(h) + " sums to " +
                                  std::to_string(total));
  }
}

SequenceDist SequenceDist::from_channels(std::span<const double> channels) {
  if (channels.size() != kSequenceChannels)
    throw DimensionError("sequence distribution needs " + std::to_string(kSequenceChannels) +
                         " channels, got " + std::to_string(channels.size()));
  SequenceDist d;
  std::copy_n(channels.begin(), kLengthClasses, d.length.begin());
  for (std::size_t i = 0; i < 5; ++i)
    std::copy_n(channels.begin() + static_cast<std::ptrdiff_t>(kLengthClasses + i * kDigitClasses),
                kDigitClasses, d.digits[i].begin());
  return d;
}

SequenceDist SequenceDist::uniform() {
  SequenceDist d;
  d.length.fill(1.0 / kLengthClasses);
  for (auto& h : d.digits) h.fill(1.0 / kDigitClasses);
  return d;
}

template <typename T>
ProbabilityMap probability_map(const Tensor<T>& map, std::size_t n) {
  if (map.rank() != 4 || map.dim(1) != kSequenceChannels)
    throw DimensionError("probability_map: expected [N,60,d1,d2], got " +
                         shape_to_string(map.shape()));
  if (n >= map.dim(0)) throw std::out_of_range("probability_map: example index out of range");
  ProbabilityMap out;
  out.rows = map.dim(2);
  out.cols = map.dim(3);
  const std::size_t plane = out.rows * out.cols;
  auto v = map.values();
  std::vector<double> channels(kSequenceChannels);
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < kSequenceChannels; ++c)
      channels[c] = static_cast<double>(v[(n * kSequenceChannels + c) * plane + p]);
    out.cells.push_back(SequenceDist::from_channels(channels));
  }
  return out;
}

double sequence_probability(const SequenceDist& dist, std::span<const std::uint8_t> sequence) {
  if (sequence.empty() || sequence.size() > kMaxSequenceLength)
    throw std::invalid_argument("sequence length must lie in 1..5, got " +
                                std::to_string(sequence.size()));
  double p = dist.length[sequence.size() - 1];
  for (std::size_t i = 0; i < sequence.size(); ++i) {
    if (sequence[i] > 9)
      throw std::invalid_argument("sequence entry " + std::to_string(sequence[i]) +
                                  " is not a digit");
    p *= dist.digits[i][sequence[i]];
  }
  return p;
}

SequenceDist average_pool_predictions(const ProbabilityMap& map) {
  if (map.cells.empty()) throw std::invalid_argument("average_pool_predictions: empty map");
  SequenceDist out;
  const double w = 1.0 / static_cast<double>(map.cells.size());
  for (const SequenceDist& c : map.cells)
    for (std::size_t h = 0; h < 6; ++h) {
      auto dst = out.head(h);
      auto src = c.head(h);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
    }
  return out;
}

double head_entropy(const SequenceDist& dist, std::size_t head) { return entropy(dist.head(head)); }

double summed_entropy(const SequenceDist& dist) {
  double total = 0.0;
  for (std::size_t h = 1; h <= 5; ++h) total += head_entropy(dist, h);
  return total;
}

std::vector<double> inverse_entropy_weights(const ProbabilityMap& map, std::size_t head) {
  if (map.cells.empty()) throw std::invalid_argument("inverse_entropy_weights: empty map");
  std::vector<double> w;
  w.reserve(map.cells.size());
  for (const SequenceDist& c : map.cells)
    w.push_back(1.0 / std::max(head_entropy(c, head), kEntropyFloor));
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= total;
  return w;
}

SequenceDist soft_attention_predict(const ProbabilityMap& map) {
  SequenceDist out;
  for (std::size_t h = 0; h < 6; ++h) {
    const std::vector<double> w = inverse_entropy_weights(map, h);
    auto dst = out.head(h);
    for (std::size_t p = 0; p < map.cells.size(); ++p) {
      auto src = map.cells[p].head(h);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w[p] * src[i];
    }
  }
  return out;
}

DecodedSequence decode(const SequenceDist& dist) {
  DecodedSequence best;
  best.probability = -1.0;
  std::vector<std::uint8_t> digits;
  double prefix = 1.0;
  for (std::size_t n = 1; n <= kMaxSequenceLength; ++n) {
    const auto& h = dist.digits[n - 1];
    const auto top = std::max_element(h.begin(), h.begin() + 10);
    digits.push_back(static_cast<std::uint8_t>(top - h.begin()));
    prefix *= *top;
    const double p = dist.length[n - 1] * prefix;
    if (p > best.probability) {
      best.probability = p;
      best.digits = digits;
    }
  }
  return best;
}

void write_prediction_line(std::ostream& os, const DecodedSequence& seq) {
  os << seq.digits.size();
  for (std::uint8_t d : seq.digits) os << ' ' << static_cast<int>(d);
  const auto old = os.precision(6);
  os << ' ' << seq.probability << '\n';
  os.precision(old);
}

const char* sequence_model_name(SequenceModel model) {
  switch (model) {
    case SequenceModel::coarse_average: return "coarse-average";
    case SequenceModel::coarse_soft_attention: return "coarse-soft-attention";
    case SequenceModel::fine_average: return "fine-average";
    case SequenceModel::fine_soft_attention: return "fine-soft-attention";
    case SequenceModel::dcn: return "dcn";
  }
  return "unknown";
}

SequenceModel parse_sequence_model(const std::string& name) {
  for (SequenceModel m : {SequenceModel::coarse_average, SequenceModel::coarse_soft_attention,
                          SequenceModel::fine_average, SequenceModel::fine_soft_attention,
                          SequenceModel::dcn})
    if (name == sequence_model_name(m)) return m;
  throw std::invalid_argument("unknown sequence model '" + name + "'");
}

namespace {

SequenceDist mean_of(const std::vector<SequenceDist>& dists) {
  ProbabilityMap m;
  m.rows = 1;
  m.cols = dists.size();
  m.cells = dists;
  return average_pool_predictions(m);
}

// Per-patch distributions of the fine stack on the given coarse-grid cells.
template <typename T>
ProbabilityMap fine_on_cells(const Tensor<T>& image, const DcnStacks<T>& stacks,
                             std::span<const Cell> cells, const DcnConfig& config) {
  NoGradGuard no_grad;
  Tensor<T> fine_out;
  {
    Tensor<T> patches = crop_cells(image, cells, stacks.coarse, config.context_px);
    SectionScope section(section::fine_on_patches);
    fine_out = stacks.fine.infer(patches);
  }
  ProbabilityMap per_patch;
  per_patch.rows = 1;
  per_patch.cols = cells.size();
  SectionScope section(section::top_on_map);
  for (std::size_t m = 0; m < cells.size(); ++m)
    per_patch.cells.push_back(
        probability_map(stacks.top.infer(slice(fine_out, 0, m, 1))).cells.front());
  return per_patch;
}

template <typename T>
SequenceDist dcn_at_scale(const Tensor<T>& image, const DcnStacks<T>& stacks, std::size_t k,
                          const DcnConfig& config) {
  const Shape grid = stacks.coarse.output_shape(image.shape());
  k = std::min(k, grid.at(2) * grid.at(3));
  Selection<T> sel = select_batch(image, stacks, k, config);
  if (k == 0) {
    NoGradGuard no_grad;
    SectionScope section(section::top_on_map);
    return average_pool_predictions(probability_map(stacks.top.infer(sel.coarse_map)));
  }
  return soft_attention_predict(fine_on_cells(image, stacks, sel.cells, config));
}

template <typename T>
SequenceDist single_scale(const Tensor<T>& image, const DcnStacks<T>& stacks, SequenceModel model,
                          std::size_t k, const DcnConfig& config) {
  switch (model) {
    case SequenceModel::dcn:
      return dcn_at_scale(image, stacks, k, config);
    case SequenceModel::fine_average:
    case SequenceModel::fine_soft_attention: {
      const Shape grid = stacks.coarse.output_shape(image.shape());
      std::vector<Cell> cells;
      for (std::size_t i = 0; i < grid.at(2); ++i)
        for (std::size_t j = 0; j < grid.at(3); ++j) cells.push_back({0, i, j});
      const ProbabilityMap pm = fine_on_cells(image, stacks, cells, config);
      return model == SequenceModel::fine_average ? average_pool_predictions(pm)
                                                  : soft_attention_predict(pm);
    }
    case SequenceModel::coarse_average:
    case SequenceModel::coarse_soft_attention:
      break;
  }
  NoGradGuard no_grad;
  Tensor<T> map;
  {
    SectionScope section(section::coarse);
    map = stacks.coarse.infer(image);
  }
  const ProbabilityMap pm = probability_map(map);
  return model == SequenceModel::coarse_average ? average_pool_predictions(pm)
                                                : soft_attention_predict(pm);
}

// Smallest image the coarse stack accepts; models that crop patches need room
// for the context as well.
template <typename T>
bool fits(const DcnStacks<T>& stacks, SequenceModel model, const DcnConfig& config,
          std::size_t h, std::size_t w) {
  const FieldGeometry g = stacks.coarse.field_geometry();
  std::size_t need_h = g.size_h, need_w = g.size_w;
  if (model != SequenceModel::coarse_average && model != SequenceModel::coarse_soft_attention) {
    need_h += config.context_px;
    need_w += config.context_px;
  }
  return h >= need_h && w >= need_w;
}

}  // namespace

template <typename T>
SequenceDist sequence_predict(const Tensor<T>& image, const DcnStacks<T>& stacks,
                              SequenceModel model, std::size_t k, std::span<const double> scales,
                              const DcnConfig& config, std::vector<std::string>* warnings) {
  if (image.rank() != 4 || image.dim(0) != 1)
    throw DimensionError("sequence_predict: expected one [1,C,H,W] image, got " +
                         shape_to_string(image.shape()));
  const double unit[] = {1.0};
  if (scales.empty()) scales = unit;
  std::vector<SequenceDist> per_scale;
  for (double s : scales) {
    if (!(s > 0.0)) throw std::invalid_argument("scale factors must be positive");
    const std::size_t h = scaled_extent(image.dim(2), s), w = scaled_extent(image.dim(3), s);
    if (!fits(stacks, model, config, h, w)) {
      std::ostringstream msg;
      msg << "scale " << s << " gives a " << h << "x" << w << " image, too small; skipped";
      if (warnings)
        warnings->push_back(msg.str());
      else
        std::clog << "warning: " << msg.str() << '\n';
      continue;
    }
    const Tensor<T> scaled =
        (h == image.dim(2) && w == image.dim(3)) ? image : resize_bilinear(image.detach(), h, w);
    per_scale.push_back(single_scale(scaled, stacks, model, k, config));
  }
  if (per_scale.empty())
    throw DimensionError("no scale leaves the " + shape_to_string(image.shape()) +
                         " image large enough for the model");
  return mean_of(per_scale);
}

template <typename T>
SequenceDist dcn_sequence_infer(const Tensor<T>& image, const DcnStacks<T>& stacks, std::size_t k,
                                std::span<const double> scales, const DcnConfig& config,
                                std::vector<std::string>* warnings) {
  return sequence_predict(image, stacks, SequenceModel::dcn, k, scales, config, warnings);
}

template <typename T>
double sequence_error(const Dataset& data, const DcnStacks<T>& stacks, SequenceModel model,
                      std::size_t k, std::span<const double> scales, const DcnConfig& config,
                      std::vector<DecodedSequence>* predictions) {
  if (data.size() == 0) throw std::invalid_argument("sequence_error: empty dataset");
  std::vector<DecodedSequence> decoded(data.size());
  std::vector<std::vector<std::string>> warnings(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const std::size_t idx[] = {i};
    decoded[i] = decode(sequence_predict(images_tensor<T>(data, idx), stacks, model, k, scales,
                                         config, &warnings[i]));
  });
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (decoded[i].digits != data.labels[i]) ++wrong;
  // Every example has the same extents, so the first one's warnings stand for all.
  for (const auto& w : warnings.front()) std::clog << "warning: " << w << '\n';
  if (predictions) predictions->insert(predictions->end(), decoded.begin(), decoded.end());
  return static_cast<double>(wrong) / static_cast<double>(data.size());
}

template <typename T>
Tensor<T> sequence_loss(const Tensor<T>& pred, std::span<const std::vector<std::uint8_t>> labels) {
  const std::size_t N = pred.dim(0);
  if (labels.size() != N)
    throw DimensionError("sequence_loss: " + std::to_string(N) + " predictions, " +
                         std::to_string(labels.size()) + " labels");
  if (pred.numel() != N * kSequenceChannels)
    throw DimensionError("sequence_loss: expected 60 channels per example, got " +
                         shape_to_string(pred.shape()));
  std::vector<T> pick(N * kSequenceChannels, T(0));
  const T w = T(1) / static_cast<T>(N);
  for (std::size_t n = 0; n < N; ++n) {
    const auto& s = labels[n];
    if (s.empty() || s.size() > kMaxSequenceLength)
      throw std::invalid_argument("sequence label length must lie in 1..5");
    T* row = pick.data() + n * kSequenceChannels;
    row[s.size() - 1] = w;
    for (std::size_t i = 0; i < 5; ++i) {
      if (i < s.size() && s[i] > 9) throw std::invalid_argument("sequence label has a non-digit");
      const std::size_t target = i < s.size() ? s[i] : kNullDigit;
      row[kLengthClasses + i * kDigitClasses + target] = w;
    }
  }
  Tensor<T> flat = reshape(pred, Shape{N, kSequenceChannels});
  return scale(sum(mul(log(flat), Tensor<T>({N, kSequenceChannels}, std::move(pick)))), -1.0);
}

namespace {

template <typename T>
double whole_image_error(const LayerStack<T>& bottom, const LayerStack<T>& top,
                         const Dataset& data, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::size_t wrong = 0;
  for (std::size_t first = 0; first < data.size(); first += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - first));
    std::iota(idx.begin(), idx.end(), first);
    const Tensor<T> out = top.infer(bottom.infer(images_tensor<T>(data, idx)));
    for (std::size_t b = 0; b < idx.size(); ++b)
      if (decode(probability_map(out, b).cells.front()).digits != data.labels[idx[b]]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(data.size());
}

}  // namespace

template <typename T>
TrainLog train_sequence(LayerStack<T>& bottom, LayerStack<T>& top, const Dataset& train_set,
                        const Dataset& test_set, const SequenceTrainConfig& config,
                        const std::function<void(const EpochRecord&)>& on_epoch) {
  if (train_set.size() == 0) throw std::invalid_argument("train_sequence: empty training set");
  if (config.batch_size == 0 || config.eval_batch_size == 0)
    throw std::invalid_argument("train_sequence: batch sizes must be positive");
  std::mt19937_64 rng(example_seed(config.seed, 0x5e9));
  bottom.seed_dropout(rng());
  top.seed_dropout(rng());
  std::vector<Tensor<T>> params = bottom.parameters();
  for (auto& p : top.parameters()) params.push_back(p);
  Optimizer<T> optimizer(config.optimizer, params);

  TrainLog log;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
      const std::span<const std::size_t> idx(order.data() + first,
                                             std::min(config.batch_size, order.size() - first));
      std::vector<std::vector<std::uint8_t>> y;
      for (std::size_t i : idx) y.push_back(train_set.labels[i]);
      optimizer.zero_grad();
      Tensor<T> loss = sequence_loss(
          top.forward(bottom.forward(images_tensor<T>(train_set, idx), Mode::train), Mode::train),
          std::span<const std::vector<std::uint8_t>>(y));
      const double value = loss.item();
      if (!std::isfinite(value)) throw std::runtime_error("training loss is not finite");
      backward(loss);
      optimizer.step();
      loss_sum += value * static_cast<double>(idx.size());
    }
    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(order.size());
    if (test_set.size() > 0)
      record.test_error = whole_image_error(bottom, top, test_set, config.eval_batch_size);
    log.epochs.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  return log;
}

#define DCN_INSTANTIATE_SEQ(T)                                                                    \
  template ProbabilityMap probability_map(const Tensor<T>&, std::size_t);                         \
  template SequenceDist dcn_sequence_infer(const Tensor<T>&, const DcnStacks<T>&, std::size_t,    \
                                           std::span<const double>, const DcnConfig&,             \
                                           std::vector<std::string>*);                            \
  template SequenceDist sequence_predict(const Tensor<T>&, const DcnStacks<T>&, SequenceModel,    \
                                         std::size_t, std::span<const double>, const DcnConfig&,  \
                                         std::vector<std::string>*);                              \
  template double sequence_error(const Dataset&, const DcnStacks<T>&, SequenceModel, std::size_t, \
                                 std::span<const double>, const DcnConfig&,                       \
                                 std::vector<DecodedSequence>*);                                  \
  template Tensor<T> sequence_loss(const Tensor<T>&, std::span<const std::vector<std::uint8_t>>); \
  template TrainLog train_sequence(LayerStack<T>&, LayerStack<T>&, const Dataset&, const Dataset&, \
                                   const SequenceTrainConfig&,                                    \
                                   const std::function<void(const EpochRecord&)>&);

DCN_INSTANTIATE_SEQ(float)
DCN_INSTANTIATE_SEQ(double)

}  // namespace dcn
