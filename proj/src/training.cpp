#include "dcn/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>

#include "dcn/checkpoint.hpp"
#include "dcn/parallel.hpp"

namespace dcn {

const char* model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::coarse: return "coarse";
    case ModelKind::fine: return "fine";
    case ModelKind::dcn: return "dcn";
  }
  return "unknown";
}

ModelKind parse_model_kind(const std::string& name) {
  for (ModelKind k : {ModelKind::coarse, ModelKind::fine, ModelKind::dcn})
    if (name == model_kind_name(k)) return k;
  throw std::invalid_argument("unknown model '" + name + "' (expected coarse, fine or dcn)");
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0,1]");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (eval_batch_size == 0) throw std::invalid_argument("eval_batch_size must be positive");
  if (checkpoint_every > 0 && checkpoint_dir.empty())
    throw std::invalid_argument("checkpoint_every needs a checkpoint directory");
}

std::vector<std::size_t> class_labels(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    const auto& label = data.labels.at(i);
    if (label.size() != 1)
      throw std::invalid_argument("example " + std::to_string(i) + " is not single-digit");
    out.push_back(label[0]);
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& pred, std::span<const std::size_t> labels) {
  const std::size_t N = pred.dim(0);
  if (labels.size() != N)
    throw DimensionError("cross_entropy_loss: " + std::to_string(N) + " predictions, " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t C = pred.numel() / N;
  std::vector<T> pick(N * C, T(0));
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] >= C)
      throw std::out_of_range("label " + std::to_string(labels[n]) + " outside " +
                              std::to_string(C) + " classes");
    pick[n * C + labels[n]] = T(1) / static_cast<T>(N);
  }
  Tensor<T> flat = reshape(pred, Shape{N, C});
  return scale(sum(mul(log(flat), Tensor<T>({N, C}, std::move(pick)))), -1.0);
}

template <typename T>
Tensor<T> hint_loss(const Tensor<T>& coarse_vectors, const Tensor<T>& fine_vectors) {
  if (coarse_vectors.shape() != fine_vectors.shape())
    throw DimensionError("hint_loss: coarse " + shape_to_string(coarse_vectors.shape()) +
                         " vs fine " + shape_to_string(fine_vectors.shape()));
  const Tensor<T> terms[] = {coarse_vectors, fine_vectors.detach()};
  const double coeffs[] = {1.0, -1.0};
  Tensor<T> diff = linear_combination<T>(terms, coeffs);
  return sum(mul(diff, diff));
}

template <typename T>
Optimizers<T>::Optimizers(const TrainConfig& config, const DcnStacks<T>& stacks)
    : coarse(config.coarse_optimizer, stacks.coarse.parameters()),
      fine(config.fine_optimizer, stacks.fine.parameters()),
      top(config.top_optimizer, stacks.top.parameters()) {}

template <typename T>
StepResult train_step(const Tensor<T>& images, std::span<const std::size_t> labels,
                      const TrainConfig& config, const DcnConfig& dcn, DcnStacks<T>& stacks,
                      Optimizers<T>& optimizers) {
  config.validate();
  const std::size_t N = images.dim(0);
  Selection<T> sel;
  if (config.model == ModelKind::dcn) sel = select_batch(images, stacks, config.k, dcn);

  optimizers.coarse.zero_grad();
  optimizers.fine.zero_grad();
  optimizers.top.zero_grad();

  StepResult result;
  Tensor<T> loss;
  bool coarse_used = config.model != ModelKind::fine;
  bool fine_used = config.model == ModelKind::fine;
  if (config.model == ModelKind::dcn) {
    Tensor<T> c_map = stacks.coarse.forward(images, Mode::train);
    Tensor<T> refined = c_map;
    Tensor<T> hint;
    if (!sel.cells.empty()) {
      Tensor<T> patches = crop_cells(images, sel.cells, stacks.coarse, dcn.context_px);
      Tensor<T> f = stacks.fine.forward(patches, Mode::train);
      if (f.dim(2) != 1 || f.dim(3) != 1)
        throw DimensionError("training needs one fine vector per patch, fine stack emits " +
                             shape_to_string(f.shape()));
      refined = assemble_refined(c_map, f, sel.cells).map;
      hint = hint_loss(gather_cells(c_map, sel.cells), f);
      fine_used = true;
    }
    Tensor<T> ce = cross_entropy_loss(stacks.top.forward(refined, Mode::train), labels);
    result.cross_entropy = ce.item();
    if (hint.defined()) {
      result.hint = hint.item() / static_cast<double>(sel.cells.size());
      const Tensor<T> terms[] = {ce, hint};
      const double coeffs[] = {1.0 - config.lambda, config.lambda / static_cast<double>(N)};
      loss = linear_combination<T>(terms, coeffs);
    } else {
      loss = scale(ce, 1.0 - config.lambda);
    }
  } else {
    LayerStack<T>& bottom = config.model == ModelKind::coarse ? stacks.coarse : stacks.fine;
    loss = cross_entropy_loss(stacks.top.forward(bottom.forward(images, Mode::train), Mode::train),
                              labels);
    result.cross_entropy = loss.item();
  }
  result.loss = loss.item();
  if (!std::isfinite(result.loss)) throw std::runtime_error("training loss is not finite");
  backward(loss);

  optimizers.top.check_ready();
  if (coarse_used) optimizers.coarse.check_ready();
  if (fine_used) optimizers.fine.check_ready();
  optimizers.top.step();
  if (coarse_used) optimizers.coarse.step();
  if (fine_used) optimizers.fine.step();
  return result;
}

template <typename T>
EvalResult evaluate(const Dataset& data, const DcnStacks<T>& stacks, ModelKind model,
                    std::size_t k, const DcnConfig& dcn, std::size_t batch_size) {
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch size must be positive");
  struct BatchTally {
    std::size_t wrong = 0;
    std::size_t patches = 0;
    double hint_sum = 0.0;
  };
  const std::size_t batches = (data.size() + batch_size - 1) / batch_size;
  std::vector<BatchTally> tallies(batches);
  parallel_for(batches, [&](std::size_t b_index) {
    const std::size_t first = b_index * batch_size;
    BatchTally& tally = tallies[b_index];
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - first));
    std::iota(idx.begin(), idx.end(), first);
    const Tensor<T> x = images_tensor<T>(data, idx);
    const std::vector<std::size_t> y = class_labels(data, idx);
    Tensor<T> pred;
    if (model == ModelKind::coarse) {
      pred = coarse_predict_batch(x, stacks);
    } else if (model == ModelKind::fine) {
      pred = fine_predict_batch(x, stacks);
    } else {
      BatchInference<T> run = dcn_run_batch(x, stacks, k, dcn);
      pred = run.output;
      if (!run.selection.cells.empty() && run.fine_out.dim(2) == 1 && run.fine_out.dim(3) == 1) {
        NoGradGuard no_grad;
        tally.hint_sum += hint_loss(gather_cells(run.selection.coarse_map, run.selection.cells),
                                    run.fine_out).item();
        tally.patches += run.selection.cells.size();
      }
    }
    const std::size_t C = pred.dim(1);
    auto v = pred.values();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto row = v.subspan(b * C, C);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best != y[b]) ++tally.wrong;
    }
  });
  EvalResult result;
  std::size_t wrong = 0, patches = 0;
  double hint_sum = 0.0;
  for (const BatchTally& t : tallies) {
    wrong += t.wrong;
    patches += t.patches;
    hint_sum += t.hint_sum;
  }
  result.count = data.size();
  result.error = static_cast<double>(wrong) / static_cast<double>(data.size());
  result.hint_distance = patches ? hint_sum / static_cast<double>(patches) : 0.0;
  return result;
}

void TrainLog::write_csv(std::ostream& os) const {
  os << "epoch,train_loss,test_error,hint_distance\n";
  const auto old = os.precision(17);
  for (const auto& r : epochs)
    os << r.epoch << ',' << r.train_loss << ',' << r.test_error << ',' << r.hint_distance << '\n';
  os.precision(old);
}

template <typename T>
TrainLog train(DcnStacks<T>& stacks, const Dataset& train_set, const Dataset& test_set,
               const TrainConfig& config, const DcnConfig& dcn,
               const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
  std::mt19937_64 rng(example_seed(config.seed, 0x5eed));
  stacks.coarse.seed_dropout(rng());
  stacks.fine.seed_dropout(rng());
  stacks.top.seed_dropout(rng());
  Optimizers<T> optimizers(config, stacks);
  if (config.checkpoint_every > 0) std::filesystem::create_directories(config.checkpoint_dir);

  TrainLog log;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
      const std::span<const std::size_t> idx(order.data() + first,
                                             std::min(config.batch_size, order.size() - first));
      const Tensor<T> x = images_tensor<T>(train_set, idx);
      const std::vector<std::size_t> y = class_labels(train_set, idx);
      loss_sum += train_step(x, y, config, dcn, stacks, optimizers).loss * static_cast<double>(idx.size());
    }
    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(order.size());
    if (test_set.size() > 0) {
      const EvalResult eval =
          evaluate(test_set, stacks, config.model, config.k, dcn, config.eval_batch_size);
      record.test_error = eval.error;
      record.hint_distance = eval.hint_distance;
    }
    log.epochs.push_back(record);
    if (on_epoch) on_epoch(record);
    if (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0)
      save_checkpoint(config.checkpoint_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"),
                      stacks.named_state());
  }
  return log;
}

#define DCN_INSTANTIATE_TRAINING(T)                                                               \
  template Tensor<T> cross_entropy_loss(const Tensor<T>&, std::span<const std::size_t>);          \
  template Tensor<T> hint_loss(const Tensor<T>&, const Tensor<T>&);                               \
  template struct Optimizers<T>;                                                                  \
  template StepResult train_step(const Tensor<T>&, std::span<const std::size_t>,                  \
                                 const TrainConfig&, const DcnConfig&, DcnStacks<T>&,             \
                                 Optimizers<T>&);                                                 \
  template EvalResult evaluate(const Dataset&, const DcnStacks<T>&, ModelKind, std::size_t,       \
                               const DcnConfig&, std::size_t);                                    \
  template TrainLog train(DcnStacks<T>&, const Dataset&, const Dataset&, const TrainConfig&,      \
                          const DcnConfig&, const std::function<void(const EpochRecord&)>&);

DCN_INSTANTIATE_TRAINING(float)
DCN_INSTANTIATE_TRAINING(double)

}  // namespace dcn
