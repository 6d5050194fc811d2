// Hard attention: entropy of the coarse prediction, its gradient-norm saliency
// map, top-k selection, patch extraction and the refined representation.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "dcn/cost_model.hpp"
#include "dcn/layers.hpp"
#include "dcn/model.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

inline constexpr double kNormalizationTolerance = 1e-6;

/// Shannon entropy in nats with 0 log 0 = 0. Throws std::invalid_argument when
/// an entry is negative or the entries do not sum to 1 within 1e-6.
double entropy(std::span<const double> dist);

/// Differentiable sum of per-example entropies of a top output [N, C, 1, 1].
/// For HeadKind::sequence only the five digit heads contribute.
template <typename T>
Tensor<T> entropy_objective(const Tensor<T>& top_output, HeadKind head);

/// Throws std::invalid_argument when any distribution of a top output is not
/// normalized within 1e-6.
template <typename T>
void check_normalized(const Tensor<T>& top_output, HeadKind head);

struct Position {
  std::size_t i = 0;
  std::size_t j = 0;
  friend bool operator==(const Position&, const Position&) = default;
};

struct SaliencyMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // row-major, all >= 0
  GradSource source = GradSource::coarse_vectors;

  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

/// M_ij = ||dH/dc_ij||_2 for every example of a [N, D, s1, s2] coarse map.
/// One forward and one backward pass through `top`, stopped at the map.
template <typename T>
std::vector<SaliencyMap> saliency_map(const Tensor<T>& coarse_repr, const LayerStack<T>& top,
                                      HeadKind head = HeadKind::categorical);

/// Same, with the gradient taken against `below`, the input of the coarse
/// stack's final layer; that layer is re-applied before `top`.
template <typename T>
std::vector<SaliencyMap> saliency_map_below(const Tensor<T>& below, const LayerStack<T>& coarse,
                                            const LayerStack<T>& top, HeadKind head);

/// The k largest entries, ties to the smaller row-major index, in descending
/// saliency order. Throws std::out_of_range unless 0 <= k <= rows*cols.
std::vector<Position> select_topk(const SaliencyMap& map, std::size_t k);

/// Receptive field of `position` grown by context_px (floor half before, the
/// rest after) and shifted inward so it lies inside the image.
template <typename T>
Rect patch_rect(const LayerStack<T>& coarse, Position position, std::size_t image_h,
                std::size_t image_w, std::size_t context_px);

template <typename T>
struct PatchSet {
  std::vector<Position> positions;
  std::vector<Rect> rects;
  Tensor<T> patches;  // [k, C, patch_h, patch_w]
  std::size_t patch_h = 0;
  std::size_t patch_w = 0;
  std::size_t context_px = 0;
};

/// Crops from one image [1, C, H, W].
template <typename T>
PatchSet<T> extract_patches(const Tensor<T>& image, std::span<const Position> positions,
                            const LayerStack<T>& coarse, std::size_t context_px);

/// Crops for (example, i, j) cells of a batch [N, C, H, W]; no gradient.
template <typename T>
Tensor<T> crop_cells(const Tensor<T>& images, std::span<const Cell> cells,
                     const LayerStack<T>& coarse, std::size_t context_px,
                     std::vector<Rect>* rects = nullptr);

template <typename T>
struct RefinedMap {
  Tensor<T> map;                   // [N, D, s1, s2]
  std::vector<std::uint8_t> fine;  // N*s1*s2 provenance, 1 where swapped
};

/// Swaps fine vectors [P, D, 1, 1] into the coarse map at `cells`.
template <typename T>
RefinedMap<T> assemble_refined(const Tensor<T>& coarse_repr, const Tensor<T>& fine_vectors,
                               std::span<const Cell> cells);

template <typename T>
struct DcnResult {
  std::vector<double> distribution;
  PatchSet<T> patches;
  SaliencyMap saliency;
  CostReport cost;
};

/// Full inference on one image [1, C, H, W] with inference-mode stacks.
/// Counting sections: coarse, saliency, fine-on-patches, top-on-map.
template <typename T>
DcnResult<T> dcn_infer(const Tensor<T>& image, const DcnStacks<T>& stacks, std::size_t k,
                       const DcnConfig& config);

/// Coarse-map selection for a batch, computed in inference mode.
template <typename T>
struct Selection {
  Tensor<T> coarse_map;   // [N, D, s1, s2], no gradient
  std::vector<Cell> cells;  // k per example, example-major, descending saliency
  std::vector<SaliencyMap> saliency;
};

template <typename T>
Selection<T> select_batch(const Tensor<T>& images, const DcnStacks<T>& stacks, std::size_t k,
                          const DcnConfig& config);

/// Coarse layers up to (excluding) the final one, and the full coarse map.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> coarse_below_and_map(const LayerStack<T>& coarse,
                                                     const Tensor<T>& images);

template <typename T>
struct BatchInference {
  Tensor<T> output;      // [N, C_out]
  Selection<T> selection;
  Tensor<T> fine_out;    // fine stack on the selected patches, undefined when k = 0
};

/// Inference-mode refined predictions for a batch, with the pieces behind them.
template <typename T>
BatchInference<T> dcn_run_batch(const Tensor<T>& images, const DcnStacks<T>& stacks,
                                std::size_t k, const DcnConfig& config);

/// Inference-mode refined predictions [N, C_out] for a batch.
template <typename T>
Tensor<T> dcn_predict_batch(const Tensor<T>& images, const DcnStacks<T>& stacks, std::size_t k,
                            const DcnConfig& config);

/// Plain coarse model g(f_c(x)) and fine model g(f_f(x)) on a batch.
template <typename T>
Tensor<T> coarse_predict_batch(const Tensor<T>& images, const DcnStacks<T>& stacks);
template <typename T>
Tensor<T> fine_predict_batch(const Tensor<T>& images, const DcnStacks<T>& stacks);

/// 8-bit P5 image, min-max normalized (a constant map is written as zeros).
void write_saliency_pgm(const std::filesystem::path& path, const SaliencyMap& map);
/// "i j top left height width" per patch.
template <typename T>
void write_patch_boxes(std::ostream& os, const PatchSet<T>& patches);

}  // namespace dcn
