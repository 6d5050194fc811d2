// Multiplication counts for coarse, fine, soft-attention and DCN execution plans.
//
// Only convolution multiplications are counted (out_h*out_w*out_c*in_c*f_h*f_w
// per example); batchnorm, softmax and pooling are free. A backward pass through
// a convolution costs twice its forward pass.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dcn/model.hpp"
#include "dcn/op_counter.hpp"

namespace dcn {

namespace section {
inline constexpr const char* coarse = "coarse";
inline constexpr const char* fine_everywhere = "fine-everywhere";
inline constexpr const char* top_on_map = "top-on-map";
inline constexpr const char* saliency = "saliency";
inline constexpr const char* fine_on_patches = "fine-on-patches";
}  // namespace section

struct LayerCost {
  std::string section;
  std::string layer;  // "stack/layer"
  Phase phase = Phase::forward;
  Shape output;       // empty for records taken from a live counter
  std::uint64_t mults = 0;
};

struct CostReport {
  std::string plan;
  std::size_t input_h = 0;
  std::size_t input_w = 0;
  std::size_t k = 0;
  std::vector<LayerCost> layers;

  std::uint64_t coarse_everywhere = 0;
  std::uint64_t fine_everywhere = 0;
  std::uint64_t top_on_map = 0;
  std::uint64_t saliency_pass = 0;
  std::uint64_t fine_on_patches = 0;

  std::uint64_t total() const {
    return coarse_everywhere + fine_everywhere + top_on_map + saliency_pass + fine_on_patches;
  }
  /// Section totals agree with the per-layer records.
  bool consistent() const;
  void add(LayerCost record);
  void merge(const CostReport& other);

  static CostReport from_counter(const OpCounter& counter, std::string plan,
                                 std::size_t input_h, std::size_t input_w, std::size_t k);
};

enum class PlanKind { coarse, fine, soft_attention, dcn };

struct Plan {
  PlanKind kind = PlanKind::dcn;
  std::size_t k = 0;
  std::vector<double> scales = {1.0};

  static Plan coarse() { return {PlanKind::coarse, 0, {1.0}}; }
  static Plan fine() { return {PlanKind::fine, 0, {1.0}}; }
  static Plan soft_attention() { return {PlanKind::soft_attention, 0, {1.0}}; }
  static Plan dcn(std::size_t k, std::vector<double> scales = {1.0}) {
    return {PlanKind::dcn, k, std::move(scales)};
  }
};

const char* plan_name(PlanKind kind);
PlanKind parse_plan(const std::string& name);

/// Extent of an image side after rescaling (rounded, at least 1).
std::size_t scaled_extent(std::size_t extent, double scale);

/// Per-layer forward costs of a stack on an input shape (N folded into the counts).
template <typename T>
std::vector<LayerCost> stack_costs(const LayerStack<T>& stack, const Shape& input,
                                   const std::string& section, Phase phase = Phase::forward);

/// Predicted cost from shapes alone. For multiple scales the per-scale plans are
/// summed; scales too small for the coarse stack are skipped, and k is capped
/// at the coarse grid size of each scale.
template <typename T>
CostReport plan_cost(const Plan& plan, std::size_t input_h, std::size_t input_w,
                     const DcnStacks<T>& stacks, const DcnConfig& config);

/// "plan,input_h,input_w,k,total_mults" rows.
void write_cost_csv_header(std::ostream& os);
void write_cost_csv_row(std::ostream& os, const CostReport& report);
/// Per-layer breakdown "plan,section,layer,phase,output,mults".
void write_layer_table(std::ostream& os, const CostReport& report);

}  // namespace dcn
