// A DCN family: coarse, fine and top stacks plus how they are wired together.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcn/layers.hpp"

namespace dcn {

/// Tensor the entropy gradient is taken against.
enum class GradSource {
  coarse_vectors,      // the coarse representation itself
  layer_below_output,  // input of the coarse stack's final layer (sequence models)
};

/// How the top output is turned into an entropy.
enum class HeadKind {
  categorical,  // one softmax
  sequence,     // length head (5) then five digit heads (11); digit entropies summed
};

enum class RefineMode { swap_in, fine_only };

const char* grad_source_name(GradSource s);
const char* refine_mode_name(RefineMode m);
GradSource parse_grad_source(const std::string& s);
RefineMode parse_refine_mode(const std::string& s);

struct DcnConfig {
  std::string family;
  // Total growth of the coarse receptive field handed to the fine stack:
  // floor(context/2) pixels before, the rest after.
  std::size_t context_px = 0;
  GradSource source = GradSource::coarse_vectors;
  HeadKind head = HeadKind::categorical;
  RefineMode mode = RefineMode::swap_in;
};

template <typename T>
struct DcnStacks {
  LayerStack<T> coarse;
  LayerStack<T> fine;
  LayerStack<T> top;

  std::vector<Tensor<T>> parameters() const;
  std::vector<std::pair<std::string, Tensor<T>>> named_state() const;
};

/// cmnist, svhn, toy, seqdesk.
const std::vector<std::string>& family_names();
DcnConfig family_config(const std::string& family);

/// Builds the three presets of a family with seeds derived from one seed.
template <typename T>
DcnStacks<T> build_family(const std::string& family, std::uint64_t seed);

extern template struct DcnStacks<float>;
extern template struct DcnStacks<double>;

}  // namespace dcn
