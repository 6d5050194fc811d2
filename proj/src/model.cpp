#include "dcn/model.hpp"

#include <stdexcept>

namespace dcn {

const char* grad_source_name(GradSource s) {
  return s == GradSource::coarse_vectors ? "coarse-vectors" : "layer-below-output";
}

const char* refine_mode_name(RefineMode m) {
  return m == RefineMode::swap_in ? "swap-in" : "fine-only";
}

GradSource parse_grad_source(const std::string& s) {
  if (s == "coarse-vectors") return GradSource::coarse_vectors;
  if (s == "layer-below-output") return GradSource::layer_below_output;
  throw std::invalid_argument("unknown gradient source '" + s + "'");
}

RefineMode parse_refine_mode(const std::string& s) {
  if (s == "swap-in") return RefineMode::swap_in;
  if (s == "fine-only") return RefineMode::fine_only;
  throw std::invalid_argument("unknown mode '" + s + "' (expected swap-in or fine-only)");
}

template <typename T>
std::vector<Tensor<T>> DcnStacks<T>::parameters() const {
  std::vector<Tensor<T>> out = coarse.parameters();
  for (const auto* s : {&fine, &top}) {
    auto p = s->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> DcnStacks<T>::named_state() const {
  auto out = coarse.named_state();
  for (const auto* s : {&fine, &top}) {
    auto p = s->named_state();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

const std::vector<std::string>& family_names() {
  static const std::vector<std::string> names = {"cmnist", "svhn", "toy", "seqdesk"};
  return names;
}

DcnConfig family_config(const std::string& family) {
  DcnConfig c;
  c.family = family;
  if (family == "cmnist") {
    // 11x11 field grown to the 14x14 fine input.
    c.context_px = 3;
  } else if (family == "toy") {
    c.context_px = 0;
  } else if (family == "svhn" || family == "seqdesk") {
    // 53x109 (21x53) field grown to 54x110 (22x54).
    c.context_px = 1;
    c.source = GradSource::layer_below_output;
    c.head = HeadKind::sequence;
    c.mode = RefineMode::fine_only;
  } else {
    throw std::invalid_argument("unknown model family '" + family + "'");
  }
  return c;
}

template <typename T>
DcnStacks<T> build_family(const std::string& family, std::uint64_t seed) {
  family_config(family);
  return DcnStacks<T>{build_preset<T>(family + "-coarse", seed * 3 + 1),
                      build_preset<T>(family + "-fine", seed * 3 + 2),
                      build_preset<T>(family + "-top", seed * 3 + 3)};
}

template struct DcnStacks<float>;
template struct DcnStacks<double>;
template DcnStacks<float> build_family<float>(const std::string&, std::uint64_t);
template DcnStacks<double> build_family<double>(const std::string&, std::uint64_t);

}  // namespace dcn
