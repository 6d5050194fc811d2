#include "dcn/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace dcn {

namespace {

std::uint64_t* section_field(CostReport& r, const std::string& name) {
  if (name == section::coarse) return &r.coarse_everywhere;
  if (name == section::fine_everywhere) return &r.fine_everywhere;
  if (name == section::top_on_map) return &r.top_on_map;
  if (name == section::saliency) return &r.saliency_pass;
  if (name == section::fine_on_patches) return &r.fine_on_patches;
  return nullptr;
}

// Forward costs of layers [begin, end) given the stack's full input shape.
template <typename T>
std::vector<LayerCost> range_costs(const LayerStack<T>& stack, const Shape& input,
                                   const std::string& section_name, Phase phase,
                                   std::size_t begin, std::size_t end) {
  const std::vector<Shape> shapes = stack.layer_shapes(input);
  std::vector<LayerCost> out;
  for (std::size_t l = begin; l < end; ++l) {
    const LayerSpec& s = stack.specs()[l];
    const Shape& in = l == 0 ? input : shapes[l - 1];
    const Shape& o = shapes[l];
    std::uint64_t mults = 0;
    if (s.kind == LayerKind::conv)
      mults = conv_mults(in[1], s.channels, s.filter_h, s.filter_w, o[2], o[3]) * o[0];
    if (phase == Phase::backward) mults *= 2;
    if (mults == 0) continue;
    out.push_back({section_name, stack.name() + "/" + s.name, phase, o, mults});
  }
  return out;
}

}  // namespace

bool CostReport::consistent() const {
  CostReport check;
  for (const auto& r : layers) check.add(r);
  return check.coarse_everywhere == coarse_everywhere &&
         check.fine_everywhere == fine_everywhere && check.top_on_map == top_on_map &&
         check.saliency_pass == saliency_pass && check.fine_on_patches == fine_on_patches;
}

void CostReport::add(LayerCost record) {
  std::uint64_t* field = section_field(*this, record.section);
  if (!field) throw std::invalid_argument("cost record in unknown section '" + record.section + "'");
  *field += record.mults;
  layers.push_back(std::move(record));
}

void CostReport::merge(const CostReport& other) {
  for (const auto& r : other.layers) add(r);
}

CostReport CostReport::from_counter(const OpCounter& counter, std::string plan,
                                    std::size_t input_h, std::size_t input_w, std::size_t k) {
  CostReport r;
  r.plan = std::move(plan);
  r.input_h = input_h;
  r.input_w = input_w;
  r.k = k;
  for (const auto& [key, mults] : counter.records())
    r.add({key.section, key.layer, key.phase, {}, mults});
  return r;
}

const char* plan_name(PlanKind kind) {
  switch (kind) {
    case PlanKind::coarse: return "coarse";
    case PlanKind::fine: return "fine";
    case PlanKind::soft_attention: return "soft-attention";
    case PlanKind::dcn: return "dcn";
  }
  return "unknown";
}

PlanKind parse_plan(const std::string& name) {
  for (PlanKind k : {PlanKind::coarse, PlanKind::fine, PlanKind::soft_attention, PlanKind::dcn})
    if (name == plan_name(k)) return k;
  throw std::invalid_argument("unknown plan '" + name + "'");
}

std::size_t scaled_extent(std::size_t extent, double scale) {
  if (!(scale > 0.0)) throw std::invalid_argument("scale factors must be positive");
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(extent * scale)));
}

template <typename T>
std::vector<LayerCost> stack_costs(const LayerStack<T>& stack, const Shape& input,
                                   const std::string& section_name, Phase phase) {
  return range_costs(stack, input, section_name, phase, 0, stack.size());
}

template <typename T>
CostReport plan_cost(const Plan& plan, std::size_t input_h, std::size_t input_w,
                     const DcnStacks<T>& stacks, const DcnConfig& config) {
  if (plan.scales.empty()) throw std::invalid_argument("plan has no scales");
  CostReport report;
  report.plan = plan_name(plan.kind);
  report.input_h = input_h;
  report.input_w = input_w;
  report.k = plan.k;
  const LayerStack<T>& coarse = stacks.coarse;
  const LayerStack<T>& fine = stacks.fine;
  const LayerStack<T>& top = stacks.top;
  auto add_all = [&](const std::vector<LayerCost>& records) {
    for (const auto& r : records) report.add(r);
  };

  bool any = false;
  for (double s : plan.scales) {
    const Shape image{1, coarse.input_channels(), scaled_extent(input_h, s),
                      scaled_extent(input_w, s)};
    const LayerStack<T>& bottom = plan.kind == PlanKind::fine ? fine : coarse;
    Shape map;
    try {
      map = bottom.output_shape(image);
    } catch (const DimensionError&) {
      continue;
    }
    any = true;
    if (plan.kind == PlanKind::fine) {
      add_all(stack_costs(fine, image, section::fine_everywhere));
      add_all(stack_costs(top, map, section::top_on_map));
      continue;
    }
    add_all(stack_costs(coarse, image, section::coarse));
    if (plan.kind != PlanKind::dcn) {
      add_all(stack_costs(top, map, section::top_on_map));
      continue;
    }

    // Saliency: forward and backward through top (and the coarse output layer
    // when the gradient is taken below it).
    for (Phase phase : {Phase::forward, Phase::backward}) {
      if (config.source == GradSource::layer_below_output)
        add_all(range_costs(coarse, image, section::saliency, phase, coarse.size() - 1,
                            coarse.size()));
      add_all(stack_costs(top, map, section::saliency, phase));
    }

    const std::size_t k = std::min(plan.k, map[2] * map[3]);
    const FieldGeometry g = coarse.field_geometry();
    const Shape patch{k, coarse.input_channels(), g.size_h + config.context_px,
                      g.size_w + config.context_px};
    if (k > 0) add_all(stack_costs(fine, patch, section::fine_on_patches));
    if (config.mode == RefineMode::fine_only && k > 0) {
      const Shape per_patch = fine.output_shape({1, patch[1], patch[2], patch[3]});
      add_all(stack_costs(top, Shape{1, per_patch[1], per_patch[2], per_patch[3] * k},
                          section::top_on_map));
    } else {
      add_all(stack_costs(top, map, section::top_on_map));
    }
  }
  if (!any)
    throw DimensionError("input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                         " is too small for the model at every scale");
  return report;
}

void write_cost_csv_header(std::ostream& os) { os << "plan,input_h,input_w,k,total_mults\n"; }

void write_cost_csv_row(std::ostream& os, const CostReport& report) {
  os << report.plan << ',' << report.input_h << ',' << report.input_w << ',' << report.k << ','
     << report.total() << '\n';
}

void write_layer_table(std::ostream& os, const CostReport& report) {
  os << "plan,section,layer,phase,output,mults\n";
  for (const auto& r : report.layers) {
    os << report.plan << ',' << r.section << ',' << r.layer << ','
       << (r.phase == Phase::forward ? "forward" : "backward") << ',';
    for (std::size_t d = 1; d < r.output.size(); ++d) os << (d > 1 ? "x" : "") << r.output[d];
    os << ',' << r.mults << '\n';
  }
}

template std::vector<LayerCost> stack_costs(const LayerStack<float>&, const Shape&,
                                            const std::string&, Phase);
template std::vector<LayerCost> stack_costs(const LayerStack<double>&, const Shape&,
                                            const std::string&, Phase);
template CostReport plan_cost(const Plan&, std::size_t, std::size_t, const DcnStacks<float>&,
                              const DcnConfig&);
template CostReport plan_cost(const Plan&, std::size_t, std::size_t, const DcnStacks<double>&,
                              const DcnConfig&);

}  // namespace dcn
