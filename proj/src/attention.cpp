#include "dcn/attention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace dcn {

namespace {

const std::vector<std::size_t> kSequenceGroups = {5, 11, 11, 11, 11, 11};

class EnableGrad {
 public:
  EnableGrad() : previous_(GradMode::enabled()) { GradMode::set_enabled(true); }
  ~EnableGrad() { GradMode::set_enabled(previous_); }

 private:
  bool previous_;
};

// Installs a fresh counter and, on exit, adds its records to whatever counter
// was active before.
class NestedCounter {
 public:
  explicit NestedCounter(const char* section)
      : outer_(active_counter()), scope_(counter_, section) {}
  ~NestedCounter() {
    if (outer_) outer_->merge(counter_);
  }
  const OpCounter& counter() const { return counter_; }

 private:
  OpCounter* outer_;
  OpCounter counter_;
  CountingScope scope_;
};

template <typename T>
Tensor<T> flatten_output(const Tensor<T>& out) {
  return reshape(out, Shape{out.dim(0), out.numel() / out.dim(0)});
}

template <typename T>
std::vector<SaliencyMap> saliency_from(const Tensor<T>& source, HeadKind head, GradSource tag,
                                       const std::function<Tensor<T>(const Tensor<T>&)>& run_top) {
  if (source.rank() != 4)
    throw DimensionError("saliency: expected an [N,D,s1,s2] map, got " +
                         shape_to_string(source.shape()));
  SectionScope section(section::saliency);
  EnableGrad grad_on;
  Tensor<T> leaf = source.detach();
  leaf.set_requires_grad(true);
  Tensor<T> out = run_top(leaf);
  check_normalized(out, head);
  Tensor<T> h = entropy_objective(out, head);
  backward(h, {leaf});

  const std::size_t N = source.dim(0), D = source.dim(1), S1 = source.dim(2), S2 = source.dim(3);
  const std::size_t plane = S1 * S2;
  auto g = leaf.grad();
  std::vector<SaliencyMap> maps(N);
  for (std::size_t n = 0; n < N; ++n) {
    SaliencyMap& m = maps[n];
    m.rows = S1;
    m.cols = S2;
    m.source = tag;
    m.values.assign(plane, 0.0);
    for (std::size_t d = 0; d < D; ++d) {
      const T* src = g.data() + (n * D + d) * plane;
      for (std::size_t p = 0; p < plane; ++p) m.values[p] += static_cast<double>(src[p]) * src[p];
    }
    for (auto& v : m.values) v = std::sqrt(v);
  }
  return maps;
}

}  // namespace

double entropy(std::span<const double> dist) {
  double total = 0.0;
  for (double p : dist) {
    if (!(p >= 0.0)) throw std::invalid_argument("entropy: negative or NaN probability");
    total += p;
  }
  if (std::abs(total - 1.0) > kNormalizationTolerance)
    throw std::invalid_argument("entropy: probabilities sum to " + std::to_string(total));
  double h = 0.0;
  for (double p : dist)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

template <typename T>
Tensor<T> entropy_objective(const Tensor<T>& top_output, HeadKind head) {
  Tensor<T> p = top_output;
  if (head == HeadKind::sequence) {
    if (p.dim(1) != 60)
      throw DimensionError("sequence head expects 60 channels, got " + std::to_string(p.dim(1)));
    p = slice(p, 1, 5, 55);
  }
  return scale(sum(mul(p, log(p))), -1.0);
}

template <typename T>
void check_normalized(const Tensor<T>& top_output, HeadKind head) {
  const std::size_t N = top_output.dim(0);
  const std::size_t C = top_output.numel() / N;
  std::vector<std::size_t> groups = head == HeadKind::sequence ? kSequenceGroups
                                                                : std::vector<std::size_t>{C};
  if (std::accumulate(groups.begin(), groups.end(), std::size_t{0}) != C)
    throw DimensionError("top output has " + std::to_string(C) + " channels per example");
  auto v = top_output.values();
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t start = n * C;
    for (std::size_t g : groups) {
      double total = 0.0;
      for (std::size_t c = 0; c < g; ++c) {
        const double x = v[start + c];
        if (!(x >= 0.0)) throw std::invalid_argument("top output has a negative or NaN entry");
        total += x;
      }
      if (std::abs(total - 1.0) > kNormalizationTolerance)
        throw std::invalid_argument("top output distribution sums to " + std::to_string(total));
      start += g;
    }
  }
}

template <typename T>
std::vector<SaliencyMap> saliency_map(const Tensor<T>& coarse_repr, const LayerStack<T>& top,
                                      HeadKind head) {
  const LayerStack<T> frozen = top.frozen_copy();
  return saliency_from<T>(coarse_repr, head, GradSource::coarse_vectors,
                          [&](const Tensor<T>& c) { return frozen.infer(c); });
}

template <typename T>
std::vector<SaliencyMap> saliency_map_below(const Tensor<T>& below, const LayerStack<T>& coarse,
                                            const LayerStack<T>& top, HeadKind head) {
  if (coarse.size() == 0) throw std::invalid_argument("saliency: empty coarse stack");
  const LayerKind last = coarse.specs().back().kind;
  if (last == LayerKind::conv || last == LayerKind::batchnorm)
    throw std::invalid_argument(
        "saliency below the output needs a parameter-free final coarse layer");
  const LayerStack<T> frozen = top.frozen_copy();
  const std::size_t L = coarse.size();
  return saliency_from<T>(below, head, GradSource::layer_below_output, [&](const Tensor<T>& b) {
    return frozen.infer(coarse.infer(b, L - 1, L));
  });
}

std::vector<Position> select_topk(const SaliencyMap& map, std::size_t k) {
  const std::size_t total = map.rows * map.cols;
  if (k > total)
    throw std::out_of_range("select_topk: k = " + std::to_string(k) + " exceeds the " +
                            std::to_string(total) + " grid positions");
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (map.values[a] != map.values[b]) return map.values[a] > map.values[b];
                      return a < b;
                    });
  std::vector<Position> out;
  out.reserve(k);
  for (std::size_t r = 0; r < k; ++r) out.push_back({order[r] / map.cols, order[r] % map.cols});
  return out;
}

template <typename T>
Rect patch_rect(const LayerStack<T>& coarse, Position position, std::size_t image_h,
                std::size_t image_w, std::size_t context_px) {
  Rect r = coarse.receptive_field(position.i, position.j, image_h, image_w);
  const auto lo = static_cast<std::ptrdiff_t>(context_px / 2);
  r.height += context_px;
  r.width += context_px;
  if (r.height > image_h || r.width > image_w)
    throw DimensionError("patch " + std::to_string(r.height) + "x" + std::to_string(r.width) +
                         " larger than the " + std::to_string(image_h) + "x" +
                         std::to_string(image_w) + " image");
  r.top = std::clamp<std::ptrdiff_t>(r.top - lo, 0, static_cast<std::ptrdiff_t>(image_h - r.height));
  r.left = std::clamp<std::ptrdiff_t>(r.left - lo, 0, static_cast<std::ptrdiff_t>(image_w - r.width));
  return r;
}

template <typename T>
Tensor<T> crop_cells(const Tensor<T>& images, std::span<const Cell> cells,
                     const LayerStack<T>& coarse, std::size_t context_px, std::vector<Rect>* rects) {
  if (images.rank() != 4) throw DimensionError("crop: expected [N,C,H,W] images");
  const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  const FieldGeometry g = coarse.field_geometry();
  const std::size_t ph = g.size_h + context_px, pw = g.size_w + context_px;
  std::vector<T> out(cells.size() * C * ph * pw);
  auto src = images.values();
  if (rects) rects->clear();
  for (std::size_t p = 0; p < cells.size(); ++p) {
    const Cell& cell = cells[p];
    if (cell.n >= N) throw std::out_of_range("crop: example index out of range");
    const Rect r = patch_rect(coarse, Position{cell.i, cell.j}, H, W, context_px);
    if (rects) rects->push_back(r);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < ph; ++y) {
        const T* row = src.data() + ((cell.n * C + c) * H + static_cast<std::size_t>(r.top) + y) * W +
                       static_cast<std::size_t>(r.left);
        std::copy(row, row + pw, out.data() + ((p * C + c) * ph + y) * pw);
      }
  }
  return Tensor<T>({cells.size(), C, ph, pw}, std::move(out));
}

template <typename T>
PatchSet<T> extract_patches(const Tensor<T>& image, std::span<const Position> positions,
                            const LayerStack<T>& coarse, std::size_t context_px) {
  if (image.rank() != 4 || image.dim(0) != 1)
    throw DimensionError("extract_patches: expected one [1,C,H,W] image");
  std::vector<Cell> cells;
  for (const auto& p : positions) cells.push_back({0, p.i, p.j});
  PatchSet<T> set;
  set.positions.assign(positions.begin(), positions.end());
  set.patches = crop_cells(image, cells, coarse, context_px, &set.rects);
  const FieldGeometry g = coarse.field_geometry();
  set.patch_h = g.size_h + context_px;
  set.patch_w = g.size_w + context_px;
  set.context_px = context_px;
  return set;
}

template <typename T>
RefinedMap<T> assemble_refined(const Tensor<T>& coarse_repr, const Tensor<T>& fine_vectors,
                               std::span<const Cell> cells) {
  if (coarse_repr.rank() != 4) throw DimensionError("assemble_refined: expected [N,D,s1,s2]");
  RefinedMap<T> out;
  out.fine.assign(coarse_repr.dim(0) * coarse_repr.dim(2) * coarse_repr.dim(3), 0);
  if (cells.empty()) {
    out.map = place_cells(coarse_repr, Tensor<T>({0, coarse_repr.dim(1), 1, 1}), cells);
    return out;
  }
  const Shape want{cells.size(), coarse_repr.dim(1), 1, 1};
  if (fine_vectors.shape() != want)
    throw DimensionError("assemble_refined: fine vectors " +
                         shape_to_string(fine_vectors.shape()) + ", expected " +
                         shape_to_string(want));
  out.map = place_cells(coarse_repr, fine_vectors, cells);
  for (const Cell& c : cells)
    out.fine[(c.n * coarse_repr.dim(2) + c.i) * coarse_repr.dim(3) + c.j] = 1;
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> coarse_below_and_map(const LayerStack<T>& coarse,
                                                     const Tensor<T>& images) {
  coarse.layer_shapes(images.shape());
  const std::size_t L = coarse.size();
  Tensor<T> below = coarse.infer(images, 0, L - 1);
  Tensor<T> map = coarse.infer(below, L - 1, L);
  return {below, map};
}

template <typename T>
Selection<T> select_batch(const Tensor<T>& images, const DcnStacks<T>& stacks, std::size_t k,
                          const DcnConfig& config) {
  Selection<T> sel;
  Tensor<T> below;
  {
    NoGradGuard no_grad;
    SectionScope section(section::coarse);
    std::tie(below, sel.coarse_map) = coarse_below_and_map(stacks.coarse, images);
  }
  sel.saliency = config.source == GradSource::coarse_vectors
                     ? saliency_map(sel.coarse_map, stacks.top, config.head)
                     : saliency_map_below(below, stacks.coarse, stacks.top, config.head);
  for (std::size_t n = 0; n < sel.saliency.size(); ++n)
    for (const Position& p : select_topk(sel.saliency[n], k)) sel.cells.push_back({n, p.i, p.j});
  return sel;
}

namespace {

// Top applied to the k fine outputs of each example laid side by side.
template <typename T>
Tensor<T> top_on_fine_outputs(const LayerStack<T>& top, const Tensor<T>& fine_out, std::size_t n,
                              std::size_t k) {
  std::vector<Tensor<T>> rows;
  for (std::size_t e = 0; e < n; ++e) {
    std::vector<Tensor<T>> parts;
    for (std::size_t m = 0; m < k; ++m) parts.push_back(slice(fine_out, 0, e * k + m, 1));
    rows.push_back(top.infer(concat<T>(parts, 3)));
  }
  return concat<T>(rows, 0);
}

template <typename T>
Tensor<T> refine_and_top(const Tensor<T>& images, const DcnStacks<T>& stacks, std::size_t k,
                         const DcnConfig& config, const Selection<T>& sel, std::vector<Rect>* rects,
                         Tensor<T>* fine_result = nullptr) {
  NoGradGuard no_grad;
  const std::size_t N = images.dim(0);
  Tensor<T> local;
  Tensor<T>& fine_out = fine_result ? *fine_result : local;
  if (!sel.cells.empty()) {
    Tensor<T> patches = crop_cells(images, sel.cells, stacks.coarse, config.context_px, rects);
    SectionScope section(section::fine_on_patches);
    fine_out = stacks.fine.infer(patches);
  }
  SectionScope section(section::top_on_map);
  if (config.mode == RefineMode::fine_only && k > 0)
    return top_on_fine_outputs(stacks.top, fine_out, N, k);
  if (config.mode == RefineMode::fine_only || sel.cells.empty())
    return stacks.top.infer(assemble_refined(sel.coarse_map, fine_out, sel.cells).map);
  if (fine_out.dim(2) != 1 || fine_out.dim(3) != 1)
    throw DimensionError("swap-in needs one fine vector per patch, fine stack emits " +
                         shape_to_string(fine_out.shape()));
  return stacks.top.infer(assemble_refined(sel.coarse_map, fine_out, sel.cells).map);
}

}  // namespace

template <typename T>
BatchInference<T> dcn_run_batch(const Tensor<T>& images, const DcnStacks<T>& stacks,
                                std::size_t k, const DcnConfig& config) {
  BatchInference<T> run;
  run.selection = select_batch(images, stacks, k, config);
  run.output = flatten_output(
      refine_and_top(images, stacks, k, config, run.selection, nullptr, &run.fine_out));
  return run;
}

template <typename T>
Tensor<T> dcn_predict_batch(const Tensor<T>& images, const DcnStacks<T>& stacks, std::size_t k,
                            const DcnConfig& config) {
  return dcn_run_batch(images, stacks, k, config).output;
}

template <typename T>
DcnResult<T> dcn_infer(const Tensor<T>& image, const DcnStacks<T>& stacks, std::size_t k,
                       const DcnConfig& config) {
  if (image.rank() != 4 || image.dim(0) != 1)
    throw DimensionError("dcn_infer: expected one [1,C,H,W] image, got " +
                         shape_to_string(image.shape()));
  DcnResult<T> result;
  Tensor<T> out;
  {
    NestedCounter counting(section::coarse);
    Selection<T> sel = select_batch(image, stacks, k, config);
    out = refine_and_top(image, stacks, k, config, sel, &result.patches.rects);
    result.cost = CostReport::from_counter(counting.counter(), plan_name(PlanKind::dcn),
                                           image.dim(2), image.dim(3), k);
    result.saliency = sel.saliency.front();
    for (const Cell& c : sel.cells) result.patches.positions.push_back({c.i, c.j});
  }
  const FieldGeometry g = stacks.coarse.field_geometry();
  result.patches.patch_h = g.size_h + config.context_px;
  result.patches.patch_w = g.size_w + config.context_px;
  result.patches.context_px = config.context_px;
  result.patches.patches = extract_patches(image, result.patches.positions, stacks.coarse,
                                           config.context_px).patches;
  auto v = out.values();
  result.distribution.assign(v.begin(), v.end());
  return result;
}

template <typename T>
Tensor<T> coarse_predict_batch(const Tensor<T>& images, const DcnStacks<T>& stacks) {
  NoGradGuard no_grad;
  Tensor<T> map;
  {
    SectionScope section(section::coarse);
    map = stacks.coarse.infer(images);
  }
  SectionScope section(section::top_on_map);
  return flatten_output(stacks.top.infer(map));
}

template <typename T>
Tensor<T> fine_predict_batch(const Tensor<T>& images, const DcnStacks<T>& stacks) {
  NoGradGuard no_grad;
  Tensor<T> map;
  {
    SectionScope section(section::fine_everywhere);
    map = stacks.fine.infer(images);
  }
  SectionScope section(section::top_on_map);
  return flatten_output(stacks.top.infer(map));
}

void write_saliency_pgm(const std::filesystem::path& path, const SaliencyMap& map) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  os << "P5\n" << map.cols << ' ' << map.rows << "\n255\n";
  double lo = 0.0, hi = 0.0;
  if (!map.values.empty()) {
    auto [mn, mx] = std::minmax_element(map.values.begin(), map.values.end());
    lo = *mn;
    hi = *mx;
  }
  std::vector<unsigned char> bytes(map.values.size(), 0);
  if (hi > lo)
    for (std::size_t p = 0; p < bytes.size(); ++p)
      bytes[p] = static_cast<unsigned char>(std::lround(255.0 * (map.values[p] - lo) / (hi - lo)));
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write to '" + path.string() + "' failed");
}

template <typename T>
void write_patch_boxes(std::ostream& os, const PatchSet<T>& patches) {
  for (std::size_t p = 0; p < patches.positions.size(); ++p) {
    const Rect& r = patches.rects.at(p);
    os << patches.positions[p].i << ' ' << patches.positions[p].j << ' ' << r.top << ' ' << r.left
       << ' ' << r.height << ' ' << r.width << '\n';
  }
}

#define DCN_INSTANTIATE_ATTENTION(T)                                                              \
  template Tensor<T> entropy_objective(const Tensor<T>&, HeadKind);                               \
  template void check_normalized(const Tensor<T>&, HeadKind);                                     \
  template std::vector<SaliencyMap> saliency_map(const Tensor<T>&, const LayerStack<T>&,          \
                                                 HeadKind);                                       \
  template std::vector<SaliencyMap> saliency_map_below(const Tensor<T>&, const LayerStack<T>&,    \
                                                       const LayerStack<T>&, HeadKind);           \
  template Rect patch_rect(const LayerStack<T>&, Position, std::size_t, std::size_t, std::size_t); \
  template Tensor<T> crop_cells(const Tensor<T>&, std::span<const Cell>, const LayerStack<T>&,    \
                                std::size_t, std::vector<Rect>*);                                 \
  template PatchSet<T> extract_patches(const Tensor<T>&, std::span<const Position>,               \
                                       const LayerStack<T>&, std::size_t);                        \
  template RefinedMap<T> assemble_refined(const Tensor<T>&, const Tensor<T>&,                     \
                                          std::span<const Cell>);                                 \
  template std::pair<Tensor<T>, Tensor<T>> coarse_below_and_map(const LayerStack<T>&,             \
                                                                const Tensor<T>&);                \
  template Selection<T> select_batch(const Tensor<T>&, const DcnStacks<T>&, std::size_t,          \
                                     const DcnConfig&);                                           \
  template BatchInference<T> dcn_run_batch(const Tensor<T>&, const DcnStacks<T>&, std::size_t,  \
                                           const DcnConfig&);                                     \
  template Tensor<T> dcn_predict_batch(const Tensor<T>&, const DcnStacks<T>&, std::size_t,        \
                                       const DcnConfig&);                                         \
  template DcnResult<T> dcn_infer(const Tensor<T>&, const DcnStacks<T>&, std::size_t,             \
                                  const DcnConfig&);                                              \
  template Tensor<T> coarse_predict_batch(const Tensor<T>&, const DcnStacks<T>&);                 \
  template Tensor<T> fine_predict_batch(const Tensor<T>&, const DcnStacks<T>&);                   \
  template void write_patch_boxes(std::ostream&, const PatchSet<T>&);

DCN_INSTANTIATE_ATTENTION(float)
DCN_INSTANTIATE_ATTENTION(double)

}  // namespace dcn
