#include "dcn/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <random>

namespace dcn {

static_assert(std::endian::native == std::endian::little);

namespace {

constexpr char kMagic[8] = {'D', 'C', 'N', 'D', 'A', 'T', 'A', '1'};
constexpr std::size_t kHeaderBytes = 8 + 8 + 4 + 4 + 4;

// 5x7 bitmap digits, one string per row.
constexpr std::array<std::array<const char*, 7>, 10> kFont = {{
    {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},
    {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},
    {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},
    {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},
    {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},
    {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},
    {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},
    {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},
    {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},
    {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},
}};

struct Style {
  double angle = 0.0;
  double shear = 0.0;
  double threshold = 0.4;
  double contrast = 1.0;
};

Style random_style(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> angle(-0.15, 0.15), shear(-0.25, 0.25),
      threshold(0.3, 0.5), contrast(0.7, 1.0);
  Style s;
  s.angle = angle(rng);
  s.shear = shear(rng);
  s.threshold = threshold(rng);
  s.contrast = contrast(rng);
  return s;
}

double font_pixel(int digit, long y, long x) {
  if (y < 0 || y >= 7 || x < 0 || x >= 5) return 0.0;
  return kFont[digit][y][x] == '1' ? 1.0 : 0.0;
}

double bilinear(const std::vector<float>& img, std::size_t h, std::size_t w, double fy, double fx) {
  const long y0 = static_cast<long>(std::floor(fy)), x0 = static_cast<long>(std::floor(fx));
  const double dy = fy - y0, dx = fx - x0;
  auto at = [&](long y, long x) -> double {
    if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return 0.0;
    return img[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  };
  return (1 - dy) * ((1 - dx) * at(y0, x0) + dx * at(y0, x0 + 1)) +
         dy * ((1 - dx) * at(y0 + 1, x0) + dx * at(y0 + 1, x0 + 1));
}

// Glyphs taken from an external single-digit container, grouped by label.
struct GlyphBank {
  Dataset data;
  std::array<std::vector<std::size_t>, 10> by_digit;
};

std::shared_ptr<const GlyphBank> load_bank(const std::string& source) {
  if (source == "builtin") return nullptr;
  auto bank = std::make_shared<GlyphBank>();
  bank->data = read_container(source);
  for (std::size_t i = 0; i < bank->data.size(); ++i) {
    const auto& label = bank->data.labels[i];
    if (label.size() == 1 && label[0] < 10) bank->by_digit[label[0]].push_back(i);
  }
  for (int d = 0; d < 10; ++d)
    if (bank->by_digit[d].empty())
      throw DatasetError("glyph source '" + source + "' has no example of digit " +
                         std::to_string(d));
  return bank;
}

// Intensities in [0, 1] of a digit drawn into an h x w box.
std::vector<float> render_glyph(int digit, std::size_t h, std::size_t w, const Style& style,
                                const GlyphBank* bank, std::mt19937_64& rng) {
  std::vector<float> out(h * w, 0.0f);
  if (bank) {
    const auto& pool = bank->by_digit[digit];
    const std::size_t pick = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    auto src = bank->data.image(pick);
    std::vector<float> img(src.begin(), src.end());
    for (auto& v : img) v /= 255.0f;
    const double sy = static_cast<double>(bank->data.height) / h;
    const double sx = static_cast<double>(bank->data.width) / w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out[y * w + x] = static_cast<float>(
            style.contrast * bilinear(img, bank->data.height, bank->data.width,
                                      (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5));
    return out;
  }
  const double c = std::cos(style.angle), s = std::sin(style.angle);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double u = (x + 0.5) / w * 2.0 - 1.0;
      const double v = (y + 0.5) / h * 2.0 - 1.0;
      const double ur = c * u + s * v;
      const double vr = -s * u + c * v;
      const double us = ur - style.shear * vr;
      const double fx = (us + 1.0) / 2.0 * 5.0 - 0.5;
      const double fy = (vr + 1.0) / 2.0 * 7.0 - 0.5;
      const long x0 = static_cast<long>(std::floor(fx)), y0 = static_cast<long>(std::floor(fy));
      const double dx = fx - x0, dy = fy - y0;
      const double ink = (1 - dy) * ((1 - dx) * font_pixel(digit, y0, x0) + dx * font_pixel(digit, y0, x0 + 1)) +
                         dy * ((1 - dx) * font_pixel(digit, y0 + 1, x0) + dx * font_pixel(digit, y0 + 1, x0 + 1));
      const double level = std::clamp((ink - style.threshold + 0.2) / 0.4, 0.0, 1.0);
      out[y * w + x] = static_cast<float>(style.contrast * level);
    }
  return out;
}

struct Canvas {
  std::size_t h, w;
  std::vector<float> v;

  Canvas(std::size_t height, std::size_t width) : h(height), w(width), v(height * width, 0.0f) {}

  void paste(const std::vector<float>& src, std::size_t sh, std::size_t sw, long top, long left) {
    for (std::size_t y = 0; y < sh; ++y)
      for (std::size_t x = 0; x < sw; ++x) {
        const long cy = top + static_cast<long>(y), cx = left + static_cast<long>(x);
        if (cy < 0 || cx < 0 || cy >= static_cast<long>(h) || cx >= static_cast<long>(w)) continue;
        float& dst = v[static_cast<std::size_t>(cy) * w + static_cast<std::size_t>(cx)];
        dst = std::max(dst, src[y * sw + x]);
      }
  }

  std::vector<std::uint8_t> bytes() const {
    std::vector<std::uint8_t> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
      out[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v[i], 0.0f, 1.0f)));
    return out;
  }
};

std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

void add_clutter(Canvas& canvas, const CanvasSpec& spec, const GlyphBank* bank,
                 std::mt19937_64& rng) {
  const std::size_t cs = spec.clutter_size;
  const std::size_t gh = std::max(spec.digit_height, cs), gw = std::max(spec.digit_width, cs);
  for (std::size_t c = 0; c < spec.clutter_count; ++c) {
    const int digit = static_cast<int>(uniform_index(rng, 0, 9));
    const Style style = random_style(rng);
    const std::vector<float> glyph = render_glyph(digit, gh, gw, style, bank, rng);
    std::vector<float> piece(cs * cs);
    for (int attempt = 0; attempt < 8; ++attempt) {
      const std::size_t oy = uniform_index(rng, 0, gh - cs), ox = uniform_index(rng, 0, gw - cs);
      double ink = 0.0;
      for (std::size_t y = 0; y < cs; ++y)
        for (std::size_t x = 0; x < cs; ++x) {
          piece[y * cs + x] = glyph[(oy + y) * gw + ox + x];
          ink += piece[y * cs + x];
        }
      if (ink >= 0.1 * cs * cs) break;
    }
    canvas.paste(piece, cs, cs, static_cast<long>(uniform_index(rng, 0, canvas.h - cs)),
                 static_cast<long>(uniform_index(rng, 0, canvas.w - cs)));
  }
}

long jitter(std::mt19937_64& rng, std::size_t amount) {
  if (amount == 0) return 0;
  return std::uniform_int_distribution<long>(-static_cast<long>(amount),
                                             static_cast<long>(amount))(rng);
}

}  // namespace

std::span<const std::uint8_t> Dataset::image(std::size_t index) const {
  if (index >= size()) throw std::out_of_range("dataset index out of range");
  return std::span<const std::uint8_t>(pixels).subspan(index * height * width, height * width);
}

void Dataset::push_back(std::span<const std::uint8_t> img, std::vector<std::uint8_t> label) {
  if (img.size() != height * width)
    throw std::invalid_argument("image has " + std::to_string(img.size()) + " pixels, expected " +
                                std::to_string(height * width));
  if (label.size() > label_arity || label.empty())
    throw std::invalid_argument("label length " + std::to_string(label.size()) +
                                " outside 1.." + std::to_string(label_arity));
  pixels.insert(pixels.end(), img.begin(), img.end());
  labels.push_back(std::move(label));
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.height = height;
  out.width = width;
  out.label_arity = label_arity;
  for (std::size_t i : indices) out.push_back(image(i), labels.at(i));
  return out;
}

void write_container(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DatasetError("cannot open '" + path.string() + "' for writing");
  auto put = [&](auto value) { os.write(reinterpret_cast<const char*>(&value), sizeof value); };
  os.write(kMagic, sizeof kMagic);
  put(static_cast<std::uint64_t>(data.size()));
  put(static_cast<std::uint32_t>(data.height));
  put(static_cast<std::uint32_t>(data.width));
  put(static_cast<std::uint32_t>(data.label_arity));
  os.write(reinterpret_cast<const char*>(data.pixels.data()),
           static_cast<std::streamsize>(data.pixels.size()));
  std::vector<std::uint8_t> record(1 + data.label_arity);
  for (const auto& label : data.labels) {
    if (label.size() > data.label_arity) throw DatasetError("label longer than the label arity");
    std::fill(record.begin(), record.end(), kNullDigit);
    record[0] = static_cast<std::uint8_t>(label.size());
    for (std::size_t d = 0; d < label.size(); ++d) record[1 + d] = label[d];
    os.write(reinterpret_cast<const char*>(record.data()), static_cast<std::streamsize>(record.size()));
  }
  if (!os) throw DatasetError("write to '" + path.string() + "' failed");
}

Dataset read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("cannot open '" + path.string() + "'");
  const std::vector<char> bytes{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  const std::string where = "'" + path.string() + "': ";
  if (bytes.size() >= sizeof kMagic && std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw BadMagicError(where + "not a DCNDATA1 container");
  if (bytes.size() < kHeaderBytes) throw TruncatedError(where + "truncated header");
  std::uint64_t count = 0;
  std::uint32_t h = 0, w = 0, arity = 0;
  std::memcpy(&count, bytes.data() + 8, 8);
  std::memcpy(&h, bytes.data() + 16, 4);
  std::memcpy(&w, bytes.data() + 20, 4);
  std::memcpy(&arity, bytes.data() + 24, 4);
  const unsigned __int128 expected =
      kHeaderBytes + static_cast<unsigned __int128>(count) * (static_cast<std::uint64_t>(h) * w + 1 + arity);
  if (bytes.size() < expected) throw TruncatedError(where + "truncated body");
  if (bytes.size() > expected)
    throw LengthMismatchError(where + "body is longer than the header declares");

  Dataset data;
  data.height = h;
  data.width = w;
  data.label_arity = arity;
  const std::size_t image_bytes = static_cast<std::size_t>(count) * h * w;
  data.pixels.assign(bytes.begin() + kHeaderBytes, bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderBytes + image_bytes));
  const char* rec = bytes.data() + kHeaderBytes + image_bytes;
  data.labels.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i, rec += 1 + arity) {
    const auto len = static_cast<std::uint8_t>(rec[0]);
    if (len > arity)
      throw LengthMismatchError(where + "label " + std::to_string(i) + " longer than the label arity");
    data.labels.emplace_back(reinterpret_cast<const std::uint8_t*>(rec + 1),
                             reinterpret_cast<const std::uint8_t*>(rec + 1 + len));
  }
  return data;
}

void CanvasSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("canvas: " + what); };
  if (height == 0 || width == 0) fail("empty canvas");
  if (min_digits < 1 || max_digits > kMaxSequenceLength || min_digits > max_digits)
    fail("digit count range must lie within 1..5");
  if (digit_height < 5 || digit_width < 3) fail("digits smaller than 5x3 pixels");
  if (clutter_count > 0 && (clutter_size == 0 || clutter_size > height || clutter_size > width))
    fail("clutter fragments do not fit");
  if (placement == Placement::centred) {
    if (2 * margin + 5 > height || 2 * margin + 3 * max_digits > width)
      fail("margin leaves no room for " + std::to_string(max_digits) + " digits");
  } else if (digit_height > height || max_digits * digit_width + (max_digits - 1) * gap > width) {
    fail(std::to_string(max_digits) + " digits of " + std::to_string(digit_height) + "x" +
         std::to_string(digit_width) + " do not fit a " + std::to_string(height) + "x" +
         std::to_string(width) + " canvas");
  }
}

std::uint64_t example_seed(std::uint64_t master, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(master ^ mix(index));
}

Dataset synth_cluttered(const CanvasSpec& spec, std::size_t n) {
  CanvasSpec single = spec;
  single.min_digits = single.max_digits = 1;
  single.validate();
  const auto bank = load_bank(spec.glyph_source);
  Dataset data;
  data.height = spec.height;
  data.width = spec.width;
  data.label_arity = 1;
  for (std::size_t idx = 0; idx < n; ++idx) {
    std::mt19937_64 rng(example_seed(spec.seed, idx));
    const int digit = static_cast<int>(uniform_index(rng, 0, 9));
    Canvas canvas(spec.height, spec.width);
    add_clutter(canvas, spec, bank.get(), rng);
    const Style style = random_style(rng);
    const auto glyph = render_glyph(digit, spec.digit_height, spec.digit_width, style, bank.get(), rng);
    canvas.paste(glyph, spec.digit_height, spec.digit_width,
                 static_cast<long>(uniform_index(rng, 0, spec.height - spec.digit_height)),
                 static_cast<long>(uniform_index(rng, 0, spec.width - spec.digit_width)));
    data.push_back(canvas.bytes(), {static_cast<std::uint8_t>(digit)});
  }
  return data;
}

Dataset synth_multidigit(const CanvasSpec& spec, std::size_t n) {
  spec.validate();
  const auto bank = load_bank(spec.glyph_source);
  Dataset data;
  data.height = spec.height;
  data.width = spec.width;
  data.label_arity = spec.max_digits;
  for (std::size_t idx = 0; idx < n; ++idx) {
    std::mt19937_64 rng(example_seed(spec.seed, idx));
    const std::size_t count = uniform_index(rng, spec.min_digits, spec.max_digits);
    std::vector<std::uint8_t> label(count);
    for (auto& d : label) d = static_cast<std::uint8_t>(uniform_index(rng, 0, 9));

    Canvas canvas(spec.height, spec.width);
    add_clutter(canvas, spec, bank.get(), rng);
    std::size_t dh = spec.digit_height, dw = spec.digit_width, gap = spec.gap;
    long top = 0, left = 0;
    if (spec.placement == Placement::centred) {
      const std::size_t box_h = spec.height - 2 * spec.margin;
      const std::size_t box_w = spec.width - 2 * spec.margin;
      dh = box_h;
      gap = 0;
      const double aspect = static_cast<double>(spec.digit_width) / spec.digit_height;
      dw = std::min<std::size_t>(static_cast<std::size_t>(std::lround(dh * aspect)), box_w / count);
      top = static_cast<long>(spec.margin) + jitter(rng, spec.shift);
      left = static_cast<long>(spec.margin + (box_w - count * dw) / 2) + jitter(rng, spec.shift);
    } else {
      const std::size_t span = count * dw + (count - 1) * gap;
      top = static_cast<long>(uniform_index(rng, 0, spec.height - dh));
      left = static_cast<long>(uniform_index(rng, 0, spec.width - span));
    }
    for (std::size_t d = 0; d < count; ++d) {
      const Style style = random_style(rng);
      const auto glyph = render_glyph(label[d], dh, dw, style, bank.get(), rng);
      long y = top + jitter(rng, spec.jitter);
      long x = left + static_cast<long>(d * (dw + gap)) + jitter(rng, spec.jitter);
      y = std::clamp<long>(y, 0, static_cast<long>(spec.height - dh));
      x = std::clamp<long>(x, 0, static_cast<long>(spec.width - dw));
      canvas.paste(glyph, dh, dw, y, x);
    }
    if (label.size() != count) throw std::logic_error("label disagrees with the placed glyphs");
    data.push_back(canvas.bytes(), std::move(label));
  }
  return data;
}

template <typename T>
Tensor<T> images_tensor(const Dataset& data, std::span<const std::size_t> indices) {
  const std::size_t plane = data.height * data.width;
  std::vector<T> values(indices.size() * plane);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    auto img = data.image(indices[b]);
    for (std::size_t p = 0; p < plane; ++p) values[b * plane + p] = static_cast<T>(img[p]) / T(255);
  }
  return Tensor<T>({indices.size(), 1, data.height, data.width}, std::move(values));
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double fraction) {
  if (fraction < 0.0 || fraction >= 1.0) throw std::invalid_argument("holdout fraction must lie in [0,1)");
  const std::size_t held = static_cast<std::size_t>(std::lround(data.size() * fraction));
  std::vector<std::size_t> first(data.size() - held), second(held);
  for (std::size_t i = 0; i < first.size(); ++i) first[i] = i;
  for (std::size_t i = 0; i < held; ++i) second[i] = first.size() + i;
  return {data.subset(first), data.subset(second)};
}

void write_pgm(const std::filesystem::path& path, const Dataset& data, std::size_t index) {
  auto img = data.image(index);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DatasetError("cannot open '" + path.string() + "' for writing");
  os << "P5\n" << data.width << ' ' << data.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

template Tensor<float> images_tensor(const Dataset&, std::span<const std::size_t>);
template Tensor<double> images_tensor(const Dataset&, std::span<const std::size_t>);

}  // namespace dcn
