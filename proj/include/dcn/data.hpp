// Synthetic cluttered-digit and multi-digit canvases, and the DCNDATA1 container.
//
// Container layout (little-endian):
//   "DCNDATA1", u64 count, u32 height, u32 width, u32 label_arity,
//   count*height*width pixel bytes,
//   count label records of 1 + label_arity bytes: length, then digits padded with 10.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcn/tensor.hpp"

namespace dcn {

inline constexpr std::uint8_t kNullDigit = 10;
inline constexpr std::size_t kMaxSequenceLength = 5;

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t label_arity = 1;
  std::vector<std::uint8_t> pixels;               // row-major, one image after another
  std::vector<std::vector<std::uint8_t>> labels;  // digit sequences

  std::size_t size() const { return labels.size(); }
  std::span<const std::uint8_t> image(std::size_t index) const;
  /// Appends one example; its label may not exceed label_arity.
  void push_back(std::span<const std::uint8_t> image, std::vector<std::uint8_t> label);
  Dataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class TruncatedError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class LengthMismatchError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

void write_container(const Dataset& data, const std::filesystem::path& path);
Dataset read_container(const std::filesystem::path& path);

enum class Placement {
  random,   // anywhere on the canvas
  centred,  // sequence centred inside the margin, digits scaled to fill it
  wild,     // fixed-size digits at a random location on a cluttered canvas
};

struct CanvasSpec {
  std::size_t height = 40;
  std::size_t width = 40;
  std::size_t min_digits = 1;
  std::size_t max_digits = 1;
  std::size_t digit_height = 18;
  std::size_t digit_width = 13;
  std::size_t clutter_count = 4;
  std::size_t clutter_size = 8;
  Placement placement = Placement::random;
  std::size_t margin = 2;  // centred mode
  std::size_t jitter = 1;  // per-digit offset in pixels
  std::size_t shift = 0;   // centred mode: whole-sequence offset in pixels, per axis
  std::size_t gap = 1;     // random and wild modes: pixels between digits
  // "builtin" for the bitmap font, or a path to a single-digit container whose
  // images are used as glyphs.
  std::string glyph_source = "builtin";
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument when digits or clutter cannot fit.
  void validate() const;
};

/// One true digit per canvas plus glyph-fragment clutter.
Dataset synth_cluttered(const CanvasSpec& spec, std::size_t n);
/// Sequences of min..max digits (uniform length) left to right.
Dataset synth_multidigit(const CanvasSpec& spec, std::size_t n);

/// Seed of example `index` under a master seed.
std::uint64_t example_seed(std::uint64_t master, std::uint64_t index);

/// Images [count, 1, H, W] scaled to [0, 1].
template <typename T>
Tensor<T> images_tensor(const Dataset& data, std::span<const std::size_t> indices);

/// Last `fraction` of the examples held out; returns {train, held_out}.
std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double fraction);

void write_pgm(const std::filesystem::path& path, const Dataset& data, std::size_t index);

}  // namespace dcn
