// Checkpoint container:
//   "DCNCKPT1"
//   repeated until EOF:
//     u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//     u32 ndim, u64 dims[ndim], raw little-endian values
#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dcn/layers.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointRecord {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;  // exact for either dtype
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, Tensor<T>>>& tensors);

std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path);

/// Copies records into same-named tensors; every tensor must be present with
/// a matching shape.
template <typename T>
void restore_checkpoint(const std::vector<CheckpointRecord>& records,
                        const std::vector<std::pair<std::string, Tensor<T>>>& tensors);

/// Named state of several stacks, concatenated in order.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> collect_state(
    std::initializer_list<const LayerStack<T>*> stacks);

}  // namespace dcn
