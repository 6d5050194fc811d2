#include "dcn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace dcn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and dataset encoders assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'C', 'N', 'C', 'K', 'P', 'T', '1'};

template <typename U>
void put(std::ostream& os, U value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <typename U>
bool get(std::istream& is, U& value) {
  return static_cast<bool>(is.read(reinterpret_cast<char*>(&value), sizeof(U)));
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, Tensor<T>>>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  os.write(kMagic, sizeof kMagic);
  for (const auto& [name, tensor] : tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.rank()));
    for (auto d : tensor.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(tensor.values().data()),
             static_cast<std::streamsize>(tensor.numel() * sizeof(T)));
  }
  if (!os) throw CheckpointError("write to '" + path.string() + "' failed");
}

std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open '" + path.string() + "'");
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw CheckpointError("'" + path.string() + "' is not a DCNCKPT1 checkpoint");
  std::vector<CheckpointRecord> records;
  while (is.peek() != std::char_traits<char>::eof()) {
    CheckpointRecord r;
    std::uint32_t name_len = 0, ndim = 0;
    std::uint8_t dtype = 0;
    if (!get(is, name_len)) throw CheckpointError("truncated record header");
    r.name.resize(name_len);
    if (!is.read(r.name.data(), name_len) || !get(is, dtype) || !get(is, ndim))
      throw CheckpointError("truncated record header");
    if (dtype > 1) throw CheckpointError("record '" + r.name + "': unknown dtype code");
    r.dtype = static_cast<DType>(dtype);
    for (std::uint32_t d = 0; d < ndim; ++d) {
      std::uint64_t extent = 0;
      if (!get(is, extent)) throw CheckpointError("record '" + r.name + "': truncated dims");
      r.shape.push_back(extent);
    }
    const std::size_t n = shape_numel(r.shape);
    r.values.resize(n);
    if (r.dtype == DType::f32) {
      std::vector<float> raw(n);
      if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 4)))
        throw CheckpointError("record '" + r.name + "': truncated values");
      for (std::size_t i = 0; i < n; ++i) r.values[i] = raw[i];
    } else if (!is.read(reinterpret_cast<char*>(r.values.data()), static_cast<std::streamsize>(n * 8))) {
      throw CheckpointError("record '" + r.name + "': truncated values");
    }
    records.push_back(std::move(r));
  }
  return records;
}

template <typename T>
void restore_checkpoint(const std::vector<CheckpointRecord>& records,
                        const std::vector<std::pair<std::string, Tensor<T>>>& tensors) {
  std::map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  for (const auto& [name, tensor] : tensors) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
    if (it->second->shape != tensor.shape())
      throw CheckpointError("tensor '" + name + "': checkpoint shape " +
                            shape_to_string(it->second->shape) + " vs " +
                            shape_to_string(tensor.shape()));
    auto dst = Tensor<T>(tensor).mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
  }
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> collect_state(
    std::initializer_list<const LayerStack<T>*> stacks) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (const auto* s : stacks) {
    auto part = s->named_state();
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

template void save_checkpoint(const std::filesystem::path&,
                              const std::vector<std::pair<std::string, Tensor<float>>>&);
template void save_checkpoint(const std::filesystem::path&,
                              const std::vector<std::pair<std::string, Tensor<double>>>&);
template void restore_checkpoint(const std::vector<CheckpointRecord>&,
                                 const std::vector<std::pair<std::string, Tensor<float>>>&);
template void restore_checkpoint(const std::vector<CheckpointRecord>&,
                                 const std::vector<std::pair<std::string, Tensor<double>>>&);
template std::vector<std::pair<std::string, Tensor<float>>> collect_state(
    std::initializer_list<const LayerStack<float>*>);
template std::vector<std::pair<std::string, Tensor<double>>> collect_state(
    std::initializer_list<const LayerStack<double>*>);

}  // namespace dcn
