#include "dcn/op_counter.hpp"

#include <utility>

namespace dcn {

namespace {
thread_local OpCounter* tl_counter = nullptr;
thread_local std::string tl_section;
thread_local std::string tl_layer;
}  // namespace

void OpCounter::add(std::string_view section, std::string_view layer, Phase phase,
                    std::uint64_t mults) {
  counts_[CountKey{std::string(section), std::string(layer), phase}] += mults;
}

void OpCounter::merge(const OpCounter& other) {
  for (const auto& [key, value] : other.counts_) counts_[key] += value;
}

std::uint64_t OpCounter::total() const {
  std::uint64_t sum = 0;
  for (const auto& [key, value] : counts_) sum += value;
  return sum;
}

std::uint64_t OpCounter::section_total(std::string_view section) const {
  std::uint64_t sum = 0;
  for (const auto& [key, value] : counts_)
    if (key.section == section) sum += value;
  return sum;
}

std::uint64_t OpCounter::layer_prefix_total(std::string_view prefix) const {
  std::uint64_t sum = 0;
  for (const auto& [key, value] : counts_)
    if (std::string_view(key.layer).starts_with(prefix)) sum += value;
  return sum;
}

std::uint64_t OpCounter::phase_total(std::string_view section, Phase phase) const {
  std::uint64_t sum = 0;
  for (const auto& [key, value] : counts_)
    if (key.section == section && key.phase == phase) sum += value;
  return sum;
}

CountingScope::CountingScope(OpCounter& counter, std::string section)
    : previous_counter_(tl_counter), previous_section_(std::exchange(tl_section, std::move(section))) {
  tl_counter = &counter;
}

CountingScope::~CountingScope() {
  tl_counter = previous_counter_;
  tl_section = std::move(previous_section_);
}

SectionScope::SectionScope(std::string section)
    : previous_(std::exchange(tl_section, std::move(section))) {}

SectionScope::~SectionScope() { tl_section = std::move(previous_); }

LayerLabelScope::LayerLabelScope(std::string label)
    : previous_(std::exchange(tl_layer, std::move(label))) {}

LayerLabelScope::~LayerLabelScope() { tl_layer = std::move(previous_); }

OpCounter* active_counter() { return tl_counter; }
const std::string& active_section() { return tl_section; }
const std::string& active_layer_label() { return tl_layer; }

}  // namespace dcn
