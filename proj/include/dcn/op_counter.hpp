// Live multiplication counters.
//
// Counting is off unless a CountingScope installs an OpCounter on the current
// thread. Convolutions charge the counter under the active section (which
// execution-plan line the work belongs to) and the active layer label (set by
// LayerStack while it runs a layer). Parallel workers each install their own
// counter and the owner merges them afterwards.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <tuple>

namespace dcn {

enum class Phase : std::uint8_t { forward = 0, backward = 1 };

struct CountKey {
  std::string section;
  std::string layer;
  Phase phase = Phase::forward;

  friend bool operator<(const CountKey& a, const CountKey& b) {
    return std::tie(a.section, a.layer, a.phase) < std::tie(b.section, b.layer, b.phase);
  }
  friend bool operator==(const CountKey& a, const CountKey& b) = default;
};

class OpCounter {
 public:
  void add(std::string_view section, std::string_view layer, Phase phase,
           std::uint64_t mults);
  void merge(const OpCounter& other);
  void clear() { counts_.clear(); }

  std::uint64_t total() const;
  std::uint64_t section_total(std::string_view section) const;
  /// Sum over records whose layer label starts with the prefix (e.g. "fine/").
  std::uint64_t layer_prefix_total(std::string_view prefix) const;
  std::uint64_t phase_total(std::string_view section, Phase phase) const;

  const std::map<CountKey, std::uint64_t>& records() const { return counts_; }

 private:
  std::map<CountKey, std::uint64_t> counts_;
};

/// Installs a counter and section for the lifetime of the scope.
class CountingScope {
 public:
  CountingScope(OpCounter& counter, std::string section);
  ~CountingScope();
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

 private:
  OpCounter* previous_counter_;
  std::string previous_section_;
};

/// Switches the section of the already-installed counter.
class SectionScope {
 public:
  explicit SectionScope(std::string section);
  ~SectionScope();
  SectionScope(const SectionScope&) = delete;
  SectionScope& operator=(const SectionScope&) = delete;

 private:
  std::string previous_;
};

class LayerLabelScope {
 public:
  explicit LayerLabelScope(std::string label);
  ~LayerLabelScope();
  LayerLabelScope(const LayerLabelScope&) = delete;
  LayerLabelScope& operator=(const LayerLabelScope&) = delete;

 private:
  std::string previous_;
};

OpCounter* active_counter();
const std::string& active_section();
const std::string& active_layer_label();

}  // namespace dcn
