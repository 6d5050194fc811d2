// Command-line configuration: a flat key=value file plus flag overrides, one
// flag per key. Unknown keys, malformed values and out-of-range values are
// reported by name before any command runs.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcn/data.hpp"
#include "dcn/model.hpp"

namespace dcn::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Command { synth, train, eval, bench, saliency };

const char* command_name(Command c);

struct Extent {
  std::size_t height = 0;
  std::size_t width = 0;
};

struct RunConfig {
  Command command = Command::synth;
  std::filesystem::path out = ".";
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  // model
  std::string preset = "cmnist";
  std::string model = "dcn";
  std::size_t k = 8;
  std::vector<double> scales = {1.0};
  DcnConfig dcn;  // family defaults with mode/source overrides applied

  // training
  std::size_t epochs = 5;
  double lambda = 0.5;
  std::size_t batch = 32;
  std::string optimizer = "adam";
  double lr = 1e-3;
  double momentum = 0.9;
  double decay = 1.0;
  std::size_t decay_interval = 1;
  std::size_t checkpoint_every = 0;
  double holdout = 0.1;

  // inputs
  std::filesystem::path data;
  std::filesystem::path test_data;
  std::filesystem::path checkpoint;

  // synth
  std::string kind = "cluttered";
  std::size_t n = 1000;
  CanvasSpec canvas;
  std::size_t samples = 0;  // PGM exports

  // bench
  Extent input{100, 100};
  std::vector<Extent> sweep;

  // saliency
  std::size_t index = 0;
  std::size_t count = 1;

  bool sequence_family() const { return dcn.head == HeadKind::sequence; }
};

/// Raw key -> value text, in the order keys are echoed.
using RawConfig = std::map<std::string, std::string>;

const std::vector<std::string>& known_keys();

/// Parses "key = value" lines; '#' starts a comment, blank lines are ignored.
/// Throws ConfigError on an unknown key, a line without '=' or a repeated key.
RawConfig parse_config_text(const std::string& text, const std::string& origin);

/// Resolves raw values over the defaults (command-specific for the canvas
/// keys) and validates every field.
RunConfig resolve_config(Command command, const RawConfig& raw);

/// argv -> RunConfig: positional command, --config file, then flag overrides.
/// Returns std::nullopt after printing help.
std::optional<RunConfig> parse_command_line(int argc, const char* const* argv, std::ostream& out);

/// Fully resolved key=value listing, one key per line, reusable as a config file.
void echo_config(std::ostream& os, const RunConfig& config);

Extent parse_extent(const std::string& text);

}  // namespace dcn::cli
