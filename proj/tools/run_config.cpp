#include "run_config.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace dcn::cli {

namespace {

const std::vector<std::string> kKeys = {
    "out",          "seed",        "threads",    "preset",    "model",     "k",
    "scales",       "mode",        "source",     "epochs",    "lambda",    "batch",
    "optimizer",    "lr",          "momentum",   "decay",     "decay_interval",
    "checkpoint_every", "holdout", "data",       "test_data", "checkpoint", "kind",
    "n",            "height",      "width",      "min_digits", "max_digits", "digit_height",
    "digit_width",  "clutter",     "clutter_size", "placement", "margin",   "jitter",
    "shift",        "gap",
    "glyphs",       "samples",     "input",      "sweep",     "index",     "count"};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool is_known(const std::string& key) {
  return std::find(kKeys.begin(), kKeys.end(), key) != kKeys.end();
}

std::uint64_t to_uint(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + text + "'");
  return v;
}

double to_real(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || !std::isfinite(v))
    throw ConfigError("key '" + key + "': expected a number, got '" + text + "'");
  return v;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) parts.push_back(trim(item));
  return parts;
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError("key '" + key + "': " + what);
}

CanvasSpec canvas_for_kind(const std::string& kind) {
  CanvasSpec c;
  if (kind == "cluttered") return c;
  c.min_digits = 1;
  c.max_digits = kMaxSequenceLength;
  c.digit_height = 16;
  c.digit_width = 10;
  if (kind == "centred") {
    c.height = 36;
    c.width = 90;
    c.clutter_count = 3;
    c.margin = 10;
    c.shift = 6;
    c.placement = Placement::centred;
  } else if (kind == "wild") {
    c.height = 44;
    c.width = 108;
    c.clutter_count = 6;
    c.placement = Placement::wild;
  } else {
    throw ConfigError("key 'kind': expected cluttered, centred or wild, got '" + kind + "'");
  }
  return c;
}

const char* placement_name(Placement p) {
  switch (p) {
    case Placement::random: return "random";
    case Placement::centred: return "centred";
    case Placement::wild: return "wild";
  }
  return "random";
}

Placement parse_placement(const std::string& s) {
  for (Placement p : {Placement::random, Placement::centred, Placement::wild})
    if (s == placement_name(p)) return p;
  throw ConfigError("key 'placement': expected random, centred or wild, got '" + s + "'");
}

std::string join_reals(const std::vector<double>& v) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::string extent_text(const Extent& e) {
  return std::to_string(e.height) + "x" + std::to_string(e.width);
}

bool is_categorical_model(const std::string& m) {
  return m == "coarse" || m == "fine" || m == "dcn";
}

}  // namespace

const char* command_name(Command c) {
  switch (c) {
    case Command::synth: return "synth";
    case Command::train: return "train";
    case Command::eval: return "eval";
    case Command::bench: return "bench";
    case Command::saliency: return "saliency";
  }
  return "unknown";
}

const std::vector<std::string>& known_keys() { return kKeys; }

Extent parse_extent(const std::string& text) {
  const auto x = text.find('x');
  if (x == std::string::npos) throw ConfigError("extent '" + text + "' is not of the form HxW");
  Extent e;
  e.height = to_uint("extent", text.substr(0, x));
  e.width = to_uint("extent", text.substr(x + 1));
  if (e.height == 0 || e.width == 0) throw ConfigError("extent '" + text + "' has a zero side");
  return e;
}

RawConfig parse_config_text(const std::string& text, const std::string& origin) {
  RawConfig raw;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string where = origin + ":" + std::to_string(number);
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (!is_known(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    if (raw.count(key)) throw ConfigError(where + ": key '" + key + "' given twice");
    raw[key] = trim(line.substr(eq + 1));
  }
  return raw;
}

RunConfig resolve_config(Command command, const RawConfig& raw) {
  for (const auto& [key, value] : raw)
    if (!is_known(key)) throw ConfigError("unknown key '" + key + "'");
  auto get = [&](const std::string& key) -> const std::string* {
    auto it = raw.find(key);
    return it == raw.end() ? nullptr : &it->second;
  };
  auto uint_of = [&](const std::string& key, auto& field) {
    if (const std::string* v = get(key))
      field = static_cast<std::remove_reference_t<decltype(field)>>(to_uint(key, *v));
  };
  auto real_of = [&](const std::string& key, double& field) {
    if (const std::string* v = get(key)) field = to_real(key, *v);
  };

  RunConfig c;
  c.command = command;
  if (const auto* v = get("out")) c.out = *v;
  require(!c.out.empty(), "out", "must not be empty");
  uint_of("seed", c.seed);
  uint_of("threads", c.threads);
  require(c.threads >= 1 && c.threads <= 256, "threads", "must lie in 1..256");

  if (const auto* v = get("preset")) c.preset = *v;
  const auto& families = family_names();
  require(std::find(families.begin(), families.end(), c.preset) != families.end(), "preset",
          "unknown model family '" + c.preset + "'");
  c.dcn = family_config(c.preset);
  if (const auto* v = get("mode"); v && *v != "auto") {
    try {
      c.dcn.mode = parse_refine_mode(*v);
    } catch (const std::invalid_argument&) {
      throw ConfigError("key 'mode': expected swap-in, fine-only or auto, got '" + *v + "'");
    }
  }
  if (const auto* v = get("source"); v && *v != "auto") {
    try {
      c.dcn.source = parse_grad_source(*v);
    } catch (const std::invalid_argument&) {
      throw ConfigError("key 'source': expected coarse-vectors, layer-below-output or auto, got '" +
                        *v + "'");
    }
  }

  if (const auto* v = get("model")) c.model = *v;
  if (c.sequence_family() && command == Command::eval) {
    static const std::vector<std::string> seq = {
        "coarse", "fine", "dcn", "coarse-average", "coarse-soft-attention", "fine-average",
        "fine-soft-attention"};
    require(std::find(seq.begin(), seq.end(), c.model) != seq.end(), "model",
            "unknown sequence model '" + c.model + "'");
  } else {
    require(is_categorical_model(c.model), "model",
            "expected coarse, fine or dcn, got '" + c.model + "'");
  }
  uint_of("k", c.k);
  require(c.k <= 4096, "k", "must not exceed 4096");
  if (c.sequence_family()) c.scales = {1.0, 0.75, 0.5};
  if (const auto* v = get("scales")) {
    c.scales.clear();
    for (const auto& part : split(*v, ',')) c.scales.push_back(to_real("scales", part));
    require(!c.scales.empty(), "scales", "needs at least one factor");
  }
  for (double s : c.scales) require(s > 0.0 && s <= 8.0, "scales", "factors must lie in (0, 8]");

  uint_of("epochs", c.epochs);
  require(command != Command::train || c.epochs >= 1, "epochs", "must be at least 1");
  real_of("lambda", c.lambda);
  require(c.lambda >= 0.0 && c.lambda <= 1.0, "lambda", "must lie in [0, 1]");
  uint_of("batch", c.batch);
  require(c.batch >= 1, "batch", "must be at least 1");
  if (const auto* v = get("optimizer")) c.optimizer = *v;
  require(c.optimizer == "adam" || c.optimizer == "sgd", "optimizer",
          "expected adam or sgd, got '" + c.optimizer + "'");
  real_of("lr", c.lr);
  require(c.lr > 0.0, "lr", "must be positive");
  real_of("momentum", c.momentum);
  require(c.momentum >= 0.0 && c.momentum < 1.0, "momentum", "must lie in [0, 1)");
  real_of("decay", c.decay);
  require(c.decay > 0.0 && c.decay <= 1.0, "decay", "must lie in (0, 1]");
  uint_of("decay_interval", c.decay_interval);
  require(c.decay_interval >= 1, "decay_interval", "must be at least 1");
  uint_of("checkpoint_every", c.checkpoint_every);
  real_of("holdout", c.holdout);
  require(c.holdout >= 0.0 && c.holdout < 1.0, "holdout", "must lie in [0, 1)");

  if (const auto* v = get("data")) c.data = *v;
  if (const auto* v = get("test_data")) c.test_data = *v;
  if (const auto* v = get("checkpoint")) c.checkpoint = *v;
  const bool reads_data =
      command == Command::train || command == Command::eval || command == Command::saliency;
  if (reads_data) {
    require(!c.data.empty(), "data", "is required by '" + std::string(command_name(command)) + "'");
    require(std::filesystem::is_regular_file(c.data), "data",
            "no such file '" + c.data.string() + "'");
  }
  if (!c.test_data.empty())
    require(std::filesystem::is_regular_file(c.test_data), "test_data",
            "no such file '" + c.test_data.string() + "'");
  if (command == Command::eval || command == Command::saliency)
    require(!c.checkpoint.empty(), "checkpoint",
            "is required by '" + std::string(command_name(command)) + "'");
  if (!c.checkpoint.empty())
    require(std::filesystem::is_regular_file(c.checkpoint), "checkpoint",
            "no such file '" + c.checkpoint.string() + "'");

  if (const auto* v = get("kind")) c.kind = *v;
  c.canvas = canvas_for_kind(c.kind);
  uint_of("n", c.n);
  uint_of("height", c.canvas.height);
  uint_of("width", c.canvas.width);
  uint_of("min_digits", c.canvas.min_digits);
  uint_of("max_digits", c.canvas.max_digits);
  uint_of("digit_height", c.canvas.digit_height);
  uint_of("digit_width", c.canvas.digit_width);
  uint_of("clutter", c.canvas.clutter_count);
  uint_of("clutter_size", c.canvas.clutter_size);
  if (const auto* v = get("placement")) c.canvas.placement = parse_placement(*v);
  uint_of("margin", c.canvas.margin);
  uint_of("jitter", c.canvas.jitter);
  uint_of("shift", c.canvas.shift);
  uint_of("gap", c.canvas.gap);
  if (const auto* v = get("glyphs")) c.canvas.glyph_source = *v;
  c.canvas.seed = c.seed;
  if (command == Command::synth) {
    try {
      c.canvas.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("canvas: ") + e.what());
    }
    if (c.canvas.glyph_source != "builtin")
      require(std::filesystem::is_regular_file(c.canvas.glyph_source), "glyphs",
              "no such file '" + c.canvas.glyph_source + "'");
  }
  uint_of("samples", c.samples);
  require(c.samples <= c.n || command != Command::synth, "samples", "must not exceed n");

  if (const auto* v = get("input")) c.input = parse_extent(*v);
  if (const auto* v = get("sweep")) {
    for (const auto& part : split(*v, ','))
      if (!part.empty()) c.sweep.push_back(parse_extent(part));
  }
  uint_of("index", c.index);
  uint_of("count", c.count);
  require(c.count >= 1, "count", "must be at least 1");
  return c;
}

std::optional<RunConfig> parse_command_line(int argc, const char* const* argv, std::ostream& out) {
  CLI::App app{"Dynamic capacity network: synthesize data, train, evaluate, benchmark, saliency"};
  std::string command;
  std::string config_path;
  app.add_option("command", command, "synth | train | eval | bench | saliency")->required();
  app.add_option("--config", config_path, "key=value configuration file");
  std::map<std::string, std::string> flags;
  for (const std::string& key : kKeys) {
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    app.add_option("--" + flag, flags[key], "overrides '" + key + "'");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return std::nullopt;
  } catch (const CLI::ParseError& e) {
    throw ConfigError(e.what());
  }

  Command cmd = Command::synth;
  bool found = false;
  for (Command c : {Command::synth, Command::train, Command::eval, Command::bench,
                    Command::saliency})
    if (command == command_name(c)) {
      cmd = c;
      found = true;
    }
  if (!found) throw ConfigError("unknown command '" + command + "'");

  RawConfig raw;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot read config file '" + config_path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    raw = parse_config_text(buffer.str(), config_path);
  }
  for (const std::string& key : kKeys) {
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (app.count("--" + flag) > 0) raw[key] = flags[key];
  }
  return resolve_config(cmd, raw);
}

void echo_config(std::ostream& os, const RunConfig& c) {
  const auto old = os.precision(17);
  os << "# command " << command_name(c.command) << '\n'
     << "out=" << c.out.string() << '\n'
     << "seed=" << c.seed << '\n'
     << "threads=" << c.threads << '\n'
     << "preset=" << c.preset << '\n'
     << "model=" << c.model << '\n'
     << "k=" << c.k << '\n'
     << "scales=" << join_reals(c.scales) << '\n'
     << "mode=" << refine_mode_name(c.dcn.mode) << '\n'
     << "source=" << grad_source_name(c.dcn.source) << '\n'
     << "epochs=" << c.epochs << '\n'
     << "lambda=" << c.lambda << '\n'
     << "batch=" << c.batch << '\n'
     << "optimizer=" << c.optimizer << '\n'
     << "lr=" << c.lr << '\n'
     << "momentum=" << c.momentum << '\n'
     << "decay=" << c.decay << '\n'
     << "decay_interval=" << c.decay_interval << '\n'
     << "checkpoint_every=" << c.checkpoint_every << '\n'
     << "holdout=" << c.holdout << '\n'
     << "data=" << c.data.string() << '\n'
     << "test_data=" << c.test_data.string() << '\n'
     << "checkpoint=" << c.checkpoint.string() << '\n'
     << "kind=" << c.kind << '\n'
     << "n=" << c.n << '\n'
     << "height=" << c.canvas.height << '\n'
     << "width=" << c.canvas.width << '\n'
     << "min_digits=" << c.canvas.min_digits << '\n'
     << "max_digits=" << c.canvas.max_digits << '\n'
     << "digit_height=" << c.canvas.digit_height << '\n'
     << "digit_width=" << c.canvas.digit_width << '\n'
     << "clutter=" << c.canvas.clutter_count << '\n'
     << "clutter_size=" << c.canvas.clutter_size << '\n'
     << "placement=" << placement_name(c.canvas.placement) << '\n'
     << "margin=" << c.canvas.margin << '\n'
     << "jitter=" << c.canvas.jitter << '\n'
     << "shift=" << c.canvas.shift << '\n'
     << "gap=" << c.canvas.gap << '\n'
     << "glyphs=" << c.canvas.glyph_source << '\n'
     << "samples=" << c.samples << '\n'
     << "input=" << extent_text(c.input) << '\n'
     << "sweep=";
  for (std::size_t i = 0; i < c.sweep.size(); ++i) os << (i ? "," : "") << extent_text(c.sweep[i]);
  os << '\n' << "index=" << c.index << '\n' << "count=" << c.count << '\n';
  os.precision(old);
}

}  // namespace dcn::cli
