#include "commands.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>

#include "dcn/attention.hpp"
#include "dcn/checkpoint.hpp"
#include "dcn/cost_model.hpp"
#include "dcn/parallel.hpp"
#include "dcn/seq_head.hpp"
#include "dcn/training.hpp"

namespace dcn::cli {

namespace fs = std::filesystem;

Outputs::Outputs(fs::path root) : root_(std::move(root)) { make_dirs(root_); }

Outputs::~Outputs() {
  if (committed_) return;
  std::error_code ec;
  for (auto it = files_.rbegin(); it != files_.rend(); ++it) fs::remove(*it, ec);
  for (auto it = dirs_.rbegin(); it != dirs_.rend(); ++it) fs::remove_all(*it, ec);
}

void Outputs::make_dirs(const fs::path& dir) {
  std::vector<fs::path> missing;
  for (fs::path p = dir; !p.empty() && !fs::exists(p); p = p.parent_path()) {
    missing.push_back(p);
    if (p == p.parent_path()) break;
  }
  for (auto it = missing.rbegin(); it != missing.rend(); ++it) {
    fs::create_directory(*it);
    dirs_.push_back(*it);
  }
}

fs::path Outputs::file(const std::string& name) {
  const fs::path p = root_ / name;
  make_dirs(p.parent_path());
  files_.push_back(p);
  return p;
}

fs::path Outputs::directory(const std::string& name) {
  const fs::path p = root_ / name;
  if (fs::exists(p)) {
    // Pre-existing content is left alone; only new files are tracked.
    return p;
  }
  make_dirs(p);
  return p;
}

namespace {

using Real = float;

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  return os;
}

OptimizerConfig optimizer_of(const RunConfig& c) {
  if (c.optimizer == "sgd") return OptimizerConfig::sgd(c.lr, c.momentum, c.decay, c.decay_interval);
  OptimizerConfig o = OptimizerConfig::adam(c.lr);
  o.decay = c.decay;
  o.decay_interval = c.decay_interval;
  return o;
}

DcnStacks<Real> load_stacks(const RunConfig& c) {
  DcnStacks<Real> stacks = build_family<Real>(c.preset, c.seed);
  if (!c.checkpoint.empty()) restore_checkpoint(read_checkpoint(c.checkpoint), stacks.named_state());
  return stacks;
}

std::string padded(std::size_t i) {
  std::ostringstream os;
  os << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

void synth(const RunConfig& c, Outputs& outputs, std::ostream& out) {
  const Dataset data =
      c.kind == "cluttered" ? synth_cluttered(c.canvas, c.n) : synth_multidigit(c.canvas, c.n);
  const fs::path path = outputs.file("data.dcn");
  write_container(data, path);
  for (std::size_t i = 0; i < c.samples; ++i)
    write_pgm(outputs.file("samples/" + padded(i) + ".pgm"), data, i);
  out << "wrote " << data.size() << " examples of " << data.height << "x" << data.width << " to "
      << path.string() << '\n';
}

void train_categorical(const RunConfig& c, const Dataset& train_set, const Dataset& test_set,
                       Outputs& outputs, std::ostream& log) {
  DcnStacks<Real> stacks = load_stacks(c);
  TrainConfig tc;
  tc.model = parse_model_kind(c.model);
  tc.k = c.k;
  tc.batch_size = c.batch;
  tc.epochs = c.epochs;
  tc.lambda = c.lambda;
  tc.coarse_optimizer = tc.fine_optimizer = tc.top_optimizer = optimizer_of(c);
  tc.seed = c.seed;
  tc.checkpoint_every = c.checkpoint_every;
  if (c.checkpoint_every > 0) tc.checkpoint_dir = outputs.directory("checkpoints");
  const fs::path log_path = outputs.file("train_log.csv");
  const fs::path model_path = outputs.file("model.ckpt");
  if (c.checkpoint_every > 0)
    for (std::size_t e = c.checkpoint_every; e <= c.epochs; e += c.checkpoint_every)
      outputs.file("checkpoints/epoch_" + std::to_string(e) + ".ckpt");
  const TrainLog train_log = train(stacks, train_set, test_set, tc, c.dcn, [&](const EpochRecord& r) {
    log << "epoch " << r.epoch << " loss " << r.train_loss << " test_error " << r.test_error
        << " hint_distance " << r.hint_distance << '\n';
  });
  std::ofstream os = open_out(log_path);
  train_log.write_csv(os);
  save_checkpoint(model_path, stacks.named_state());
}

void train_sequence_family(const RunConfig& c, const Dataset& train_set, const Dataset& test_set,
                           Outputs& outputs, std::ostream& log) {
  DcnStacks<Real> stacks = load_stacks(c);
  SequenceTrainConfig tc;
  tc.epochs = c.epochs;
  tc.batch_size = c.batch;
  tc.optimizer = optimizer_of(c);
  std::vector<std::pair<std::string, LayerStack<Real>*>> stages;
  if (c.model != "fine") stages.emplace_back("coarse", &stacks.coarse);
  if (c.model != "coarse") stages.emplace_back("fine", &stacks.fine);
  std::vector<fs::path> log_paths;
  for (const auto& stage : stages) log_paths.push_back(outputs.file("train_log_" + stage.first + ".csv"));
  const fs::path model_path = outputs.file("model.ckpt");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    tc.seed = example_seed(c.seed, s);
    const TrainLog train_log =
        train_sequence(*stages[s].second, stacks.top, train_set, test_set, tc,
                       [&](const EpochRecord& r) {
                         log << stages[s].first << " epoch " << r.epoch << " loss " << r.train_loss
                             << " test_error " << r.test_error << '\n';
                       });
    std::ofstream os = open_out(log_paths[s]);
    train_log.write_csv(os);
  }
  save_checkpoint(model_path, stacks.named_state());
}

void train_command(const RunConfig& c, Outputs& outputs, std::ostream& out, std::ostream& log) {
  Dataset data = read_container(c.data);
  Dataset test_set;
  if (!c.test_data.empty()) {
    test_set = read_container(c.test_data);
  } else {
    std::tie(data, test_set) = split_holdout(data, c.holdout);
  }
  log << "training on " << data.size() << " examples, testing on " << test_set.size() << '\n';
  if (c.sequence_family())
    train_sequence_family(c, data, test_set, outputs, log);
  else
    train_categorical(c, data, test_set, outputs, log);
  out << "wrote " << (c.out / "model.ckpt").string() << '\n';
}

SequenceModel sequence_model_of(const std::string& m) {
  if (m == "coarse") return SequenceModel::coarse_average;
  if (m == "fine") return SequenceModel::fine_average;
  return parse_sequence_model(m);
}

void eval_command(const RunConfig& c, Outputs& outputs, std::ostream& out) {
  const Dataset data = read_container(c.data);
  const DcnStacks<Real> stacks = load_stacks(c);
  const fs::path csv_path = outputs.file("eval.csv");
  std::ostringstream row;
  row << std::setprecision(17);
  if (c.sequence_family()) {
    const fs::path pred_path = outputs.file("predictions.txt");
    const SequenceModel model = sequence_model_of(c.model);
    std::vector<DecodedSequence> predictions;
    const double error = sequence_error(data, stacks, model, c.k, c.scales, c.dcn, &predictions);
    std::ofstream preds = open_out(pred_path);
    for (const auto& p : predictions) write_prediction_line(preds, p);
    std::ofstream csv = open_out(csv_path);
    csv << "model,k,count,error\n";
    row << sequence_model_name(model) << ',' << c.k << ',' << data.size() << ',' << error << '\n';
    csv << row.str();
    out << "error " << error << '\n';
    return;
  }
  const EvalResult r = evaluate(data, stacks, parse_model_kind(c.model), c.k, c.dcn, 128);
  std::ofstream csv = open_out(csv_path);
  csv << "model,k,count,error,hint_distance\n";
  row << c.model << ',' << c.k << ',' << r.count << ',' << r.error << ',' << r.hint_distance << '\n';
  csv << row.str();
  out << "error " << r.error << '\n';
}

void bench_command(const RunConfig& c, Outputs& outputs, std::ostream& out, std::ostream& log) {
  const DcnStacks<Real> stacks = build_family<Real>(c.preset, c.seed);
  std::vector<Plan> plans = {Plan::coarse(), Plan::fine()};
  if (c.sequence_family()) plans.push_back(Plan::soft_attention());
  plans.push_back(Plan::dcn(c.k, c.scales));

  std::ostringstream summary, layers;
  write_cost_csv_header(summary);
  bool first_table = true;
  for (const Plan& plan : plans) {
    const CostReport r = plan_cost(plan, c.input.height, c.input.width, stacks, c.dcn);
    write_cost_csv_row(summary, r);
    std::ostringstream table;
    write_layer_table(table, r);
    std::string text = table.str();
    if (!first_table) text.erase(0, text.find('\n') + 1);
    layers << text;
    first_table = false;
  }

  std::vector<Extent> sweep = c.sweep;
  if (sweep.empty())
    for (std::size_t m = 1; m <= 4; ++m) sweep.push_back({c.input.height * m, c.input.width * m});
  std::ostringstream sweep_csv;
  write_cost_csv_header(sweep_csv);
  for (const Extent& e : sweep)
    for (const Plan& plan : plans) {
      try {
        write_cost_csv_row(sweep_csv, plan_cost(plan, e.height, e.width, stacks, c.dcn));
      } catch (const DimensionError& err) {
        log << "warning: " << plan_name(plan.kind) << " at " << e.height << "x" << e.width
            << " skipped: " << err.what() << '\n';
      }
    }

  open_out(outputs.file("bench.csv")) << summary.str();
  open_out(outputs.file("layers.csv")) << layers.str();
  open_out(outputs.file("sweep.csv")) << sweep_csv.str();
  out << summary.str();
}

void saliency_command(const RunConfig& c, Outputs& outputs, std::ostream& out) {
  const Dataset data = read_container(c.data);
  if (c.index + c.count > data.size())
    throw ConfigError("key 'index': examples " + std::to_string(c.index) + ".." +
                      std::to_string(c.index + c.count - 1) + " outside a dataset of " +
                      std::to_string(data.size()));
  const DcnStacks<Real> stacks = load_stacks(c);
  for (std::size_t i = c.index; i < c.index + c.count; ++i) {
    const std::size_t idx[] = {i};
    const Tensor<Real> image = images_tensor<Real>(data, idx);
    const DcnResult<Real> r = dcn_infer(image, stacks, c.k, c.dcn);
    write_pgm(outputs.file("input_" + padded(i) + ".pgm"), data, i);
    write_saliency_pgm(outputs.file("saliency_" + padded(i) + ".pgm"), r.saliency);
    std::ofstream boxes = open_out(outputs.file("patches_" + padded(i) + ".txt"));
    write_patch_boxes(boxes, r.patches);
    out << i << ':';
    if (c.sequence_family()) {
      out << ' ';
      write_prediction_line(out, decode(dcn_sequence_infer(image, stacks, c.k, c.scales, c.dcn)));
    } else {
      const auto best = std::max_element(r.distribution.begin(), r.distribution.end());
      out << " class " << (best - r.distribution.begin()) << " p " << *best << '\n';
    }
  }
}

std::string one_line(std::string text) {
  std::replace(text.begin(), text.end(), '\n', ' ');
  while (!text.empty() && text.back() == ' ') text.pop_back();
  return text;
}

}  // namespace

void run(const RunConfig& config, std::ostream& out, std::ostream& log) {
  set_worker_threads(config.threads);
  Outputs outputs(config.out);
  switch (config.command) {
    case Command::synth: synth(config, outputs, out); break;
    case Command::train: train_command(config, outputs, out, log); break;
    case Command::eval: eval_command(config, outputs, out); break;
    case Command::bench: bench_command(config, outputs, out, log); break;
    case Command::saliency: saliency_command(config, outputs, out); break;
  }
  outputs.commit();
}

int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& log) {
  try {
    const std::optional<RunConfig> config = parse_command_line(argc, argv, out);
    if (!config) return 0;
    echo_config(log, *config);
    run(*config, out, log);
    return 0;
  } catch (const ConfigError& e) {
    log << "error: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const std::exception& e) {
    log << "error: " << one_line(e.what()) << '\n';
    return 1;
  }
}

}  // namespace dcn::cli
