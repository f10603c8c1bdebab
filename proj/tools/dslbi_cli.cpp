// dslbi_cli: train / verify / prune / retrain / rewind / path-export / prox-check.
//
// Exit status: 0 success, 1 usage or configuration error, 2 runtime failure, 3 verification failure.
// DSLBI_OUTPUT_ROOT sets the directory under which runs land when no output is given.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dslbi/dslbi.hpp"

namespace fs = std::filesystem;
using namespace dslbi;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;
constexpr int kVerification = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string output;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "experiment config file")->required();
  app->add_option("--set", c.overrides, "override, section.key=value (repeatable)");
  app->add_option("-o,--output", c.output, "output directory");
  app->add_option("--seed", c.seed, "overrides run.seed and network.init_seed");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg;
  try {
    cfg = parse_config(read_text(c.config), c.overrides);
  } catch (const ConfigError& e) {
    throw UsageError(c.config + ": " + e.what());
  }
  if (c.seed) cfg.seed = cfg.init_seed = *c.seed;
  return cfg;
}

fs::path output_dir(const Common& c, const ExperimentConfig& cfg, const std::string& command) {
  if (!c.output.empty()) return c.output;
  if (!cfg.output.empty()) return cfg.output;
  const char* root = std::getenv("DSLBI_OUTPUT_ROOT");
  return fs::path(root && *root ? root : "runs") / (command + "-" + fs::path(c.config).stem().string());
}

void print_final(const char* label, const TrainResult& r) {
  const auto& f = r.final_record();
  std::cout << label << ": epoch " << f.epoch << " train_loss " << f.train_loss << " val_acc " << f.val_acc
            << " projected_val_acc " << f.projected_val_acc << " gamma_nonzero " << gamma_sparsity(r.state) << '\n';
}

int finish(const TrainResult& r) {
  if (r.diverged) {
    std::cerr << "run diverged: " << r.error << " (partial records written)\n";
    return kRuntime;
  }
  return 0;
}

int cmd_train(const Common& c) {
  const auto cfg = load_config(c);
  const auto res = train(cfg);
  const auto dir = output_dir(c, cfg, "train");
  write_run_dir(dir, cfg, res);
  print_final("train", res);
  if (res.monitored)
    std::cout << "monitor: " << res.descent_violations << " descent, " << res.relerr_violations
              << " relative-error violations\n";
  else if (!res.monitor_note.empty())
    std::cout << res.monitor_note << '\n';
  std::cout << "wrote " << dir.string() << '\n';
  if (res.monitored && (res.descent_violations || res.relerr_violations)) return kVerification;
  return finish(res);
}

int cmd_verify(std::uint64_t seed) {
  bool ok = true;
  for (const auto& s : run_verification(seed)) {
    std::cout << (s.pass ? "PASS " : "FAIL ") << s.name << ": " << s.detail << '\n';
    ok = ok && s.pass;
  }
  return ok ? 0 : kVerification;
}

int cmd_prune(const Common& c, const std::string& checkpoint) {
  const auto cfg = load_config(c);
  OptimizerState st = initial_state(cfg);
  load_state(st, load_checkpoint(checkpoint));
  const Mask mask = support_mask(st);
  for (std::size_t l = 0; l < mask.layers.size(); ++l)
    if (mask.layers[l] && mask.layers[l]->all_inactive())
      throw DegenerateMaskError("mask keeps nothing in layer " + std::to_string(l));
  const auto dir = output_dir(c, cfg, "prune");
  fs::create_directories(dir);
  std::ofstream(dir / "mask.json") << mask_to_json(mask).dump(1) << '\n';
  std::cout << "mask density " << mask.density() << "\nwrote " << (dir / "mask.json").string() << '\n';
  return 0;
}

RetrainPlan make_plan(std::size_t mask_epoch, std::size_t epochs, std::optional<std::size_t> rewind, bool resplit) {
  RetrainPlan p;
  p.mask_epoch = mask_epoch;
  p.epochs = epochs;
  p.rewind_epoch = rewind;
  p.resplit = resplit;
  return p;
}

int cmd_retrain(const Common& c, RetrainPlan plan, const std::string& mask_file) {
  const auto cfg = load_config(c);
  const auto data = materialize(cfg.dataset);
  plan.validate();
  Mask mask;
  if (!mask_file.empty()) {
    std::ifstream in(mask_file);
    if (!in) throw UsageError("cannot read mask file '" + mask_file + "'");
    mask = mask_from_json(nlohmann::json::parse(in));
  } else {
    mask = mask_from(cfg, source_run(cfg, data, plan), plan.mask_epoch);
  }
  const auto dense = retrain_masked(cfg, data, nullptr, plan);
  const auto sparse = retrain_masked(cfg, data, &mask, plan);
  const auto dir = output_dir(c, cfg, "retrain");
  write_run_dir(dir / "dense", cfg, dense);
  write_run_dir(dir / "sparse", cfg, sparse);
  std::ofstream(dir / "mask.json") << mask_to_json(mask).dump(1) << '\n';
  print_final("dense", dense);
  print_final("sparse", sparse);
  std::cout << "mask density " << mask.density() << "\nwrote " << dir.string() << '\n';
  return std::max(finish(dense), finish(sparse));
}

int cmd_rewind(const Common& c, const RetrainPlan& plan) {
  const auto cfg = load_config(c);
  const auto data = materialize(cfg.dataset);
  const auto r = fine_tune_rewind(cfg, data, plan);
  const auto dir = output_dir(c, cfg, "rewind");
  write_run_dir(dir, cfg, r.run);
  std::ofstream(dir / "mask.json") << mask_to_json(r.mask).dump(1) << '\n';
  print_final("rewind", r.run);
  std::cout << "mask density " << r.mask.density() << "\nwrote " << dir.string() << '\n';
  return finish(r.run);
}

int cmd_path_export(const std::string& run_dir, const std::string& format, const std::string& out) {
  const fs::path src = fs::path(run_dir) / "path.json";
  std::ifstream in(src);
  if (!in) throw UsageError("cannot read " + src.string());
  const auto records = path_from_json(nlohmann::json::parse(in));
  std::ofstream file;
  if (!out.empty()) {
    file.open(out);
    if (!file) throw std::runtime_error("cannot write " + out);
  }
  std::ostream& os = out.empty() ? std::cout : file;
  if (format == "csv") write_path_csv(os, records);
  else if (format == "entry-order") write_entry_order_csv(os, inverse_scale_order(records));
  else os << path_to_json(records).dump(1) << '\n';
  return 0;
}

int cmd_prox_check(const std::vector<std::string>& groups, double lambda, double kappa) {
  std::vector<double> values;
  std::vector<std::size_t> sizes;
  for (const auto& g : groups) {
    std::stringstream ss(g);
    std::string item;
    std::size_t n = 0;
    while (std::getline(ss, item, ',')) {
      try {
        values.push_back(std::stod(item));
      } catch (const std::exception&) {
        throw UsageError("--group: '" + item + "' is not a number");
      }
      ++n;
    }
    if (n == 0) throw UsageError("--group: empty group");
    sizes.push_back(n);
  }
  // one [1, 1, 1, n] filter per group would need equal sizes; score groups one at a time instead
  std::size_t offset = 0;
  bool ok = true;
  for (std::size_t gi = 0; gi < sizes.size(); ++gi) {
    Tensor v(Shape{1, 1, 1, sizes[gi]});
    for (std::size_t k = 0; k < sizes[gi]; ++k) v[k] = values[offset + k];
    offset += sizes[gi];
    const Penalty p(Grouping(GroupScheme::per_filter, v.shape()), lambda);
    const Tensor closed = prox(v, p, kappa);
    const Tensor oracle = kappa * prox_oracle(v, p);
    const double dev = max_abs_diff(closed, oracle);
    ok = ok && dev <= 1e-8 * std::max(1.0, kappa);
    std::cout << "group " << gi << ": ||v|| " << norm(v) << " prox";
    for (double x : closed.values()) std::cout << ' ' << x;
    std::cout << " penalty " << penalty_value(closed, p) << " oracle deviation " << dev << '\n';
  }
  return ok ? 0 : kVerification;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Split linearized Bregman training, verification and pruning"};
  app.require_subcommand(1, 1);

  Common common;
  std::uint64_t verify_seed = 0;
  std::string checkpoint, mask_file, run_dir, format = "json", export_out;
  std::size_t mask_epoch = 0, epochs = 0, rewind_epoch = 0;
  bool resplit = false;
  std::vector<std::string> groups;
  double lambda = 1.0, kappa = 1.0;

  auto* train_cmd = app.add_subcommand("train", "train a model and write a run directory");
  add_common(train_cmd, common);

  auto* verify_cmd = app.add_subcommand("verify", "run the property suites");
  verify_cmd->add_option("--seed", verify_seed, "seed for the random cases");

  auto* prune_cmd = app.add_subcommand("prune", "support mask of Gamma from a checkpoint");
  add_common(prune_cmd, common);
  prune_cmd->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();

  auto* retrain_cmd = app.add_subcommand("retrain", "one-shot prune and retrain from the original init");
  add_common(retrain_cmd, common);
  retrain_cmd->add_option("--mask-epoch", mask_epoch, "epoch whose Gamma support defines the mask");
  retrain_cmd->add_option("--epochs", epochs, "retraining budget T")->required();
  retrain_cmd->add_option("--mask", mask_file, "mask.json from prune (skips the source run)");
  retrain_cmd->add_flag("--resplit", resplit, "keep the Gamma split during retraining");

  auto* rewind_cmd = app.add_subcommand("rewind", "fine-tune weights from an earlier epoch under a later mask");
  add_common(rewind_cmd, common);
  rewind_cmd->add_option("--mask-epoch", mask_epoch, "epoch whose Gamma support defines the mask")->required();
  rewind_cmd->add_option("--rewind-epoch", rewind_epoch, "epoch the weights are reloaded from")->required();
  rewind_cmd->add_option("--epochs", epochs, "total budget T")->required();
  rewind_cmd->add_flag("--resplit", resplit, "keep the Gamma split during fine-tuning");

  auto* export_cmd = app.add_subcommand("path-export", "re-export the path of a run directory");
  export_cmd->add_option("--run", run_dir, "run directory")->required();
  export_cmd->add_option("--format", format, "json, csv or entry-order")
      ->check(CLI::IsMember({"json", "csv", "entry-order"}));
  export_cmd->add_option("-o,--output", export_out, "output file (stdout if absent)");

  auto* prox_cmd = app.add_subcommand("prox-check", "closed-form group prox against the numeric oracle");
  prox_cmd->add_option("--group", groups, "comma-separated group values (repeatable)")->required();
  prox_cmd->add_option("--lambda", lambda, "penalty weight")->check(CLI::NonNegativeNumber);
  prox_cmd->add_option("--kappa", kappa, "scale of the prox output")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(common);
    if (*verify_cmd) return cmd_verify(verify_seed);
    if (*prune_cmd) return cmd_prune(common, checkpoint);
    if (*retrain_cmd) return cmd_retrain(common, make_plan(mask_epoch, epochs, std::nullopt, resplit), mask_file);
    if (*rewind_cmd) return cmd_rewind(common, make_plan(mask_epoch, epochs, rewind_epoch, resplit));
    if (*export_cmd) return cmd_path_export(run_dir, format, export_out);
    if (*prox_cmd) return cmd_prox_check(groups, lambda, kappa);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
