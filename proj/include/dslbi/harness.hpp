#pragma once

// Training loops, one-shot prune/retrain, rewind fine-tuning, SGD baselines and ablation grids.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dslbi/config.hpp"
#include "dslbi/data.hpp"
#include "dslbi/lasso_path.hpp"
#include "dslbi/monitor.hpp"
#include "dslbi/optimizer.hpp"
#include "dslbi/path.hpp"

namespace dslbi {

struct ExperimentData {
  Dataset train;
  Dataset val;
  std::vector<double> beta;  // true coefficients, sparse_linear only
  bool linear = false;
};

inline ExperimentData materialize(const DatasetSpec& d) {
  ExperimentData out;
  Dataset all;
  switch (d.kind) {
    case DatasetKind::sparse_linear: {
      auto prob = gen_sparse_linear(d.n, d.p, d.s, d.snr, d.seed, d.correlation);
      all = {std::move(prob.X), std::move(prob.y)};
      out.beta = std::move(prob.beta);
      out.linear = true;
      break;
    }
    case DatasetKind::blobs:
      all = gen_blobs(d.n, d.classes, d.dim, d.separation, d.seed);
      break;
    case DatasetKind::idx:
      all = load_idx(d.images, d.labels, d.subset);
      if (!d.val_images.empty()) {
        out.train = std::move(all);
        out.val = load_idx(d.val_images, d.val_labels.empty() ? d.labels : d.val_labels);
        return out;
      }
      break;
  }
  std::tie(out.train, out.val) = split_dataset(all, d.train_fraction, d.val_fraction, d.seed);
  return out;
}

inline Network build_network(const ExperimentConfig& cfg) {
  return he_init(make_network(cfg.layers, cfg.loss), cfg.init_seed);
}

/// Row order of each minibatch in one epoch. A batch covering the whole set is left unshuffled.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                           std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<std::vector<std::size_t>> out;
  if (batch_size >= n) {
    out.push_back(std::move(idx));
    return out;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::shuffle(idx.begin(), idx.end(), rng);
  for (std::size_t b = 0; b < n; b += batch_size)
    out.emplace_back(idx.begin() + static_cast<long>(b), idx.begin() + static_cast<long>(std::min(n, b + batch_size)));
  return out;
}

struct TrainResult {
  std::vector<PathRecord> records;
  std::map<std::size_t, Checkpoint> checkpoints;  // state after the given number of epochs
  std::vector<LyapunovRecord> monitor;
  bool monitored = false;
  std::string monitor_note;
  std::size_t descent_violations = 0;
  std::size_t relerr_violations = 0;
  std::size_t dual_violations = 0;
  double max_dual_excess = -std::numeric_limits<double>::infinity();  // max_g ||g^g|| - lambda
  bool diverged = false;
  std::string error;
  OptimizerState state;

  const PathRecord& final_record() const { return records.back(); }
};

/// Nonzero fraction of Gamma over all split coordinates.
inline double gamma_sparsity(const OptimizerState& st) {
  double nz = 0, total = 0;
  for (const auto& ps : st.params)
    if (ps.split()) {
      nz += sparsity(ps.gamma) * static_cast<double>(ps.gamma.size());
      total += static_cast<double>(ps.gamma.size());
    }
  return total > 0 ? nz / total : 0.0;
}

using Stepper = std::function<void(OptimizerState&, const Batch&)>;

struct LoopOptions {
  std::size_t first_epoch = 0;
  std::size_t end_epoch = 0;
  const Mask* mask = nullptr;
  std::set<std::size_t> keep;  // epochs whose state is checkpointed
  bool monitor = false;
};

namespace detail {

inline void enforce_mask(OptimizerState& st, const Mask& mask) {
  for (auto& ps : st.params) {
    if (!ps.id.is_weight() || ps.id.layer >= mask.layers.size() || !mask.layers[ps.id.layer]) continue;
    const GroupMask& m = *mask.layers[ps.id.layer];
    Tensor& w = param(st.net, ps.id);
    m.grouping.require_covers(w, "mask");
    for (std::size_t i = 0; i < w.size(); ++i)
      if (!m.active[m.grouping.group_of(i)]) {
        // W and its velocity both held at zero: the same as zeroing the coordinate's gradient
        w[i] = 0.0;
        ps.velocity[i] = 0.0;
        if (ps.split()) ps.gamma[i] = ps.v[i] = ps.dual[i] = 0.0;
      }
  }
}

inline bool linear_least_squares(const Network& net) {
  if (net.loss != LossKind::mse || net.layers.size() != 1) return false;
  const auto* d = std::get_if<Dense>(&net.layers[0].kind);
  return d && !d->bias && d->out == 1;
}

inline void validate_run(const ExperimentConfig& cfg, const ExperimentData& data) {
  if (data.train.size() == 0) throw std::invalid_argument("training set is empty");
  if (cfg.batch_size > data.train.size())
    throw std::invalid_argument("run.batch_size (" + std::to_string(cfg.batch_size) + ") exceeds the training set size (" +
                                std::to_string(data.train.size()) + ")");
}

}  // namespace detail

/// Runs epochs [first_epoch, end_epoch) on `st`, recording before the first and after every epoch.
/// A non-finite value stops the run; the records gathered so far are kept.
inline TrainResult run_loop(const ExperimentConfig& cfg, const ExperimentData& data, OptimizerState st,
                            const Stepper& stepper, const LoopOptions& opt) {
  detail::validate_run(cfg, data);
  TrainResult res;
  const Batch full{data.train.x, data.train.y};
  const bool full_batch = cfg.batch_size >= data.train.size();

  std::optional<ConvergenceMonitor> mon;
  if (opt.monitor) {
    if (cfg.hp.variant != Variant::naive) res.monitor_note = "monitor skipped: variant is not naive";
    else if (!is_smooth(st.net)) res.monitor_note = "monitor skipped: network is not smooth";
    else if (!full_batch) res.monitor_note = "monitor skipped: not full-batch";
    else {
      double lip = cfg.monitor_lip;
      if (!(lip > 0))
        lip = detail::linear_least_squares(st.net) ? lipschitz_least_squares(data.train.x)
                                                   : estimate_lipschitz(st.net, full);
      MonitorConfig mc;
      mc.lip = lip;
      mc.reject_unstable = false;
      mon.emplace(cfg.hp, mc);
      res.monitored = true;
    }
  }

  if (opt.mask) detail::enforce_mask(st, *opt.mask);
  st.alpha = lr_schedule(cfg.hp, opt.first_epoch);
  auto keep = [&](std::size_t epoch) {
    if (opt.keep.count(epoch)) res.checkpoints[epoch] = save_state(st);
  };
  auto track_dual = [&] {
    for (const auto& ps : st.params)
      if (ps.split()) {
        const double ex = max_group_norm(ps.dual, *ps.penalty) - ps.penalty->lambda;
        res.max_dual_excess = std::max(res.max_dual_excess, ex);
        if (ex > 1e-9) ++res.dual_violations;
      }
  };

  try {
    res.records.push_back(record_epoch(st, data.train, data.val, opt.first_epoch));
    keep(opt.first_epoch);
    track_dual();
    if (mon) mon->observe(st, full);
    for (std::size_t epoch = opt.first_epoch; epoch < opt.end_epoch; ++epoch) {
      st.alpha = lr_schedule(cfg.hp, epoch);
      for (const auto& rows : epoch_batches(data.train.size(), cfg.batch_size, cfg.seed, epoch)) {
        if (full_batch) stepper(st, full);
        else stepper(st, Batch{slice_rows(data.train.x, rows), slice_rows(data.train.y, rows)});
        if (opt.mask) detail::enforce_mask(st, *opt.mask);
        track_dual();
        if (mon) mon->observe(st, full);
      }
      res.records.push_back(record_epoch(st, data.train, data.val, epoch + 1));
      keep(epoch + 1);
    }
  } catch (const NonFiniteError& e) {
    res.diverged = true;
    res.error = e.what();
  }
  if (mon) {
    res.monitor = mon->records();
    res.descent_violations = mon->descent_violations();
    res.relerr_violations = mon->relerr_violations();
  }
  res.state = std::move(st);
  return res;
}

inline OptimizerState initial_state(const ExperimentConfig& cfg, bool split = true) {
  Network net = build_network(cfg);
  const SplitPolicy sp = split ? make_split_policy(cfg.split, net, cfg.hp.lambda) : SplitPolicy::none();
  return make_state(std::move(net), sp, cfg.hp);
}

inline Stepper dessilbi_stepper(const HyperParams& hp) {
  return [hp](OptimizerState& st, const Batch& b) { step(st, b, hp); };
}

inline TrainResult train(const ExperimentConfig& cfg, const ExperimentData& data, std::set<std::size_t> keep = {}) {
  for (auto e : cfg.checkpoint_epochs) keep.insert(e);
  LoopOptions opt;
  opt.end_epoch = cfg.epochs;
  opt.keep = std::move(keep);
  opt.monitor = cfg.monitor;
  return run_loop(cfg, data, initial_state(cfg), dessilbi_stepper(cfg.hp), opt);
}

inline TrainResult train(const ExperimentConfig& cfg) { return train(cfg, materialize(cfg.dataset)); }

// ---- SGD baselines ---------------------------------------------------------------

enum class SgdVariant { naive, l1, mom, mom_wd, nesterov };

inline const char* to_string(SgdVariant v) {
  switch (v) {
    case SgdVariant::naive: return "naive";
    case SgdVariant::l1: return "l1";
    case SgdVariant::mom: return "mom";
    case SgdVariant::mom_wd: return "mom_wd";
    case SgdVariant::nesterov: return "nesterov";
  }
  return "?";
}

/// Plain SGD family at learning rate kappa * alpha_t, no structural variables.
inline Stepper sgd_stepper(const HyperParams& hp, SgdVariant variant, double l1_coef) {
  return [hp, variant, l1_coef](OptimizerState& st, const Batch& b) {
    auto lg = loss_and_gradient(st.net, b.x, b.y);
    const double lr = hp.kappa * st.alpha;
    for (std::size_t i = 0; i < st.params.size(); ++i) {
      auto& ps = st.params[i];
      Tensor& w = param(st.net, ps.id);
      Tensor& g = lg.grads[i];
      switch (variant) {
        case SgdVariant::naive: axpy(-lr, g, w); break;
        case SgdVariant::l1:
          if (ps.id.is_weight())
            for (std::size_t k = 0; k < w.size(); ++k) g[k] += l1_coef * static_cast<double>((w[k] > 0) - (w[k] < 0));
          axpy(-lr, g, w);
          break;
        case SgdVariant::mom:
        case SgdVariant::mom_wd: {
          const double decay = variant == SgdVariant::mom_wd ? hp.weight_decay : 0.0;
          for (std::size_t k = 0; k < w.size(); ++k) {
            ps.velocity[k] = hp.momentum * ps.velocity[k] + g[k];
            w[k] = w[k] - lr * ps.velocity[k] - decay * w[k];
          }
          break;
        }
        case SgdVariant::nesterov: {
          Tensor d(w.shape());
          for (std::size_t k = 0; k < w.size(); ++k) {
            ps.velocity[k] = hp.momentum * ps.velocity[k] + g[k];
            d[k] = g[k] + hp.momentum * ps.velocity[k];
          }
          axpy(-lr, d, w);
          break;
        }
      }
      detail::require_finite(w, "W", st.step);
    }
    ++st.step;
  };
}

inline TrainResult sgd_baseline(const ExperimentConfig& cfg, const ExperimentData& data, SgdVariant variant,
                                double l1_coef = 1e-3) {
  LoopOptions opt;
  opt.end_epoch = cfg.epochs;
  for (auto e : cfg.checkpoint_epochs) opt.keep.insert(e);
  return run_loop(cfg, data, initial_state(cfg, false), sgd_stepper(cfg.hp, variant, l1_coef), opt);
}

// ---- pruning and retraining ---------------------------------------------------------

struct RetrainPlan {
  std::size_t mask_epoch = 0;                // e: epoch whose Gamma support defines the mask
  std::size_t epochs = 0;                    // T: retraining budget
  std::optional<std::size_t> rewind_epoch;   // e': weights reloaded from this epoch (nullopt: same init)
  bool resplit = false;                      // keep training Gamma during retraining

  void validate() const {
    if (mask_epoch > epochs)
      throw std::invalid_argument("retrain plan: mask epoch " + std::to_string(mask_epoch) + " exceeds T = " +
                                  std::to_string(epochs));
    if (rewind_epoch && *rewind_epoch > epochs)
      throw std::invalid_argument("retrain plan: rewind epoch " + std::to_string(*rewind_epoch) + " exceeds T = " +
                                  std::to_string(epochs));
  }
};

class DegenerateMaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MaskedRun {
  Mask mask;
  TrainResult run;
};

struct PruneResult {
  TrainResult dense;
  MaskedRun sparse;
};

/// State of the split run after `epoch` epochs, from its checkpoint.
inline OptimizerState state_at(const ExperimentConfig& cfg, const TrainResult& source, std::size_t epoch) {
  auto it = source.checkpoints.find(epoch);
  if (it == source.checkpoints.end())
    throw std::invalid_argument("no checkpoint at epoch " + std::to_string(epoch));
  OptimizerState st = initial_state(cfg);
  load_state(st, it->second);
  return st;
}

inline Mask mask_from(const ExperimentConfig& cfg, const TrainResult& source, std::size_t epoch) {
  Mask m = support_mask(state_at(cfg, source, epoch));
  for (std::size_t l = 0; l < m.layers.size(); ++l)
    if (m.layers[l] && m.layers[l]->all_inactive())
      throw DegenerateMaskError("mask from epoch " + std::to_string(epoch) + " keeps nothing in layer " +
                                std::to_string(l) + "; retraining refused");
  return m;
}

namespace detail {

inline ExperimentConfig retrain_config(ExperimentConfig cfg, const RetrainPlan& plan) {
  cfg.epochs = plan.epochs;
  cfg.monitor = false;
  cfg.checkpoint_epochs.clear();
  return cfg;
}

}  // namespace detail

/// Retrains from the original initialization for T epochs under `mask`.
inline TrainResult retrain_masked(const ExperimentConfig& cfg, const ExperimentData& data, const Mask* mask,
                                  const RetrainPlan& plan) {
  const auto rc = detail::retrain_config(cfg, plan);
  LoopOptions opt;
  opt.end_epoch = plan.epochs;
  opt.mask = mask;
  return run_loop(rc, data, initial_state(rc, plan.resplit), dessilbi_stepper(rc.hp), opt);
}

/// Source run trained far enough to supply the epochs a plan needs.
inline TrainResult source_run(const ExperimentConfig& cfg, const ExperimentData& data, const RetrainPlan& plan) {
  ExperimentConfig sc = cfg;
  std::set<std::size_t> keep{plan.mask_epoch};
  if (plan.rewind_epoch) keep.insert(*plan.rewind_epoch);
  sc.epochs = *keep.rbegin();
  sc.monitor = false;
  return train(sc, data, keep);
}

inline PruneResult one_shot_prune_retrain(const ExperimentConfig& cfg, const ExperimentData& data,
                                          const RetrainPlan& plan, const TrainResult& source) {
  plan.validate();
  PruneResult out;
  out.sparse.mask = mask_from(cfg, source, plan.mask_epoch);
  out.dense = retrain_masked(cfg, data, nullptr, plan);
  out.sparse.run = retrain_masked(cfg, data, &out.sparse.mask, plan);
  return out;
}

inline PruneResult one_shot_prune_retrain(const ExperimentConfig& cfg, const ExperimentData& data,
                                          const RetrainPlan& plan) {
  plan.validate();
  return one_shot_prune_retrain(cfg, data, plan, source_run(cfg, data, plan));
}

/// Weights from epoch e', mask from epoch e, then epochs e'..T under the mask.
inline MaskedRun fine_tune_rewind(const ExperimentConfig& cfg, const ExperimentData& data, const RetrainPlan& plan,
                                  const TrainResult& source) {
  plan.validate();
  if (!plan.rewind_epoch) throw std::invalid_argument("fine_tune_rewind: plan has no rewind epoch");
  MaskedRun out;
  out.mask = mask_from(cfg, source, plan.mask_epoch);
  const auto rc = detail::retrain_config(cfg, plan);
  OptimizerState st = initial_state(rc, plan.resplit);
  st.net = state_at(cfg, source, *plan.rewind_epoch).net;
  LoopOptions opt;
  opt.first_epoch = *plan.rewind_epoch;
  opt.end_epoch = plan.epochs;
  opt.mask = &out.mask;
  out.run = run_loop(rc, data, std::move(st), dessilbi_stepper(rc.hp), opt);
  return out;
}

inline MaskedRun fine_tune_rewind(const ExperimentConfig& cfg, const ExperimentData& data, const RetrainPlan& plan) {
  plan.validate();
  return fine_tune_rewind(cfg, data, plan, source_run(cfg, data, plan));
}

// ---- model selection -------------------------------------------------------------------

/// AUC of the order in which Gamma's coordinates enter the path against the true support.
inline double support_recovery_score(const std::vector<PathRecord>& records, const std::vector<double>& beta) {
  if (records.empty()) throw std::invalid_argument("support_recovery_score: no records");
  const auto& first = records.front();
  if (first.layers.size() != 1 || first.layers[0].gamma_norms.size() != beta.size())
    throw std::invalid_argument(
        "support_recovery_score: needs a single split linear layer with one group per true coefficient "
        "(sparse_linear data)");
  std::vector<std::optional<double>> entry;
  std::vector<bool> truth;
  for (const auto& e : inverse_scale_order(records)) {
    entry.push_back(e.entry_epoch ? std::optional<double>(static_cast<double>(*e.entry_epoch)) : std::nullopt);
    truth.push_back(beta.at(e.group) != 0.0);
  }
  return support_auc(entry, truth);
}

inline double lasso_support_score(const ExperimentData& data) {
  if (!data.linear) throw std::invalid_argument("lasso_support_score: needs sparse_linear data");
  const auto path = lasso_path(data.train.x, data.train.y);
  std::vector<bool> truth;
  for (double b : data.beta) truth.push_back(b != 0.0);
  return support_auc(path.entry, truth);
}

// ---- ablations ---------------------------------------------------------------------------

struct AblationCell {
  double kappa = 0.0;
  double nu = 0.0;
  std::uint64_t seed = 0;
  double final_sparsity = 0.0;      // nonzero fraction of Gamma at the end
  double best_val_acc = 0.0;        // dense W
  double best_projected_acc = 0.0;  // W projected on supp(Gamma)
  double max_dual_excess = 0.0;
  bool diverged = false;
};

/// (kappa, nu) grid over seeds. With fix_kappa_alpha the step size is rescaled so kappa * alpha
/// stays at the base configuration's value. Cells come back in (kappa, nu, seed) order.
inline std::vector<AblationCell> ablation_grid(const ExperimentConfig& base, const std::vector<double>& kappas,
                                               const std::vector<double>& nus, const std::vector<std::uint64_t>& seeds,
                                               bool fix_kappa_alpha = true) {
  std::vector<AblationCell> cells;
  for (double kappa : kappas)
    for (double nu : nus)
      for (auto seed : seeds) {
        ExperimentConfig cfg = base;
        cfg.hp.kappa = kappa;
        cfg.hp.nu = nu;
        if (fix_kappa_alpha) {
          const double r = base.hp.kappa / kappa;
          cfg.hp.alpha.initial *= r;
          for (auto& s : cfg.hp.alpha.steps) s.second *= r;
        }
        cfg.seed = seed;
        cfg.init_seed = seed;
        cfg.dataset.seed = seed;
        cfg.monitor = false;
        const auto res = train(cfg);
        AblationCell c{kappa, nu, seed, gamma_sparsity(res.state), 0.0, 0.0, res.max_dual_excess, res.diverged};
        for (const auto& r : res.records) {
          c.best_val_acc = std::max(c.best_val_acc, r.val_acc);
          c.best_projected_acc = std::max(c.best_projected_acc, r.projected_val_acc);
        }
        cells.push_back(c);
      }
  return cells;
}

// ---- run directories -----------------------------------------------------------------------

inline void write_run_dir(const std::filesystem::path& dir, const ExperimentConfig& cfg, const TrainResult& res) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream os(dir / name);
    if (!os) throw std::runtime_error("cannot write " + (dir / name).string());
    return os;
  };
  open("config.ini") << emit_config(cfg);
  {
    auto os = open("path.csv");
    write_path_csv(os, res.records);
  }
  open("path.json") << path_to_json(res.records).dump(1) << '\n';
  if (!res.records.empty()) {
    auto os = open("entry_order.csv");
    write_entry_order_csv(os, inverse_scale_order(res.records));
  }
  if (res.monitored) {
    auto os = open("monitor.csv");
    write_monitor_csv(os, res.monitor);
  }
  for (const auto& [epoch, ck] : res.checkpoints)
    save_checkpoint((dir / ("ckpt_epoch_" + std::to_string(epoch) + ".bin")).string(), ck);
}

}  // namespace dslbi
