#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "fixtures.hpp"

using namespace dslbi;

namespace {

ExperimentConfig small_blobs(std::uint64_t seed = 0) {
  ExperimentConfig c = fixtures::blobs_mlp_config(seed);
  c.dataset.n = 240;
  c.layers = {Dense{20, 16}, Activation{ActivationKind::relu}, Dense{16, 4}};
  c.hp.kappa = 2.0;
  c.hp.nu = 1.0;
  c.hp.alpha.initial = 0.05;
  c.hp.lambda = 0.05;
  c.batch_size = 32;
  c.epochs = 6;
  return c;
}

RetrainPlan plan(std::size_t mask_epoch, std::size_t epochs, std::optional<std::size_t> rewind = std::nullopt) {
  RetrainPlan p;
  p.mask_epoch = mask_epoch;
  p.epochs = epochs;
  p.rewind_epoch = rewind;
  return p;
}

}  // namespace

TEST(EpochBatches, PermutationPerEpochAndDeterministic) {
  const auto a = epoch_batches(10, 3, 7, 2);
  ASSERT_EQ(a.size(), 4u);
  EXPECT_EQ(a.back().size(), 1u);
  std::vector<std::size_t> all;
  for (const auto& b : a) all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(all[i], i);
  EXPECT_EQ(epoch_batches(10, 3, 7, 2), a);
  EXPECT_NE(epoch_batches(10, 3, 7, 3), a);
  const auto full = epoch_batches(5, 5, 7, 0);
  ASSERT_EQ(full.size(), 1u);
  EXPECT_EQ(full[0], (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(Train, DeterministicAndRecordsEveryEpoch) {
  const auto cfg = small_blobs();
  const auto data = materialize(cfg.dataset);
  const auto a = train(cfg, data);
  const auto b = train(cfg, data);
  ASSERT_EQ(a.records.size(), cfg.epochs + 1);
  EXPECT_EQ(a.records, b.records);
  EXPECT_EQ(a.records.front().epoch, 0u);
  EXPECT_LT(a.final_record().train_loss, a.records.front().train_loss);
  EXPECT_LE(a.max_dual_excess, 1e-9);
  EXPECT_EQ(a.dual_violations, 0u);
}

TEST(Train, CheckpointsReproduceTheirEpoch) {
  auto cfg = small_blobs();
  cfg.checkpoint_epochs = {2};
  const auto data = materialize(cfg.dataset);
  const auto full = train(cfg, data);
  ASSERT_TRUE(full.checkpoints.count(2));
  auto shorter = cfg;
  shorter.epochs = 2;
  const auto partial = train(shorter, data);
  const auto st = state_at(cfg, full, 2);
  EXPECT_EQ(st.net.layers[0].params[0], partial.state.net.layers[0].params[0]);
  EXPECT_EQ(st.params[0].gamma, partial.state.params[0].gamma);
  EXPECT_THROW(state_at(cfg, full, 3), std::invalid_argument);
}

TEST(Train, DivergenceKeepsPartialRecords) {
  auto cfg = small_blobs();
  cfg.hp.alpha.initial = 1e4;
  cfg.hp.nu = 1e-4;
  const auto res = train(cfg);
  EXPECT_TRUE(res.diverged);
  EXPECT_FALSE(res.records.empty());
  EXPECT_NE(res.error.find("non-finite"), std::string::npos);
}

TEST(Train, RejectsBatchLargerThanTrainingSet) {
  auto cfg = small_blobs();
  cfg.batch_size = 10000;
  EXPECT_THROW(train(cfg), std::invalid_argument);
}

TEST(Train, MonitorOnlyForPlainSmoothFullBatch) {
  auto cfg = small_blobs();
  cfg.monitor = true;
  const auto relu = train(cfg);
  EXPECT_FALSE(relu.monitored);
  EXPECT_NE(relu.monitor_note.find("not smooth"), std::string::npos);

  auto lin = fixtures::iss_config(1);
  lin.epochs = 30;
  lin.monitor = true;
  const auto res = train(lin);
  ASSERT_TRUE(res.monitored);
  EXPECT_EQ(res.monitor.size(), 31u);
  EXPECT_EQ(res.descent_violations, 0u);
  EXPECT_EQ(res.relerr_violations, 0u);
}

TEST(Retrain, FullMaskEqualsDenseRetraining) {
  const auto cfg = small_blobs();
  const auto data = materialize(cfg.dataset);
  const Mask full = Mask::full(initial_state(cfg));
  const auto p = plan(0, 4);
  EXPECT_EQ(retrain_masked(cfg, data, &full, p).records, retrain_masked(cfg, data, nullptr, p).records);
}

TEST(Retrain, RewindToStartEqualsOneShot) {
  const auto cfg = small_blobs();
  const auto data = materialize(cfg.dataset);
  const auto source = train(cfg, data, {0, 5});
  const auto one_shot = one_shot_prune_retrain(cfg, data, plan(5, 6), source);
  const auto rewind = fine_tune_rewind(cfg, data, plan(5, 6, 0), source);
  EXPECT_EQ(one_shot.sparse.mask, rewind.mask);
  EXPECT_EQ(one_shot.sparse.run.records, rewind.run.records);
}

TEST(Retrain, MaskedWeightsStayZero) {
  const auto cfg = small_blobs();
  const auto data = materialize(cfg.dataset);
  const auto res = one_shot_prune_retrain(cfg, data, plan(6, 6));
  const Mask& mask = res.sparse.mask;
  ASSERT_LT(mask.density(), 1.0);
  ASSERT_GT(mask.density(), 0.0);
  const auto& net = res.sparse.run.state.net;
  for (std::size_t l = 0; l < mask.layers.size(); ++l) {
    if (!mask.layers[l]) continue;
    const Tensor& w = net.layers[l].params[0];
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!mask.layers[l]->active[mask.layers[l]->grouping.group_of(i)]) {
        ASSERT_EQ(w[i], 0.0);
      }
    }
  }
  // dense baseline trains without Gamma
  EXPECT_EQ(gamma_sparsity(res.dense.state), 0.0);
}

TEST(Retrain, RefusesEmptyMaskAndBadPlans) {
  auto cfg = small_blobs();
  cfg.hp.lambda = 1e6;
  const auto data = materialize(cfg.dataset);
  EXPECT_THROW(one_shot_prune_retrain(cfg, data, plan(2, 3)), DegenerateMaskError);
  EXPECT_THROW(plan(5, 3).validate(), std::invalid_argument);
  EXPECT_THROW(plan(1, 3, 4).validate(), std::invalid_argument);
  EXPECT_THROW(fine_tune_rewind(small_blobs(), data, plan(1, 3)), std::invalid_argument);
}

TEST(Baselines, SgdVariantsTrain) {
  auto cfg = small_blobs();
  const auto data = materialize(cfg.dataset);
  for (auto v : {SgdVariant::naive, SgdVariant::l1, SgdVariant::mom, SgdVariant::mom_wd, SgdVariant::nesterov}) {
    const auto res = sgd_baseline(cfg, data, v);
    EXPECT_FALSE(res.diverged) << to_string(v);
    EXPECT_LT(res.final_record().train_loss, res.records.front().train_loss) << to_string(v);
    EXPECT_TRUE(res.final_record().layers.empty());
  }
}

TEST(SupportRecovery, ScoresLinearRunsOnly) {
  auto cfg = fixtures::iss_config(2);
  const auto data = materialize(cfg.dataset);
  const auto res = train(cfg, data);
  EXPECT_GE(support_recovery_score(res.records, data.beta), 0.95);
  EXPECT_GE(lasso_support_score(data), 0.95);
  const auto blobs = train(small_blobs());
  EXPECT_THROW(support_recovery_score(blobs.records, data.beta), std::invalid_argument);
  EXPECT_THROW(lasso_support_score(materialize(small_blobs().dataset)), std::invalid_argument);
}

TEST(Ablation, GridOrderAndFixedProduct) {
  auto base = small_blobs();
  base.epochs = 2;
  const auto cells = ablation_grid(base, {1.0, 4.0}, {1.0, 10.0}, {0, 1});
  ASSERT_EQ(cells.size(), 8u);
  EXPECT_EQ(cells[0].kappa, 1.0);
  EXPECT_EQ(cells[1].seed, 1u);
  EXPECT_EQ(cells[2].nu, 10.0);
  EXPECT_EQ(cells[7].kappa, 4.0);
  for (const auto& c : cells) {
    EXPECT_FALSE(c.diverged);
    EXPECT_LE(c.max_dual_excess, 1e-9);
  }
}

TEST(RunDir, WritesEveryArtifact) {
  auto cfg = fixtures::iss_config(0);
  cfg.epochs = 4;
  cfg.monitor = true;
  cfg.checkpoint_epochs = {2};
  const auto res = train(cfg);
  const auto dir = std::filesystem::temp_directory_path() / "dslbi_tests" / "rundir";
  std::filesystem::remove_all(dir);
  write_run_dir(dir, cfg, res);
  for (const char* f : {"config.ini", "path.csv", "path.json", "entry_order.csv", "monitor.csv", "ckpt_epoch_2.bin"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  std::ifstream in(dir / "path.json");
  EXPECT_EQ(path_from_json(nlohmann::json::parse(in)), res.records);
  std::ifstream ci(dir / "config.ini");
  std::stringstream ss;
  ss << ci.rdbuf();
  EXPECT_EQ(parse_config(ss.str()), cfg);
}
