#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "mnmef/checkpoint.hpp"
#include "mnmef/training.hpp"
#include "test_util.hpp"

using namespace mnmef;
using mnmef::testing::max_abs_diff_vec;
using mnmef::testing::random_matrix;

namespace {

ModelConfig small_config(bool zero_init = true, std::uint64_t seed = 3) {
  ModelConfig c;
  c.width = 8;
  c.heads = 2;
  c.seed_len = 2;
  c.st_dim = 6;
  c.head_hidden = 12;
  c.zero_init_heads = zero_init;
  c.init_seed = seed;
  return c;
}

std::vector<TruthRun> l63_runs(std::size_t count, std::size_t steps, std::uint64_t seed = 1) {
  const SystemSpec spec = lorenz63_system();
  std::vector<TruthRun> runs;
  for (std::size_t i = 0; i < count; ++i) {
    RngStream rng(seed, i);
    runs.push_back(generate_truth(spec, steps, rng, BurnIn::fixed(300)));
  }
  return runs;
}

TrainConfig tiny_train(std::size_t epochs, std::uint64_t seed = 0) {
  TrainConfig c;
  c.trajectories = 16;
  c.steps = 10;
  c.members = 5;
  c.epochs = epochs;
  c.batch = 4;
  c.lr = 3e-3;
  c.seed = seed;
  return c;
}

double relative_grad_error(const Gradients& a, const Gradients& b) {
  double diff2 = 0.0, ref2 = 0.0;
  std::set<long> ids;
  for (const auto& [id, m] : a) ids.insert(id);
  for (const auto& [id, m] : b) ids.insert(id);
  for (long id : ids) {
    const auto ia = a.find(id), ib = b.find(id);
    const std::size_t n = ia != a.end() ? ia->second.size() : ib->second.size();
    for (std::size_t k = 0; k < n; ++k) {
      const double x = ia != a.end() ? ia->second.data()[k] : 0.0;
      const double y = ib != b.end() ? ib->second.data()[k] : 0.0;
      diff2 += (x - y) * (x - y);
      ref2 += y * y;
    }
  }
  return std::sqrt(diff2 / std::max(ref2, 1e-300));
}

/// Noise for one trajectory drawn in the unroll's order: initial ensemble, then ξ and η per step.
struct DrawnNoise {
  Matrix initial;
  std::vector<StepNoise> steps;
};

DrawnNoise draw_like_unroll(const SystemSpec& spec, const TruthRun& run, std::size_t members, RngStream rng) {
  DrawnNoise d;
  d.initial = initial_ensemble(run.states.row(0), scaled_identity(spec.state_dim, 1.0), members, rng);
  for (std::size_t j = 0; j < run.length(); ++j) d.steps.push_back(draw_step_noise(spec, members, rng));
  return d;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

}  // namespace

// [TRIVIAL]
TEST(TrajectoryLoss, PerfectMeansGiveZero) {
  RngStream rng(1, 0);
  const Matrix truth = random_matrix(5, 3, rng);
  EXPECT_EQ(trajectory_loss(truth, truth), 0.0);
}

// [TRIVIAL] each relative term is exactly 1.
TEST(TrajectoryLoss, ZeroMeansGiveOne) {
  RngStream rng(2, 0);
  const Matrix truth = random_matrix(7, 4, rng);
  EXPECT_DOUBLE_EQ(trajectory_loss(Matrix(7, 4), truth), 1.0);
}

// [DERIVED] v† = (1,0),(0,2); means (0,0),(0,1): (1 + 1/4)/2 and (1 + 1)/2.
TEST(TrajectoryLoss, HandCase) {
  const Matrix truth{{1.0, 0.0}, {0.0, 2.0}};
  const Matrix means{{0.0, 0.0}, {0.0, 1.0}};
  EXPECT_DOUBLE_EQ(trajectory_loss(means, truth), 0.625);
  EXPECT_DOUBLE_EQ(trajectory_loss(means, truth, LossKind::kUnnormalized), 1.0);
}

// [TRIVIAL] a near-zero truth step falls back to the squared error and is counted.
TEST(TrajectoryLoss, DegenerateStepUsesUnnormalizedTerm) {
  const Matrix truth{{0.0, 0.0}, {0.0, 2.0}};
  const Matrix means{{3.0, 0.0}, {0.0, 1.0}};
  std::size_t degenerate = 0;
  EXPECT_DOUBLE_EQ(trajectory_loss(means, truth, LossKind::kNormalized, &degenerate), (9.0 + 0.25) / 2.0);
  EXPECT_EQ(degenerate, 1u);
}

// [TRIVIAL]
TEST(TrajectoryLoss, RejectsShapeMismatch) {
  EXPECT_ERROR_KIND(trajectory_loss(Matrix(3, 2), Matrix(2, 2)), kDimMismatch);
}

// [DERIVED] the graph loss of a step matches the scalar formula.
TEST(TrajectoryLoss, GraphLossAgreesWithScalarLoss) {
  const SystemSpec spec = lorenz63_system();
  const auto runs = l63_runs(1, 6);
  const MnmefModel m = make_model(spec, small_config(false));
  RngStream rng(3, 0);
  const UnrollResult r = truncated_unroll(m, spec, runs[0], 4, 2, rng, false);
  Matrix truth(6, 3);
  for (std::size_t j = 0; j < 6; ++j) std::copy(runs[0].states.row(j + 1).begin(), runs[0].states.row(j + 1).end(), truth.row(j).begin());
  EXPECT_NEAR(r.loss, trajectory_loss(r.means, truth), 1e-14);
}

// [TRIVIAL] detaching changes gradients, never values: the loss is the same for every J₀.
TEST(TruncatedUnroll, LossIndependentOfHorizon) {
  const SystemSpec spec = lorenz63_system();
  const auto runs = l63_runs(1, 9);
  const MnmefModel m = make_model(spec, small_config(false));
  std::vector<double> losses;
  for (std::size_t j0 : {1u, 2u, 4u, 9u, 50u}) {
    RngStream rng(4, 0);
    losses.push_back(truncated_unroll(m, spec, runs[0], 4, j0, rng, true).loss);
  }
  for (double l : losses) EXPECT_NEAR(l, losses.front(), 1e-12);
}

// [TRIVIAL] J₀ ≥ J is plain backpropagation through the whole trajectory on one tape.
TEST(TruncatedUnroll, LongHorizonEqualsFullBackprop) {
  const SystemSpec spec = lorenz63_system();
  const auto runs = l63_runs(1, 6);
  const MnmefModel m = make_model(spec, small_config(false));
  const DrawnNoise d = draw_like_unroll(spec, runs[0], 4, RngStream(5, 0));

  ad::Tape tape;
  ParamBinder pb(tape, m.params);
  ad::Tensor x = tape.constant(d.initial);
  std::optional<ad::Tensor> loss;
  for (std::size_t j = 0; j < 6; ++j) {
    x = mnmef_step(pb, m, spec, x, runs[0].observations.row(j), d.steps[j]);
    const ad::Tensor term = step_loss(x, runs[0].states.row(j + 1), LossKind::kNormalized, 1.0 / 6.0);
    loss = loss ? ad::add(*loss, term) : term;
  }
  const Gradients full = tape.backward(*loss);

  for (std::size_t j0 : {6u, 20u}) {
    RngStream rng(5, 0);
    const UnrollResult r = truncated_unroll(m, spec, runs[0], 4, j0, rng, true);
    EXPECT_NEAR(r.loss, loss->value()(0, 0), 1e-14);
    EXPECT_LT(relative_grad_error(r.grads, full), 1e-12) << "J0=" << j0;
  }
}

// [DERIVED] J₀ = 1: sum of single-step gradients, each on a fresh tape rooted at the carried ensemble.
TEST(TruncatedUnroll, UnitHorizonEqualsReRootedSum) {
  const SystemSpec spec = lorenz63_system();
  const auto runs = l63_runs(1, 5);
  const MnmefModel m = make_model(spec, small_config(false));
  const DrawnNoise d = draw_like_unroll(spec, runs[0], 4, RngStream(6, 0));

  Gradients oracle;
  Matrix e = d.initial;
  for (std::size_t j = 0; j < 5; ++j) {
    ad::Tape tape;
    ParamBinder pb(tape, m.params);
    const ad::Tensor x = mnmef_step(pb, m, spec, tape.constant(e), runs[0].observations.row(j), d.steps[j]);
    add_into(oracle, tape.backward(step_loss(x, runs[0].states.row(j + 1), LossKind::kNormalized, 0.2)));
    e = x.value();
  }
  RngStream rng(6, 0);
  const UnrollResult r = truncated_unroll(m, spec, runs[0], 4, 1, rng, true);
  EXPECT_LT(relative_grad_error(r.grads, oracle), 1e-12);

  RngStream rng_full(6, 0);
  const UnrollResult full = truncated_unroll(m, spec, runs[0], 4, 5, rng_full, true);
  EXPECT_GT(relative_grad_error(full.grads, oracle), 1e-6) << "truncation should change the gradient";
}

// [TRIVIAL]
TEST(TruncatedUnroll, RejectsZeroHorizon) {
  const SystemSpec spec = lorenz63_system();
  const auto runs = l63_runs(1, 3);
  RngStream rng(7, 0);
  EXPECT_ERROR_KIND(truncated_unroll(make_model(spec, small_config()), spec, runs[0], 3, 0, rng, false), kPrecondition);
}

// [TRIVIAL] with θ_ST frozen no encoder gradient is produced; some head gradient is nonzero.
TEST(TruncatedUnroll, FrozenEncoderReceivesNoGradient) {
  const SystemSpec spec = lorenz63_system();
  const auto runs = l63_runs(1, 4);
  MnmefModel m = make_model(spec, small_config(false));
  m.params.set_frozen(Partition::kSetTransformer, true);
  RngStream rng(8, 0);
  const UnrollResult r = truncated_unroll(m, spec, runs[0], 4, 2, rng, true);
  double head_norm = 0.0;
  for (const auto& [id, g] : r.grads) {
    ASSERT_NE(m.params.entry(static_cast<std::size_t>(id)).partition, Partition::kSetTransformer);
    for (double v : g.data()) head_norm += v * v;
  }
  EXPECT_GT(head_norm, 0.0);
}

// [TRIVIAL]
TEST(AdamW, ZeroGradientLeavesParameters) {
  const MnmefModel m0 = make_model(lorenz63_system(), small_config(false));
  MnmefModel m = m0;
  AdamW opt(m.params);
  for (int i = 0; i < 10; ++i) opt.step(m.params, {});
  for (std::size_t id = 0; id < m.params.size(); ++id) EXPECT_EQ(m.params.value(id).data(), m0.params.value(id).data());
}

// [DERIVED] a constant gradient makes the bias-corrected moments exactly g and g², so every step moves by −lr·g/(|g|+ε).
TEST(AdamW, ConstantGradientClosedForm) {
  ParamStore ps;
  const std::size_t id = ps.add("p", Partition::kGain, Matrix{{1.0, -2.0, 0.5}});
  const Matrix g{{0.3, -4.0, 1e-3}};
  AdamWConfig cfg;
  cfg.lr = 0.01;
  AdamW opt(ps, cfg);
  for (int i = 0; i < 200; ++i) opt.step(ps, {{static_cast<long>(id), g}});
  const Vector p0{1.0, -2.0, 0.5};
  for (std::size_t k = 0; k < 3; ++k) {
    const double gk = g.data()[k];
    EXPECT_NEAR(ps.value(id).data()[k], p0[k] - 200 * 0.01 * gk / (std::abs(gk) + 1e-8), 1e-9);
  }
}

// [DERIVED] with zero gradient, decay is (1 − lr·wd)^t on the parameters and the moments stay zero.
TEST(AdamW, DecoupledWeightDecay) {
  ParamStore ps;
  const std::size_t id = ps.add("p", Partition::kGain, Matrix{{2.0, -1.0}});
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  AdamW opt(ps, cfg);
  for (int i = 0; i < 50; ++i) opt.step(ps, {});
  const double f = std::pow(1.0 - 0.1 * 0.01, 50);
  EXPECT_NEAR(ps.value(id)(0, 0), 2.0 * f, 1e-14);
  EXPECT_NEAR(ps.value(id)(0, 1), -1.0 * f, 1e-14);
  for (double v : opt.first_moment(id).data()) EXPECT_EQ(v, 0.0);
  for (double v : opt.second_moment(id).data()) EXPECT_EQ(v, 0.0);
}

// [TRIVIAL] a frozen partition is bitwise unchanged after 100 steps.
TEST(AdamW, FrozenPartitionUntouched) {
  MnmefModel m = make_model(lorenz63_system(), small_config(false));
  m.params.set_frozen(Partition::kSetTransformer, true);
  const Vector before = m.params.flatten(Partition::kSetTransformer);
  const Vector head_before = m.params.flatten(Partition::kGain);
  Gradients g;
  RngStream rng(9, 0);
  for (std::size_t id = 0; id < m.params.size(); ++id)
    g[static_cast<long>(id)] = random_matrix(m.params.value(id).rows(), m.params.value(id).cols(), rng);
  AdamW opt(m.params, {1e-2, 0.9, 0.999, 1e-8, 0.1});
  for (int i = 0; i < 100; ++i) opt.step(m.params, g);
  EXPECT_EQ(m.params.flatten(Partition::kSetTransformer), before);
  EXPECT_NE(m.params.flatten(Partition::kGain), head_before);
}

// [TRIVIAL]
TEST(AdamW, RejectsMisshapenGradient) {
  ParamStore ps;
  ps.add("p", Partition::kGain, Matrix(2, 2));
  AdamW opt(ps);
  EXPECT_ERROR_KIND(opt.step(ps, {{0, Matrix(3, 1)}}), kShapeMismatch);
}

// [TRIVIAL] each epoch order is a permutation; orders differ across epochs.
TEST(EpochOrder, ShuffledPermutation) {
  const auto a = epoch_order(50, 7, 1), b = epoch_order(50, 7, 2);
  std::vector<std::size_t> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_NE(a, b);
  EXPECT_EQ(a, epoch_order(50, 7, 1));
}

// [TRIVIAL] 1 epoch, 1 batch, J=3, N=3 on Lorenz '63 completes with finite loss.
TEST(Pretrain, SmokeRun) {
  const SystemSpec spec = lorenz63_system();
  MnmefModel m = make_model(spec, small_config());
  TrainConfig cfg = tiny_train(1);
  cfg.members = 3;
  cfg.batch = 4;
  const auto log = pretrain(m, spec, l63_runs(4, 3), cfg);
  ASSERT_EQ(log.size(), 2u);
  EXPECT_EQ(log[0].epoch, 0u);
  for (const auto& e : log) EXPECT_TRUE(std::isfinite(e.train_loss));
}

// [TRIVIAL] fixed seed: identical loss curves, independent of the worker count.
TEST(Pretrain, DeterministicAcrossRunsAndWorkers) {
  const SystemSpec spec = lorenz63_system();
  const auto runs = l63_runs(8, 5);
  auto curve = [&](std::size_t workers) {
    MnmefModel m = make_model(spec, small_config());
    TrainConfig cfg = tiny_train(3);
    cfg.workers = workers;
    std::vector<double> out;
    for (const auto& e : pretrain(m, spec, runs, cfg)) out.push_back(e.train_loss);
    return std::make_pair(out, m.params.flatten(Partition::kGain));
  };
  const auto a = curve(1), b = curve(1), c = curve(3);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.first, c.first);
  EXPECT_EQ(a.second, c.second);
}

// [DERIVED] training-progress oracle: after 20 small epochs the loss is below epoch 0, averaged over 3 seeds.
TEST(Pretrain, LossDecreasesOnLorenz63) {
  const SystemSpec spec = lorenz63_system();
  std::vector<double> first, last;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    MnmefModel m = make_model(spec, small_config(true, seed));
    const auto log = pretrain(m, spec, l63_runs(16, 10, 100 + seed), tiny_train(20, seed));
    first.push_back(log.front().train_loss);
    last.push_back(evaluate_training_loss(m, spec, l63_runs(16, 10, 100 + seed), tiny_train(20, seed), 0, 5));
  }
  EXPECT_LT(mean_of(last), mean_of(first));
}

// [TRIVIAL] save → load reproduces forward outputs exactly.
TEST(Pretrain, CheckpointRoundTripKeepsOutputs) {
  const SystemSpec spec = lorenz63_system();
  MnmefModel m = make_model(spec, small_config());
  pretrain(m, spec, l63_runs(4, 4), tiny_train(2));
  const auto path = std::filesystem::temp_directory_path() / "mnmef_train_rt" / "m.ckpt";
  save_checkpoint(path, m);
  const MnmefModel back = load_checkpoint(path, spec).model;
  RngStream r1(10, 0), r2(10, 0);
  const Matrix e = initial_ensemble(Vector{1.0, 2.0, 20.0}, scaled_identity(3, 1.0), 6, r1);
  const Matrix e2 = initial_ensemble(Vector{1.0, 2.0, 20.0}, scaled_identity(3, 1.0), 6, r2);
  EXPECT_EQ(mnmef_step(m, spec, e, Vector{1.5}, r1).data(), mnmef_step(back, spec, e2, Vector{1.5}, r2).data());
  std::filesystem::remove_all(path.parent_path());
}

// [PAPER] half the trajectories, a tenth of the learning rate, 20 epochs, new N.
TEST(Finetune, DerivedConfig) {
  TrainConfig pre;
  pre.trajectories = 256;
  pre.lr = 1e-3;
  const TrainConfig ft = finetune_config(pre, 40);
  EXPECT_EQ(ft.trajectories, 128u);
  EXPECT_DOUBLE_EQ(ft.lr, 1e-4);
  EXPECT_EQ(ft.epochs, 20u);
  EXPECT_EQ(ft.members, 40u);
}

// [TRIVIAL] fine-tuning never touches θ_ST; the heads move; N' = 20 runs from an N = 10 model.
TEST(Finetune, FreezesEncoderAndChangesHeads) {
  const SystemSpec spec = lorenz63_system();
  MnmefModel m = make_model(spec, small_config());
  TrainConfig pre = tiny_train(2);
  pre.members = 10;
  pretrain(m, spec, l63_runs(8, 5), pre);
  const Vector st = m.params.flatten(Partition::kSetTransformer);
  const Vector gain = m.params.flatten(Partition::kGain);
  TrainConfig ft = finetune_config(pre, 20);
  ft.epochs = 2;
  const auto log = finetune(m, spec, l63_runs(4, 5, 9), ft);
  EXPECT_EQ(log.size(), 3u);
  EXPECT_EQ(m.params.flatten(Partition::kSetTransformer), st);
  EXPECT_NE(m.params.flatten(Partition::kGain), gain);
  EXPECT_FALSE(m.params.frozen(Partition::kSetTransformer));
}

// [DERIVED] regression guard: fine-tuning at N' = N does not raise the loss by more than 5%, seed-averaged.
TEST(Finetune, SameEnsembleSizeDoesNotDegrade) {
  const SystemSpec spec = lorenz63_system();
  std::vector<double> before, after;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    MnmefModel m = make_model(spec, small_config(true, seed));
    const auto runs = l63_runs(16, 10, 200 + seed);
    TrainConfig pre = tiny_train(10, seed);
    pretrain(m, spec, runs, pre);
    TrainConfig ft = finetune_config(pre, pre.members);
    ft.epochs = 5;
    const auto half = std::vector<TruthRun>(runs.begin(), runs.begin() + 8);
    const auto log = finetune(m, spec, half, ft);
    before.push_back(log.front().train_loss);
    after.push_back(evaluate_training_loss(m, spec, half, ft, 0, ft.members));
  }
  EXPECT_LE(mean_of(after), 1.05 * mean_of(before));
}

// [TRIVIAL] the CSV log has the documented header and one row per epoch.
TEST(TrainingLog, CsvLayout) {
  const auto path = std::filesystem::temp_directory_path() / "mnmef_log_test" / "log.csv";
  write_training_log(path, {{0, 0.5, 0.0}, {1, 0.25, 1.5}});
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "epoch,train_loss,wall_seconds");
  std::getline(is, line);
  EXPECT_EQ(line, "0,0.5,0");
  std::getline(is, line);
  EXPECT_EQ(line, "1,0.25,1.5");
  std::filesystem::remove_all(path.parent_path());
}
