// Runs the desk-scale acceptance criteria and prints one PASS/FAIL line per
// criterion. Exit status is 0 only when every selected criterion passes.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "mnmef/checkpoint.hpp"
#include "mnmef/dynamics.hpp"
#include "mnmef/eval.hpp"
#include "mnmef/mnmef.hpp"
#include "mnmef/training.hpp"
#include "mnmef/verify.hpp"

namespace fs = std::filesystem;
using namespace mnmef;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string num(double v) { return csv::number(v); }

struct Desk {
  std::size_t workers = 1;
  fs::path artifacts;

  const SystemSpec l63 = lorenz63_system({1.0, 0.0});
  static constexpr std::size_t kSeeds = 3;
  static constexpr std::size_t kTestTrajectories = 16;
  static constexpr std::size_t kTestSteps = 100;
  static constexpr std::uint64_t kEvalSeed = 7001;

  TrainConfig train_config(std::uint64_t seed) const {
    TrainConfig tc;  // M=256, J=30, N=10, 50 epochs
    tc.seed = seed;
    tc.workers = workers;
    return tc;
  }

  const std::vector<TruthRun>& train_runs(std::uint64_t seed) {
    auto& slot = train_cache_[seed];
    if (slot.empty()) slot = generate_dataset(l63, 256, 30, 1000 + seed, BurnIn::fixed(10000));
    return slot;
  }

  const std::vector<TruthRun>& test_runs() {
    if (test_.empty()) test_ = generate_dataset(l63, kTestTrajectories, kTestSteps, 9000, BurnIn::fixed(10000));
    return test_;
  }

  /// Pretrains (or reloads) the seed-s Lorenz '63 model; returns the
  /// epoch-0 loss and the loss of the trained parameters on the same noise.
  std::pair<double, double> pretrained(std::uint64_t seed, MnmefModel* out = nullptr) {
    const fs::path ckpt = artifacts / ("l63_seed" + std::to_string(seed) + ".ckpt");
    const TrainConfig tc = train_config(seed);
    const auto& runs = train_runs(seed);
    MnmefModel model;
    double before = 0.0;
    if (fs::exists(ckpt)) {
      LoadedCheckpoint lc = load_checkpoint(ckpt, l63);
      before = std::stod(lc.meta.extra.at("epoch0_loss"));
      model = std::move(lc.model);
    } else {
      ModelConfig mc;
      mc.init_seed = seed;
      model = make_model(l63, mc);
      const auto log = pretrain(model, l63, runs, tc, [seed](const EpochLog& e, const MnmefModel&) {
        if (e.epoch % 10 == 0)
          std::fprintf(stderr, "  seed %zu epoch %zu loss %s (%.0fs)\n", static_cast<std::size_t>(seed), e.epoch,
                       num(e.train_loss).c_str(), e.wall_seconds);
      });
      before = log.front().train_loss;
      CheckpointMeta meta;
      meta.detach_horizon = tc.detach_horizon;
      meta.extra["epoch0_loss"] = num(before);
      save_checkpoint(ckpt, model, meta);
    }
    const double after = evaluate_training_loss(model, l63, runs, tc, 0, tc.members);
    if (out) *out = std::move(model);
    return {before, after};
  }

  const MnmefModel& model0() {
    if (!model0_) {
      MnmefModel m;
      pretrained(0, &m);
      model0_ = std::move(m);
    }
    return *model0_;
  }

  MetricReport evaluate(const MnmefModel& m, std::size_t members, bool zero_inflation = false) {
    FilterSettings fs;
    fs.method = Method::kMnmef;
    fs.members = members;
    fs.model = &m;
    fs.step_options.zero_inflation = zero_inflation;
    return evaluate_filter(l63, test_runs(), fs, kEvalSeed, workers);
  }

 private:
  std::map<std::uint64_t, std::vector<TruthRun>> train_cache_;
  std::vector<TruthRun> test_;
  std::optional<MnmefModel> model0_;
};

Outcome from_check(const verify::CheckResult& r) {
  return {r.passed, r.detail + " (value " + num(r.value) + ", bound " + num(r.threshold) + ")"};
}

Outcome enkf_reduction(Desk&) { return from_check(verify::enkf_reduction_check(50)); }

Outcome permutation(Desk&) { return from_check(verify::permutation_check({2, 5, 16, 33})); }

Outcome variable_ensemble(Desk& d) {
  const MnmefModel& m = d.model0();
  std::string detail;
  bool ok = true;
  for (std::size_t n : {5, 15, 20, 40, 60, 100}) {
    try {
      const MetricReport rep = d.evaluate(m, n);
      detail += "N=" + std::to_string(n) + ":" + num(rep.mean) + " ";
    } catch (const Error& e) {
      ok = false;
      detail += "N=" + std::to_string(n) + ":" + std::string(to_string(e.kind())) + " ";
    }
  }
  return {ok, detail};
}

Outcome gradients(Desk&) {
  const auto prim = verify::primitive_gradient_check(20);
  const auto e2e = verify::end_to_end_gradient_check();
  return {prim.passed && e2e.passed, "primitives " + num(prim.value) + " < 1e-5 (" + prim.detail +
                                         "), end-to-end " + num(e2e.value) + " < 1e-4"};
}

Outcome kalman(Desk& d) { return from_check(verify::kalman_consistency_check(1024, 2, 100, 2.0, 505, d.workers)); }

Outcome training_progress(Desk& d) {
  double sum = 0.0;
  std::string detail;
  for (std::uint64_t s = 0; s < Desk::kSeeds; ++s) {
    const auto [before, after] = d.pretrained(s);
    const double red = 1.0 - after / before;
    sum += red;
    detail += "seed" + std::to_string(s) + " " + num(before) + "->" + num(after) + " ";
  }
  const double mean = sum / static_cast<double>(Desk::kSeeds);
  return {mean >= 0.3, detail + "mean reduction " + num(mean) + " (need >= 0.3)"};
}

Outcome competitiveness(Desk& d) {
  FilterSettings base;
  base.method = Method::kEnkf;
  base.members = 10;
  const GridResult g =
      grid_search(d.l63, d.test_runs(), base, {1.0, 1.05, 1.1, 1.15, 1.2}, {kNoLocalization}, Desk::kEvalSeed, d.workers);
  const MetricReport ours = d.evaluate(d.model0(), 10);
  const bool ok = std::isfinite(ours.mean) && ours.mean <= 1.1 * g.best.mean;
  return {ok, "mnmef " + num(ours.mean) + " vs tuned enkf " + num(g.best.mean) + " (alpha " + num(g.best.alpha) +
                  "), ratio " + num(ours.mean / g.best.mean) + " (need <= 1.1)"};
}

Outcome finetune_contract(Desk& d) {
  const MnmefModel& pre = d.model0();
  MnmefModel ft = pre;
  const TrainConfig cfg = finetune_config(d.train_config(0), 40);
  const auto& all = d.train_runs(0);
  const std::vector<TruthRun> runs(all.begin(), all.begin() + static_cast<long>(cfg.trajectories));
  finetune(ft, d.l63, runs, cfg);

  bool st_same = true, heads_changed = false;
  for (std::size_t id = 0; id < pre.params.size(); ++id) {
    const bool same = pre.params.value(id).data() == ft.params.value(id).data();
    if (pre.params.entry(id).partition == Partition::kSetTransformer)
      st_same = st_same && same;
    else
      heads_changed = heads_changed || !same;
  }
  const double before = d.evaluate(pre, 40).mean;
  const double after = d.evaluate(ft, 40).mean;
  const bool ok = st_same && heads_changed && std::isfinite(after) && after <= 1.05 * before;
  return {ok, std::string("encoder ") + (st_same ? "unchanged" : "CHANGED") + ", heads " +
                  (heads_changed ? "updated" : "UNCHANGED") + ", N'=40 pretrained " + num(before) + " finetuned " +
                  num(after) + " (need <= 1.05x)"};
}

Outcome localization_table(Desk&) { return from_check(verify::distance_table_check()); }

Outcome baseline_sanity(Desk& d) {
  const SystemSpec l96 = lorenz96_system({1.0, 0.0});
  const auto runs = generate_dataset(l96, Desk::kTestTrajectories, Desk::kTestSteps, 9100, BurnIn::fixed(10000));
  FilterSettings letkf;
  letkf.method = Method::kLetkf;
  letkf.members = 10;
  const GridResult g =
      grid_search(l96, runs, letkf, {1.0, 1.05, 1.1, 1.15, 1.2}, {1, 2, 3, 4}, Desk::kEvalSeed, d.workers);
  FilterSettings enkf;
  enkf.method = Method::kEnkf;
  enkf.members = 10;
  const MetricReport plain = evaluate_filter(l96, runs, enkf, Desk::kEvalSeed, d.workers);
  // A diverged untuned EnKF counts as worse than any finite score.
  const bool ok = !std::isfinite(plain.mean) || g.best.mean < plain.mean;
  double finite_sum = 0.0;
  std::size_t finite = 0;
  for (double v : plain.values)
    if (std::isfinite(v)) {
      finite_sum += v;
      ++finite;
    }
  return {ok, "tuned letkf " + num(g.best.mean) + " (alpha " + num(g.best.alpha) + ", r " + num(g.best.radius) +
                  ") vs enkf " + num(plain.mean) + " (" + std::to_string(plain.diverged) +
                  " diverged, mean over the rest " + num(finite ? finite_sum / finite : plain.mean) + ")"};
}

Outcome inflation_ablation(Desk& d) {
  const MetricReport full = d.evaluate(d.model0(), 10);
  const MetricReport ablated = d.evaluate(d.model0(), 10, true);
  const bool ok = ablated.diverged == 0 && std::isfinite(ablated.mean) && ablated.mean > full.mean;
  return {ok, "with inflation " + num(full.mean) + ", without " + num(ablated.mean) + " (" +
                  std::to_string(ablated.diverged) + " of " + std::to_string(ablated.values.size()) + " diverged)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale acceptance run"};
  Desk desk;
  desk.workers = std::max(1u, std::thread::hardware_concurrency());
  std::string artifacts = (fs::temp_directory_path() / "mnmef_acceptance").string();
  std::vector<int> only;
  bool fresh = false;
  app.add_option("--workers", desk.workers, "threads for training and evaluation");
  app.add_option("--artifacts", artifacts, "directory for trained checkpoints");
  app.add_option("--only", only, "criterion numbers to run (default: all)")->delimiter(',');
  app.add_flag("--fresh", fresh, "retrain even if checkpoints exist");
  CLI11_PARSE(app, argc, argv);
  desk.artifacts = artifacts;
  if (fresh) fs::remove_all(desk.artifacts);
  fs::create_directories(desk.artifacts);

  const std::vector<std::pair<std::string, std::function<Outcome(Desk&)>>> criteria = {
      {"enkf reduction", enkf_reduction},
      {"permutation invariance", permutation},
      {"variable ensemble size", variable_ensemble},
      {"gradient correctness", gradients},
      {"kalman consistency", kalman},
      {"training progress", training_progress},
      {"desk competitiveness", competitiveness},
      {"fine-tuning contract", finetune_contract},
      {"localization table", localization_table},
      {"baseline sanity", baseline_sanity},
      {"inflation ablation", inflation_ablation},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(number)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second(desk);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s  %2d %-24s %s [%.0fs]\n", o.passed ? "PASS" : "FAIL", number, criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.passed) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
