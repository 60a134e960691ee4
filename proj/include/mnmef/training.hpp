#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mnmef/autodiff.hpp"
#include "mnmef/checkpoint.hpp"
#include "mnmef/dynamics.hpp"
#include "mnmef/filters.hpp"
#include "mnmef/mnmef.hpp"
#include "mnmef/nn.hpp"

namespace mnmef {

enum class LossKind { kNormalized, kUnnormalized };

inline constexpr double kDegenerateTruthNorm = 1e-8;

// ---------------------------------------------------------------------------
// Loss

/// (1/J) Σ_j |v̄_j - v†_j|² / |v†_j|², or without the denominator. `means` and
/// `truth` hold one state per row. A step whose truth norm is below 1e-8 uses
/// the unnormalized term; `degenerate_steps` counts those.
inline double trajectory_loss(const Matrix& means, const Matrix& truth, LossKind kind = LossKind::kNormalized,
                              std::size_t* degenerate_steps = nullptr) {
  require(means.rows() == truth.rows() && means.cols() == truth.cols(), ErrorKind::kDimMismatch,
          "trajectory_loss: shapes differ");
  require(means.rows() > 0, ErrorKind::kPrecondition, "trajectory_loss: empty trajectory");
  double total = 0.0;
  std::size_t degenerate = 0;
  for (std::size_t j = 0; j < means.rows(); ++j) {
    const double err = std::pow(norm2(sub(means.row(j), truth.row(j))), 2);
    const double tn = norm2(truth.row(j));
    if (kind == LossKind::kUnnormalized) {
      total += err;
    } else if (tn < kDegenerateTruthNorm) {
      ++degenerate;
      total += err;
    } else {
      total += err / (tn * tn);
    }
  }
  if (degenerate_steps) *degenerate_steps = degenerate;
  return total / static_cast<double>(means.rows());
}

/// One step's contribution |mean(E) - v†|² / (scale) as a graph node.
inline ad::Tensor step_loss(ad::Tensor ensemble, std::span<const double> truth, LossKind kind, double weight) {
  ad::Tape& t = *ensemble.tape;
  const ad::Tensor diff = ad::sub(ad::mean_rows(ensemble), t.constant(Matrix(1, truth.size(), Vector(truth.begin(), truth.end()))));
  double denom = 1.0;
  if (kind == LossKind::kNormalized) {
    const double tn = norm2(truth);
    if (tn >= kDegenerateTruthNorm) denom = tn * tn;
  }
  return ad::scale(ad::sum(ad::mul(diff, diff)), weight / denom);
}

// ---------------------------------------------------------------------------
// Gradients and optimizer

using Gradients = std::map<long, Matrix>;

inline void add_into(Gradients& acc, const Gradients& g, double scale = 1.0) {
  for (const auto& [id, m] : g) {
    auto it = acc.find(id);
    if (it == acc.end()) {
      it = acc.emplace(id, Matrix(m.rows(), m.cols())).first;
    }
    double* a = it->second.data().data();
    const double* b = m.data().data();
    for (std::size_t k = 0; k < m.size(); ++k) a[k] += scale * b[k];
  }
}

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Moments per parameter and the step count. Weight decay multiplies the
/// parameters directly and never enters the moments.
class AdamW {
 public:
  explicit AdamW(const ParamStore& ps, AdamWConfig cfg = {}) : cfg_(cfg) {
    m_.reserve(ps.size());
    v_.reserve(ps.size());
    for (const auto& e : ps.entries()) {
      m_.emplace_back(e.value.rows(), e.value.cols());
      v_.emplace_back(e.value.rows(), e.value.cols());
    }
  }

  AdamWConfig& config() { return cfg_; }
  std::size_t steps() const noexcept { return t_; }
  const Matrix& first_moment(std::size_t id) const { return m_.at(id); }
  const Matrix& second_moment(std::size_t id) const { return v_.at(id); }

  /// Updates every trainable parameter; ids absent from `grads` see a zero gradient.
  void step(ParamStore& ps, const Gradients& grads) {
    require(ps.size() == m_.size(), ErrorKind::kShapeMismatch, "optimizer built for another parameter set");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t id = 0; id < ps.size(); ++id) {
      if (!ps.trainable(id)) continue;
      Matrix& p = ps.value(id);
      const auto it = grads.find(static_cast<long>(id));
      if (it != grads.end())
        require(it->second.rows() == p.rows() && it->second.cols() == p.cols(), ErrorKind::kShapeMismatch,
                "gradient shape differs from parameter " + ps.entry(id).name);
      const double* g = it != grads.end() ? it->second.data().data() : nullptr;
      double* pv = p.data().data();
      double* mv = m_[id].data().data();
      double* vv = v_[id].data().data();
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g ? g[k] : 0.0;
        pv[k] *= 1.0 - cfg_.lr * cfg_.weight_decay;
        mv[k] = cfg_.beta1 * mv[k] + (1.0 - cfg_.beta1) * gk;
        vv[k] = cfg_.beta2 * vv[k] + (1.0 - cfg_.beta2) * gk * gk;
        pv[k] -= cfg_.lr * (mv[k] / bc1) / (std::sqrt(vv[k] / bc2) + cfg_.eps);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<Matrix> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Unrolled filtering loss

struct TrainConfig {
  std::size_t trajectories = 256;  // M
  std::size_t steps = 30;          // J
  std::size_t members = 10;        // N
  std::size_t epochs = 50;
  std::size_t batch = 32;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::size_t detach_horizon = 5;  // J0
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  LossKind loss = LossKind::kNormalized;
  double init_cov = 1.0;  // C0 = init_cov * I
};

/// Noise for trajectory `index` in epoch `epoch` comes from its own stream.
inline RngStream training_stream(std::uint64_t seed, std::size_t epoch, std::size_t index) {
  return RngStream(splitmix64(seed ^ splitmix64(0x7a11u + epoch)), index);
}

struct UnrollResult {
  double loss = 0.0;
  Gradients grads;
  Matrix means;  // J x d_v analysis means
};

/// Filters one trajectory with the learned step and accumulates the loss.
/// Gradients flow through windows of `detach_horizon` steps; the ensemble
/// entering each window carries its value but no gradient history.
inline UnrollResult truncated_unroll(const MnmefModel& model, const SystemSpec& spec, const TruthRun& run,
                                     std::size_t members, std::size_t detach_horizon, RngStream& rng,
                                     bool with_grad, LossKind kind = LossKind::kNormalized,
                                     const StepOptions& opt = {}, double init_cov = 1.0) {
  require(detach_horizon >= 1, ErrorKind::kPrecondition, "detach horizon must be >= 1");
  const std::size_t steps = run.length();
  const double weight = 1.0 / static_cast<double>(steps);
  UnrollResult res;
  res.means = Matrix(steps, spec.state_dim);
  StateEnsemble e =
      initial_ensemble(run.states.row(0), scaled_identity(spec.state_dim, init_cov), members, rng);
  for (std::size_t start = 0; start < steps; start += detach_horizon) {
    const std::size_t stop = std::min(steps, start + detach_horizon);
    ad::Tape tape(with_grad);
    ParamBinder pb(tape, model.params);
    ad::Tensor x = tape.constant(e);
    std::optional<ad::Tensor> window_loss;
    for (std::size_t j = start; j < stop; ++j) {
      const StepNoise noise = draw_step_noise(spec, members, rng);
      try {
        x = mnmef_step(pb, model, spec, x, run.observations.row(j), noise, opt);
      } catch (const Error& err) {
        if (err.kind() == ErrorKind::kNonFinite) fail(ErrorKind::kDivergence, err.what());
        throw;
      }
      const Vector m = ensemble_mean(x.value());
      std::copy(m.begin(), m.end(), res.means.row(j).begin());
      const ad::Tensor term = step_loss(x, run.states.row(j + 1), kind, weight);
      res.loss += term.value()(0, 0);
      window_loss = window_loss ? ad::add(*window_loss, term) : term;
    }
    e = x.value();
    if (with_grad) add_into(res.grads, tape.backward(*window_loss));
  }
  if (!std::isfinite(res.loss)) fail(ErrorKind::kDivergence, "training loss is not finite");
  return res;
}

// ---------------------------------------------------------------------------
// Training loops

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double wall_seconds = 0.0;
};

/// Runs fn(i) for i in [0, n) on `workers` threads; every i is handled exactly once.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Mean loss of the current parameters over `runs` without updating anything.
inline double evaluate_training_loss(const MnmefModel& model, const SystemSpec& spec,
                                     const std::vector<TruthRun>& runs, const TrainConfig& cfg, std::size_t epoch,
                                     std::size_t members) {
  std::vector<double> losses(runs.size());
  parallel_for(runs.size(), cfg.workers, [&](std::size_t i) {
    RngStream rng = training_stream(cfg.seed, epoch, i);
    losses[i] = truncated_unroll(model, spec, runs[i], members, cfg.detach_horizon, rng, false, cfg.loss, {},
                                 cfg.init_cov)
                    .loss;
  });
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(runs.size());
}

/// Shuffled trajectory order for one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  RngStream rng(splitmix64(seed ^ 0xba7c4u), epoch);
  for (std::size_t i = count; i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_int(0, i - 1)]);
  return idx;
}

using EpochCallback = std::function<void(const EpochLog&, const MnmefModel&)>;

/// Mini-batch AdamW over the trajectories. Epoch 0 records the loss of the
/// starting parameters; epochs 1..E report the mean batch loss seen while
/// training. Each batch gradient is the mean of per-trajectory gradients,
/// reduced in trajectory order.
inline std::vector<EpochLog> train(MnmefModel& model, const SystemSpec& spec, const std::vector<TruthRun>& runs,
                                   const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  require(!runs.empty(), ErrorKind::kPrecondition, "no training trajectories");
  require(cfg.batch >= 1 && cfg.members >= 2, ErrorKind::kConfig, "batch size and ensemble size");
  std::vector<EpochLog> log;
  const auto clock_start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  };
  log.push_back({0, evaluate_training_loss(model, spec, runs, cfg, 0, cfg.members), elapsed()});
  if (on_epoch) on_epoch(log.back(), model);

  AdamW opt(model.params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(runs.size(), cfg.seed, epoch);
    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
      std::vector<UnrollResult> results(b1 - b0);
      parallel_for(results.size(), cfg.workers, [&](std::size_t k) {
        const std::size_t idx = order[b0 + k];
        RngStream rng = training_stream(cfg.seed, epoch, idx);
        results[k] = truncated_unroll(model, spec, runs[idx], cfg.members, cfg.detach_horizon, rng, true, cfg.loss,
                                      {}, cfg.init_cov);
      });
      Gradients batch_grad;
      const double inv = 1.0 / static_cast<double>(results.size());
      for (const auto& r : results) {
        epoch_loss += r.loss;
        add_into(batch_grad, r.grads, inv);
      }
      opt.step(model.params, batch_grad);
    }
    log.push_back({epoch, epoch_loss / static_cast<double>(runs.size()), elapsed()});
    if (!std::isfinite(log.back().train_loss)) fail(ErrorKind::kDivergence, "training loss is not finite");
    if (on_epoch) on_epoch(log.back(), model);
  }
  return log;
}

/// Pretraining: every partition is trainable.
inline std::vector<EpochLog> pretrain(MnmefModel& model, const SystemSpec& spec, const std::vector<TruthRun>& runs,
                                      const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  for (std::size_t p = 0; p < kPartitionCount; ++p) model.params.set_frozen(static_cast<Partition>(p), false);
  return train(model, spec, runs, cfg, on_epoch);
}

/// Fine-tuning defaults derived from a pretraining setup: half the
/// trajectories, a tenth of the learning rate, 20 epochs, new ensemble size.
inline TrainConfig finetune_config(const TrainConfig& pre, std::size_t members) {
  TrainConfig ft = pre;
  ft.members = members;
  ft.trajectories = std::max<std::size_t>(1, pre.trajectories / 2);
  ft.lr = pre.lr / 10.0;
  ft.epochs = 20;
  return ft;
}

/// Trains only the gain, inflation and localization heads; the encoder is frozen.
inline std::vector<EpochLog> finetune(MnmefModel& model, const SystemSpec& spec, const std::vector<TruthRun>& runs,
                                      const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  model.params.set_frozen(Partition::kSetTransformer, true);
  for (Partition p : {Partition::kGain, Partition::kInflation, Partition::kLocalization})
    model.params.set_frozen(p, false);
  auto log = train(model, spec, runs, cfg, on_epoch);
  model.params.set_frozen(Partition::kSetTransformer, false);
  return log;
}

inline void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorKind::kData, "cannot write " + path.string());
  os << "epoch,train_loss,wall_seconds\n";
  for (const auto& e : log)
    os << e.epoch << "," << binio::format_number(e.train_loss) << "," << binio::format_number(e.wall_seconds) << "\n";
}

}  // namespace mnmef
