#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mnmef/autodiff.hpp"
#include "mnmef/error.hpp"
#include "mnmef/numerics.hpp"

namespace mnmef {

enum class Partition : std::size_t { kSetTransformer = 0, kGain = 1, kInflation = 2, kLocalization = 3 };
inline constexpr std::size_t kPartitionCount = 4;

inline std::string partition_name(Partition p) {
  switch (p) {
    case Partition::kSetTransformer: return "st";
    case Partition::kGain: return "gain";
    case Partition::kInflation: return "infl";
    case Partition::kLocalization: return "loc";
  }
  return "unknown";
}

struct ParamEntry {
  std::string name;
  Partition partition;
  Matrix value;
};

/// Named trainable arrays grouped into the four partitions, each with a freeze flag.
class ParamStore {
 public:
  std::size_t add(std::string name, Partition p, Matrix value) {
    for (const auto& e : entries_)
      require(e.name != name, ErrorKind::kPrecondition, "duplicate parameter name " + name);
    entries_.push_back({std::move(name), p, std::move(value)});
    return entries_.size() - 1;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  const ParamEntry& entry(std::size_t id) const { return entries_.at(id); }
  Matrix& value(std::size_t id) { return entries_.at(id).value; }
  const Matrix& value(std::size_t id) const { return entries_.at(id).value; }
  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }

  bool frozen(Partition p) const { return frozen_[static_cast<std::size_t>(p)]; }
  void set_frozen(Partition p, bool f) { frozen_[static_cast<std::size_t>(p)] = f; }
  bool trainable(std::size_t id) const { return !frozen(entries_.at(id).partition); }

  /// Number of scalars in a partition.
  std::size_t partition_size(Partition p) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.partition == p) n += e.value.size();
    return n;
  }
  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// Concatenated values of one partition, in registration order.
  Vector flatten(Partition p) const {
    Vector out;
    for (const auto& e : entries_)
      if (e.partition == p) out.insert(out.end(), e.value.data().begin(), e.value.data().end());
    return out;
  }

 private:
  std::vector<ParamEntry> entries_;
  std::array<bool, kPartitionCount> frozen_{};
};

/// Places parameters on a tape on first use. Frozen partitions enter as
/// constants, so no gradient work is spent on them.
class ParamBinder {
 public:
  ParamBinder(ad::Tape& tape, const ParamStore& store) : tape_(tape), store_(store), bound_(store.size()) {}

  ad::Tape& tape() { return tape_; }
  const ParamStore& store() const { return store_; }

  ad::Tensor operator()(std::size_t id) {
    if (!bound_[id]) {
      const Matrix& v = store_.value(id);
      bound_[id] = store_.trainable(id) ? tape_.parameter(v, static_cast<long>(id)) : tape_.constant(v);
    }
    return *bound_[id];
  }

 private:
  ad::Tape& tape_;
  const ParamStore& store_;
  std::vector<std::optional<ad::Tensor>> bound_;
};

enum class Activation { kRelu, kLogistic };

inline std::string activation_name(Activation a) { return a == Activation::kRelu ? "relu" : "logistic"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "logistic") return Activation::kLogistic;
  fail(ErrorKind::kConfig, "unknown activation '" + s + "'");
}

inline ad::Tensor activate(ad::Tensor x, Activation a) {
  return a == Activation::kRelu ? ad::relu(x) : ad::logistic(x);
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, the usual dense-layer default.
inline Matrix kaiming_uniform(std::size_t fan_in, std::size_t fan_out, RngStream& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix w(fan_in, fan_out);
  for (double& v : w.data()) v = rng.uniform(-bound, bound);
  return w;
}

/// Affine map x W + b with W stored fan_in x fan_out.
struct LinearLayer {
  std::size_t weight = 0;
  std::size_t bias = 0;
  std::size_t in = 0;
  std::size_t out = 0;
};

inline LinearLayer make_linear(ParamStore& ps, const std::string& name, Partition p, std::size_t in,
                               std::size_t out, RngStream& rng, bool zero_weights = false) {
  LinearLayer l;
  l.in = in;
  l.out = out;
  l.weight = ps.add(name + ".w", p, zero_weights ? Matrix(in, out) : kaiming_uniform(in, out, rng));
  l.bias = ps.add(name + ".b", p, Matrix(1, out));
  return l;
}

inline ad::Tensor apply(ParamBinder& pb, const LinearLayer& l, ad::Tensor x) {
  require(x.cols() == l.in, ErrorKind::kShapeMismatch,
          "linear layer expects " + std::to_string(l.in) + " inputs, got " + std::to_string(x.cols()));
  return ad::add_row(ad::matmul(x, pb(l.weight)), pb(l.bias));
}

/// Perceptron with the activation between layers and a linear final layer.
struct Mlp {
  std::vector<LinearLayer> layers;
  Activation activation = Activation::kRelu;

  std::size_t in() const { return layers.front().in; }
  std::size_t out() const { return layers.back().out; }
};

/// widths = {in, hidden..., out}. `zero_output` starts the final layer at zero.
inline Mlp make_mlp(ParamStore& ps, const std::string& name, Partition p, const std::vector<std::size_t>& widths,
                    Activation act, RngStream& rng, bool zero_output = false) {
  require(widths.size() >= 2, ErrorKind::kPrecondition, "mlp needs at least input and output widths");
  Mlp m;
  m.activation = act;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    m.layers.push_back(make_linear(ps, name + "." + std::to_string(i), p, widths[i], widths[i + 1], rng,
                                   last && zero_output));
  }
  return m;
}

inline ad::Tensor apply(ParamBinder& pb, const Mlp& m, ad::Tensor x) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    x = apply(pb, m.layers[i], x);
    if (i + 1 < m.layers.size()) x = activate(x, m.activation);
  }
  return x;
}

struct LayerNormParams {
  std::size_t gamma = 0;
  std::size_t beta = 0;
};

inline LayerNormParams make_layer_norm(ParamStore& ps, const std::string& name, Partition p, std::size_t width) {
  return {ps.add(name + ".gamma", p, Matrix(1, width, 1.0)), ps.add(name + ".beta", p, Matrix(1, width))};
}

inline ad::Tensor apply(ParamBinder& pb, const LayerNormParams& ln, ad::Tensor x, double eps) {
  return ad::layer_norm_rows(x, pb(ln.gamma), pb(ln.beta), eps);
}

}  // namespace mnmef
