#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mnmef/error.hpp"
#include "mnmef/numerics.hpp"

namespace mnmef::ad {

class Tape;

/// Handle to a node on a tape. Values live on the tape; a handle is cheap to copy.
struct Tensor {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
};

using Backward = std::function<void(Tape&, const Matrix& grad_out)>;

struct Node {
  Matrix value;
  Matrix grad;  // allocated on first accumulation
  Backward backward;
  bool requires_grad = false;
  long param_id = -1;
};

/// Append-only record of operations. Nodes are created in topological order,
/// so backward is a single reverse sweep. With recording disabled the tape only
/// stores values, which is what inference uses.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Tensor constant(Matrix v) {
    nodes_.push_back(Node{std::move(v), {}, {}, false, -1});
    return {this, nodes_.size() - 1};
  }

  /// Trainable leaf; its gradient is reported under `param_id` by backward().
  Tensor parameter(const Matrix& v, long param_id) {
    nodes_.push_back(Node{v, {}, {}, recording_, param_id});
    return {this, nodes_.size() - 1};
  }

  Tensor push(Matrix v, std::initializer_list<Tensor> inputs, Backward bw) {
    bool rg = false;
    if (recording_)
      for (const Tensor& t : inputs) rg = rg || nodes_[t.id].requires_grad;
    return push_flag(std::move(v), rg, std::move(bw));
  }

  Tensor push_flag(Matrix v, bool rg, Backward bw) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = rg && recording_;
    if (n.requires_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }

  /// grad(id) += delta, skipped for nodes that do not need gradients.
  void accumulate(std::size_t id, const Matrix& delta) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = delta;
      return;
    }
    double* g = n.grad.data().data();
    const double* d = delta.data().data();
    for (std::size_t i = 0, e = delta.size(); i < e; ++i) g[i] += d[i];
  }

  template <typename F>
  void accumulate_with(std::size_t id, F&& fill) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    fill(n.grad);
  }

  /// Reverse sweep from a 1x1 loss; returns gradients keyed by parameter id,
  /// summed over every leaf that shares an id.
  std::map<long, Matrix> backward(Tensor loss) {
    require(loss.tape == this, ErrorKind::kPrecondition, "loss belongs to another tape");
    const Matrix& lv = nodes_[loss.id].value;
    require(lv.rows() == 1 && lv.cols() == 1, ErrorKind::kNotScalar, "backward needs a scalar loss");
    std::map<long, Matrix> out;
    if (!nodes_[loss.id].requires_grad) return out;
    nodes_[loss.id].grad = Matrix(1, 1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param_id >= 0) {
        auto it = out.find(n.param_id);
        if (it == out.end()) {
          out.emplace(n.param_id, n.grad);
        } else {
          for (std::size_t k = 0; k < n.grad.size(); ++k) it->second.data()[k] += n.grad.data()[k];
        }
      }
    }
    return out;
  }

 private:
  bool recording_;
  std::vector<Node> nodes_;
};

inline const Matrix& Tensor::value() const { return tape->value(id); }
inline bool Tensor::requires_grad() const { return tape->requires_grad(id); }

namespace detail {

inline void check_same_tape(const Tensor& a, const Tensor& b) {
  require(a.tape == b.tape && a.tape != nullptr, ErrorKind::kPrecondition, "tensors on different tapes");
}

inline void check_shape(bool ok, const std::string& what) { require(ok, ErrorKind::kShapeMismatch, what); }

inline Matrix transpose_of(const Matrix& a) { return transpose(a); }

/// a^T b without forming the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  Matrix c(a.cols(), b.cols());
  if (a.rows() == 0) return c;
  as_eigen(c).noalias() = as_eigen(a).transpose() * as_eigen(b);
  return c;
}

/// a b^T without forming the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.rows());
  if (a.cols() == 0) return c;
  as_eigen(c).noalias() = as_eigen(a) * as_eigen(b).transpose();
  return c;
}

template <typename F>
Matrix map(const Matrix& a, F&& f) {
  Matrix out(a.rows(), a.cols());
  const double* x = a.data().data();
  double* y = out.data().data();
  for (std::size_t i = 0, e = a.size(); i < e; ++i) y[i] = f(x[i]);
  return out;
}

}  // namespace detail

/// Same value, cut from the graph.
inline Tensor detach(Tensor a) { return a.tape->constant(a.value()); }

inline Tensor matmul(Tensor a, Tensor b) {
  detail::check_same_tape(a, b);
  detail::check_shape(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix v = mnmef::matmul(a.value(), b.value());
  return a.tape->push(std::move(v), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a.id)) t.accumulate(a.id, detail::matmul_nt(g, t.value(b.id)));
    if (t.requires_grad(b.id)) t.accumulate(b.id, detail::matmul_tn(t.value(a.id), g));
  });
}

/// a^T b, fused.
inline Tensor matmul_tn(Tensor a, Tensor b) {
  detail::check_same_tape(a, b);
  detail::check_shape(a.rows() == b.rows(), "matmul_tn: row counts differ");
  Matrix v = detail::matmul_tn(a.value(), b.value());
  return a.tape->push(std::move(v), {a, b}, [a, b](Tape& t, const Matrix& g) {
    // C = AᵀB: dA = B Gᵀ, dB = A G
    if (t.requires_grad(a.id)) t.accumulate(a.id, detail::matmul_nt(t.value(b.id), g));
    if (t.requires_grad(b.id)) t.accumulate(b.id, mnmef::matmul(t.value(a.id), g));
  });
}

inline Tensor transpose(Tensor a) {
  return a.tape->push(mnmef::transpose(a.value()), {a},
                      [a](Tape& t, const Matrix& g) { t.accumulate(a.id, mnmef::transpose(g)); });
}

inline Tensor add(Tensor a, Tensor b) {
  detail::check_same_tape(a, b);
  detail::check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add: shapes differ");
  return a.tape->push(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

inline Tensor sub(Tensor a, Tensor b) {
  detail::check_same_tape(a, b);
  detail::check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shapes differ");
  return a.tape->push(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    if (t.requires_grad(b.id)) t.accumulate(b.id, -1.0 * g);
  });
}

/// Elementwise product.
inline Tensor mul(Tensor a, Tensor b) {
  detail::check_same_tape(a, b);
  detail::check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shapes differ");
  return a.tape->push(hadamard(a.value(), b.value()), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a.id)) t.accumulate(a.id, hadamard(g, t.value(b.id)));
    if (t.requires_grad(b.id)) t.accumulate(b.id, hadamard(g, t.value(a.id)));
  });
}

inline Tensor scale(Tensor a, double s) {
  return a.tape->push(s * a.value(), {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a.id, s * g); });
}

/// x + r with the 1 x c row r broadcast over every row of x.
inline Tensor add_row(Tensor x, Tensor r) {
  detail::check_same_tape(x, r);
  detail::check_shape(r.rows() == 1 && r.cols() == x.cols(), "add_row: row shape");
  Matrix v = x.value();
  const Matrix& rv = r.value();
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = 0; j < v.cols(); ++j) v(i, j) += rv(0, j);
  return x.tape->push(std::move(v), {x, r}, [x, r](Tape& t, const Matrix& g) {
    t.accumulate(x.id, g);
    t.accumulate_with(r.id, [&](Matrix& gr) {
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
    });
  });
}

/// x - r with the 1 x c row r broadcast over every row of x.
inline Tensor sub_row(Tensor x, Tensor r) { return add_row(x, scale(r, -1.0)); }

/// Stacks n copies of the 1 x c row r.
inline Tensor repeat_rows(Tensor r, std::size_t n) {
  detail::check_shape(r.rows() == 1, "repeat_rows: input must be a row");
  Matrix v(n, r.cols());
  for (std::size_t i = 0; i < n; ++i) std::copy(r.value().data().begin(), r.value().data().end(), v.row(i).begin());
  return r.tape->push(std::move(v), {r}, [r](Tape& t, const Matrix& g) {
    t.accumulate_with(r.id, [&](Matrix& gr) {
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
    });
  });
}

/// Column means: n x c -> 1 x c.
inline Tensor mean_rows(Tensor x) {
  const Matrix& xv = x.value();
  detail::check_shape(xv.rows() > 0, "mean_rows: empty input");
  Matrix v(1, xv.cols());
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j) v(0, j) += xv(i, j);
  const double inv = 1.0 / static_cast<double>(xv.rows());
  for (double& e : v.data()) e *= inv;
  return x.tape->push(std::move(v), {x}, [x, inv](Tape& t, const Matrix& g) {
    t.accumulate_with(x.id, [&](Matrix& gx) {
      for (std::size_t i = 0; i < gx.rows(); ++i)
        for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) += g(0, j) * inv;
    });
  });
}

/// Sum of all entries as a 1 x 1 tensor.
inline Tensor sum(Tensor x) {
  double s = 0.0;
  for (double e : x.value().data()) s += e;
  return x.tape->push(Matrix(1, 1, s), {x}, [x](Tape& t, const Matrix& g) {
    const double gv = g(0, 0);
    t.accumulate_with(x.id, [&](Matrix& gx) {
      for (double& e : gx.data()) e += gv;
    });
  });
}

/// Horizontal concatenation of tensors with equal row counts.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), ErrorKind::kShapeMismatch, "concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    detail::check_same_tape(parts.front(), p);
    detail::check_shape(p.rows() == r, "concat_cols: row counts differ");
    c += p.cols();
    rg = rg || p.requires_grad();
  }
  Matrix v(r, c);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const Matrix& pv = p.value();
    for (std::size_t i = 0; i < r; ++i)
      std::copy(pv.row(i).begin(), pv.row(i).end(), v.row(i).begin() + static_cast<std::ptrdiff_t>(off));
    off += pv.cols();
  }
  return parts.front().tape->push_flag(std::move(v), rg, [parts](Tape& t, const Matrix& g) {
    std::size_t o = 0;
    for (const Tensor& p : parts) {
      const std::size_t pc = t.value(p.id).cols();
      t.accumulate_with(p.id, [&](Matrix& gp) {
        for (std::size_t i = 0; i < gp.rows(); ++i)
          for (std::size_t j = 0; j < pc; ++j) gp(i, j) += g(i, o + j);
      });
      o += pc;
    }
  });
}

/// Columns [c0, c1).
inline Tensor slice_cols(Tensor x, std::size_t c0, std::size_t c1) {
  detail::check_shape(c0 <= c1 && c1 <= x.cols(), "slice_cols: range");
  const Matrix& xv = x.value();
  Matrix v(xv.rows(), c1 - c0);
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = c0; j < c1; ++j) v(i, j - c0) = xv(i, j);
  return x.tape->push(std::move(v), {x}, [x, c0, c1](Tape& t, const Matrix& g) {
    t.accumulate_with(x.id, [&](Matrix& gx) {
      for (std::size_t i = 0; i < gx.rows(); ++i)
        for (std::size_t j = c0; j < c1; ++j) gx(i, j) += g(i, j - c0);
    });
  });
}

/// Columns listed in `cols`, in that order.
inline Tensor select_cols(Tensor x, const std::vector<std::size_t>& cols) {
  const Matrix& xv = x.value();
  for (std::size_t c : cols) require(c < xv.cols(), ErrorKind::kIndexOutOfRange, "select_cols: index");
  Matrix v(xv.rows(), cols.size());
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) v(i, j) = xv(i, cols[j]);
  return x.tape->push(std::move(v), {x}, [x, cols](Tape& t, const Matrix& g) {
    t.accumulate_with(x.id, [&](Matrix& gx) {
      for (std::size_t i = 0; i < gx.rows(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j) gx(i, cols[j]) += g(i, j);
    });
  });
}

/// out(i, j) = x.flat[index(i, j)]: table lookup into the flattened x.
inline Tensor gather(Tensor x, std::size_t rows, std::size_t cols, const std::vector<std::size_t>& index) {
  require(index.size() == rows * cols, ErrorKind::kShapeMismatch, "gather: index table size");
  const Vector& xv = x.value().data();
  Matrix v(rows, cols);
  for (std::size_t k = 0; k < index.size(); ++k) {
    require(index[k] < xv.size(), ErrorKind::kIndexOutOfRange, "gather: index");
    v.data()[k] = xv[index[k]];
  }
  return x.tape->push(std::move(v), {x}, [x, index](Tape& t, const Matrix& g) {
    t.accumulate_with(x.id, [&](Matrix& gx) {
      for (std::size_t k = 0; k < index.size(); ++k) gx.data()[index[k]] += g.data()[k];
    });
  });
}

/// Row-major reinterpretation with a new shape of equal size.
inline Tensor reshape(Tensor x, std::size_t rows, std::size_t cols) {
  detail::check_shape(rows * cols == x.value().size(), "reshape: size");
  Matrix v(rows, cols, x.value().data());
  const std::size_t r0 = x.rows(), c0 = x.cols();
  return x.tape->push(std::move(v), {x}, [x, r0, c0](Tape& t, const Matrix& g) {
    t.accumulate(x.id, Matrix(r0, c0, g.data()));
  });
}

inline Tensor exp(Tensor x) {
  Matrix v = detail::map(x.value(), [](double e) { return std::exp(e); });
  return x.tape->push(std::move(v), {x}, [x, out_id = x.tape->size()](Tape& t, const Matrix& g) {
    t.accumulate(x.id, hadamard(g, t.value(out_id)));
  });
}

inline Tensor relu(Tensor x) {
  Matrix v = detail::map(x.value(), [](double e) { return e > 0.0 ? e : 0.0; });
  return x.tape->push(std::move(v), {x}, [x](Tape& t, const Matrix& g) {
    t.accumulate_with(x.id, [&](Matrix& gx) {
      const Matrix& xv = t.value(x.id);
      for (std::size_t k = 0; k < g.size(); ++k)
        if (xv.data()[k] > 0.0) gx.data()[k] += g.data()[k];
    });
  });
}

inline double logistic_value(double e) {
  return e >= 0.0 ? 1.0 / (1.0 + std::exp(-e)) : std::exp(e) / (1.0 + std::exp(e));
}

inline Tensor logistic(Tensor x) {
  Matrix v = detail::map(x.value(), logistic_value);
  return x.tape->push(std::move(v), {x}, [x, out_id = x.tape->size()](Tape& t, const Matrix& g) {
    t.accumulate_with(x.id, [&](Matrix& gx) {
      const Matrix& s = t.value(out_id);
      for (std::size_t k = 0; k < g.size(); ++k) gx.data()[k] += g.data()[k] * s.data()[k] * (1.0 - s.data()[k]);
    });
  });
}

namespace detail {

inline void softmax_rows_inplace(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    double mx = r[0];
    for (double e : r) mx = std::max(mx, e);
    double s = 0.0;
    for (double& e : r) {
      e = std::exp(e - mx);
      s += e;
    }
    for (double& e : r) e /= s;
  }
}

/// Backward of a row softmax with output p: g_in = p ∘ (g - rowsum(g ∘ p)).
inline Matrix softmax_rows_backward(const Matrix& p, const Matrix& g) {
  Matrix out(p.rows(), p.cols());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < p.cols(); ++j) s += g(i, j) * p(i, j);
    for (std::size_t j = 0; j < p.cols(); ++j) out(i, j) = p(i, j) * (g(i, j) - s);
  }
  return out;
}

}  // namespace detail

/// Softmax along each row.
inline Tensor softmax_rows(Tensor x) {
  detail::check_shape(x.cols() > 0, "softmax_rows: empty rows");
  Matrix v = x.value();
  detail::softmax_rows_inplace(v);
  return x.tape->push(std::move(v), {x}, [x, out_id = x.tape->size()](Tape& t, const Matrix& g) {
    t.accumulate(x.id, detail::softmax_rows_backward(t.value(out_id), g));
  });
}

/// Per-row layer normalization over columns followed by the affine map
/// gamma * xhat + beta, with gamma and beta 1 x c rows.
inline Tensor layer_norm_rows(Tensor x, Tensor gamma, Tensor beta, double eps = 1e-5) {
  detail::check_same_tape(x, gamma);
  detail::check_same_tape(x, beta);
  const std::size_t n = x.rows(), c = x.cols();
  detail::check_shape(gamma.rows() == 1 && gamma.cols() == c && beta.rows() == 1 && beta.cols() == c,
                      "layer_norm_rows: affine shape");
  const Matrix& xv = x.value();
  const Matrix& gv = gamma.value();
  const Matrix& bv = beta.value();
  Matrix xhat(n, c), v(n, c);
  Vector inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < c; ++j) m += xv(i, j);
    m /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xv(i, j) - m) * (xv(i, j) - m);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (xv(i, j) - m) * inv_std[i];
      v(i, j) = gv(0, j) * xhat(i, j) + bv(0, j);
    }
  }
  return x.tape->push_flag(
      std::move(v), x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Matrix& g) {
        const std::size_t rn = g.rows(), cn = g.cols();
        t.accumulate_with(gamma.id, [&](Matrix& gg) {
          for (std::size_t i = 0; i < rn; ++i)
            for (std::size_t j = 0; j < cn; ++j) gg(0, j) += g(i, j) * xhat(i, j);
        });
        t.accumulate_with(beta.id, [&](Matrix& gb) {
          for (std::size_t i = 0; i < rn; ++i)
            for (std::size_t j = 0; j < cn; ++j) gb(0, j) += g(i, j);
        });
        t.accumulate_with(x.id, [&](Matrix& gx) {
          const Matrix& gv2 = t.value(gamma.id);
          const double inv_c = 1.0 / static_cast<double>(cn);
          for (std::size_t i = 0; i < rn; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < cn; ++j) {
              const double dh = g(i, j) * gv2(0, j);
              s1 += dh;
              s2 += dh * xhat(i, j);
            }
            for (std::size_t j = 0; j < cn; ++j) {
              const double dh = g(i, j) * gv2(0, j);
              gx(i, j) += inv_std[i] * (dh - inv_c * s1 - xhat(i, j) * inv_c * s2);
            }
          }
        });
      });
}

/// X = A^{-1} B for symmetric positive-definite A.
inline Tensor solve_spd(Tensor a, Tensor b) {
  detail::check_same_tape(a, b);
  detail::check_shape(a.rows() == a.cols() && a.rows() == b.rows(), "solve_spd: shapes");
  Matrix x = mnmef::solve_spd(a.value(), b.value());
  return a.tape->push(std::move(x), {a, b}, [a, b, out_id = a.tape->size()](Tape& t, const Matrix& g) {
    // gB = A^{-1} G, gA = -sym(gB Xᵀ)
    const Matrix gb = mnmef::solve_spd(t.value(a.id), g);
    if (t.requires_grad(a.id)) {
      const Matrix gbx = detail::matmul_nt(gb, t.value(out_id));
      Matrix ga(gbx.rows(), gbx.cols());
      for (std::size_t i = 0; i < ga.rows(); ++i)
        for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) = -0.5 * (gbx(i, j) + gbx(j, i));
      t.accumulate(a.id, ga);
    }
    t.accumulate(b.id, gb);
  });
}

/// Entries with |x| > c are replaced by sign(x) c; the clamped entries pass no gradient.
inline Tensor clamp_abs(Tensor x, double c) {
  Matrix v = detail::map(x.value(), [c](double e) { return e > c ? c : (e < -c ? -c : e); });
  return x.tape->push(std::move(v), {x}, [x, c](Tape& t, const Matrix& g) {
    t.accumulate_with(x.id, [&](Matrix& gx) {
      const Matrix& xv = t.value(x.id);
      for (std::size_t k = 0; k < g.size(); ++k)
        if (std::abs(xv.data()[k]) <= c) gx.data()[k] += g.data()[k];
    });
  });
}

/// Multihead attention on already-projected sequences: q is n x d, k and v are
/// m x d, split into `heads` column blocks. Head r computes
/// softmax_rows(q_r k_rᵀ) v_r and the heads are concatenated back to n x d.
inline Tensor multihead_attention(Tensor q, Tensor k, Tensor v, std::size_t heads) {
  detail::check_same_tape(q, k);
  detail::check_same_tape(q, v);
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
  detail::check_shape(k.cols() == d && v.cols() == d && v.rows() == m, "attention: shapes");
  detail::check_shape(heads >= 1 && d % heads == 0, "attention: head split");
  const std::size_t dk = d / heads;
  const auto qe = as_eigen(q.value());
  const auto ke = as_eigen(k.value());
  const auto ve = as_eigen(v.value());
  std::vector<Matrix> probs(heads);
  Matrix out(n, d);
  auto oe = as_eigen(out);
  for (std::size_t r = 0; r < heads; ++r) {
    const auto c0 = static_cast<Eigen::Index>(r * dk);
    const auto w = static_cast<Eigen::Index>(dk);
    Matrix p(n, m);
    as_eigen(p).noalias() = qe.middleCols(c0, w) * ke.middleCols(c0, w).transpose();
    detail::softmax_rows_inplace(p);
    oe.middleCols(c0, w).noalias() = as_eigen(p) * ve.middleCols(c0, w);
    probs[r] = std::move(p);
  }
  return q.tape->push(std::move(out), {q, k, v},
                      [q, k, v, heads, dk, probs = std::move(probs)](Tape& t, const Matrix& g) {
                        const auto ge = as_eigen(g);
                        const auto qv = as_eigen(t.value(q.id));
                        const auto kv = as_eigen(t.value(k.id));
                        const auto vv = as_eigen(t.value(v.id));
                        Matrix gq(qv.rows(), qv.cols()), gk(kv.rows(), kv.cols()), gv(vv.rows(), vv.cols());
                        for (std::size_t r = 0; r < heads; ++r) {
                          const auto c0 = static_cast<Eigen::Index>(r * dk);
                          const auto w = static_cast<Eigen::Index>(dk);
                          const Matrix& p = probs[r];
                          Matrix gp(p.rows(), p.cols());
                          as_eigen(gp).noalias() = ge.middleCols(c0, w) * vv.middleCols(c0, w).transpose();
                          as_eigen(gv).middleCols(c0, w).noalias() = as_eigen(p).transpose() * ge.middleCols(c0, w);
                          const Matrix gs = detail::softmax_rows_backward(p, gp);
                          as_eigen(gq).middleCols(c0, w).noalias() = as_eigen(gs) * kv.middleCols(c0, w);
                          as_eigen(gk).middleCols(c0, w).noalias() = as_eigen(gs).transpose() * qv.middleCols(c0, w);
                        }
                        t.accumulate(q.id, gq);
                        t.accumulate(k.id, gk);
                        t.accumulate(v.id, gv);
                      });
}

/// Applies a per-row map f: R^c -> R^c together with its vector-Jacobian
/// product `vjp(row, grad_row)`. Used to run the dynamics inside the graph.
inline Tensor map_rows(Tensor x, const std::function<Vector(std::span<const double>)>& f,
                       const std::function<Vector(std::span<const double>, std::span<const double>)>& vjp) {
  const Matrix& xv = x.value();
  Matrix v(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    const Vector y = f(xv.row(i));
    require(y.size() == xv.cols(), ErrorKind::kShapeMismatch, "map_rows: output size");
    std::copy(y.begin(), y.end(), v.row(i).begin());
  }
  return x.tape->push(std::move(v), {x}, [x, vjp](Tape& t, const Matrix& g) {
    t.accumulate_with(x.id, [&](Matrix& gx) {
      const Matrix& xv2 = t.value(x.id);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        const Vector gi = vjp(xv2.row(i), g.row(i));
        for (std::size_t j = 0; j < gi.size(); ++j) gx(i, j) += gi[j];
      }
    });
  });
}

}  // namespace mnmef::ad
