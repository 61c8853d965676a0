#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every operation in creation order, which is a valid
// topological order, and backward() walks it in reverse exactly once.
// Trainable state lives in Tensor objects owned by the models; the tape only
// references them through leaf nodes. Gradients accumulate into Tensor::grad
// until zero_grad() is called.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qdl/binary_io.hpp"
#include "qdl/error.hpp"
#include "qdl/types.hpp"

namespace qdl::ad {

struct Tensor {
  std::string name;
  Matrix value;
  Matrix grad;
  bool requires_grad = true;

  Tensor() = default;
  Tensor(std::string n, Matrix v, bool trainable = true)
      : name(std::move(n)), value(std::move(v)), requires_grad(trainable) {
    zero_grad();
  }

  Eigen::Index rows() const { return value.rows(); }
  Eigen::Index cols() const { return value.cols(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }

  bool all_finite() const { return value.allFinite(); }
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool needs_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Tensor* param = nullptr;
    Backward backward;
    const char* op = "";
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}, "constant"});
    return {this, nodes_.size() - 1};
  }

  // Leaf bound to a parameter. A frozen parameter (requires_grad == false)
  // behaves like a constant: nothing flows back into it.
  Var leaf(Tensor& p) {
    nodes_.push_back(Node{p.value, {}, p.requires_grad, p.requires_grad ? &p : nullptr, {}, "leaf"});
    return {this, nodes_.size() - 1};
  }

  Var record(Matrix value, std::initializer_list<Var> inputs, const char* op, Backward backward) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || nodes_[v.id()].needs_grad;
    nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backward) : Backward{}, op});
    return {this, nodes_.size() - 1};
  }

  const Node& node(std::size_t id) const { return nodes_[id]; }
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Zero-initialized on first touch.
  Matrix& grad_ref(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(Var v, const Matrix& g) {
    if (!nodes_[v.id()].needs_grad) return;
    grad_ref(v.id()) += g;
  }

  void backward(Var loss) {
    if (loss.tape() != this) throw InvalidArgument("backward: loss belongs to another tape");
    const auto& ln = nodes_[loss.id()];
    if (ln.value.rows() != 1 || ln.value.cols() != 1) {
      throw InvalidArgument("backward: loss must be a scalar, got " + std::to_string(ln.value.rows()) + "x" +
                            std::to_string(ln.value.cols()));
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    if (!ln.needs_grad) return;
    grad_ref(loss.id())(0, 0) = 1.0;

    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.param != nullptr) {
        n.param->grad += n.grad;
        continue;
      }
      if (!n.backward) throw StateError(std::string("backward: no adjoint defined for op '") + n.op + "'");
      n.backward(*this, i);
    }
  }

 private:
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline bool Var::needs_grad() const { return tape_->needs_grad(id_); }

// ---------------------------------------------------------------------------
// operations

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()));
  }
}

inline void require_row(const Var& a, const Var& r, const char* op) {
  if (r.rows() != 1 || r.cols() != a.cols()) {
    throw InvalidArgument(std::string(op) + ": expected a 1x" + std::to_string(a.cols()) + " row");
  }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw InvalidArgument("matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return a.tape()->record(std::move(out), {a, b}, "matmul", [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.needs_grad()) t.grad_ref(a.id()).noalias() += g * b.value().transpose();
    if (b.needs_grad()) t.grad_ref(b.id()).noalias() += a.value().transpose() * g;
  });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw InvalidArgument("matmul_nt: inner dimensions differ");
  Matrix out = a.value() * b.value().transpose();
  return a.tape()->record(std::move(out), {a, b}, "matmul_nt", [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.needs_grad()) t.grad_ref(a.id()).noalias() += g * b.value();
    if (b.needs_grad()) t.grad_ref(b.id()).noalias() += g.transpose() * a.value();
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  return a.tape()->record(std::move(out), {a, b}, "add", [a, b](Tape& t, std::size_t self) {
    t.accumulate(a, t.grad(self));
    t.accumulate(b, t.grad(self));
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  return a.tape()->record(std::move(out), {a, b}, "sub", [a, b](Tape& t, std::size_t self) {
    t.accumulate(a, t.grad(self));
    if (b.needs_grad()) t.grad_ref(b.id()) -= t.grad(self);
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape()->record(std::move(out), {a, b}, "mul", [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.needs_grad()) t.grad_ref(a.id()) += g.cwiseProduct(b.value());
    if (b.needs_grad()) t.grad_ref(b.id()) += g.cwiseProduct(a.value());
  });
}

inline Var scale(Var a, double s) {
  Matrix out = a.value() * s;
  return a.tape()->record(std::move(out), {a}, "scale", [a, s](Tape& t, std::size_t self) {
    t.grad_ref(a.id()) += t.grad(self) * s;
  });
}

// Broadcast a 1 x cols row over every row of a.
inline Var add_row(Var a, Var row) {
  detail::require_row(a, row, "add_row");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row}, "add_row", [a, row](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    t.accumulate(a, g);
    if (row.needs_grad()) t.grad_ref(row.id()) += g.colwise().sum();
  });
}

inline Var mul_row(Var a, Var row) {
  detail::require_row(a, row, "mul_row");
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape()->record(std::move(out), {a, row}, "mul_row", [a, row](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.needs_grad()) t.grad_ref(a.id()).array() += g.array().rowwise() * row.value().row(0).array();
    if (row.needs_grad()) t.grad_ref(row.id()) += g.cwiseProduct(a.value()).colwise().sum();
  });
}

inline Var relu(Var a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape()->record(std::move(out), {a}, "relu", [a](Tape& t, std::size_t self) {
    t.grad_ref(a.id()).array() += t.grad(self).array() * (a.value().array() > 0.0).cast<double>();
  });
}

inline Var tanh(Var a) {
  Matrix out = a.value().array().tanh().matrix();
  return a.tape()->record(std::move(out), {a}, "tanh", [a](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    t.grad_ref(a.id()).array() += t.grad(self).array() * (1.0 - y.array().square());
  });
}

inline Var log(Var a) {
  Matrix out = a.value().array().log().matrix();
  return a.tape()->record(std::move(out), {a}, "log", [a](Tape& t, std::size_t self) {
    t.grad_ref(a.id()).array() += t.grad(self).array() / a.value().array();
  });
}

// sgn with the tie sgn(0) = +1.
inline double sign_value(double x) { return x >= 0.0 ? 1.0 : -1.0; }

inline Matrix sign_matrix(const Matrix& x) { return x.unaryExpr([](double v) { return sign_value(v); }); }

// Forward emits sgn(a); backward uses the derivative of tanh(a).
inline Var sign_st(Var a) {
  Matrix out = sign_matrix(a.value());
  return a.tape()->record(std::move(out), {a}, "sign_st", [a](Tape& t, std::size_t self) {
    const auto th = a.value().array().tanh();
    t.grad_ref(a.id()).array() += t.grad(self).array() * (1.0 - th.square());
  });
}

// Plain sgn. Has no adjoint; reaching it during backward is an error.
inline Var sign(Var a) { return a.tape()->record(sign_matrix(a.value()), {a}, "sign", {}); }

// Per-row standardization without affine parameters.
inline Var layer_norm(Var a, double eps = 1e-10) {
  const Matrix& x = a.value();
  const auto d = static_cast<double>(x.cols());
  Matrix out(x.rows(), x.cols());
  Vector inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().sum() / d;
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    out.row(r) = (x.row(r).array() - mean) * inv_std(r);
  }
  return a.tape()->record(std::move(out), {a}, "layer_norm", [a, inv_std](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad_ref(a.id());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double mg = g.row(r).mean();
      const double mgy = g.row(r).cwiseProduct(y.row(r)).mean();
      ga.row(r).array() += inv_std(r) * (g.row(r).array() - mg - y.row(r).array() * mgy);
    }
  });
}

struct BatchStats {
  RowVector mean;
  RowVector var;  // biased (divides by B)
};

// Per-column standardization with batch statistics. Writes the statistics
// used to `stats` when non-null.
inline Var batch_norm(Var a, double eps, BatchStats* stats = nullptr) {
  const Matrix& x = a.value();
  if (x.rows() < 2) throw InvalidArgument("batch_norm: batch of size 1 has no variance");
  const auto b = static_cast<double>(x.rows());
  RowVector mean = x.colwise().mean();
  Matrix centered = x.rowwise() - mean;
  RowVector var = centered.array().square().colwise().sum().matrix() / b;
  RowVector inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix out = centered.array().rowwise() * inv_std.array();
  if (stats) *stats = {mean, var};
  return a.tape()->record(std::move(out), {a}, "batch_norm", [a, inv_std](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    const RowVector mg = g.colwise().mean();
    const RowVector mgy = g.cwiseProduct(y).colwise().mean();
    Matrix dx = (g.rowwise() - mg) - Matrix(y.array().rowwise() * mgy.array());
    t.grad_ref(a.id()).array() += dx.array().rowwise() * inv_std.array();
  });
}

// Each row divided by its L2 norm.
inline Var row_normalize(Var a) {
  const Matrix& x = a.value();
  Vector norms = x.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (norms(r) == 0.0) throw InvalidArgument("row_normalize: zero-norm row " + std::to_string(r));
  }
  Matrix out = x.array().colwise() / norms.array();
  return a.tape()->record(std::move(out), {a}, "row_normalize", [a, norms](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Vector gy = g.cwiseProduct(y).rowwise().sum();
    Matrix dx = g - Matrix(y.array().colwise() * gy.array());
    t.grad_ref(a.id()).array() += dx.array().colwise() / norms.array();
  });
}

// Row-wise softmax, stabilized by the row max. Entries at -inf get probability 0.
inline Matrix softmax_rows_value(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    if (!std::isfinite(m)) throw InvalidArgument("softmax: row " + std::to_string(r) + " has no finite entry");
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

inline Var softmax(Var a) {
  return a.tape()->record(softmax_rows_value(a.value()), {a}, "softmax", [a](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Vector gy = g.cwiseProduct(y).rowwise().sum();
    t.grad_ref(a.id()).array() += y.array() * (g.array().colwise() - gy.array());
  });
}

inline Var log_softmax(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return a.tape()->record(std::move(out), {a}, "log_softmax", [a](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Vector gs = g.rowwise().sum();
    t.grad_ref(a.id()).array() += g.array() - y.array().exp().colwise() * gs.array();
  });
}

// Mean over rows of -log softmax(logits)[label].
inline Var cross_entropy(Var logits, const Labels& labels) {
  const Matrix& x = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != x.rows()) {
    throw InvalidArgument("cross_entropy: label count does not match batch size");
  }
  Matrix probs(x.rows(), x.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    if (labels[r] >= x.cols()) throw InvalidArgument("cross_entropy: label out of range");
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    probs.row(r) = (x.row(r).array() - lse).exp();
    total += lse - x(r, labels[r]);
  }
  const double b = static_cast<double>(x.rows());
  Matrix out(1, 1);
  out(0, 0) = total / b;
  return logits.tape()->record(std::move(out), {logits}, "cross_entropy",
                               [logits, labels, probs = std::move(probs), b](Tape& t, std::size_t self) {
                                 const double g = t.grad(self)(0, 0);
                                 Matrix d = probs;
                                 for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, labels[r]) -= 1.0;
                                 t.grad_ref(logits.id()) += d * (g / b);
                               });
}

inline Var concat_cols(Var a, Var b) {
  if (a.rows() != b.rows()) throw InvalidArgument("concat_cols: row counts differ");
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const auto ac = a.cols();
  const auto bc = b.cols();
  return a.tape()->record(std::move(out), {a, b}, "concat_cols", [a, b, ac, bc](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.needs_grad()) t.grad_ref(a.id()) += g.leftCols(ac);
    if (b.needs_grad()) t.grad_ref(b.id()) += g.rightCols(bc);
  });
}

// Replace entries where mask != 0 by `fill`; no gradient flows through them.
inline Var masked_fill(Var a, const Matrix& mask, double fill) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols()) throw InvalidArgument("masked_fill: mask shape mismatch");
  Matrix out = (mask.array() != 0.0).select(fill, a.value());
  return a.tape()->record(std::move(out), {a}, "masked_fill", [a, mask](Tape& t, std::size_t self) {
    t.grad_ref(a.id()) += Matrix((mask.array() != 0.0).select(0.0, t.grad(self)));
  });
}

inline Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->record(std::move(out), {a}, "sum", [a](Tape& t, std::size_t self) {
    t.grad_ref(a.id()).array() += t.grad(self)(0, 0);
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

// Position of the row maximum; ties resolve to the lowest index.
inline Eigen::Index argmax_row(const Matrix& m, Eigen::Index r) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < m.cols(); ++c)
    if (m(r, c) > m(r, best)) best = c;
  return best;
}

// Straight-through softmax selector. p = softmax(logits / T). The forward
// value is the one-hot argmax of p (or p itself when soft_forward is set);
// backward always differentiates p.
inline Var straight_through_onehot(Var logits, double temperature, bool soft_forward = false) {
  if (!(temperature > 0.0)) throw InvalidArgument("straight_through_onehot: temperature must be > 0");
  Matrix p = softmax_rows_value(logits.value() / temperature);
  Matrix out;
  if (soft_forward) {
    out = p;
  } else {
    out.setZero(p.rows(), p.cols());
    for (Eigen::Index r = 0; r < p.rows(); ++r) out(r, argmax_row(p, r)) = 1.0;
  }
  return logits.tape()->record(std::move(out), {logits}, "straight_through_onehot",
                               [logits, p = std::move(p), temperature](Tape& t, std::size_t self) {
                                 const Matrix& g = t.grad(self);
                                 Vector gp = g.cwiseProduct(p).rowwise().sum();
                                 t.grad_ref(logits.id()).array() +=
                                     p.array() * (g.array().colwise() - gp.array()) / temperature;
                               });
}

// ---------------------------------------------------------------------------
// finite differences

// Central differences of f with respect to every coordinate of every tensor.
// f must read the tensors' current values and be deterministic.
inline std::vector<Matrix> finite_difference_grad(const std::function<double()>& f, std::span<Tensor* const> params,
                                                  double h) {
  if (!(h > 0.0)) throw InvalidArgument("finite_difference_grad: h must be > 0");
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (Tensor* p : params) {
    Matrix g(p->rows(), p->cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double saved = x;
      x = saved + h;
      const double fp = f();
      x = saved - h;
      const double fm = f();
      x = saved;
      g.data()[i] = (fp - fm) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// max |a-b| / max(|a|+|b|, floor) over all coordinates.
inline double max_relative_error(const Matrix& a, const Matrix& b, double floor = 1e-6) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw InvalidArgument("max_relative_error: shape mismatch");
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double x = a.data()[i];
    const double y = b.data()[i];
    worst = std::max(worst, std::abs(x - y) / std::max(std::abs(x) + std::abs(y), floor));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // L2 term added to the gradient
  std::int64_t step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
};

// One bias-corrected Adam update applied in place to `params`.
inline void adam_step(AdamState& state, std::span<Tensor* const> params) {
  if (state.first_moment.empty()) {
    for (Tensor* p : params) {
      state.first_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
      state.second_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (state.first_moment.size() != params.size()) throw InvalidArgument("adam_step: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = *params[i];
    if (p.grad.rows() != p.rows() || p.grad.cols() != p.cols() || state.first_moment[i].rows() != p.rows() ||
        state.first_moment[i].cols() != p.cols()) {
      throw InvalidArgument("adam_step: shape mismatch for '" + p.name + "'");
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Matrix g = p.grad;
    if (state.weight_decay != 0.0) g += state.weight_decay * p.value;
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
    p.value.array() -= state.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + state.epsilon);
  }
}

// Binds a parameter group to its Adam state.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Tensor*> params, double lr, double weight_decay = 0.0) : params_(std::move(params)) {
    state_.learning_rate = lr;
    state_.weight_decay = weight_decay;
  }

  void step() { adam_step(state_, params_); }
  void zero_grad() {
    for (Tensor* p : params_) p->zero_grad();
  }
  const AdamState& state() const { return state_; }
  const std::vector<Tensor*>& params() const { return params_; }

 private:
  std::vector<Tensor*> params_;
  AdamState state_;
};

// ---------------------------------------------------------------------------
// PRMS checkpoints
//
//   "PRMS" | u32 version=1 | repeated { u32 name_len | name | u32 rows | u32 cols | rows*cols float32 }

inline constexpr std::uint32_t kPrmsVersion = 1;

using NamedMatrices = std::vector<std::pair<std::string, Matrix>>;

inline void write_params(std::ostream& os, std::span<const Tensor* const> tensors) {
  binary::put_magic(os, "PRMS");
  binary::put<std::uint32_t>(os, kPrmsVersion);
  for (const Tensor* t : tensors) {
    binary::put<std::uint32_t>(os, static_cast<std::uint32_t>(t->name.size()));
    os.write(t->name.data(), static_cast<std::streamsize>(t->name.size()));
    binary::put<std::uint32_t>(os, static_cast<std::uint32_t>(t->rows()));
    binary::put<std::uint32_t>(os, static_cast<std::uint32_t>(t->cols()));
    for (Eigen::Index i = 0; i < t->value.size(); ++i) binary::put<float>(os, static_cast<float>(t->value.data()[i]));
  }
}

inline std::string params_bytes(std::span<const Tensor* const> tensors) {
  std::ostringstream os(std::ios::binary);
  write_params(os, tensors);
  return std::move(os).str();
}

inline void save_params(const std::filesystem::path& path, std::span<const Tensor* const> tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_params(out, tensors);
  if (!out) throw IoError("write failed for " + path.string());
}

inline NamedMatrices read_params(std::istream& is) {
  std::string magic;
  if (!binary::get_magic(is, magic) || magic != "PRMS") throw FormatError("bad magic: not a PRMS checkpoint");
  std::uint32_t version = 0;
  if (!binary::get(is, version)) throw FormatError("truncated payload: PRMS header");
  if (version != kPrmsVersion) throw FormatError("version mismatch: PRMS version " + std::to_string(version));
  NamedMatrices out;
  std::uint32_t len = 0;
  while (binary::get(is, len)) {
    std::string name(len, '\0');
    std::uint32_t rows = 0, cols = 0;
    if (!is.read(name.data(), len) || !binary::get(is, rows) || !binary::get(is, cols)) {
      throw FormatError("truncated payload: PRMS tensor header");
    }
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      float v = 0.0f;
      if (!binary::get(is, v)) throw FormatError("truncated payload: tensor '" + name + "'");
      m.data()[i] = v;
    }
    out.emplace_back(std::move(name), std::move(m));
  }
  return out;
}

inline NamedMatrices load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_params(in);
}

// Copies checkpoint values into the matching tensors; every tensor must be present.
inline void assign_params(const NamedMatrices& saved, std::span<Tensor* const> tensors) {
  std::map<std::string, const Matrix*> by_name;
  for (const auto& [n, m] : saved) by_name[n] = &m;
  for (Tensor* t : tensors) {
    auto it = by_name.find(t->name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor '" + t->name + "'");
    if (it->second->rows() != t->rows() || it->second->cols() != t->cols()) {
      throw FormatError("checkpoint tensor '" + t->name + "' has the wrong shape");
    }
    t->value = *it->second;
    t->zero_grad();
  }
}

}  // namespace qdl::ad
