#pragma once

// Query spaces over semantic embeddings.
//
// FixedDictionary: concept vectors c_i with answers <c_i, x>, either Z-scored
// with one global mean/std pooled over all queries and training samples, or
// thresholded at the per-query training mean.
//
// LearnableDictionary: hard semantic hyperplanes
//     q_i(x) = sgn(BN_{gamma_i, beta_i}(<v_i / |v_i|, x>))
// trained with a straight-through estimator whose backward pass uses
// tanh(BN(.)). The equivalent hyperplane (w_i, b_i) with
//     w_i = v_i/|v_i| * gamma_i / sigma_i,   b_i = mu_i / sigma_i * gamma_i - beta_i
// is recoverable from the stored state using the running statistics.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qdl/diffmath.hpp"
#include "qdl/embedding_store.hpp"
#include "qdl/error.hpp"
#include "qdl/types.hpp"

namespace qdl {

enum class AnswerMode { hard, soft };
enum class Phase { train, infer };

// batch_norm is the default; affine is the un-normalized sgn(<v/|v|, x> * gamma - beta).
enum class Parameterization { batch_norm, affine };

inline const char* to_string(AnswerMode m) { return m == AnswerMode::hard ? "hard" : "soft"; }

struct AnswerBatch {
  Matrix values;            // B x n
  AnswerMode mode = AnswerMode::hard;
  Matrix normalized;        // pre-sign activation (learnable dictionaries only)
  Matrix surrogate_values;  // tanh(normalized), retained for backward
  Phase phase = Phase::infer;
};

// ---------------------------------------------------------------------------
// fixed dictionaries

struct FixedDictionary {
  Matrix concept_vectors;  // n x d, unit rows
  std::vector<std::string> concept_names;
  std::optional<double> zscore_mean;
  std::optional<double> zscore_std;
  std::optional<RowVector> thresholds;  // present iff hard answers are available

  Eigen::Index size() const { return concept_vectors.rows(); }
  Eigen::Index dim() const { return concept_vectors.cols(); }

  // Concept rows are unit-normalized on construction.
  static FixedDictionary from_vectors(Matrix vectors, std::vector<std::string> names = {}) {
    if (vectors.rows() < 1) throw InvalidArgument("fixed dictionary needs at least one concept");
    if (!names.empty() && static_cast<Eigen::Index>(names.size()) != vectors.rows()) {
      throw InvalidArgument("concept name count does not match concept rows");
    }
    for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
      const double norm = vectors.row(r).norm();
      if (norm == 0.0) throw InvalidArgument("zero concept vector at row " + std::to_string(r));
      vectors.row(r) /= norm;
    }
    FixedDictionary d;
    d.concept_vectors = std::move(vectors);
    d.concept_names = std::move(names);
    return d;
  }

  static FixedDictionary from_dataset(const EmbeddingDataset& concepts) {
    std::vector<std::string> names;
    if (concepts.concept_names) names = *concepts.concept_names;
    if (static_cast<std::size_t>(names.size()) != concepts.size()) names.clear();
    return from_vectors(concepts.all_rows(), std::move(names));
  }

  Matrix dots(const Matrix& batch) const {
    if (batch.cols() != dim()) {
      throw InvalidArgument("dimension mismatch: batch d=" + std::to_string(batch.cols()) +
                            ", dictionary d=" + std::to_string(dim()));
    }
    return batch * concept_vectors.transpose();
  }
};

// Global mean and std over every (query, training sample) dot product.
inline FixedDictionary fit_zscore(FixedDictionary dict, const Matrix& train_embeddings) {
  if (train_embeddings.rows() < 1) throw InvalidArgument("fit_zscore: empty training set");
  const Matrix d = dict.dots(train_embeddings);
  const double mean = d.mean();
  const double var = (d.array() - mean).square().mean();
  if (!(var > 0.0)) throw InvalidArgument("fit_zscore: dot products have zero variance");
  dict.zscore_mean = mean;
  dict.zscore_std = std::sqrt(var);
  return dict;
}

inline AnswerBatch fixed_soft_answers(const FixedDictionary& dict, const Matrix& batch) {
  if (!dict.zscore_mean || !dict.zscore_std) throw StateError("fixed_soft_answers: Z-score statistics not fitted");
  AnswerBatch out;
  out.mode = AnswerMode::soft;
  out.values = (dict.dots(batch).array() - *dict.zscore_mean) / *dict.zscore_std;
  return out;
}

// thresholds[i] = mean over the training set of <c_i, x>.
inline FixedDictionary fit_thresholds(FixedDictionary dict, const Matrix& train_embeddings) {
  if (train_embeddings.rows() < 1) throw InvalidArgument("fit_thresholds: empty training set");
  dict.thresholds = dict.dots(train_embeddings).colwise().mean();
  return dict;
}

inline FixedDictionary fit_thresholds(FixedDictionary dict, const EmbeddingDataset& train) {
  if (train.size() == 0) throw InvalidArgument("fit_thresholds: empty training set");
  return fit_thresholds(std::move(dict), train.all_rows());
}

inline AnswerBatch fixed_hard_answers(const FixedDictionary& dict, const Matrix& batch) {
  if (!dict.thresholds) throw StateError("fixed_hard_answers: thresholds not fitted");
  AnswerBatch out;
  out.mode = AnswerMode::hard;
  out.values = ad::sign_matrix(dict.dots(batch).rowwise() - *dict.thresholds);
  return out;
}

// ---------------------------------------------------------------------------
// learnable dictionaries

inline constexpr double kDefaultBnEpsilon = 1e-10;
inline constexpr double kDefaultBnMomentum = 0.1;

struct LearnableDictionary {
  ad::Tensor v{"dict.v", Matrix()};
  ad::Tensor gamma{"dict.gamma", Matrix()};
  ad::Tensor beta{"dict.beta", Matrix()};
  ad::Tensor bn_mean{"dict.bn_mean", Matrix(), false};
  ad::Tensor bn_var{"dict.bn_var", Matrix(), false};
  double bn_epsilon = kDefaultBnEpsilon;
  double bn_momentum = kDefaultBnMomentum;
  AnswerMode answer_mode = AnswerMode::hard;
  Parameterization parameterization = Parameterization::batch_norm;
  bool soft_with_beta = true;
  std::vector<std::string> names;

  Eigen::Index size() const { return v.rows(); }
  Eigen::Index dim() const { return v.cols(); }

  std::vector<ad::Tensor*> trainable() { return {&v, &gamma, &beta}; }
  std::vector<const ad::Tensor*> tensors() const { return {&v, &gamma, &beta, &bn_mean, &bn_var}; }
  std::vector<ad::Tensor*> tensors() { return {&v, &gamma, &beta, &bn_mean, &bn_var}; }

  void set_frozen(bool frozen) {
    for (auto* t : trainable()) t->requires_grad = !frozen;
  }
};

struct Hyperplanes {
  Matrix normals;        // n x d
  RowVector thresholds;  // 1 x n
};

// (w, b) such that the inference-phase hard answer equals sgn(<w, x> - b).
inline Hyperplanes recover_hyperplanes(const LearnableDictionary& dict) {
  Hyperplanes h;
  const Matrix unit = dict.v.value.array().colwise() / dict.v.value.rowwise().norm().array();
  const RowVector gamma = dict.gamma.value.row(0);
  const RowVector beta = dict.beta.value.row(0);
  if (dict.parameterization == Parameterization::batch_norm) {
    const RowVector sigma = (dict.bn_var.value.row(0).array() + dict.bn_epsilon).sqrt().matrix();
    const RowVector scale = gamma.array() / sigma.array();
    h.normals = unit.array().colwise() * scale.transpose().array();
    h.thresholds = (dict.bn_mean.value.row(0).array() / sigma.array() * gamma.array() - beta.array()).matrix();
  } else {
    h.normals = unit.array().colwise() * gamma.transpose().array();
    h.thresholds = beta;
  }
  return h;
}

inline LearnableDictionary init_random(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("init_random: n must be >= 1");
  if (d < 2) throw InvalidArgument("init_random: d must be >= 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix v(n, d);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = normal(rng);

  LearnableDictionary dict;
  dict.v = ad::Tensor("dict.v", std::move(v));
  dict.gamma = ad::Tensor("dict.gamma", Matrix::Ones(1, n));
  dict.beta = ad::Tensor("dict.beta", Matrix::Zero(1, n));
  dict.bn_mean = ad::Tensor("dict.bn_mean", Matrix::Zero(1, n), false);
  dict.bn_var = ad::Tensor("dict.bn_var", Matrix::Ones(1, n), false);
  return dict;
}

inline LearnableDictionary init_from_concepts(const Matrix& vectors, std::vector<std::string> names = {}) {
  if (!names.empty() && static_cast<Eigen::Index>(names.size()) != vectors.rows()) {
    throw InvalidArgument("init_from_concepts: " + std::to_string(names.size()) + " names for " +
                          std::to_string(vectors.rows()) + " vectors");
  }
  for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
    if (vectors.row(r).squaredNorm() == 0.0) throw InvalidArgument("init_from_concepts: zero row " + std::to_string(r));
  }
  LearnableDictionary dict = init_random(vectors.rows(), vectors.cols(), 0);
  dict.v.value = vectors;
  dict.v.zero_grad();
  dict.names = std::move(names);
  return dict;
}

struct DictionaryForwardOptions {
  bool update_running_stats = true;  // train phase only
  bool surrogate_forward = false;    // emit tanh instead of sgn (gradient checks)
};

struct DictionaryForward {
  ad::Var answers;
  ad::Var normalized;

  AnswerBatch batch(AnswerMode mode, Phase phase) const {
    AnswerBatch out;
    out.values = answers.value();
    out.mode = mode;
    out.normalized = normalized.value();
    out.surrogate_values = normalized.value().array().tanh().matrix();
    out.phase = phase;
    return out;
  }
};

// Records the dictionary on `tape`. In the train phase the dot products are
// normalized with batch statistics and the running statistics are updated
// once, new = (1 - m) * old + m * batch (unbiased batch variance).
inline DictionaryForward learnable_answers(LearnableDictionary& dict, ad::Tape& tape, const Matrix& batch,
                                           Phase phase, const DictionaryForwardOptions& opts = {}) {
  if (batch.rows() < 1) throw InvalidArgument("learnable_answers: empty batch");
  if (batch.cols() != dict.dim()) {
    throw InvalidArgument("dimension mismatch: batch d=" + std::to_string(batch.cols()) +
                          ", dictionary d=" + std::to_string(dict.dim()));
  }
  const bool batch_norm = dict.parameterization == Parameterization::batch_norm;
  if (batch_norm && phase == Phase::train && batch.rows() < 2) {
    throw InvalidArgument("learnable_answers: train phase needs a batch of at least 2");
  }

  ad::Var x = tape.constant(batch);
  ad::Var unit = ad::row_normalize(tape.leaf(dict.v));
  ad::Var dots = ad::matmul_nt(x, unit);
  ad::Var gamma = tape.leaf(dict.gamma);
  ad::Var beta = tape.leaf(dict.beta);
  const bool with_beta = dict.answer_mode == AnswerMode::hard || dict.soft_with_beta;

  ad::Var pre;
  if (batch_norm) {
    ad::Var xhat;
    if (phase == Phase::train) {
      ad::BatchStats stats;
      xhat = ad::batch_norm(dots, dict.bn_epsilon, &stats);
      if (opts.update_running_stats) {
        const double b = static_cast<double>(batch.rows());
        const double m = dict.bn_momentum;
        dict.bn_mean.value = (1.0 - m) * dict.bn_mean.value + m * stats.mean;
        dict.bn_var.value = (1.0 - m) * dict.bn_var.value + m * (stats.var * (b / (b - 1.0)));
      }
    } else {
      const Matrix shift = -dict.bn_mean.value;
      const Matrix inv_std = (dict.bn_var.value.array() + dict.bn_epsilon).rsqrt().matrix();
      xhat = ad::mul_row(ad::add_row(dots, tape.constant(shift)), tape.constant(inv_std));
    }
    pre = ad::mul_row(xhat, gamma);
    if (with_beta) pre = ad::add_row(pre, beta);
  } else {
    pre = ad::mul_row(dots, gamma);
    if (with_beta) pre = ad::add_row(pre, ad::scale(beta, -1.0));
  }

  ad::Var answers;
  if (dict.answer_mode == AnswerMode::soft) {
    answers = pre;
  } else {
    answers = opts.surrogate_forward ? ad::tanh(pre) : ad::sign_st(pre);
  }
  return {answers, pre};
}

inline AnswerBatch learnable_answers(LearnableDictionary& dict, const Matrix& batch, Phase phase) {
  ad::Tape tape;
  auto fwd = learnable_answers(dict, tape, batch, phase);
  return fwd.batch(dict.answer_mode, phase);
}

struct DictionaryGradients {
  Matrix v;
  Matrix gamma;
  Matrix beta;
};

// Parameter gradients of sum(upstream .* answers) where the hard answers are
// differentiated as tanh of the normalized activation. Requires the AnswerBatch
// produced by the matching forward; running statistics are not touched.
inline DictionaryGradients learnable_answers_backward(LearnableDictionary& dict, const Matrix& batch,
                                                      const AnswerBatch& forward, const Matrix& upstream) {
  if (forward.surrogate_values.size() == 0 || forward.normalized.size() == 0) {
    throw StateError("learnable_answers_backward: forward did not retain surrogate values");
  }
  if (upstream.rows() != forward.values.rows() || upstream.cols() != forward.values.cols()) {
    throw InvalidArgument("learnable_answers_backward: upstream gradient shape mismatch");
  }

  // The replay must see the statistics the forward used; in the train phase
  // those are batch statistics, which do not depend on the running values.
  ad::Tape tape;
  std::vector<ad::Tensor*> params = dict.trainable();
  std::vector<bool> saved_flags;
  for (auto* p : params) {
    saved_flags.push_back(p->requires_grad);
    p->requires_grad = true;
  }
  std::vector<Matrix> saved_grads;
  for (auto* p : params) {
    saved_grads.push_back(p->grad);
    p->zero_grad();
  }

  DictionaryForwardOptions opts;
  opts.update_running_stats = false;
  auto fwd = learnable_answers(dict, tape, batch, forward.phase, opts);
  ad::Var loss = ad::sum(ad::mul(fwd.answers, tape.constant(upstream)));
  tape.backward(loss);

  DictionaryGradients out{dict.v.grad, dict.gamma.grad, dict.beta.grad};
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i]->grad = saved_grads[i];
    params[i]->requires_grad = saved_flags[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// QueryDictionary: the dictionary a pursuit model queries

enum class DictionaryKind { learnable, fixed };

struct QueryDictionary {
  DictionaryKind kind = DictionaryKind::learnable;
  LearnableDictionary learnable;
  FixedDictionary fixed;
  AnswerMode fixed_mode = AnswerMode::soft;

  Eigen::Index size() const { return kind == DictionaryKind::learnable ? learnable.size() : fixed.size(); }
  Eigen::Index dim() const { return kind == DictionaryKind::learnable ? learnable.dim() : fixed.dim(); }
  AnswerMode mode() const { return kind == DictionaryKind::learnable ? learnable.answer_mode : fixed_mode; }
  bool trainable() const { return kind == DictionaryKind::learnable; }

  // Answers recorded on `tape`. Fixed dictionaries are constants.
  ad::Var answers(ad::Tape& tape, const Matrix& batch, Phase phase, bool update_running_stats = true) {
    if (kind == DictionaryKind::learnable) {
      DictionaryForwardOptions opts;
      opts.update_running_stats = update_running_stats;
      return learnable_answers(learnable, tape, batch, phase, opts).answers;
    }
    return tape.constant(fixed_values(batch));
  }

  // Inference-phase answers without recording anything persistent.
  Matrix infer(const Matrix& batch) {
    ad::Tape tape;
    return answers(tape, batch, Phase::infer, false).value();
  }

  Matrix fixed_values(const Matrix& batch) const {
    return fixed_mode == AnswerMode::soft ? fixed_soft_answers(fixed, batch).values
                                          : fixed_hard_answers(fixed, batch).values;
  }

  std::vector<ad::Tensor*> trainable_tensors() {
    if (kind == DictionaryKind::learnable) return learnable.trainable();
    return {};
  }

  void set_frozen(bool frozen) {
    if (kind == DictionaryKind::learnable) learnable.set_frozen(frozen);
  }
};

}  // namespace qdl
