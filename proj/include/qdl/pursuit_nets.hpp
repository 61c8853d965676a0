#pragma once

// Classifier f and querier g over masked query-answer histories.
//
// A history is a binary mask M over the n queries plus the masked answers
// Q(x) * M. Both networks read the concatenation [Q(x) * M, M] and share no
// weights. The querier emits a one-hot selection through a temperature-scaled
// straight-through softmax.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "qdl/diffmath.hpp"
#include "qdl/error.hpp"
#include "qdl/query_dictionary.hpp"
#include "qdl/types.hpp"

namespace qdl {

// Linear -> LayerNorm -> ReLU for each hidden width, then a final Linear.
class Mlp {
 public:
  Mlp() = default;

  Mlp(const std::string& prefix, Eigen::Index in, const std::vector<int>& hidden, Eigen::Index out,
      std::uint64_t seed)
      : in_(in), out_(out) {
    std::mt19937_64 rng(seed);
    Eigen::Index prev = in;
    std::vector<Eigen::Index> widths(hidden.begin(), hidden.end());
    widths.push_back(out);
    for (std::size_t l = 0; l < widths.size(); ++l) {
      const Eigen::Index w = widths[l];
      if (w < 1) throw InvalidArgument("mlp: layer widths must be >= 1");
      const double bound = 1.0 / std::sqrt(static_cast<double>(prev));
      std::uniform_real_distribution<double> uni(-bound, bound);
      Matrix weight(prev, w);
      for (Eigen::Index i = 0; i < weight.size(); ++i) weight.data()[i] = uni(rng);
      Matrix bias(1, w);
      for (Eigen::Index i = 0; i < bias.size(); ++i) bias.data()[i] = uni(rng);
      const std::string tag = prefix + ".l" + std::to_string(l);
      layers_.push_back({ad::Tensor(tag + ".weight", std::move(weight)), ad::Tensor(tag + ".bias", std::move(bias)),
                         ad::Tensor(tag + ".ln_gain", Matrix::Ones(1, w)),
                         ad::Tensor(tag + ".ln_bias", Matrix::Zero(1, w))});
      prev = w;
    }
  }

  Eigen::Index in_dim() const { return in_; }
  Eigen::Index out_dim() const { return out_; }

  ad::Var forward(ad::Tape& tape, ad::Var x) {
    if (x.cols() != in_) {
      throw InvalidArgument("mlp: expected input width " + std::to_string(in_) + ", got " + std::to_string(x.cols()));
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto& layer = layers_[l];
      x = ad::add_row(ad::matmul(x, tape.leaf(layer.weight)), tape.leaf(layer.bias));
      if (l + 1 < layers_.size()) {
        x = ad::layer_norm(x);
        x = ad::add_row(ad::mul_row(x, tape.leaf(layer.ln_gain)), tape.leaf(layer.ln_bias));
        x = ad::relu(x);
      }
    }
    return x;
  }

  // The final layer's LayerNorm tensors are unused and therefore omitted.
  std::vector<ad::Tensor*> params() {
    std::vector<ad::Tensor*> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      out.push_back(&layers_[l].weight);
      out.push_back(&layers_[l].bias);
      if (l + 1 < layers_.size()) {
        out.push_back(&layers_[l].ln_gain);
        out.push_back(&layers_[l].ln_bias);
      }
    }
    return out;
  }

  std::vector<const ad::Tensor*> params() const {
    std::vector<const ad::Tensor*> out;
    for (auto* p : const_cast<Mlp*>(this)->params()) out.push_back(p);
    return out;
  }

  void set_frozen(bool frozen) {
    for (auto* p : params()) p->requires_grad = !frozen;
  }

 private:
  struct Layer {
    ad::Tensor weight;
    ad::Tensor bias;
    ad::Tensor ln_gain;
    ad::Tensor ln_bias;
  };
  Eigen::Index in_ = 0;
  Eigen::Index out_ = 0;
  std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// histories

struct History {
  RowVector mask;            // 1 x n in {0, 1}
  RowVector masked_answers;  // answers * mask
  std::vector<Eigen::Index> order;  // selection order

  static History empty(Eigen::Index n) { return {RowVector::Zero(n), RowVector::Zero(n), {}}; }

  Eigen::Index size() const { return mask.size(); }
  int count() const { return static_cast<int>(mask.sum()); }
};

// Adds the selected query's answer. A repeated selection leaves the history
// unchanged (the mask saturates) and returns false.
inline bool update_history(History& h, const RowVector& selection, const RowVector& answers) {
  if (selection.size() != h.size() || answers.size() != h.size()) {
    throw InvalidArgument("update_history: size mismatch");
  }
  Eigen::Index idx = 0;
  selection.maxCoeff(&idx);
  if (selection(idx) <= 0.0) throw InvalidArgument("update_history: selection is not one-hot");
  if (h.mask(idx) != 0.0) return false;
  h.mask(idx) = 1.0;
  h.masked_answers(idx) = answers(idx);
  h.order.push_back(idx);
  return true;
}

inline Matrix stack_masks(const std::vector<History>& hs) {
  Matrix m(static_cast<Eigen::Index>(hs.size()), hs.empty() ? 0 : hs.front().size());
  for (std::size_t i = 0; i < hs.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = hs[i].mask;
  return m;
}

// Masked answers with exact zeros wherever the mask is 0.
inline Matrix apply_mask(const Matrix& answers, const Matrix& mask) {
  return (mask.array() != 0.0).select(answers, 0.0);
}

// k ~ U{0..max_k}, then k distinct indices uniformly without replacement.
inline std::vector<Eigen::Index> sample_query_subset(Eigen::Index n, Eigen::Index max_k, std::mt19937_64& rng) {
  if (max_k < 0 || max_k > n) throw InvalidArgument("sample_random_history: max_k must lie in [0, n]");
  std::uniform_int_distribution<Eigen::Index> pick_k(0, max_k);
  const Eigen::Index k = pick_k(rng);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  for (Eigen::Index i = 0; i < k; ++i) {
    std::uniform_int_distribution<Eigen::Index> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

inline History sample_random_history(const RowVector& answers, Eigen::Index max_k, std::mt19937_64& rng) {
  History h = History::empty(answers.size());
  for (auto i : sample_query_subset(answers.size(), max_k, rng)) {
    h.mask(i) = 1.0;
    h.masked_answers(i) = answers(i);
    h.order.push_back(i);
  }
  return h;
}

inline History sample_random_history(const RowVector& answers, Eigen::Index max_k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_random_history(answers, max_k, rng);
}

inline Matrix sample_random_masks(Eigen::Index batch, Eigen::Index n, Eigen::Index max_k, std::mt19937_64& rng) {
  Matrix mask = Matrix::Zero(batch, n);
  for (Eigen::Index r = 0; r < batch; ++r)
    for (auto i : sample_query_subset(n, max_k, rng)) mask(r, i) = 1.0;
  return mask;
}

// ---------------------------------------------------------------------------
// temperature

struct TemperatureSchedule {
  double start = 1.0;
  double end = 0.2;
  int total_epochs = 1;

  // Linear from start (epoch 0) to end (last epoch).
  double at(int epoch) const {
    if (total_epochs <= 1) return start;
    const int e = std::clamp(epoch, 0, total_epochs - 1);
    if (e == total_epochs - 1) return end;
    return start + (end - start) * static_cast<double>(e) / static_cast<double>(total_epochs - 1);
  }
};

// ---------------------------------------------------------------------------
// model

struct NetworkConfig {
  std::vector<int> classifier_hidden{512, 512};
  std::vector<int> querier_hidden{512, 512};
};

struct PursuitModel {
  QueryDictionary dictionary;
  Mlp classifier;
  Mlp querier;
  Eigen::Index num_classes = 0;
  NetworkConfig config;

  Eigen::Index num_queries() const { return dictionary.size(); }

  static PursuitModel create(QueryDictionary dict, Eigen::Index num_classes, const NetworkConfig& cfg,
                             std::uint64_t seed) {
    if (num_classes < 2) throw InvalidArgument("pursuit model needs at least 2 classes");
    PursuitModel m;
    const Eigen::Index n = dict.size();
    m.dictionary = std::move(dict);
    m.num_classes = num_classes;
    m.config = cfg;
    std::seed_seq seq{seed, std::uint64_t{0x636c66}};
    std::mt19937_64 rng(seq);
    const std::uint64_t clf_seed = rng();
    const std::uint64_t qry_seed = rng();
    m.classifier = Mlp("clf", 2 * n, cfg.classifier_hidden, num_classes, clf_seed);
    m.querier = Mlp("qry", 2 * n, cfg.querier_hidden, n, qry_seed);
    return m;
  }

  std::vector<const ad::Tensor*> classifier_tensors() const { return classifier.params(); }
  std::vector<const ad::Tensor*> querier_tensors() const { return querier.params(); }
  std::vector<const ad::Tensor*> dictionary_tensors() const {
    if (dictionary.kind == DictionaryKind::learnable) return dictionary.learnable.tensors();
    return {};
  }
};

inline ad::Var history_input(ad::Var masked_answers, ad::Var mask) { return ad::concat_cols(masked_answers, mask); }

inline void check_history_width(const PursuitModel& model, Eigen::Index width) {
  if (width != model.num_queries()) {
    throw InvalidArgument("history has n=" + std::to_string(width) + " but the model has n=" +
                          std::to_string(model.num_queries()));
  }
}

// Class logits for a batch of histories.
inline ad::Var classifier_logits(PursuitModel& model, ad::Tape& tape, ad::Var masked_answers, ad::Var mask) {
  check_history_width(model, mask.cols());
  return model.classifier.forward(tape, history_input(masked_answers, mask));
}

// Class probabilities, one row per history.
inline Matrix classifier_forward(PursuitModel& model, const Matrix& masked_answers, const Matrix& mask) {
  ad::Tape tape;
  auto logits = classifier_logits(model, tape, tape.constant(apply_mask(masked_answers, mask)), tape.constant(mask));
  return ad::softmax_rows_value(logits.value());
}

struct QuerierOptions {
  double temperature = 1.0;
  bool exclude_asked = true;
  bool soft_forward = false;  // emit the softmax probabilities instead of the one-hot
};

// Selection matrix (B x n). Rows whose every query is already asked raise
// StateError("history saturated") when exclusion is on.
inline ad::Var querier_select(PursuitModel& model, ad::Tape& tape, ad::Var masked_answers, ad::Var mask,
                              const QuerierOptions& opts) {
  check_history_width(model, mask.cols());
  ad::Var logits = model.querier.forward(tape, history_input(masked_answers, mask));
  if (opts.exclude_asked) {
    const Matrix& m = mask.value();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      if (m.row(r).minCoeff() > 0.0) throw StateError("history saturated: every query is already asked");
    }
    logits = ad::masked_fill(logits, m, -std::numeric_limits<double>::infinity());
  }
  return ad::straight_through_onehot(logits, opts.temperature, opts.soft_forward);
}

inline Matrix querier_forward(PursuitModel& model, const Matrix& masked_answers, const Matrix& mask,
                              const QuerierOptions& opts) {
  ad::Tape tape;
  return querier_select(model, tape, tape.constant(apply_mask(masked_answers, mask)), tape.constant(mask), opts)
      .value();
}

// Greedy rollout in lockstep: row r receives steps[r] selections, asked
// queries excluded. Returns the final masks; `order` (when non-null) receives
// the selection order per row.
inline Matrix rollout_masks(PursuitModel& model, const Matrix& answers, const std::vector<int>& steps,
                            std::vector<std::vector<Eigen::Index>>* order = nullptr) {
  const Eigen::Index b = answers.rows();
  const Eigen::Index n = answers.cols();
  check_history_width(model, n);
  if (static_cast<Eigen::Index>(steps.size()) != b) throw InvalidArgument("rollout: one step count per row");
  const int max_steps = steps.empty() ? 0 : *std::max_element(steps.begin(), steps.end());
  if (max_steps > n) throw InvalidArgument("rollout: k_target exceeds dictionary size");
  if (order) order->assign(static_cast<std::size_t>(b), {});

  Matrix mask = Matrix::Zero(b, n);
  QuerierOptions opts;
  for (int s = 0; s < max_steps; ++s) {
    std::vector<Eigen::Index> active;
    for (Eigen::Index r = 0; r < b; ++r)
      if (steps[r] > s) active.push_back(r);
    Matrix sub_mask(static_cast<Eigen::Index>(active.size()), n);
    Matrix sub_answers(static_cast<Eigen::Index>(active.size()), n);
    for (std::size_t i = 0; i < active.size(); ++i) {
      sub_mask.row(static_cast<Eigen::Index>(i)) = mask.row(active[i]);
      sub_answers.row(static_cast<Eigen::Index>(i)) = answers.row(active[i]);
    }
    const Matrix sel = querier_forward(model, sub_answers, sub_mask, opts);
    for (std::size_t i = 0; i < active.size(); ++i) {
      Eigen::Index idx = 0;
      sel.row(static_cast<Eigen::Index>(i)).maxCoeff(&idx);
      mask(active[i], idx) = 1.0;
      if (order) (*order)[static_cast<std::size_t>(active[i])].push_back(idx);
    }
  }
  return mask;
}

// Single-sample rollout. In training mode the length is k ~ U{0..k_target};
// in evaluation mode it is exactly k_target.
inline History rollout_biased_history(PursuitModel& model, const RowVector& answers, int k_target, bool training,
                                      std::mt19937_64* rng = nullptr) {
  if (k_target < 0 || k_target > answers.size()) throw InvalidArgument("rollout: k_target must lie in [0, n]");
  int k = k_target;
  if (training) {
    if (rng == nullptr) throw InvalidArgument("rollout: training mode needs a random generator");
    std::uniform_int_distribution<int> pick(0, k_target);
    k = pick(*rng);
  }
  std::vector<std::vector<Eigen::Index>> order;
  Matrix a = answers;
  Matrix mask = rollout_masks(model, a, {k}, &order);
  History h = History::empty(answers.size());
  h.mask = mask.row(0);
  h.masked_answers = apply_mask(a, mask).row(0);
  h.order = order.front();
  return h;
}

}  // namespace qdl
