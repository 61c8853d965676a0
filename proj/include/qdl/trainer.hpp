#pragma once

// V-IP objective and the phased dictionary-learning schedule:
//   init -> warm-up -> (querier phase -> dictionary phase) x outer_iterations
// plus the joint-optimization variant and the black-box reference MLP.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "qdl/diffmath.hpp"
#include "qdl/embedding_store.hpp"
#include "qdl/error.hpp"
#include "qdl/pursuit_nets.hpp"
#include "qdl/query_dictionary.hpp"
#include "qdl/types.hpp"

namespace qdl {

enum class InitMode { random, concepts };
enum class DictionarySource { learned, fixed_soft, fixed_hard };

struct TrainPlan {
  int warmup_epochs = 60;
  int querier_random_epochs = 10;
  int querier_biased_epochs = 40;
  int dictionary_epochs = 40;
  int joint_random_epochs = 70;  // defaults match the phased epoch total
  int joint_biased_epochs = 80;
  int outer_iterations = 1;

  double lr_classifier = 1e-3;
  double lr_querier = 1e-3;
  double lr_dictionary = 1e-3;
  int batch_size = 128;
  int budget = 5;
  int dict_size = 16;
  std::uint64_t seed = 0;

  bool joint_optimization = false;
  bool skip_warmup = false;
  bool soft_answers = false;
  bool soft_with_beta = true;
  bool bn_off = false;
  InitMode init_mode = InitMode::random;
  DictionarySource dictionary_source = DictionarySource::learned;
  bool exclude_asked = true;
  bool anneal_per_phase = true;
  bool select_on_mean_curve = true;  // best snapshot by mean val accuracy over k=1..budget, else at budget
  double temperature_start = 1.0;
  double temperature_end = 0.2;
  double bn_epsilon = kDefaultBnEpsilon;
  double bn_momentum = kDefaultBnMomentum;
  NetworkConfig network{{128, 128}, {128, 128}};

  bool learnable_dictionary() const { return dictionary_source == DictionarySource::learned; }

  void validate() const {
    auto nonneg = [](int v, const char* name) {
      if (v < 0) throw InvalidArgument(std::string("plan: ") + name + " must be >= 0");
    };
    nonneg(warmup_epochs, "warmup_epochs");
    nonneg(querier_random_epochs, "querier_random_epochs");
    nonneg(querier_biased_epochs, "querier_biased_epochs");
    nonneg(dictionary_epochs, "dictionary_epochs");
    nonneg(joint_random_epochs, "joint_random_epochs");
    nonneg(joint_biased_epochs, "joint_biased_epochs");
    nonneg(outer_iterations, "outer_iterations");
    if (dict_size < 1) throw InvalidArgument("plan: dict_size must be >= 1");
    if (budget < 1 || budget > dict_size) throw InvalidArgument("plan: budget must lie in [1, dict_size]");
    if (batch_size < 1) throw InvalidArgument("plan: batch_size must be >= 1");
    if (learnable_dictionary() && !bn_off && batch_size < 2) {
      throw InvalidArgument("plan: batch_size must be >= 2 when a batch-normalized dictionary trains");
    }
    if (!(lr_classifier > 0 && lr_querier > 0 && lr_dictionary > 0)) throw InvalidArgument("plan: learning rates must be > 0");
    if (!(temperature_start > 0 && temperature_end > 0)) throw InvalidArgument("plan: temperatures must be > 0");
    if (!(bn_epsilon > 0)) throw InvalidArgument("plan: bn_epsilon must be > 0");
    if (!(bn_momentum > 0 && bn_momentum <= 1)) throw InvalidArgument("plan: bn_momentum must lie in (0, 1]");
  }
};

struct EpochRecord {
  int epoch = 0;
  std::string phase;
  double loss = 0.0;
  double val_acc_at_budget = 0.0;
  double val_mean_acc = 0.0;  // mean validation accuracy over k = 1..budget
  double temperature = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> records;

  void append(EpochRecord r) {
    r.epoch = static_cast<int>(records.size());
    records.push_back(std::move(r));
  }

  std::vector<std::string> phases() const {
    std::vector<std::string> out;
    for (const auto& r : records)
      if (out.empty() || out.back() != r.phase) out.push_back(r.phase);
    return out;
  }

  // Wall time is written only when requested so that logs stay reproducible.
  std::string to_csv(bool with_wall_time = false) const {
    std::ostringstream os;
    os << "epoch,phase,loss,val_acc_at_budget,temperature,seconds\n";
    os << std::setprecision(10);
    for (const auto& r : records) {
      os << r.epoch << ',' << r.phase << ',' << r.loss << ',' << r.val_acc_at_budget << ',' << r.temperature << ','
         << (with_wall_time ? r.seconds : 0.0) << '\n';
    }
    return os.str();
  }
};

struct TrainData {
  Matrix train_x;
  Labels train_y;
  Matrix val_x;
  Labels val_y;
  Eigen::Index num_classes = 0;

  static TrainData from(const EmbeddingDataset& train, const EmbeddingDataset& val) {
    if (!train.has_labels() || !val.has_labels()) throw InvalidArgument("training data must be labeled");
    if (train.dim != val.dim) throw InvalidArgument("train and validation dimensions differ");
    TrainData d;
    d.train_x = train.all_rows();
    d.train_y = train.labels;
    d.val_x = val.all_rows();
    d.val_y = val.labels;
    d.num_classes = std::max(train.num_classes, val.num_classes);
    return d;
  }
};

// ---------------------------------------------------------------------------
// evaluation helpers

inline Eigen::Index predict_row(const Matrix& probs, Eigen::Index r) { return ad::argmax_row(probs, r); }

inline double accuracy_of(const Matrix& probs, const Labels& y) {
  if (probs.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) hits += predict_row(probs, r) == y[r] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(probs.rows());
}

// Test accuracy after k = 1..tau greedy querier selections (entry k-1).
inline std::vector<double> querier_accuracy_curve(PursuitModel& model, const Matrix& x, const Labels& y, int tau) {
  if (tau < 0 || tau > model.num_queries()) throw InvalidArgument("accuracy curve: tau exceeds dictionary size");
  const Matrix answers = model.dictionary.infer(x);
  std::vector<std::vector<Eigen::Index>> order;
  rollout_masks(model, answers, std::vector<int>(static_cast<std::size_t>(x.rows()), tau), &order);
  std::vector<double> curve;
  Matrix mask = Matrix::Zero(x.rows(), model.num_queries());
  for (int k = 1; k <= tau; ++k) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) mask(r, order[r][k - 1]) = 1.0;
    curve.push_back(accuracy_of(classifier_forward(model, answers, mask), y));
  }
  return curve;
}

// Same curve with queries chosen uniformly at random (without repeats).
inline std::vector<double> random_policy_accuracy_curve(PursuitModel& model, const Matrix& x, const Labels& y, int tau,
                                                        std::uint64_t seed) {
  const Eigen::Index n = model.num_queries();
  if (tau < 0 || tau > n) throw InvalidArgument("accuracy curve: tau exceeds dictionary size");
  const Matrix answers = model.dictionary.infer(x);
  std::mt19937_64 rng(seed);
  std::vector<std::vector<Eigen::Index>> order(static_cast<std::size_t>(x.rows()));
  for (auto& o : order) {
    o.resize(static_cast<std::size_t>(n));
    std::iota(o.begin(), o.end(), Eigen::Index{0});
    std::shuffle(o.begin(), o.end(), rng);
  }
  std::vector<double> curve;
  Matrix mask = Matrix::Zero(x.rows(), n);
  for (int k = 1; k <= tau; ++k) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) mask(r, order[r][k - 1]) = 1.0;
    curve.push_back(accuracy_of(classifier_forward(model, answers, mask), y));
  }
  return curve;
}

inline double accuracy_at_budget(PursuitModel& model, const Matrix& x, const Labels& y, int tau) {
  if (tau == 0) {
    Matrix answers = model.dictionary.infer(x);
    return accuracy_of(classifier_forward(model, answers, Matrix::Zero(x.rows(), model.num_queries())), y);
  }
  return querier_accuracy_curve(model, x, y, tau).back();
}

// ---------------------------------------------------------------------------
// the V-IP objective

enum class HistorySource { random, biased };

struct VipLossOptions {
  bool use_querier = true;  // false: warm-up (classifier on S alone)
  double temperature = 1.0;
  bool exclude_asked = true;
};

// Cross-entropy of f(S u A(X, S)) against the labels, where S is the history
// given by `mask` over `answers` and A is the querier's straight-through pick.
inline ad::Var vip_loss(PursuitModel& model, ad::Tape& tape, ad::Var answers, const Matrix& mask, const Labels& y,
                        const VipLossOptions& opts) {
  if (answers.rows() < 1) throw InvalidArgument("vip_loss: empty batch");
  ad::Var m = tape.constant(mask);
  if (!opts.use_querier) {
    ad::Var observed = ad::mul(answers, m);
    return ad::cross_entropy(classifier_logits(model, tape, observed, m), y);
  }
  QuerierOptions q;
  q.temperature = opts.temperature;
  q.exclude_asked = opts.exclude_asked;
  ad::Var selection = querier_select(model, tape, ad::mul(answers, m), m, q);
  ad::Var next_mask = ad::add(m, selection);
  ad::Var observed = ad::mul(answers, next_mask);
  return ad::cross_entropy(classifier_logits(model, tape, observed, next_mask), y);
}

// Convenience for a fully observed batch: history masks and answer values supplied directly.
inline double vip_loss_value(PursuitModel& model, const Matrix& answers, const Matrix& mask, const Labels& y,
                             const VipLossOptions& opts) {
  ad::Tape tape;
  return vip_loss(model, tape, tape.constant(answers), mask, y, opts).scalar();
}

// ---------------------------------------------------------------------------
// trainer

class Trainer {
 public:
  Trainer(PursuitModel& model, const TrainPlan& plan, const TrainData& data, std::uint64_t data_seed)
      : model_(model), plan_(plan), data_(data), rng_(data_seed) {
    plan_.validate();
    if (data_.train_x.cols() != model_.dictionary.dim()) throw InvalidArgument("trainer: embedding dimension mismatch");
  }

  TrainLog& log() { return log_; }
  const std::optional<PursuitModel>& best() const { return best_; }
  double best_val_acc() const { return best_acc_; }
  void track_best(bool on) { track_best_ = on; }

  // Dictionary + classifier on random histories, no querier.
  void warmup(int epochs) {
    if (epochs == 0) return;
    if (!model_.dictionary.trainable()) throw InvalidArgument("warm-up requires a learnable dictionary");
    Groups g{true, true, false};
    begin_phase(g);
    const TemperatureSchedule sched = schedule(epochs);
    for (int e = 0; e < epochs; ++e) run_epoch("warmup", g, HistorySource::random, false, sched.at(e));
  }

  // Frozen dictionary (including running statistics); querier + classifier
  // on random then biased histories under one temperature schedule.
  void querier_phase(int random_epochs, int biased_epochs) {
    const int total = random_epochs + biased_epochs;
    if (total == 0) return;
    Groups g{false, true, true};
    begin_phase(g);
    const TemperatureSchedule sched = schedule(total);
    for (int e = 0; e < total; ++e) {
      const bool random = e < random_epochs;
      run_epoch(random ? "querier_random" : "querier_biased", g, random ? HistorySource::random : HistorySource::biased,
                true, annealed(sched, e));
    }
  }

  // Frozen querier; dictionary + classifier on biased histories.
  void dictionary_phase(int epochs) {
    if (epochs == 0) return;
    if (!model_.dictionary.trainable()) throw InvalidArgument("dictionary phase requires a learnable dictionary");
    Groups g{true, true, false};
    begin_phase(g);
    const TemperatureSchedule sched = schedule(epochs);
    for (int e = 0; e < epochs; ++e) run_epoch("dictionary", g, HistorySource::biased, true, annealed(sched, e));
  }

  // All three groups at once, random then biased histories.
  void joint(int random_epochs, int biased_epochs) {
    const int total = random_epochs + biased_epochs;
    Groups g{model_.dictionary.trainable(), true, true};
    begin_phase(g);
    const TemperatureSchedule sched = schedule(total);
    for (int e = 0; e < total; ++e) {
      const bool random = e < random_epochs;
      run_epoch(random ? "joint_random" : "joint_biased", g, random ? HistorySource::random : HistorySource::biased,
                true, sched.at(e));
    }
  }

  // Global annealing spans every querier-using epoch of the run when
  // anneal_per_phase is off.
  void set_global_schedule(int total_querier_epochs) {
    global_total_ = total_querier_epochs;
    global_epoch_ = 0;
  }

 private:
  struct Groups {
    bool dictionary;
    bool classifier;
    bool querier;
  };

  TemperatureSchedule schedule(int total) const {
    return {plan_.temperature_start, plan_.temperature_end, std::max(total, 1)};
  }

  double annealed(const TemperatureSchedule& local, int e) {
    if (plan_.anneal_per_phase || global_total_ <= 0) return local.at(e);
    TemperatureSchedule g{plan_.temperature_start, plan_.temperature_end, global_total_};
    return g.at(global_epoch_++);
  }

  int max_history(bool use_querier) const {
    const int n = static_cast<int>(model_.num_queries());
    if (!use_querier) return std::min(plan_.budget, n);
    return std::min(plan_.budget - 1, n - 1);
  }

  void set_groups(const Groups& g) {
    model_.dictionary.set_frozen(!g.dictionary);
    model_.classifier.set_frozen(!g.classifier);
    model_.querier.set_frozen(!g.querier);
  }

  // Fresh Adam state for every phase.
  void begin_phase(const Groups& groups) {
    optimizers_.clear();
    if (groups.classifier) optimizers_.emplace_back(model_.classifier.params(), plan_.lr_classifier);
    if (groups.querier) optimizers_.emplace_back(model_.querier.params(), plan_.lr_querier);
    if (groups.dictionary) optimizers_.emplace_back(model_.dictionary.trainable_tensors(), plan_.lr_dictionary);
  }

  void run_epoch(const char* tag, const Groups& groups, HistorySource source, bool use_querier, double temperature) {
    const auto t0 = std::chrono::steady_clock::now();
    set_groups(groups);

    const Eigen::Index n_train = data_.train_x.rows();
    Indices order(static_cast<std::size_t>(n_train));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng_);

    // A frozen dictionary answers in the inference phase; compute once.
    Matrix frozen_answers;
    if (!groups.dictionary) frozen_answers = model_.dictionary.infer(data_.train_x);

    const int bs = plan_.batch_size;
    const int max_k = max_history(use_querier);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(bs)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(bs));
      // A trailing batch of one sample has no batch variance; fold it out.
      if (end - start < 2 && groups.dictionary) continue;
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const auto b = static_cast<Eigen::Index>(idx.size());

      Matrix xb(b, data_.train_x.cols());
      Labels yb;
      yb.reserve(idx.size());
      for (Eigen::Index r = 0; r < b; ++r) {
        xb.row(r) = data_.train_x.row(static_cast<Eigen::Index>(idx[r]));
        yb.push_back(data_.train_y[idx[r]]);
      }

      ad::Tape tape;
      ad::Var answers;
      if (groups.dictionary) {
        answers = model_.dictionary.answers(tape, xb, Phase::train);
      } else {
        Matrix ab(b, frozen_answers.cols());
        for (Eigen::Index r = 0; r < b; ++r) ab.row(r) = frozen_answers.row(static_cast<Eigen::Index>(idx[r]));
        answers = tape.constant(std::move(ab));
      }

      Matrix mask;
      const Eigen::Index n = model_.num_queries();
      if (source == HistorySource::random) {
        mask = sample_random_masks(b, n, max_k, rng_);
      } else {
        std::uniform_int_distribution<int> pick(0, max_k);
        std::vector<int> steps(static_cast<std::size_t>(b));
        for (auto& s : steps) s = pick(rng_);
        mask = rollout_masks(model_, answers.value(), steps);
      }

      VipLossOptions lo;
      lo.use_querier = use_querier;
      lo.temperature = temperature;
      lo.exclude_asked = plan_.exclude_asked;
      ad::Var loss = vip_loss(model_, tape, answers, mask, yb, lo);

      for (auto& o : optimizers_) o.zero_grad();
      tape.backward(loss);
      for (auto& o : optimizers_) o.step();

      loss_sum += loss.scalar() * static_cast<double>(b);
      seen += idx.size();
    }

    EpochRecord rec;
    rec.phase = tag;
    rec.loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    rec.temperature = use_querier ? temperature : 0.0;
    set_groups({false, false, false});
    const auto curve = querier_accuracy_curve(model_, data_.val_x, data_.val_y, plan_.budget);
    rec.val_acc_at_budget = curve.back();
    rec.val_mean_acc = std::accumulate(curve.begin(), curve.end(), 0.0) / static_cast<double>(curve.size());
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double score = plan_.select_on_mean_curve ? rec.val_mean_acc : rec.val_acc_at_budget;
    if (track_best_ && use_querier && (!best_ || score > best_acc_)) {
      best_acc_ = score;
      best_ = model_;
    }
    log_.append(std::move(rec));
  }

  PursuitModel& model_;
  TrainPlan plan_;
  const TrainData& data_;
  std::mt19937_64 rng_;
  TrainLog log_;
  std::vector<ad::Adam> optimizers_;
  std::optional<PursuitModel> best_;
  double best_acc_ = -1.0;
  bool track_best_ = true;
  int global_total_ = 0;
  int global_epoch_ = 0;
};

// ---------------------------------------------------------------------------
// entry points

struct TrainResult {
  PursuitModel model;  // best-validation snapshot
  TrainLog log;
  double best_val_acc = 0.0;
};

namespace detail {

struct RunSeeds {
  std::uint64_t dictionary;
  std::uint64_t networks;
  std::uint64_t data;
};

inline RunSeeds derive_seeds(std::uint64_t seed) {
  std::seed_seq seq{seed, std::uint64_t{0x71646c}};
  std::mt19937_64 rng(seq);
  RunSeeds s;
  s.dictionary = rng();
  s.networks = rng();
  s.data = rng();
  return s;
}

}  // namespace detail

// Fixed concept vectors are needed for init_mode == concepts and for fixed
// dictionary sources; they are ignored otherwise.
inline QueryDictionary make_dictionary(const TrainPlan& plan, Eigen::Index dim, std::uint64_t seed,
                                       const Matrix* concepts, const Matrix* train_x) {
  QueryDictionary q;
  if (plan.learnable_dictionary()) {
    q.kind = DictionaryKind::learnable;
    if (plan.init_mode == InitMode::concepts) {
      if (concepts == nullptr) throw InvalidArgument("init=concepts requires concept vectors");
      q.learnable = init_from_concepts(*concepts);
    } else {
      q.learnable = init_random(plan.dict_size, dim, seed);
    }
    q.learnable.answer_mode = plan.soft_answers ? AnswerMode::soft : AnswerMode::hard;
    q.learnable.soft_with_beta = plan.soft_with_beta;
    q.learnable.parameterization = plan.bn_off ? Parameterization::affine : Parameterization::batch_norm;
    q.learnable.bn_epsilon = plan.bn_epsilon;
    q.learnable.bn_momentum = plan.bn_momentum;
  } else {
    if (concepts == nullptr || train_x == nullptr) throw InvalidArgument("fixed dictionaries require concept vectors");
    q.kind = DictionaryKind::fixed;
    q.fixed = fit_thresholds(fit_zscore(FixedDictionary::from_vectors(*concepts), *train_x), *train_x);
    q.fixed_mode = plan.dictionary_source == DictionarySource::fixed_soft ? AnswerMode::soft : AnswerMode::hard;
  }
  if (q.dim() != dim) throw InvalidArgument("dictionary dimension does not match the data");
  return q;
}

inline PursuitModel initialize_model(const TrainPlan& plan, const TrainData& data, const Matrix* concepts = nullptr) {
  plan.validate();
  const auto seeds = detail::derive_seeds(plan.seed);
  QueryDictionary dict = make_dictionary(plan, data.train_x.cols(), seeds.dictionary, concepts, &data.train_x);
  if (dict.size() != plan.dict_size) {
    throw InvalidArgument("plan dict_size=" + std::to_string(plan.dict_size) + " but the dictionary has " +
                          std::to_string(dict.size()) + " queries");
  }
  return PursuitModel::create(std::move(dict), data.num_classes, plan.network, seeds.networks);
}

inline TrainResult run_algorithm1(const TrainPlan& plan, const TrainData& data, const Matrix* concepts = nullptr) {
  PursuitModel model = initialize_model(plan, data, concepts);
  const auto seeds = detail::derive_seeds(plan.seed);
  Trainer trainer(model, plan, data, seeds.data);

  const bool learnable = model.dictionary.trainable();
  if (!plan.anneal_per_phase) {
    trainer.set_global_schedule(plan.outer_iterations *
                                (plan.querier_random_epochs + plan.querier_biased_epochs +
                                 (learnable ? plan.dictionary_epochs : 0)));
  }
  if (learnable && !plan.skip_warmup) trainer.warmup(plan.warmup_epochs);
  for (int it = 0; it < plan.outer_iterations; ++it) {
    trainer.querier_phase(plan.querier_random_epochs, plan.querier_biased_epochs);
    if (learnable) trainer.dictionary_phase(plan.dictionary_epochs);
  }

  TrainResult out{trainer.best() ? *trainer.best() : model, trainer.log(), trainer.best_val_acc()};
  out.model.dictionary.set_frozen(true);
  out.model.classifier.set_frozen(true);
  out.model.querier.set_frozen(true);
  return out;
}

inline TrainResult joint_train(const TrainPlan& plan, const TrainData& data, const Matrix* concepts = nullptr) {
  PursuitModel model = initialize_model(plan, data, concepts);
  const auto seeds = detail::derive_seeds(plan.seed);
  Trainer trainer(model, plan, data, seeds.data);
  trainer.joint(plan.joint_random_epochs, plan.joint_biased_epochs);
  TrainResult out{trainer.best() ? *trainer.best() : model, trainer.log(), trainer.best_val_acc()};
  out.model.dictionary.set_frozen(true);
  out.model.classifier.set_frozen(true);
  out.model.querier.set_frozen(true);
  return out;
}

inline TrainResult train(const TrainPlan& plan, const TrainData& data, const Matrix* concepts = nullptr) {
  return plan.joint_optimization ? joint_train(plan, data, concepts) : run_algorithm1(plan, data, concepts);
}

// ---------------------------------------------------------------------------
// black-box reference

struct BlackBoxConfig {
  std::vector<int> hidden{256, 128};
  double dropout = 0.5;
  int epochs = 100;
  int batch_size = 512;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

struct BlackBoxModel {
  Mlp net;
  double dropout = 0.5;

  // Training-mode forward when `rng` is given (input dropout); evaluation otherwise.
  ad::Var forward(ad::Tape& tape, const Matrix& x, std::mt19937_64* rng) {
    ad::Var in = tape.constant(x);
    if (rng != nullptr && dropout > 0.0) {
      std::bernoulli_distribution keep(1.0 - dropout);
      Matrix m(x.rows(), x.cols());
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(*rng) ? 1.0 / (1.0 - dropout) : 0.0;
      in = ad::mul(in, tape.constant(std::move(m)));
    }
    return net.forward(tape, in);
  }

  Matrix predict_proba(const Matrix& x) {
    ad::Tape tape;
    return ad::softmax_rows_value(forward(tape, x, nullptr).value());
  }
};

inline BlackBoxModel train_blackbox(const Matrix& x, const Labels& y, Eigen::Index num_classes,
                                    const BlackBoxConfig& cfg = {}) {
  if (x.rows() < 1) throw InvalidArgument("train_blackbox: empty training set");
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw InvalidArgument("train_blackbox: invalid configuration");
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) throw InvalidArgument("train_blackbox: dropout must lie in [0,1)");
  std::seed_seq seq{cfg.seed, std::uint64_t{0x626278}};
  std::mt19937_64 rng(seq);
  BlackBoxModel model{Mlp("bbx", x.cols(), cfg.hidden, num_classes, rng()), cfg.dropout};
  ad::Adam opt(model.net.params(), cfg.learning_rate, cfg.weight_decay);

  Indices order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Matrix xb(static_cast<Eigen::Index>(end - start), x.cols());
      Labels yb;
      for (std::size_t i = start; i < end; ++i) {
        xb.row(static_cast<Eigen::Index>(i - start)) = x.row(static_cast<Eigen::Index>(order[i]));
        yb.push_back(y[order[i]]);
      }
      ad::Tape tape;
      ad::Var loss = ad::cross_entropy(model.forward(tape, xb, &rng), yb);
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
    }
  }
  model.net.set_frozen(true);
  return model;
}

}  // namespace qdl
