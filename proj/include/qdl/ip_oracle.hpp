#pragma once

// Exact Information Pursuit over an enumerable joint P(Y, q_1(X), ..., q_n(X))
// with binary answers. Used as an explainer on small problems and as the
// ground truth the learned querier is compared against.
//
// The dense table is indexed [y * 2^n + atom], where bit i of `atom` is set
// when q_i = +1. All information quantities are in bits.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qdl/embedding_store.hpp"
#include "qdl/error.hpp"
#include "qdl/query_dictionary.hpp"
#include "qdl/types.hpp"

namespace qdl::ip {

inline constexpr int kMaxQueries = 20;
inline constexpr double kMassTolerance = 1e-12;
inline constexpr double kTieTolerance = 1e-12;

struct DiscreteInstance {
  int num_classes = 0;
  int num_queries = 0;
  std::vector<double> table;

  std::size_t atoms() const { return std::size_t{1} << num_queries; }
  double& at(int y, std::size_t atom) { return table[static_cast<std::size_t>(y) * atoms() + atom]; }
  double at(int y, std::size_t atom) const { return table[static_cast<std::size_t>(y) * atoms() + atom]; }

  void validate() const {
    if (num_queries < 1 || num_queries > kMaxQueries) {
      throw InvalidArgument("instance: n must lie in [1, " + std::to_string(kMaxQueries) + "]");
    }
    if (num_classes < 2) throw InvalidArgument("instance: C must be >= 2");
    if (table.size() != atoms() * static_cast<std::size_t>(num_classes)) {
      throw InvalidArgument("instance: table must hold 2^n * C entries");
    }
    double total = 0.0;
    for (double p : table) {
      if (!(p >= 0.0)) throw InvalidArgument("instance: negative or NaN probability");
      total += p;
    }
    if (std::abs(total - 1.0) > kMassTolerance) {
      throw InvalidArgument("instance: total mass " + std::to_string(total) + " is not 1");
    }
  }
};

struct Observation {
  int query = 0;
  int answer = 1;  // -1 or +1
};

struct OracleState {
  std::vector<Observation> history;
  std::vector<double> posterior;

  bool asked(int j) const {
    for (const auto& o : history)
      if (o.query == j) return true;
    return false;
  }
};

inline double xlog2x(double p) { return p > 0.0 ? p * std::log2(p) : 0.0; }

inline double entropy_bits(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) h -= xlog2x(v);
  return h;
}

// I(A; Y) for a 2 x C joint table, with 0 log 0 = 0.
inline double mutual_information(const Matrix& joint) {
  if (joint.rows() != 2 || joint.cols() < 1) throw InvalidArgument("mutual_information: expected a 2 x C table");
  if ((joint.array() < 0.0).any()) throw InvalidArgument("mutual_information: negative entry");
  if (std::abs(joint.sum() - 1.0) > 1e-9) throw InvalidArgument("mutual_information: total mass is not 1");
  const Vector pa = joint.rowwise().sum();
  const RowVector py = joint.colwise().sum();
  double mi = 0.0;
  for (Eigen::Index a = 0; a < 2; ++a)
    for (Eigen::Index y = 0; y < joint.cols(); ++y) {
      const double p = joint(a, y);
      if (p > 0.0) mi += p * std::log2(p / (pa(a) * py(y)));
    }
  return std::max(mi, 0.0);
}

inline bool atom_answer(std::size_t atom, int query) { return ((atom >> query) & 1u) != 0; }

inline bool consistent(std::size_t atom, const std::vector<Observation>& history) {
  for (const auto& o : history)
    if (atom_answer(atom, o.query) != (o.answer > 0)) return false;
  return true;
}

// P(Y | history) and P(history).
inline std::pair<std::vector<double>, double> conditional_posterior(const DiscreteInstance& inst,
                                                                    const std::vector<Observation>& history) {
  std::vector<double> post(static_cast<std::size_t>(inst.num_classes), 0.0);
  for (std::size_t atom = 0; atom < inst.atoms(); ++atom) {
    if (!consistent(atom, history)) continue;
    for (int y = 0; y < inst.num_classes; ++y) post[static_cast<std::size_t>(y)] += inst.at(y, atom);
  }
  double mass = 0.0;
  for (double p : post) mass += p;
  if (mass > 0.0)
    for (double& p : post) p /= mass;
  return {post, mass};
}

inline OracleState initial_state(const DiscreteInstance& inst) {
  inst.validate();
  return {{}, conditional_posterior(inst, {}).first};
}

// I(q_j; Y | history) for every j. Asked queries come out as 0.
inline std::vector<double> conditional_mutual_information(const DiscreteInstance& inst,
                                                          const std::vector<Observation>& history) {
  const int n = inst.num_queries;
  const int c = inst.num_classes;
  // joint[j][a][y]
  std::vector<double> joint(static_cast<std::size_t>(n) * 2 * static_cast<std::size_t>(c), 0.0);
  double mass = 0.0;
  for (std::size_t atom = 0; atom < inst.atoms(); ++atom) {
    if (!consistent(atom, history)) continue;
    for (int y = 0; y < c; ++y) {
      const double p = inst.at(y, atom);
      if (p == 0.0) continue;
      mass += p;
      for (int j = 0; j < n; ++j) {
        const std::size_t a = atom_answer(atom, j) ? 1 : 0;
        joint[(static_cast<std::size_t>(j) * 2 + a) * static_cast<std::size_t>(c) + static_cast<std::size_t>(y)] += p;
      }
    }
  }
  if (!(mass > 0.0)) throw InvalidArgument("observed history has probability 0 under the instance");

  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (int j = 0; j < n; ++j) {
    Matrix t(2, c);
    for (int a = 0; a < 2; ++a)
      for (int y = 0; y < c; ++y)
        t(a, y) = joint[(static_cast<std::size_t>(j) * 2 + static_cast<std::size_t>(a)) * static_cast<std::size_t>(c) +
                        static_cast<std::size_t>(y)] /
                  mass;
    t /= t.sum();
    out[static_cast<std::size_t>(j)] = mutual_information(t);
  }
  return out;
}

// Unasked query with the largest conditional MI; ties go to the lowest index.
inline int exact_ip_select(const DiscreteInstance& inst, const OracleState& state) {
  const auto mi = conditional_mutual_information(inst, state.history);
  int best = -1;
  for (int j = 0; j < inst.num_queries; ++j) {
    if (state.asked(j)) continue;
    if (best < 0 || mi[static_cast<std::size_t>(j)] > mi[static_cast<std::size_t>(best)] + kTieTolerance) best = j;
  }
  if (best < 0) throw StateError("exact_ip_select: every query has been asked");
  return best;
}

inline OracleState posterior_update(const DiscreteInstance& inst, const OracleState& state, int query, int answer) {
  if (query < 0 || query >= inst.num_queries) throw InvalidArgument("posterior_update: query index out of range");
  if (answer != 1 && answer != -1) throw InvalidArgument("posterior_update: answer must be -1 or +1");
  OracleState next = state;
  next.history.push_back({query, answer});
  auto [post, mass] = conditional_posterior(inst, next.history);
  if (!(mass > 0.0)) throw InvalidArgument("posterior_update: observation has probability 0");
  next.posterior = std::move(post);
  return next;
}

inline int argmax_lowest(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
  return best;
}

struct TraceStep {
  int query = 0;
  int answer = 1;
  std::vector<double> posterior;
};

struct IpResult {
  int prediction = 0;
  std::vector<TraceStep> trace;
  std::vector<double> prior;
};

// Greedy select -> observe -> update until the posterior entropy drops to the
// threshold (bits) or the budget is spent. The prediction is the posterior
// argmax, ties to the lowest class.
inline IpResult run_ip(const DiscreteInstance& inst, const std::vector<int>& answers, double entropy_threshold,
                       int budget) {
  inst.validate();
  if (static_cast<int>(answers.size()) != inst.num_queries) throw InvalidArgument("run_ip: one answer per query");
  std::size_t atom = 0;
  for (int j = 0; j < inst.num_queries; ++j) {
    if (answers[static_cast<std::size_t>(j)] != 1 && answers[static_cast<std::size_t>(j)] != -1) {
      throw InvalidArgument("run_ip: answers must be -1 or +1");
    }
    if (answers[static_cast<std::size_t>(j)] > 0) atom |= std::size_t{1} << j;
  }
  double atom_mass = 0.0;
  for (int y = 0; y < inst.num_classes; ++y) atom_mass += inst.at(y, atom);
  if (!(atom_mass > 0.0)) throw InvalidArgument("run_ip: answers have probability 0 under the instance");

  OracleState state = initial_state(inst);
  IpResult out;
  out.prior = state.posterior;
  for (int k = 0; k < budget && k < inst.num_queries; ++k) {
    if (entropy_bits(state.posterior) <= entropy_threshold) break;
    const int j = exact_ip_select(inst, state);
    const int a = answers[static_cast<std::size_t>(j)];
    state = posterior_update(inst, state, j, a);
    out.trace.push_back({j, a, state.posterior});
  }
  out.prediction = argmax_lowest(state.posterior);
  return out;
}

// ---------------------------------------------------------------------------
// bridges from data

// P(q_i = +1 | Y = y) as an n x C matrix from hard answers.
inline Matrix estimate_class_conditionals(const Matrix& hard_answers, const Labels& labels, int num_classes) {
  if (static_cast<Eigen::Index>(labels.size()) != hard_answers.rows()) {
    throw InvalidArgument("class conditionals: label count mismatch");
  }
  Matrix counts = Matrix::Zero(hard_answers.cols(), num_classes);
  std::vector<double> per_class(static_cast<std::size_t>(num_classes), 0.0);
  for (Eigen::Index r = 0; r < hard_answers.rows(); ++r) {
    const auto y = labels[static_cast<std::size_t>(r)];
    per_class[y] += 1.0;
    for (Eigen::Index i = 0; i < hard_answers.cols(); ++i) {
      const double a = hard_answers(r, i);
      if (a != 1.0 && a != -1.0) throw InvalidArgument("class conditionals: answers must be hard (+-1)");
      if (a > 0.0) counts(i, y) += 1.0;
    }
  }
  for (int y = 0; y < num_classes; ++y) {
    if (per_class[static_cast<std::size_t>(y)] == 0.0) {
      throw InvalidArgument("class conditionals: class " + std::to_string(y) + " has no samples");
    }
    counts.col(y) /= per_class[static_cast<std::size_t>(y)];
  }
  return counts;
}

inline Matrix estimate_class_conditionals(QueryDictionary& dict, const EmbeddingDataset& data) {
  if (dict.mode() != AnswerMode::hard) throw InvalidArgument("class conditionals need a hard dictionary");
  return estimate_class_conditionals(dict.infer(data.all_rows()), data.labels, static_cast<int>(data.num_classes));
}

// Empirical joint over (Y, hard answers); unseen atoms get probability 0.
inline DiscreteInstance instance_from_answers(const Matrix& hard_answers, const Labels& labels, int num_classes) {
  const auto n = static_cast<int>(hard_answers.cols());
  if (n > kMaxQueries) throw InvalidArgument("instance_from_dataset: n exceeds " + std::to_string(kMaxQueries));
  if (n < 1) throw InvalidArgument("instance_from_dataset: empty dictionary");
  if (hard_answers.rows() < 1) throw InvalidArgument("instance_from_dataset: empty dataset");
  DiscreteInstance inst;
  inst.num_classes = num_classes;
  inst.num_queries = n;
  inst.table.assign(inst.atoms() * static_cast<std::size_t>(num_classes), 0.0);
  const double w = 1.0 / static_cast<double>(hard_answers.rows());
  for (Eigen::Index r = 0; r < hard_answers.rows(); ++r) {
    std::size_t atom = 0;
    for (int j = 0; j < n; ++j) {
      const double a = hard_answers(r, j);
      if (a != 1.0 && a != -1.0) throw InvalidArgument("instance_from_dataset: soft answers are not supported");
      if (a > 0.0) atom |= std::size_t{1} << j;
    }
    inst.at(static_cast<int>(labels[static_cast<std::size_t>(r)]), atom) += w;
  }
  // Renormalize away the rounding of N additions of 1/N.
  double total = 0.0;
  for (double p : inst.table) total += p;
  for (double& p : inst.table) p /= total;
  return inst;
}

inline DiscreteInstance instance_from_dataset(QueryDictionary& dict, const EmbeddingDataset& data) {
  if (dict.size() > kMaxQueries) throw InvalidArgument("instance_from_dataset: n exceeds " + std::to_string(kMaxQueries));
  if (dict.mode() != AnswerMode::hard) throw InvalidArgument("instance_from_dataset: soft answers are not supported");
  return instance_from_answers(dict.infer(data.all_rows()), data.labels, static_cast<int>(data.num_classes));
}

// ---------------------------------------------------------------------------
// enumeration reference

// I(q_j; Y | history) = H(Y | history) - sum_a P(q_j = a | history) H(Y | history, q_j = a),
// evaluated by enumerating the two extended histories.
inline double exhaustive_cmi(const DiscreteInstance& inst, const std::vector<Observation>& history, int query) {
  const auto [post, mass] = conditional_posterior(inst, history);
  if (!(mass > 0.0)) throw InvalidArgument("observed history has probability 0 under the instance");
  double h_after = 0.0;
  for (int a : {-1, 1}) {
    auto extended = history;
    extended.push_back({query, a});
    const auto [pa, ma] = conditional_posterior(inst, extended);
    if (ma > 0.0) h_after += (ma / mass) * entropy_bits(pa);
  }
  return entropy_bits(post) - h_after;
}

inline int exhaustive_select(const DiscreteInstance& inst, const OracleState& state) {
  int best = -1;
  double best_mi = 0.0;
  for (int j = 0; j < inst.num_queries; ++j) {
    if (state.asked(j)) continue;
    const double mi = exhaustive_cmi(inst, state.history, j);
    if (best < 0 || mi > best_mi + kTieTolerance) {
      best = j;
      best_mi = mi;
    }
  }
  if (best < 0) throw StateError("exhaustive_select: every query has been asked");
  return best;
}

// ---------------------------------------------------------------------------
// random instances and serialization

// Dirichlet(alpha)-distributed table; alpha < 1 gives peaked, sparse-ish tables.
inline DiscreteInstance random_instance(int n, int c, std::mt19937_64& rng, double alpha = 0.5) {
  DiscreteInstance inst;
  inst.num_queries = n;
  inst.num_classes = c;
  inst.table.resize((std::size_t{1} << n) * static_cast<std::size_t>(c));
  std::gamma_distribution<double> g(alpha, 1.0);
  double total = 0.0;
  for (double& p : inst.table) {
    p = g(rng);
    total += p;
  }
  for (double& p : inst.table) p /= total;
  inst.validate();
  return inst;
}

// Random-instance agreement between exact_ip_select and exhaustive_select along
// full IP rollouts, plus the largest gap between mutual_information and the
// entropy identity H(A) + H(Y) - H(A, Y) on random 2 x C tables.
struct OracleCheck {
  int trials = 0;
  int steps = 0;
  int disagreements = 0;
  double max_mi_error = 0.0;
  bool ok() const { return disagreements == 0; }
};

inline OracleCheck oracle_self_check(int n, int c, int trials, std::uint64_t seed) {
  if (n < 1 || n > kMaxQueries) throw InvalidArgument("oracle check: n must lie in [1, 20]");
  if (c < 2) throw InvalidArgument("oracle check: need at least 2 classes");
  if (trials < 1) throw InvalidArgument("oracle check: trials must be >= 1");
  std::mt19937_64 rng(seed);
  OracleCheck out;
  out.trials = trials;
  for (int t = 0; t < trials; ++t) {
    const auto inst = random_instance(n, c, rng);
    // Draw the sample's full answer vector from the joint.
    std::discrete_distribution<std::size_t> draw(inst.table.begin(), inst.table.end());
    const std::size_t atom = draw(rng) % inst.atoms();
    OracleState st = initial_state(inst);
    for (int k = 0; k < n; ++k) {
      const int fast = exact_ip_select(inst, st);
      const int slow = exhaustive_select(inst, st);
      ++out.steps;
      if (fast != slow) ++out.disagreements;
      st = posterior_update(inst, st, fast, atom_answer(atom, fast) ? 1 : -1);
    }

    Matrix joint(2, c);
    std::gamma_distribution<double> g(0.5, 1.0);
    for (Eigen::Index i = 0; i < joint.size(); ++i) joint.data()[i] = g(rng);
    joint /= joint.sum();
    std::vector<double> pa{joint.row(0).sum(), joint.row(1).sum()}, py, pay;
    for (int y = 0; y < c; ++y) py.push_back(joint.col(y).sum());
    for (Eigen::Index i = 0; i < joint.size(); ++i) pay.push_back(joint.data()[i]);
    const double direct = entropy_bits(pa) + entropy_bits(py) - entropy_bits(pay);
    out.max_mi_error = std::max(out.max_mi_error, std::abs(mutual_information(joint) - direct));
  }
  return out;
}

// "#joint" section: first line "C n", then 2^n * C probabilities, one per line.
inline void save_instance(const DiscreteInstance& inst, const std::filesystem::path& path) {
  inst.validate();
  Sidecar sc;
  auto& lines = sc["joint"];
  lines.push_back(std::to_string(inst.num_classes) + " " + std::to_string(inst.num_queries));
  for (double p : inst.table) {
    std::ostringstream os;
    os << std::setprecision(17) << p;
    lines.push_back(os.str());
  }
  write_sidecar_file(path, sc);
}

inline DiscreteInstance load_instance(const std::filesystem::path& path) {
  const auto sc = read_sidecar_file(path);
  auto it = sc.find("joint");
  if (it == sc.end() || it->second.empty()) throw FormatError("instance file has no #joint section");
  DiscreteInstance inst;
  std::istringstream head(it->second.front());
  if (!(head >> inst.num_classes >> inst.num_queries)) throw FormatError("#joint header must be 'C n'");
  if (inst.num_queries < 1 || inst.num_queries > kMaxQueries) throw FormatError("#joint: n out of range");
  const std::size_t expected = (std::size_t{1} << inst.num_queries) * static_cast<std::size_t>(inst.num_classes);
  if (it->second.size() != expected + 1) throw FormatError("#joint: expected " + std::to_string(expected) + " entries");
  for (std::size_t i = 1; i < it->second.size(); ++i) inst.table.push_back(std::stod(it->second[i]));
  try {
    inst.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(e.what());
  }
  return inst;
}

inline std::string trace_csv(const IpResult& r) {
  std::ostringstream os;
  os << "step,query,answer";
  for (std::size_t y = 0; y < r.prior.size(); ++y) os << ",p" << y;
  os << '\n' << std::setprecision(10);
  for (std::size_t k = 0; k < r.trace.size(); ++k) {
    os << k + 1 << ',' << r.trace[k].query << ',' << r.trace[k].answer;
    for (double p : r.trace[k].posterior) os << ',' << p;
    os << '\n';
  }
  return os.str();
}

}  // namespace qdl::ip
