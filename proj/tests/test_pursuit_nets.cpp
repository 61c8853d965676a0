#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "qdl/pursuit_nets.hpp"
#include "test_util.hpp"

using namespace qdl;
using qdl::test::random_matrix;

namespace {

PursuitModel make_model(Eigen::Index n, Eigen::Index classes, std::uint64_t seed, std::vector<int> hidden = {12, 10}) {
  QueryDictionary dict;
  dict.learnable = init_random(n, 6, seed);
  return PursuitModel::create(std::move(dict), classes, {hidden, hidden}, seed);
}

Matrix random_signs(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = coin(rng) ? 1.0 : -1.0;
  return m;
}

Matrix random_mask(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double p = 0.4) {
  std::bernoulli_distribution coin(p);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = coin(rng) ? 1.0 : 0.0;
  return m;
}

}  // namespace

TEST(PursuitNets, ClassifierRowsAreDistributions) {
  std::mt19937_64 rng(1);
  auto model = make_model(8, 5, 1);
  const Matrix a = random_signs(30, 8, rng);
  const Matrix p = classifier_forward(model, a, random_mask(30, 8, rng));
  ASSERT_EQ(p.cols(), 5);
  for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
  EXPECT_GE(p.minCoeff(), 0.0);
}

TEST(PursuitNets, EmptyHistoryHidesAnswers) {
  std::mt19937_64 rng(2);
  auto model = make_model(8, 4, 2);
  const Matrix zero = Matrix::Zero(3, 8);
  const Matrix p = classifier_forward(model, random_signs(3, 8, rng), zero);
  EXPECT_LT((p.row(0) - p.row(1)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((p.row(1) - p.row(2)).cwiseAbs().maxCoeff(), 1e-12);
  // A lone row is reproduced bit for bit regardless of its answers.
  EXPECT_EQ(classifier_forward(model, random_signs(1, 8, rng), Matrix::Zero(1, 8)),
            classifier_forward(model, random_signs(1, 8, rng), Matrix::Zero(1, 8)));
}

TEST(PursuitNets, UnmaskedAnswersHaveNoInfluence) {
  std::mt19937_64 rng(3);
  auto model = make_model(10, 4, 3);
  QuerierOptions qo;
  qo.soft_forward = true;
  for (int trial = 0; trial < 100; ++trial) {
    Matrix mask = random_mask(1, 10, rng);
    mask(0, trial % 10) = 0.0;
    const Matrix a = random_signs(1, 10, rng);
    Matrix b = a;
    for (Eigen::Index j = 0; j < 10; ++j)
      if (mask(0, j) == 0.0) b(0, j) = -b(0, j) * 3.7;
    EXPECT_EQ(classifier_forward(model, a, mask), classifier_forward(model, b, mask));
    EXPECT_EQ(querier_forward(model, a, mask, qo), querier_forward(model, b, mask, qo));
  }
}

TEST(PursuitNets, QuerierEmitsOneHotAtArgmax) {
  std::mt19937_64 rng(4);
  auto model = make_model(9, 3, 4);
  const Matrix a = random_signs(20, 9, rng);
  const Matrix m = random_mask(20, 9, rng, 0.3);
  QuerierOptions hard;
  hard.exclude_asked = false;
  QuerierOptions soft = hard;
  soft.soft_forward = true;
  const Matrix sel = querier_forward(model, a, m, hard);
  const Matrix prob = querier_forward(model, a, m, soft);
  for (Eigen::Index r = 0; r < 20; ++r) {
    EXPECT_EQ(sel.row(r).sum(), 1.0);
    EXPECT_EQ((sel.row(r).array() == 1.0).count(), 1);
    Eigen::Index hi = 0, pick = 0;
    prob.row(r).maxCoeff(&hi);
    sel.row(r).maxCoeff(&pick);
    EXPECT_EQ(pick, hi);
    EXPECT_NEAR(prob.row(r).sum(), 1.0, 1e-12);
  }
}

TEST(PursuitNets, ExclusionPicksBestUnasked) {
  std::mt19937_64 rng(5);
  auto model = make_model(7, 3, 5);
  QuerierOptions open;
  open.exclude_asked = false;
  open.soft_forward = true;
  int moved = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix a = random_signs(1, 7, rng);
    Matrix m = random_mask(1, 7, rng, 0.5);
    if (m.minCoeff() > 0.0) m(0, 0) = 0.0;
    const Matrix p = querier_forward(model, a, m, open);
    Eigen::Index best = -1;
    for (Eigen::Index j = 0; j < 7; ++j)
      if (m(0, j) == 0.0 && (best < 0 || p(0, j) > p(0, best))) best = j;
    Eigen::Index free_pick = 0, pick = 0;
    p.row(0).maxCoeff(&free_pick);
    querier_forward(model, a, m, QuerierOptions{}).row(0).maxCoeff(&pick);
    EXPECT_EQ(pick, best);
    if (free_pick != best) ++moved;
  }
  EXPECT_GT(moved, 0);
}

TEST(PursuitNets, SaturatedHistoryThrows) {
  auto model = make_model(4, 2, 6);
  EXPECT_THROW(querier_forward(model, Matrix::Ones(1, 4), Matrix::Ones(1, 4), QuerierOptions{}), StateError);
  QuerierOptions open;
  open.exclude_asked = false;
  EXPECT_NO_THROW(querier_forward(model, Matrix::Ones(1, 4), Matrix::Ones(1, 4), open));
}

TEST(PursuitNets, WidthMismatchThrows) {
  auto model = make_model(4, 2, 6);
  EXPECT_THROW(classifier_forward(model, Matrix::Ones(1, 5), Matrix::Ones(1, 5)), InvalidArgument);
}

TEST(PursuitNets, QuerierSoftPathMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto model = make_model(6, 3, seed, {8});
    const Matrix a = random_signs(5, 6, rng);
    Matrix m = random_mask(5, 6, rng, 0.3);
    m.col(0).setZero();
    const Matrix w = random_matrix(5, 6, rng);
    QuerierOptions qo;
    qo.temperature = 0.7;
    qo.soft_forward = true;
    auto loss = [&](ad::Tape& t) {
      ad::Var sel = querier_select(model, t, t.constant(apply_mask(a, m)), t.constant(m), qo);
      return ad::sum(ad::mul(sel, t.constant(w)));
    };
    auto params = model.querier.params();
    for (auto* p : params) p->zero_grad();
    ad::Tape t;
    t.backward(loss(t));
    const auto fd = ad::finite_difference_grad(
        [&] {
          ad::Tape tt;
          return loss(tt).scalar();
        },
        params, 1e-6);
    for (std::size_t i = 0; i < params.size(); ++i)
      EXPECT_LT(ad::max_relative_error(params[i]->grad, fd[i]), 1e-4) << params[i]->name;
  }
}

TEST(PursuitNets, UpdateHistoryMatchesNaiveConstruction) {
  std::mt19937_64 rng(7);
  const RowVector answers = random_signs(1, 6, rng);
  History h = History::empty(6);
  RowVector naive_mask = RowVector::Zero(6);
  for (Eigen::Index idx : {3, 0, 5, 3, 2}) {
    RowVector sel = RowVector::Zero(6);
    sel(idx) = 1.0;
    const bool fresh = naive_mask(idx) == 0.0;
    EXPECT_EQ(update_history(h, sel, answers), fresh);
    naive_mask(idx) = 1.0;
    EXPECT_EQ(h.mask, naive_mask);
    for (Eigen::Index j = 0; j < 6; ++j) EXPECT_EQ(h.masked_answers(j), naive_mask(j) * answers(j));
  }
  EXPECT_EQ(h.order, (std::vector<Eigen::Index>{3, 0, 5, 2}));
  EXPECT_EQ(h.count(), 4);
  EXPECT_THROW(update_history(h, RowVector::Zero(6), answers), InvalidArgument);
  EXPECT_THROW(update_history(h, RowVector::Ones(5), answers), InvalidArgument);
}

TEST(PursuitNets, RandomHistoryBasics) {
  const RowVector answers = RowVector::Constant(8, -1.0);
  std::mt19937_64 rng(8);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_random_history(answers, 0, rng).count(), 0);
  const History a = sample_random_history(answers, 5, std::uint64_t{42});
  const History b = sample_random_history(answers, 5, std::uint64_t{42});
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_EQ(a.order, b.order);
  EXPECT_THROW(sample_random_history(answers, 9, rng), InvalidArgument);
  EXPECT_THROW(sample_random_history(answers, -1, rng), InvalidArgument);
}

TEST(PursuitNets, RandomHistoryInclusionFrequency) {
  const Eigen::Index n = 10, max_k = 4;
  const int draws = 20000;
  std::mt19937_64 rng(9);
  std::vector<int> hits(n, 0);
  std::vector<int> lengths(max_k + 1, 0);
  const RowVector answers = RowVector::Ones(n);
  for (int i = 0; i < draws; ++i) {
    const History h = sample_random_history(answers, max_k, rng);
    ++lengths[h.count()];
    for (Eigen::Index j = 0; j < n; ++j) hits[j] += h.mask(j) != 0.0;
  }
  double p = 0.0;
  for (Eigen::Index k = 0; k <= max_k; ++k) p += (1.0 / (max_k + 1)) * static_cast<double>(k) / n;
  const double sigma = std::sqrt(draws * p * (1 - p));
  for (Eigen::Index j = 0; j < n; ++j) EXPECT_NEAR(hits[j], draws * p, 3 * sigma) << j;
  const double pl = 1.0 / (max_k + 1);
  for (int c : lengths) EXPECT_NEAR(c, draws * pl, 3 * std::sqrt(draws * pl * (1 - pl)));
}

TEST(PursuitNets, Rollouts) {
  std::mt19937_64 rng(10);
  auto model = make_model(6, 3, 10);
  const RowVector answers = random_signs(1, 6, rng);
  EXPECT_EQ(rollout_biased_history(model, answers, 0, false).count(), 0);
  const History a = rollout_biased_history(model, answers, 4, false);
  const History b = rollout_biased_history(model, answers, 4, false);
  EXPECT_EQ(a.order, b.order);
  EXPECT_EQ(a.count(), 4);
  EXPECT_THROW(rollout_biased_history(model, answers, 7, false), InvalidArgument);
  EXPECT_THROW(rollout_biased_history(model, answers, 3, true), InvalidArgument);

  for (int trial = 0; trial < 1000; ++trial) {
    const RowVector x = random_signs(1, 6, rng);
    const History h = rollout_biased_history(model, x, 6, trial % 2 == 0, &rng);
    std::set<Eigen::Index> distinct(h.order.begin(), h.order.end());
    EXPECT_EQ(distinct.size(), h.order.size());
    EXPECT_EQ(static_cast<int>(h.order.size()), h.count());
    if (trial % 2 == 1) EXPECT_EQ(h.count(), 6);
  }
}

TEST(PursuitNets, BatchedRolloutMatchesSingle) {
  std::mt19937_64 rng(11);
  auto model = make_model(7, 3, 11);
  const Matrix answers = random_signs(5, 7, rng);
  std::vector<std::vector<Eigen::Index>> order;
  const std::vector<int> steps{0, 1, 3, 5, 7};
  const Matrix masks = rollout_masks(model, answers, steps, &order);
  for (int r = 0; r < 5; ++r) {
    const History h = rollout_biased_history(model, answers.row(r), steps[r], false);
    EXPECT_EQ(h.order, order[r]);
    EXPECT_EQ(h.mask, RowVector(masks.row(r)));
  }
}

TEST(PursuitNets, TemperatureEndpoints) {
  TemperatureSchedule s{1.0, 0.2, 11};
  EXPECT_EQ(s.at(0), 1.0);
  EXPECT_EQ(s.at(10), 0.2);
  EXPECT_NEAR(s.at(5), 0.6, 1e-12);
  EXPECT_EQ(s.at(50), 0.2);
  EXPECT_EQ((TemperatureSchedule{1.0, 0.2, 1}).at(0), 1.0);
}
