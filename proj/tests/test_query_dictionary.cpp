#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qdl/query_dictionary.hpp"
#include "test_util.hpp"

using namespace qdl;
using qdl::test::random_matrix;
using qdl::test::random_unit_rows;

TEST(FixedDictionary, SoftAnswersAreZScores) {
  // Dots on the two training points: {1, 0} and {0, 1} -> mean 0.5, std 0.5.
  auto dict = FixedDictionary::from_vectors((Matrix(2, 2) << 1, 0, 0, 1).finished());
  const Matrix train = (Matrix(2, 2) << 1, 0, 0, 1).finished();
  dict = fit_zscore(dict, train);
  EXPECT_DOUBLE_EQ(*dict.zscore_mean, 0.5);
  EXPECT_DOUBLE_EQ(*dict.zscore_std, 0.5);
  const Matrix a = fixed_soft_answers(dict, (Matrix(1, 2) << 1.0, 0.5).finished()).values;
  EXPECT_DOUBLE_EQ(a(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(a(0, 1), 0.0);
}

TEST(FixedDictionary, SoftAnswersMatchBruteForce) {
  std::mt19937_64 rng(3);
  const Matrix concepts = random_matrix(5, 8, rng);
  const Matrix train = random_unit_rows(30, 8, rng);
  const Matrix batch = random_unit_rows(4, 8, rng);
  const auto dict = fit_zscore(FixedDictionary::from_vectors(concepts), train);

  double sum = 0.0, sq = 0.0;
  int count = 0;
  for (int s = 0; s < 30; ++s) {
    for (int q = 0; q < 5; ++q) {
      double dot = 0.0;
      for (int j = 0; j < 8; ++j) dot += train(s, j) * concepts(q, j) / concepts.row(q).norm();
      sum += dot;
      sq += dot * dot;
      ++count;
    }
  }
  const double mean = sum / count;
  const double sd = std::sqrt(sq / count - mean * mean);
  const Matrix a = fixed_soft_answers(dict, batch).values;
  for (int b = 0; b < 4; ++b) {
    for (int q = 0; q < 5; ++q) {
      double dot = 0.0;
      for (int j = 0; j < 8; ++j) dot += batch(b, j) * concepts(q, j) / concepts.row(q).norm();
      EXPECT_NEAR(a(b, q), (dot - mean) / sd, 1e-9);
    }
  }
}

TEST(FixedDictionary, HardAnswersThresholdAtTrainingMean) {
  auto dict = FixedDictionary::from_vectors((Matrix(1, 2) << 1, 0).finished());
  dict = fit_thresholds(dict, (Matrix(2, 2) << 0.2, 1, 0.4, 1).finished());
  EXPECT_NEAR((*dict.thresholds)(0), 0.3, 1e-15);
  const Matrix a = fixed_hard_answers(dict, (Matrix(2, 2) << 0.25, 0, 0.35, 0).finished()).values;
  EXPECT_EQ(a(0, 0), -1.0);
  EXPECT_EQ(a(1, 0), 1.0);
}

TEST(FixedDictionary, ConstantDotAnswersPlusOne) {
  auto dict = FixedDictionary::from_vectors((Matrix(1, 2) << 0, 1).finished());
  const Matrix train = (Matrix(3, 2) << 0.1, 0.5, 0.9, 0.5, -0.3, 0.5).finished();
  dict = fit_thresholds(dict, train);
  EXPECT_TRUE((fixed_hard_answers(dict, train).values.array() == 1.0).all());
}

TEST(FixedDictionary, ThresholdsAreColumnMeansOfDots) {
  std::mt19937_64 rng(11);
  const Matrix concepts = random_unit_rows(6, 10, rng);
  const Matrix train = random_unit_rows(100, 10, rng);
  const auto dict = fit_thresholds(FixedDictionary::from_vectors(concepts), train);
  for (int q = 0; q < 6; ++q) {
    double s = 0.0;
    for (int i = 0; i < 100; ++i) s += train.row(i).dot(concepts.row(q));
    EXPECT_NEAR((*dict.thresholds)(q), s / 100.0, 1e-12);
  }
}

TEST(FixedDictionary, Errors) {
  EXPECT_THROW(FixedDictionary::from_vectors(Matrix::Zero(2, 3)), InvalidArgument);
  EXPECT_THROW(FixedDictionary::from_vectors(Matrix::Ones(2, 3), {"a"}), InvalidArgument);
  auto dict = FixedDictionary::from_vectors(Matrix::Ones(2, 3));
  EXPECT_THROW(fixed_soft_answers(dict, Matrix::Ones(1, 3)), StateError);
  EXPECT_THROW(fixed_hard_answers(dict, Matrix::Ones(1, 3)), StateError);
  EXPECT_THROW(dict.dots(Matrix::Ones(1, 4)), InvalidArgument);
}

TEST(LearnableDictionary, TrainPhaseBatchNormMoments) {
  std::mt19937_64 rng(5);
  auto dict = init_random(12, 16, 7);
  const Matrix batch = random_unit_rows(64, 16, rng);
  const AnswerBatch a = learnable_answers(dict, batch, Phase::train);
  // gamma = 1, beta = 0, so the pre-sign activation is the normalized dot product.
  for (Eigen::Index q = 0; q < 12; ++q) {
    const double m = a.normalized.col(q).mean();
    const double v = (a.normalized.col(q).array() - m).square().mean();
    EXPECT_LT(std::abs(m), 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
  EXPECT_TRUE((a.values.array().abs() == 1.0).all());
}

TEST(LearnableDictionary, LargeBetaForcesPlusOne) {
  std::mt19937_64 rng(6);
  auto dict = init_random(4, 8, 1);
  dict.beta.value.setConstant(100.0);
  const Matrix batch = random_unit_rows(20, 8, rng);
  EXPECT_TRUE((learnable_answers(dict, batch, Phase::train).values.array() == 1.0).all());
}

TEST(LearnableDictionary, RunningStatsFollowMomentumUpdate) {
  std::mt19937_64 rng(8);
  auto dict = init_random(3, 5, 2);
  const Matrix batch = random_unit_rows(10, 5, rng);
  learnable_answers(dict, batch, Phase::train);
  const RowVector norms = dict.v.value.rowwise().norm().transpose();
  const Matrix dots = batch * (dict.v.value.array().colwise() / norms.transpose().array()).matrix().transpose();
  for (int q = 0; q < 3; ++q) {
    const double m = dots.col(q).mean();
    const double var = (dots.col(q).array() - m).square().sum() / 9.0;
    EXPECT_NEAR(dict.bn_mean.value(0, q), 0.1 * m, 1e-12);
    EXPECT_NEAR(dict.bn_var.value(0, q), 0.9 + 0.1 * var, 1e-12);
  }
  // The inference phase leaves them alone.
  const Matrix before = dict.bn_var.value;
  learnable_answers(dict, batch, Phase::infer);
  EXPECT_EQ(dict.bn_var.value, before);
}

TEST(LearnableDictionary, RecoveredHyperplanesReproduceAnswers) {
  for (auto param : {Parameterization::batch_norm, Parameterization::affine}) {
    std::mt19937_64 rng(9);
    auto dict = init_random(16, 32, 4);
    dict.parameterization = param;
    std::uniform_real_distribution<double> u(0.2, 2.0), s(-0.5, 0.5);
    for (int q = 0; q < 16; ++q) {
      dict.gamma.value(0, q) = (q % 3 == 0 ? -1.0 : 1.0) * u(rng);
      dict.beta.value(0, q) = s(rng);
      dict.bn_mean.value(0, q) = 0.1 * s(rng);
      dict.bn_var.value(0, q) = 0.01 * u(rng);
    }
    const Matrix x = random_unit_rows(1000, 32, rng);
    const Matrix answers = learnable_answers(dict, x, Phase::infer).values;
    const Hyperplanes h = recover_hyperplanes(dict);
    const Matrix margin = (x * h.normals.transpose()).rowwise() - h.thresholds;
    int mismatches = 0;
    for (Eigen::Index i = 0; i < margin.size(); ++i) {
      const double expected = margin.data()[i] >= 0.0 ? 1.0 : -1.0;
      if (std::abs(margin.data()[i]) > 1e-9 && expected != answers.data()[i]) ++mismatches;
    }
    EXPECT_EQ(mismatches, 0);
  }
}

TEST(LearnableDictionary, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  auto dict = init_random(5, 6, 3);
  dict.gamma.value = random_matrix(1, 5, rng, 0.5).array() + 1.0;
  dict.beta.value = random_matrix(1, 5, rng, 0.3);
  const Matrix batch = random_unit_rows(8, 6, rng);
  const Matrix upstream = random_matrix(8, 5, rng);
  const AnswerBatch fwd = learnable_answers(dict, batch, Phase::train);
  const DictionaryGradients g = learnable_answers_backward(dict, batch, fwd, upstream);

  auto surrogate_loss = [&] {
    ad::Tape t;
    DictionaryForwardOptions o;
    o.update_running_stats = false;
    o.surrogate_forward = true;
    return (learnable_answers(dict, t, batch, Phase::train, o).answers.value().array() * upstream.array()).sum();
  };
  std::vector<ad::Tensor*> ps = dict.trainable();
  const auto fd = ad::finite_difference_grad(surrogate_loss, ps, 1e-6);
  EXPECT_LT(ad::max_relative_error(g.v, fd[0]), 1e-4);
  EXPECT_LT(ad::max_relative_error(g.gamma, fd[1]), 1e-4);
  EXPECT_LT(ad::max_relative_error(g.beta, fd[2]), 1e-4);

  // d/dbeta_q = sum_b upstream(b, q) * (1 - tanh^2)
  const Matrix expected_beta =
      (upstream.array() * (1.0 - fwd.surrogate_values.array().square())).colwise().sum().matrix();
  EXPECT_LT((g.beta - expected_beta).cwiseAbs().maxCoeff(), 1e-12);

  const auto zero = learnable_answers_backward(dict, batch, fwd, Matrix::Zero(8, 5));
  EXPECT_EQ(zero.v.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(zero.gamma.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(zero.beta.cwiseAbs().maxCoeff(), 0.0);

  AnswerBatch stripped = fwd;
  stripped.surrogate_values.resize(0, 0);
  EXPECT_THROW(learnable_answers_backward(dict, batch, stripped, upstream), StateError);
  EXPECT_THROW(learnable_answers_backward(dict, batch, fwd, Matrix::Zero(3, 5)), InvalidArgument);
}

TEST(LearnableDictionary, InitRandomStatistics) {
  auto dict = init_random(10000, 512, 21);
  EXPECT_TRUE((dict.gamma.value.array() == 1.0).all());
  EXPECT_TRUE((dict.beta.value.array() == 0.0).all());
  const double n = 10000.0 * 512.0;
  EXPECT_LT(std::abs(dict.v.value.mean()), 3.0 / std::sqrt(n));
  const double var = dict.v.value.array().square().mean();
  EXPECT_NEAR(var, 1.0, 3.0 * std::sqrt(2.0 / n));
  EXPECT_EQ(init_random(10, 8, 21).v.value, init_random(10, 8, 21).v.value);
  EXPECT_NE(init_random(10, 8, 21).v.value, init_random(10, 8, 22).v.value);
  EXPECT_THROW(init_random(0, 8, 1), InvalidArgument);
  EXPECT_THROW(init_random(4, 1, 1), InvalidArgument);
}

TEST(LearnableDictionary, InitFromConcepts) {
  const Matrix eye = Matrix::Identity(4, 4);
  auto dict = init_from_concepts(eye, {"a", "b", "c", "d"});
  EXPECT_EQ(dict.v.value, eye);
  EXPECT_EQ(dict.names[2], "c");
  EXPECT_THROW(init_from_concepts(eye, {"a"}), InvalidArgument);
  Matrix bad = eye;
  bad.row(1).setZero();
  EXPECT_THROW(init_from_concepts(bad), InvalidArgument);

  // Same answers as a random init whose v was overwritten.
  std::mt19937_64 rng(2);
  const Matrix concepts = random_matrix(6, 9, rng);
  auto a = init_from_concepts(concepts);
  auto b = init_random(6, 9, 999);
  b.v.value = concepts;
  const Matrix x = random_unit_rows(40, 9, rng);
  EXPECT_EQ(learnable_answers(a, x, Phase::train).values, learnable_answers(b, x, Phase::train).values);
}

TEST(LearnableDictionary, AnswersIgnoreScaleOfV) {
  std::mt19937_64 rng(4);
  auto a = init_random(7, 10, 5);
  auto b = a;
  b.v.value *= 37.5;
  const Matrix x = random_unit_rows(25, 10, rng);
  const Matrix pa = learnable_answers(a, x, Phase::train).normalized;
  const Matrix pb = learnable_answers(b, x, Phase::train).normalized;
  EXPECT_LT((pa - pb).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(LearnableDictionary, SoftModeEmitsActivation) {
  std::mt19937_64 rng(14);
  auto dict = init_random(3, 6, 1);
  dict.answer_mode = AnswerMode::soft;
  dict.beta.value.setConstant(2.0);
  const Matrix x = random_unit_rows(10, 6, rng);
  const AnswerBatch with_beta = learnable_answers(dict, x, Phase::train);
  EXPECT_EQ(with_beta.values, with_beta.normalized);
  dict.soft_with_beta = false;
  const AnswerBatch without = learnable_answers(dict, x, Phase::train);
  EXPECT_LT((with_beta.values.array() - without.values.array() - 2.0).abs().maxCoeff(), 1e-12);
}

TEST(LearnableDictionary, BatchErrors) {
  auto dict = init_random(3, 4, 1);
  EXPECT_THROW(learnable_answers(dict, Matrix::Ones(1, 4), Phase::train), InvalidArgument);
  EXPECT_NO_THROW(learnable_answers(dict, Matrix::Ones(1, 4), Phase::infer));
  EXPECT_THROW(learnable_answers(dict, Matrix::Ones(2, 5), Phase::infer), InvalidArgument);
  EXPECT_THROW(learnable_answers(dict, Matrix(0, 4), Phase::infer), InvalidArgument);
}

TEST(QueryDictionary, FrozenDictionaryHasNoGradients) {
  std::mt19937_64 rng(15);
  QueryDictionary q;
  q.learnable = init_random(4, 6, 2);
  q.set_frozen(true);
  ad::Tape t;
  t.backward(ad::sum(q.answers(t, random_unit_rows(8, 6, rng), Phase::train)));
  for (auto* p : q.trainable_tensors()) EXPECT_EQ(p->grad.cwiseAbs().maxCoeff(), 0.0);
}
