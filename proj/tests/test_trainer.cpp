#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qdl/trainer.hpp"
#include "test_util.hpp"

using namespace qdl;
using qdl::test::small_train_data;
using qdl::test::smoke_plan;

namespace {

std::string bytes(const std::vector<const ad::Tensor*>& ts) { return ad::params_bytes(ts); }

// Full-history classifier loss over the training set, no querier involved.
double observed_loss(PursuitModel& m, const TrainData& d) {
  const Matrix answers = m.dictionary.infer(d.train_x);
  VipLossOptions o;
  o.use_querier = false;
  return vip_loss_value(m, answers, Matrix::Ones(answers.rows(), answers.cols()), d.train_y, o);
}

Matrix signs(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = coin(rng) ? 1.0 : -1.0;
  return m;
}

ad::Tensor& final_bias(PursuitModel& m) { return *m.classifier.params()[m.classifier.params().size() - 1]; }
ad::Tensor& final_weight(PursuitModel& m) { return *m.classifier.params()[m.classifier.params().size() - 2]; }

}  // namespace

TEST(VipLoss, UniformClassifierGivesLogC) {
  const auto data = small_train_data(5, 8, 10, 1);
  auto plan = smoke_plan(6, 3);
  auto model = initialize_model(plan, data);
  final_weight(model).value.setZero();
  final_bias(model).value.setZero();
  std::mt19937_64 rng(1);
  const Matrix a = signs(7, 6, rng);
  const Labels y{0, 1, 2, 3, 4, 0, 1};
  for (bool q : {false, true}) {
    VipLossOptions o;
    o.use_querier = q;
    EXPECT_NEAR(vip_loss_value(model, a, Matrix::Zero(7, 6), y, o), std::log(5.0), 1e-12);
  }
}

TEST(VipLoss, ConfidentCorrectClassifierGivesZero) {
  const auto data = small_train_data(3, 8, 10, 2);
  auto model = initialize_model(smoke_plan(4, 2), data);
  final_weight(model).value.setZero();
  final_bias(model).value = (Matrix(1, 3) << 0.0, 800.0, 0.0).finished();
  std::mt19937_64 rng(2);
  EXPECT_LT(vip_loss_value(model, signs(4, 4, rng), Matrix::Zero(4, 4), {1, 1, 1, 1}, VipLossOptions{}), 1e-12);
}

TEST(VipLoss, MatchesHandRolledCrossEntropy) {
  const auto data = small_train_data(4, 8, 10, 3);
  auto model = initialize_model(smoke_plan(6, 3), data);
  std::mt19937_64 rng(3);
  const Matrix a = signs(9, 6, rng);
  Matrix mask = Matrix::Zero(9, 6);
  for (int r = 0; r < 9; ++r) mask(r, r % 6) = 1.0;
  const Labels y{0, 1, 2, 3, 0, 1, 2, 3, 0};

  const Matrix sel = querier_forward(model, a, mask, QuerierOptions{});
  const Matrix next = mask + sel;
  const Matrix p = classifier_forward(model, a, next);
  double ce = 0.0;
  for (int r = 0; r < 9; ++r) ce -= std::log(p(r, y[r]));
  ce /= 9.0;
  EXPECT_NEAR(vip_loss_value(model, a, mask, y, VipLossOptions{}), ce, 1e-9);

  VipLossOptions warm;
  warm.use_querier = false;
  const Matrix pw = classifier_forward(model, a, mask);
  double cw = 0.0;
  for (int r = 0; r < 9; ++r) cw -= std::log(pw(r, y[r]));
  EXPECT_NEAR(vip_loss_value(model, a, mask, y, warm), cw / 9.0, 1e-9);
}

TEST(Trainer, WarmupLeavesQuerierUntouched) {
  const auto data = small_train_data(2, 8, 60, 4);
  auto plan = smoke_plan(8, 3, 150);
  auto model = initialize_model(plan, data);
  const std::string q0 = bytes(model.querier_tensors());
  const std::string d0 = bytes(model.dictionary_tensors());
  const double before = observed_loss(model, data);
  Trainer t(model, plan, data, 1);
  t.warmup(plan.warmup_epochs);
  EXPECT_EQ(bytes(model.querier_tensors()), q0);
  EXPECT_NE(bytes(model.dictionary_tensors()), d0);
  EXPECT_LT(observed_loss(model, data), 0.1 * before);
  EXPECT_EQ(t.log().phases(), std::vector<std::string>{"warmup"});
  for (const auto& r : t.log().records) EXPECT_EQ(r.temperature, 0.0);
}

TEST(Trainer, ZeroEpochsIsNoOp) {
  const auto data = small_train_data(2, 8, 20, 5);
  auto plan = smoke_plan(5, 2);
  auto model = initialize_model(plan, data);
  const std::string c0 = bytes(model.classifier_tensors());
  Trainer t(model, plan, data, 1);
  t.warmup(0);
  t.querier_phase(0, 0);
  t.dictionary_phase(0);
  EXPECT_EQ(bytes(model.classifier_tensors()), c0);
  EXPECT_TRUE(t.log().records.empty());
}

TEST(Trainer, QuerierPhaseFreezesDictionaryAndStatistics) {
  const auto data = small_train_data(3, 8, 30, 6);
  auto plan = smoke_plan(6, 3, 3);
  auto model = initialize_model(plan, data);
  const std::string d0 = bytes(model.dictionary_tensors());
  const std::string c0 = bytes(model.classifier_tensors());
  const std::string q0 = bytes(model.querier_tensors());
  Trainer t(model, plan, data, 2);
  t.querier_phase(2, 3);
  EXPECT_EQ(bytes(model.dictionary_tensors()), d0);
  EXPECT_NE(bytes(model.classifier_tensors()), c0);
  EXPECT_NE(bytes(model.querier_tensors()), q0);
  ASSERT_EQ(t.log().records.size(), 5u);
  EXPECT_EQ(t.log().phases(), (std::vector<std::string>{"querier_random", "querier_biased"}));
  EXPECT_EQ(t.log().records.front().temperature, 1.0);
  EXPECT_EQ(t.log().records.back().temperature, 0.2);
}

TEST(Trainer, DictionaryPhaseFreezesQuerier) {
  const auto data = small_train_data(3, 8, 30, 7);
  auto plan = smoke_plan(6, 3, 3);
  auto model = initialize_model(plan, data);
  const RowVector v0 = model.dictionary.learnable.v.value.row(0);
  const std::string q0 = bytes(model.querier_tensors());
  Trainer t(model, plan, data, 3);
  t.dictionary_phase(3);
  EXPECT_EQ(bytes(model.querier_tensors()), q0);
  EXPECT_GT((model.dictionary.learnable.v.value.row(0) - v0).norm(), 0.0);
  EXPECT_EQ(t.log().phases(), std::vector<std::string>{"dictionary"});
}

TEST(Trainer, JointUpdatesEveryGroup) {
  const auto data = small_train_data(3, 8, 30, 8);
  auto plan = smoke_plan(6, 3, 2);
  auto model = initialize_model(plan, data);
  const std::string d0 = bytes(model.dictionary_tensors());
  const std::string c0 = bytes(model.classifier_tensors());
  const std::string q0 = bytes(model.querier_tensors());
  Trainer t(model, plan, data, 4);
  t.joint(2, 2);
  EXPECT_NE(bytes(model.dictionary_tensors()), d0);
  EXPECT_NE(bytes(model.classifier_tensors()), c0);
  EXPECT_NE(bytes(model.querier_tensors()), q0);
  EXPECT_EQ(t.log().phases(), (std::vector<std::string>{"joint_random", "joint_biased"}));
}

TEST(Trainer, AlgorithmPhaseOrderAndSkipWarmup) {
  const auto data = small_train_data(3, 8, 20, 9);
  auto plan = smoke_plan(6, 3, 1);
  auto res = train(plan, data);
  EXPECT_EQ(res.log.phases(),
            (std::vector<std::string>{"warmup", "querier_random", "querier_biased", "dictionary"}));
  plan.skip_warmup = true;
  res = train(plan, data);
  EXPECT_EQ(res.log.phases(), (std::vector<std::string>{"querier_random", "querier_biased", "dictionary"}));
  plan.outer_iterations = 2;
  res = train(plan, data);
  EXPECT_EQ(res.log.records.size(), 6u);
  plan.joint_optimization = true;
  res = train(plan, data);
  EXPECT_EQ(res.log.phases(), (std::vector<std::string>{"joint_random", "joint_biased"}));
}

TEST(Trainer, BestSnapshotHasBestMeanCurve) {
  const auto data = small_train_data(3, 8, 30, 10);
  auto plan = smoke_plan(6, 3, 2);
  auto res = train(plan, data);
  double best = -1.0;
  for (const auto& r : res.log.records)
    if (r.phase != "warmup") best = std::max(best, r.val_mean_acc);
  EXPECT_EQ(res.best_val_acc, best);
  const auto curve = querier_accuracy_curve(res.model, data.val_x, data.val_y, plan.budget);
  double mean = 0.0;
  for (double c : curve) mean += c;
  EXPECT_NEAR(mean / curve.size(), best, 1e-12);
}

TEST(Trainer, Deterministic) {
  const auto data = small_train_data(3, 8, 20, 11);
  auto plan = smoke_plan(6, 3, 2);
  plan.seed = 17;
  auto a = train(plan, data);
  auto b = train(plan, data);
  EXPECT_EQ(a.log.to_csv(), b.log.to_csv());
  EXPECT_EQ(bytes(a.model.dictionary_tensors()), bytes(b.model.dictionary_tensors()));
  EXPECT_EQ(bytes(a.model.querier_tensors()), bytes(b.model.querier_tensors()));
  EXPECT_EQ(bytes(a.model.classifier_tensors()), bytes(b.model.classifier_tensors()));
  plan.seed = 18;
  auto c = train(plan, data);
  EXPECT_NE(bytes(a.model.classifier_tensors()), bytes(c.model.classifier_tensors()));
}

TEST(Trainer, CsvSchema) {
  TrainLog log;
  log.append({0, "warmup", 0.5, 0.25, 0.0, 0.0, 3.2});
  log.append({0, "querier_random", 0.4, 0.5, 0.75, 1.0, 1.5});
  EXPECT_EQ(log.to_csv(),
            "epoch,phase,loss,val_acc_at_budget,temperature,seconds\n"
            "0,warmup,0.5,0.25,0,0\n"
            "1,querier_random,0.4,0.5,1,0\n");
  EXPECT_NE(log.to_csv(true).find(",3.2\n"), std::string::npos);
}

TEST(Trainer, AccuracyCurveLengthAndRange) {
  const auto data = small_train_data(3, 8, 20, 12);
  auto model = initialize_model(smoke_plan(6, 3), data);
  const auto c = querier_accuracy_curve(model, data.val_x, data.val_y, 6);
  ASSERT_EQ(c.size(), 6u);
  for (double v : c) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  EXPECT_THROW(querier_accuracy_curve(model, data.val_x, data.val_y, 7), InvalidArgument);
  const auto r1 = random_policy_accuracy_curve(model, data.val_x, data.val_y, 6, 5);
  EXPECT_EQ(r1, random_policy_accuracy_curve(model, data.val_x, data.val_y, 6, 5));
}

TEST(Trainer, FixedDictionarySources) {
  const auto data = small_train_data(3, 8, 20, 13);
  std::mt19937_64 rng(13);
  const Matrix concepts = qdl::test::random_matrix(6, 8, rng);
  auto plan = smoke_plan(6, 3, 1);
  plan.dictionary_source = DictionarySource::fixed_hard;
  auto res = train(plan, data, &concepts);
  EXPECT_EQ(res.log.phases(), (std::vector<std::string>{"querier_random", "querier_biased"}));
  const Matrix a = res.model.dictionary.infer(data.val_x);
  EXPECT_TRUE((a.array().abs() == 1.0).all());
  plan.dictionary_source = DictionarySource::fixed_soft;
  EXPECT_NO_THROW(train(plan, data, &concepts));
  EXPECT_THROW(train(plan, data), InvalidArgument);
}

TEST(Trainer, PlanValidation) {
  TrainPlan p;
  EXPECT_NO_THROW(p.validate());
  p.budget = 17;
  EXPECT_THROW(p.validate(), InvalidArgument);
  p = TrainPlan{};
  p.batch_size = 1;
  EXPECT_THROW(p.validate(), InvalidArgument);
  p.bn_off = true;
  EXPECT_NO_THROW(p.validate());
  p = TrainPlan{};
  p.warmup_epochs = -1;
  EXPECT_THROW(p.validate(), InvalidArgument);
  p = TrainPlan{};
  p.bn_momentum = 0.0;
  EXPECT_THROW(p.validate(), InvalidArgument);
  p = TrainPlan{};
  p.lr_querier = 0.0;
  EXPECT_THROW(p.validate(), InvalidArgument);
}

TEST(BlackBox, SeparableTaskAndDeterministicEvaluation) {
  const auto data = small_train_data(4, 16, 100, 14);
  BlackBoxConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 64;
  cfg.seed = 3;
  auto model = train_blackbox(data.train_x, data.train_y, data.num_classes, cfg);
  EXPECT_EQ(model.predict_proba(data.val_x), model.predict_proba(data.val_x));
  EXPECT_GE(accuracy_of(model.predict_proba(data.val_x), data.val_y), 0.99);
  auto again = train_blackbox(data.train_x, data.train_y, data.num_classes, cfg);
  EXPECT_EQ(model.predict_proba(data.val_x), again.predict_proba(data.val_x));
  cfg.dropout = 1.0;
  EXPECT_THROW(train_blackbox(data.train_x, data.train_y, data.num_classes, cfg), InvalidArgument);
}
