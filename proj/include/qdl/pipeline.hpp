#pragma once

// Data preparation and the train-and-save run shared by the CLI and tests.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "qdl/config.hpp"
#include "qdl/embedding_store.hpp"
#include "qdl/model_io.hpp"
#include "qdl/report.hpp"
#include "qdl/trainer.hpp"

namespace qdl {

struct PreparedData {
  EmbeddingDataset train;
  EmbeddingDataset val;
  EmbeddingDataset test;
  std::optional<Matrix> concepts;
  std::vector<std::string> concept_names;
  std::string tag = "synth";
};

inline PreparedData prepare_data(const RunConfig& cfg) {
  PreparedData p;
  EmbeddingDataset base;
  if (cfg.data.empty()) {
    base = synth_gaussian_mixture(cfg.synth);
  } else {
    base = normalize_rows(load_dataset(cfg.data));
    p.tag = std::filesystem::path(cfg.data).stem().string();
  }
  if (!base.has_labels()) throw InvalidArgument("training data must be labeled");
  EmbeddingDataset trval;
  if (!cfg.test_data.empty()) {
    p.test = normalize_rows(load_dataset(cfg.test_data));
    if (p.test.dim != base.dim) throw InvalidArgument("test data dimension differs from training data");
    trval = std::move(base);
  } else {
    std::tie(trval, p.test) = split(base, cfg.test_fraction, cfg.split_seed);
  }
  std::tie(p.train, p.val) = split(trval, cfg.val_fraction, cfg.split_seed);
  if (!cfg.concepts.empty()) {
    const auto c = normalize_rows(load_dataset(cfg.concepts));
    if (c.dim != p.train.dim) throw InvalidArgument("concept dimension differs from the data");
    p.concepts = c.all_rows();
    if (c.concept_names) p.concept_names = *c.concept_names;
  }
  return p;
}

struct RunOutputs {
  TrainResult result;
  std::vector<double> test_curve;
  std::optional<double> blackbox_test_acc;
};

// Trains per the config and writes model.prms/model.cfg, config.cfg,
// trainlog.csv, test.embd, the test curve and summary.txt into out_dir.
inline RunOutputs run_training(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  const PreparedData data = prepare_data(cfg);
  const TrainData td = TrainData::from(data.train, data.val);
  const Matrix* concepts = data.concepts ? &*data.concepts : nullptr;
  RunOutputs out{train(cfg.plan, td, concepts), {}, {}};

  const Matrix tx = data.test.all_rows();
  out.test_curve = querier_accuracy_curve(out.result.model, tx, data.test.labels, cfg.plan.budget);
  if (cfg.blackbox_epochs > 0) {
    BlackBoxConfig bb;
    bb.epochs = cfg.blackbox_epochs;
    bb.seed = cfg.plan.seed;
    auto model = train_blackbox(td.train_x, td.train_y, td.num_classes, bb);
    out.blackbox_test_acc = accuracy_of(model.predict_proba(tx), data.test.labels);
  }

  save_model(out.result.model, out_dir);
  auto write = [&](const char* name, const std::string& text) {
    std::ofstream f(out_dir / name, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + (out_dir / name).string());
    f << text;
  };
  write("config.cfg", config_text(cfg));
  write("trainlog.csv", out.result.log.to_csv(cfg.record_wall_time));
  save_dataset(data.test, out_dir / "test.embd");

  ReportBundle bundle;
  const std::string model_tag = cfg.plan.joint_optimization ? "joint" : "vip";
  bundle.curves.push_back({out.test_curve, data.tag, model_tag, cfg.plan.seed});
  bundle.reference_accuracy = out.blackbox_test_acc;
  bundle.tag = curve_tag(bundle.curves.back());
  emit_reports(bundle, out_dir);

  std::string summary = "best_val_score = " + config_detail::fmt_double(out.result.best_val_acc) + "\n";
  summary += "test_acc_at_budget = " + config_detail::fmt_double(out.test_curve.back()) + "\n";
  if (out.blackbox_test_acc) summary += "blackbox_test_acc = " + config_detail::fmt_double(*out.blackbox_test_acc) + "\n";
  write("summary.txt", summary);
  return out;
}

}  // namespace qdl
