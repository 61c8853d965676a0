// qdl: command-line driver for query-dictionary learning and the IP oracle.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "qdl/config.hpp"
#include "qdl/embedding_store.hpp"
#include "qdl/ip_oracle.hpp"
#include "qdl/model_io.hpp"
#include "qdl/pipeline.hpp"
#include "qdl/report.hpp"

namespace fs = std::filesystem;
using namespace qdl;

namespace {

struct CommonFlags {
  std::string config;
  std::vector<std::string> sets;  // key=value overrides
  std::optional<std::uint64_t> seed;
  std::optional<int> budget;
  std::optional<int> dict_size;
  std::string variant;
  std::string init;
  std::string phase_epochs;
  std::string data, test_data, concepts;
  bool joint = false;
  bool no_warmup = false;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "key = value config file");
  app->add_option("--set", f.sets, "override a config key (key=value), repeatable");
  app->add_option("--seed", f.seed, "training seed");
  app->add_option("--budget", f.budget, "query budget tau");
  app->add_option("--dict-size", f.dict_size, "dictionary size n");
  app->add_option("--variant", f.variant, "answer variant")->check(CLI::IsMember({"hard", "soft"}));
  app->add_option("--init", f.init, "dictionary init")->check(CLI::IsMember({"random", "concepts"}));
  app->add_option("--phase-epochs", f.phase_epochs, "warmup,querier_random,querier_biased,dictionary");
  app->add_option("--data", f.data, "labeled EMBD dataset (synthetic mixture if omitted)");
  app->add_option("--test-data", f.test_data, "held-out EMBD test set");
  app->add_option("--concepts", f.concepts, "concept EMBD file");
  app->add_flag("--joint", f.joint, "joint optimization instead of the phased schedule");
  app->add_flag("--no-warmup", f.no_warmup, "skip the warm-up phase");
}

RunConfig resolve_config(const CommonFlags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_config(f.config);
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, config_detail::trim(kv.substr(0, eq)), config_detail::trim(kv.substr(eq + 1)));
  }
  if (f.seed) cfg.plan.seed = *f.seed;
  if (f.budget) cfg.plan.budget = *f.budget;
  if (f.dict_size) cfg.plan.dict_size = *f.dict_size;
  if (!f.variant.empty()) cfg.plan.soft_answers = f.variant == "soft";
  if (!f.init.empty()) cfg.plan.init_mode = f.init == "concepts" ? InitMode::concepts : InitMode::random;
  if (!f.phase_epochs.empty()) {
    const auto e = config_detail::parse_int_list("--phase-epochs", f.phase_epochs);
    if (e.size() != 4) throw InvalidArgument("--phase-epochs expects four comma-separated counts");
    cfg.plan.warmup_epochs = e[0];
    cfg.plan.querier_random_epochs = e[1];
    cfg.plan.querier_biased_epochs = e[2];
    cfg.plan.dictionary_epochs = e[3];
  }
  if (!f.data.empty()) cfg.data = f.data;
  if (!f.test_data.empty()) cfg.test_data = f.test_data;
  if (!f.concepts.empty()) cfg.concepts = f.concepts;
  if (f.joint) cfg.plan.joint_optimization = true;
  if (f.no_warmup) cfg.plan.skip_warmup = true;
  // Concept-initialized dictionaries take their size from the concept file.
  if (cfg.plan.init_mode == InitMode::concepts && !cfg.concepts.empty() && !f.dict_size) {
    cfg.plan.dict_size = static_cast<int>(load_dataset(cfg.concepts).size());
  }
  cfg.plan.validate();
  return cfg;
}

std::string curve_line(const std::vector<double>& c) {
  std::string s;
  for (std::size_t k = 0; k < c.size(); ++k) s += (k ? " " : "") + report_detail::fmt(c[k], 4);
  return s;
}

// Config saved next to a trained model, if present.
RunConfig model_config(const fs::path& dir) {
  return fs::exists(dir / "config.cfg") ? load_config(dir / "config.cfg") : RunConfig{};
}

int cmd_synth(const CommonFlags& f, const std::string& out) {
  RunConfig cfg = resolve_config(f);
  if (f.seed) cfg.synth.seed = *f.seed;
  const auto ds = synth_gaussian_mixture(cfg.synth);
  save_dataset(ds, out);
  std::printf("wrote %s: N=%zu d=%u C=%u\n", out.c_str(), ds.size(), ds.dim, ds.num_classes);
  return 0;
}

int cmd_train(const CommonFlags& f, const std::string& out) {
  const RunConfig cfg = resolve_config(f);
  const auto r = run_training(cfg, out);
  std::printf("best validation score %.4f\n", r.result.best_val_acc);
  std::printf("test curve (k=1..%d): %s\n", cfg.plan.budget, curve_line(r.test_curve).c_str());
  if (r.blackbox_test_acc) std::printf("black-box test acc %.4f\n", *r.blackbox_test_acc);
  std::printf("model written to %s\n", out.c_str());
  return 0;
}

int cmd_evaluate(const std::string& model_dir, std::string data, std::optional<int> budget, std::string out,
                 std::uint64_t random_seed) {
  PursuitModel model = load_model(model_dir);
  const RunConfig cfg = model_config(model_dir);
  if (data.empty()) data = (fs::path(model_dir) / "test.embd").string();
  if (out.empty()) out = model_dir;
  const auto test = normalize_rows(load_dataset(data));
  const int tau = budget.value_or(std::min<int>(cfg.plan.budget, static_cast<int>(model.num_queries())));
  const Matrix x = test.all_rows();
  const std::string tag = fs::path(data).stem().string();

  ReportBundle bundle;
  bundle.curves.push_back(accuracy_curve(model, x, test.labels, tau, tag, "vip", cfg.plan.seed));
  bundle.curves.push_back(
      {random_policy_accuracy_curve(model, x, test.labels, tau, random_seed), tag, "random", cfg.plan.seed});
  bundle.tag = curve_tag(bundle.curves.front());
  std::ifstream summary(fs::path(model_dir) / "summary.txt");
  for (std::string line; std::getline(summary, line);) {
    if (line.rfind("blackbox_test_acc", 0) == 0) bundle.reference_accuracy = std::stod(line.substr(line.find('=') + 1));
  }
  if (model.dictionary.mode() == AnswerMode::hard) {
    NamedMatrix cc{"classcond_" + bundle.tag, ip::estimate_class_conditionals(model.dictionary, test), {}, {}};
    for (Eigen::Index i = 0; i < cc.values.rows(); ++i) cc.row_labels.push_back("q" + std::to_string(i));
    for (Eigen::Index y = 0; y < cc.values.cols(); ++y) {
      cc.col_labels.push_back(test.class_names && static_cast<std::size_t>(y) < test.class_names->size()
                                  ? (*test.class_names)[y]
                                  : "y" + std::to_string(y));
    }
    bundle.matrices.push_back(std::move(cc));
  }
  emit_reports(bundle, out);
  std::printf("querier curve: %s\n", curve_line(bundle.curves[0].accuracy).c_str());
  std::printf("random curve:  %s\n", curve_line(bundle.curves[1].accuracy).c_str());
  if (bundle.reference_accuracy) std::printf("black-box reference: %.4f\n", *bundle.reference_accuracy);
  if (model.dictionary.mode() == AnswerMode::hard && model.num_queries() <= ip::kMaxQueries) {
    const auto a = querier_ip_agreement(model, x, test.labels, static_cast<int>(model.num_classes), tau);
    std::printf("agreement with exact IP: first step %.4f, per step %.4f (%zu samples)\n", a.first_step, a.per_step,
                a.samples);
  }
  return 0;
}

int cmd_explain(const std::string& model_dir, std::string data, std::vector<std::size_t> samples,
                std::optional<int> budget, double threshold, std::string out) {
  PursuitModel model = load_model(model_dir);
  const RunConfig cfg = model_config(model_dir);
  if (data.empty()) data = (fs::path(model_dir) / "test.embd").string();
  if (out.empty()) out = model_dir;
  const auto ds = normalize_rows(load_dataset(data));
  const int tau = budget.value_or(std::min<int>(cfg.plan.budget, static_cast<int>(model.num_queries())));
  ReportBundle bundle;
  bundle.tag = fs::path(data).stem().string() + "_vip_s" + std::to_string(cfg.plan.seed);
  for (auto i : samples) {
    if (i >= ds.size()) throw InvalidArgument("sample index " + std::to_string(i) + " is out of range");
    auto t = explanation_trace(model, RowVector(ds.rows(std::span<const std::size_t>(&i, 1)).row(0)), tau, threshold, std::to_string(i));
    std::printf("sample %zu: prediction %d", i, t.prediction);
    if (ds.has_labels()) std::printf(" (label %u)", ds.labels[i]);
    std::printf(", queries:");
    for (const auto& r : t.records) std::printf(" q%ld=%+g", static_cast<long>(r.query), r.answer);
    std::printf("\n");
    bundle.traces.push_back(std::move(t));
  }
  emit_reports(bundle, out);
  return 0;
}

int cmd_oracle(int n, int c, int trials, std::uint64_t seed, const std::string& instance) {
  if (!instance.empty()) {
    const auto inst = ip::load_instance(instance);
    const auto mi = ip::conditional_mutual_information(inst, {});
    for (int j = 0; j < inst.num_queries; ++j) std::printf("I(q%d; Y) = %.6f bits\n", j, mi[static_cast<std::size_t>(j)]);
    std::printf("first IP query: %d\n", ip::exact_ip_select(inst, ip::initial_state(inst)));
    return 0;
  }
  const auto r = ip::oracle_self_check(n, c, trials, seed);
  std::printf("oracle check n=%d C=%d: %d trials, %d selections, %d disagreements, max MI error %.3g\n", n, c, r.trials,
              r.steps, r.disagreements, r.max_mi_error);
  return r.ok() && r.max_mi_error <= 1e-9 ? 0 : 1;
}

int cmd_export(const std::string& data, const std::string& concepts, std::string fit_data, const std::string& out,
               const std::string& variant) {
  const auto ds = normalize_rows(load_dataset(data));
  const auto cs = normalize_rows(load_dataset(concepts));
  if (cs.dim != ds.dim) throw InvalidArgument("concept dimension differs from the data");
  const auto fit = fit_data.empty() ? ds : normalize_rows(load_dataset(fit_data));
  const Matrix fx = fit.all_rows();
  std::vector<std::string> names = cs.concept_names.value_or(std::vector<std::string>{});
  auto dict = fit_thresholds(fit_zscore(FixedDictionary::from_vectors(cs.all_rows(), names), fx), fx);
  const Matrix x = ds.all_rows();
  fs::create_directories(out);

  auto write = [&](const Matrix& answers, const std::string& name) {
    EmbeddingDataset a;
    a.dim = static_cast<std::uint32_t>(answers.cols());
    a.num_classes = ds.num_classes;
    a.labels = ds.labels;
    a.class_names = ds.class_names;
    if (!names.empty()) a.concept_names = names;
    a.provenance = "baseline-answers:" + name;
    a.embeddings.resize(static_cast<std::size_t>(answers.size()));
    for (Eigen::Index i = 0; i < answers.size(); ++i) a.embeddings[static_cast<std::size_t>(i)] = static_cast<float>(answers.data()[i]);
    const auto p = fs::path(out) / ("answers_" + name + ".embd");
    save_dataset(a, p);
    std::printf("wrote %s: N=%zu n=%u\n", p.c_str(), a.size(), a.dim);
  };
  if (variant != "hard") write(fixed_soft_answers(dict, x).values, "soft");
  if (variant != "soft") write(fixed_hard_answers(dict, x).values, "hard");

  std::ofstream stats(fs::path(out) / "baseline_stats.csv", std::ios::binary | std::ios::trunc);
  stats << "query,name,threshold\n";
  for (Eigen::Index i = 0; i < dict.size(); ++i) {
    stats << i << ',' << (static_cast<std::size_t>(i) < names.size() ? names[i] : "") << ','
          << config_detail::fmt_double((*dict.thresholds)(i)) << '\n';
  }
  stats << "# zscore_mean=" << config_detail::fmt_double(*dict.zscore_mean)
        << " zscore_std=" << config_detail::fmt_double(*dict.zscore_std) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"query-dictionary learning for variational information pursuit"};
  app.require_subcommand(1);

  CommonFlags synth_f, train_f;
  std::string synth_out = "synth.embd", train_out = "run";
  auto* synth = app.add_subcommand("synth-data", "write a Gaussian-mixture EMBD dataset");
  add_common(synth, synth_f);
  synth->add_option("--out", synth_out, "output EMBD path");

  auto* trn = app.add_subcommand("train", "train a V-IP model (phased or joint)");
  add_common(trn, train_f);
  trn->add_option("--out", train_out, "output directory");

  std::string model_dir, eval_data, eval_out;
  std::optional<int> eval_budget;
  std::uint64_t random_seed = 0;
  auto* eval = app.add_subcommand("evaluate", "accuracy curves and class-conditional matrix for a trained model");
  eval->add_option("--model", model_dir, "trained model directory")->required();
  eval->add_option("--data", eval_data, "EMBD test set (default: the model's test.embd)");
  eval->add_option("--budget", eval_budget, "number of queries");
  eval->add_option("--out", eval_out, "report directory (default: model directory)");
  eval->add_option("--seed", random_seed, "seed of the random-selection baseline");

  std::string ex_model, ex_data, ex_out;
  std::vector<std::size_t> ex_samples{0};
  std::optional<int> ex_budget;
  double ex_threshold = 0.0;
  auto* expl = app.add_subcommand("explain", "query/answer/posterior traces for individual samples");
  expl->add_option("--model", ex_model, "trained model directory")->required();
  expl->add_option("--data", ex_data, "EMBD dataset (default: the model's test.embd)");
  expl->add_option("--sample", ex_samples, "sample indices")->delimiter(',');
  expl->add_option("--budget", ex_budget, "maximum number of queries");
  expl->add_option("--threshold", ex_threshold, "stop when posterior entropy (bits) <= threshold");
  expl->add_option("--out", ex_out, "report directory (default: model directory)");

  int oc_n = 4, oc_c = 3, oc_trials = 200;
  std::uint64_t oc_seed = 0;
  std::string oc_instance;
  auto* orc = app.add_subcommand("oracle-check", "exact IP versus exhaustive enumeration on random instances");
  orc->add_option("--n", oc_n, "queries per instance")->check(CLI::Range(1, ip::kMaxQueries));
  orc->add_option("--classes", oc_c, "classes per instance")->check(CLI::Range(2, 1 << 16));
  orc->add_option("--trials", oc_trials, "random instances")->check(CLI::PositiveNumber);
  orc->add_option("--seed", oc_seed, "RNG seed");
  orc->add_option("--instance", oc_instance, "report first-step MI for a saved #joint instance instead");

  std::string ba_data, ba_concepts, ba_fit, ba_out = "baseline", ba_variant = "both";
  auto* exp = app.add_subcommand("export-baseline-answers", "fixed-dictionary soft/hard answers as EMBD files");
  exp->add_option("--data", ba_data, "EMBD dataset to answer")->required();
  exp->add_option("--concepts", ba_concepts, "concept EMBD file")->required();
  exp->add_option("--fit-data", ba_fit, "EMBD set for Z-score and threshold fitting (default: --data)");
  exp->add_option("--out", ba_out, "output directory");
  exp->add_option("--variant", ba_variant, "which answers")->check(CLI::IsMember({"soft", "hard", "both"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    std::cerr << (sub ? sub->help() : app.help());
    return 2;
  }

  try {
    if (*synth) return cmd_synth(synth_f, synth_out);
    if (*trn) return cmd_train(train_f, train_out);
    if (*eval) return cmd_evaluate(model_dir, eval_data, eval_budget, eval_out, random_seed);
    if (*expl) return cmd_explain(ex_model, ex_data, ex_samples, ex_budget, ex_threshold, ex_out);
    if (*orc) return cmd_oracle(oc_n, oc_c, oc_trials, oc_seed, oc_instance);
    if (*exp) return cmd_export(ba_data, ba_concepts, ba_fit, ba_out, ba_variant);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
