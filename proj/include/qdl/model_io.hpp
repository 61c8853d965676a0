#pragma once

// Model checkpoints: a directory holding model.prms (every tensor) and
// model.cfg (architecture manifest needed to rebuild the tensors).

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "qdl/config.hpp"
#include "qdl/diffmath.hpp"
#include "qdl/error.hpp"
#include "qdl/pursuit_nets.hpp"

namespace qdl {

inline constexpr const char* kModelTensorsFile = "model.prms";
inline constexpr const char* kModelManifestFile = "model.cfg";

inline std::vector<const ad::Tensor*> model_tensors(const PursuitModel& m,
                                                    std::vector<ad::Tensor>* fixed_storage = nullptr) {
  std::vector<const ad::Tensor*> out;
  for (auto* t : m.dictionary_tensors()) out.push_back(t);
  if (m.dictionary.kind == DictionaryKind::fixed && fixed_storage != nullptr) {
    fixed_storage->clear();
    fixed_storage->reserve(2);
    fixed_storage->emplace_back("dict.concepts", m.dictionary.fixed.concept_vectors, false);
    if (m.dictionary.fixed.thresholds) {
      fixed_storage->emplace_back("dict.thresholds", Matrix(*m.dictionary.fixed.thresholds), false);
    }
    for (auto& t : *fixed_storage) out.push_back(&t);
  }
  for (auto* t : m.classifier_tensors()) out.push_back(t);
  for (auto* t : m.querier_tensors()) out.push_back(t);
  return out;
}

inline std::string model_manifest(const PursuitModel& m) {
  using config_detail::fmt_double;
  using config_detail::int_list;
  std::string s = "format = qdl-model-1\n";
  s += "kind = " + std::string(m.dictionary.kind == DictionaryKind::learnable ? "learnable" : "fixed") + "\n";
  s += "num_classes = " + std::to_string(m.num_classes) + "\n";
  s += "dim = " + std::to_string(m.dictionary.dim()) + "\n";
  s += "dict_size = " + std::to_string(m.dictionary.size()) + "\n";
  s += "classifier_hidden = " + int_list(m.config.classifier_hidden) + "\n";
  s += "querier_hidden = " + int_list(m.config.querier_hidden) + "\n";
  if (m.dictionary.kind == DictionaryKind::learnable) {
    const auto& d = m.dictionary.learnable;
    s += "answer_mode = " + std::string(to_string(d.answer_mode)) + "\n";
    s += "parameterization = " +
         std::string(d.parameterization == Parameterization::batch_norm ? "batch_norm" : "affine") + "\n";
    s += "soft_with_beta = " + std::string(d.soft_with_beta ? "true" : "false") + "\n";
    s += "bn_epsilon = " + fmt_double(d.bn_epsilon) + "\n";
    s += "bn_momentum = " + fmt_double(d.bn_momentum) + "\n";
  } else {
    const auto& f = m.dictionary.fixed;
    s += "answer_mode = " + std::string(to_string(m.dictionary.fixed_mode)) + "\n";
    if (f.zscore_mean) s += "zscore_mean = " + fmt_double(*f.zscore_mean) + "\n";
    if (f.zscore_std) s += "zscore_std = " + fmt_double(*f.zscore_std) + "\n";
  }
  return s;
}

inline void save_model(const PursuitModel& m, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (!std::filesystem::is_directory(dir)) throw IoError("cannot create model directory " + dir.string());
  std::vector<ad::Tensor> storage;
  const auto tensors = model_tensors(m, &storage);
  ad::save_params(dir / kModelTensorsFile, tensors);
  std::ofstream out(dir / kModelManifestFile, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / kModelManifestFile).string());
  out << model_manifest(m);
}

inline PursuitModel load_model(const std::filesystem::path& dir) {
  std::ifstream in(dir / kModelManifestFile);
  if (!in) throw IoError("cannot open " + (dir / kModelManifestFile).string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[config_detail::trim(line.substr(0, eq))] = config_detail::trim(line.substr(eq + 1));
  }
  auto need = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("model manifest is missing '" + k + "'");
    return it->second;
  };
  if (need("format") != "qdl-model-1") throw FormatError("version mismatch: unsupported model format");
  using config_detail::parse_number;
  const auto c = parse_number<Eigen::Index>("num_classes", need("num_classes"));
  const auto d = parse_number<Eigen::Index>("dim", need("dim"));
  const auto n = parse_number<Eigen::Index>("dict_size", need("dict_size"));
  NetworkConfig net{config_detail::parse_int_list("classifier_hidden", need("classifier_hidden")),
                    config_detail::parse_int_list("querier_hidden", need("querier_hidden"))};
  const bool hard = need("answer_mode") == "hard";

  const auto saved = ad::load_params(dir / kModelTensorsFile);
  QueryDictionary q;
  if (need("kind") == "learnable") {
    q.kind = DictionaryKind::learnable;
    q.learnable = init_random(n, d, 0);
    q.learnable.answer_mode = hard ? AnswerMode::hard : AnswerMode::soft;
    q.learnable.parameterization =
        need("parameterization") == "affine" ? Parameterization::affine : Parameterization::batch_norm;
    q.learnable.soft_with_beta = config_detail::parse_bool("soft_with_beta", need("soft_with_beta"));
    q.learnable.bn_epsilon = parse_number<double>("bn_epsilon", need("bn_epsilon"));
    q.learnable.bn_momentum = parse_number<double>("bn_momentum", need("bn_momentum"));
  } else {
    q.kind = DictionaryKind::fixed;
    q.fixed_mode = hard ? AnswerMode::hard : AnswerMode::soft;
    std::map<std::string, const Matrix*> by_name;
    for (const auto& [k, v] : saved) by_name[k] = &v;
    auto it = by_name.find("dict.concepts");
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor 'dict.concepts'");
    q.fixed.concept_vectors = *it->second;
    if (auto t = by_name.find("dict.thresholds"); t != by_name.end()) q.fixed.thresholds = RowVector(t->second->row(0));
    if (kv.count("zscore_mean")) q.fixed.zscore_mean = parse_number<double>("zscore_mean", kv["zscore_mean"]);
    if (kv.count("zscore_std")) q.fixed.zscore_std = parse_number<double>("zscore_std", kv["zscore_std"]);
    if (q.fixed.size() != n || q.fixed.dim() != d) throw FormatError("fixed dictionary shape disagrees with manifest");
  }
  PursuitModel m = PursuitModel::create(std::move(q), c, net, 0);
  std::vector<ad::Tensor*> targets;
  for (auto* t : m.dictionary.kind == DictionaryKind::learnable ? m.dictionary.learnable.tensors()
                                                                 : std::vector<ad::Tensor*>{})
    targets.push_back(t);
  for (auto* t : m.classifier.params()) targets.push_back(t);
  for (auto* t : m.querier.params()) targets.push_back(t);
  ad::assign_params(saved, targets);
  m.dictionary.set_frozen(true);
  m.classifier.set_frozen(true);
  m.querier.set_frozen(true);
  return m;
}

}  // namespace qdl
