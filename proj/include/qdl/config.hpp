#pragma once

// Flat key = value run configuration. Keys mirror TrainPlan fields, plus a
// few data-source keys. Unknown keys are errors.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "qdl/embedding_store.hpp"
#include "qdl/error.hpp"
#include "qdl/trainer.hpp"

namespace qdl {

struct RunConfig {
  TrainPlan plan;

  // data source: an EMBD file, or a synthetic mixture when `data` is empty
  std::string data;
  std::string test_data;  // optional; otherwise test_fraction is held out of `data`
  std::string concepts;   // concept EMBD for init=concepts or fixed dictionaries
  double test_fraction = 0.2;
  double val_fraction = 0.1;
  std::uint64_t split_seed = 0;  // fixed so that training seeds share one test set
  SynthSpec synth;

  int blackbox_epochs = 0;  // 0 skips the black-box reference
  bool record_wall_time = false;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw InvalidArgument("config: bad value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw InvalidArgument("config: expected true/false for " + key + ", got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  if (out.empty()) throw InvalidArgument("config: empty list for " + key);
  return out;
}

inline std::string int_list(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// One handler per key: a setter and a getter that renders the current value.
struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<std::pair<std::string, Field>>& fields() {
  using F = Field;
  auto int_field = [](auto member) {
    return F{[member](RunConfig& c, const std::string& v) {
               member(c) = parse_number<std::remove_reference_t<decltype(member(c))>>("", v);
             },
             [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
  };
  auto dbl_field = [](auto member) {
    return F{[member](RunConfig& c, const std::string& v) { member(c) = parse_number<double>("", v); },
             [member](const RunConfig& c) { return fmt_double(member(const_cast<RunConfig&>(c))); }};
  };
  auto bool_field = [](auto member) {
    return F{[member](RunConfig& c, const std::string& v) { member(c) = parse_bool("", v); },
             [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
  };
  auto str_field = [](auto member) {
    return F{[member](RunConfig& c, const std::string& v) { member(c) = v; },
             [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }};
  };
#define QDL_REF(expr) [](RunConfig& c) -> auto& { return expr; }
  static const std::vector<std::pair<std::string, Field>> table = {
      {"warmup_epochs", int_field(QDL_REF(c.plan.warmup_epochs))},
      {"querier_random_epochs", int_field(QDL_REF(c.plan.querier_random_epochs))},
      {"querier_biased_epochs", int_field(QDL_REF(c.plan.querier_biased_epochs))},
      {"dictionary_epochs", int_field(QDL_REF(c.plan.dictionary_epochs))},
      {"joint_random_epochs", int_field(QDL_REF(c.plan.joint_random_epochs))},
      {"joint_biased_epochs", int_field(QDL_REF(c.plan.joint_biased_epochs))},
      {"outer_iterations", int_field(QDL_REF(c.plan.outer_iterations))},
      {"lr_classifier", dbl_field(QDL_REF(c.plan.lr_classifier))},
      {"lr_querier", dbl_field(QDL_REF(c.plan.lr_querier))},
      {"lr_dictionary", dbl_field(QDL_REF(c.plan.lr_dictionary))},
      {"batch_size", int_field(QDL_REF(c.plan.batch_size))},
      {"budget", int_field(QDL_REF(c.plan.budget))},
      {"dict_size", int_field(QDL_REF(c.plan.dict_size))},
      {"seed", F{[](RunConfig& c, const std::string& v) { c.plan.seed = parse_number<std::uint64_t>("seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.plan.seed); }}},
      {"joint_optimization", bool_field(QDL_REF(c.plan.joint_optimization))},
      {"skip_warmup", bool_field(QDL_REF(c.plan.skip_warmup))},
      {"soft_answers", bool_field(QDL_REF(c.plan.soft_answers))},
      {"soft_with_beta", bool_field(QDL_REF(c.plan.soft_with_beta))},
      {"bn_off", bool_field(QDL_REF(c.plan.bn_off))},
      {"init_mode", F{[](RunConfig& c, const std::string& v) {
                        if (v == "random") c.plan.init_mode = InitMode::random;
                        else if (v == "concepts") c.plan.init_mode = InitMode::concepts;
                        else throw InvalidArgument("config: init_mode must be random or concepts");
                      },
                      [](const RunConfig& c) {
                        return std::string(c.plan.init_mode == InitMode::random ? "random" : "concepts");
                      }}},
      {"dictionary_source", F{[](RunConfig& c, const std::string& v) {
                                if (v == "learned") c.plan.dictionary_source = DictionarySource::learned;
                                else if (v == "fixed_soft") c.plan.dictionary_source = DictionarySource::fixed_soft;
                                else if (v == "fixed_hard") c.plan.dictionary_source = DictionarySource::fixed_hard;
                                else throw InvalidArgument("config: dictionary_source must be learned, fixed_soft or fixed_hard");
                              },
                              [](const RunConfig& c) {
                                switch (c.plan.dictionary_source) {
                                  case DictionarySource::learned: return std::string("learned");
                                  case DictionarySource::fixed_soft: return std::string("fixed_soft");
                                  default: return std::string("fixed_hard");
                                }
                              }}},
      {"exclude_asked", bool_field(QDL_REF(c.plan.exclude_asked))},
      {"anneal_per_phase", bool_field(QDL_REF(c.plan.anneal_per_phase))},
      {"select_on_mean_curve", bool_field(QDL_REF(c.plan.select_on_mean_curve))},
      {"temperature_start", dbl_field(QDL_REF(c.plan.temperature_start))},
      {"temperature_end", dbl_field(QDL_REF(c.plan.temperature_end))},
      {"bn_epsilon", dbl_field(QDL_REF(c.plan.bn_epsilon))},
      {"bn_momentum", dbl_field(QDL_REF(c.plan.bn_momentum))},
      {"classifier_hidden",
       F{[](RunConfig& c, const std::string& v) { c.plan.network.classifier_hidden = parse_int_list("classifier_hidden", v); },
         [](const RunConfig& c) { return int_list(c.plan.network.classifier_hidden); }}},
      {"querier_hidden",
       F{[](RunConfig& c, const std::string& v) { c.plan.network.querier_hidden = parse_int_list("querier_hidden", v); },
         [](const RunConfig& c) { return int_list(c.plan.network.querier_hidden); }}},
      {"data", str_field(QDL_REF(c.data))},
      {"test_data", str_field(QDL_REF(c.test_data))},
      {"concepts", str_field(QDL_REF(c.concepts))},
      {"test_fraction", dbl_field(QDL_REF(c.test_fraction))},
      {"val_fraction", dbl_field(QDL_REF(c.val_fraction))},
      {"split_seed", F{[](RunConfig& c, const std::string& v) { c.split_seed = parse_number<std::uint64_t>("split_seed", v); },
                       [](const RunConfig& c) { return std::to_string(c.split_seed); }}},
      {"synth_classes", int_field(QDL_REF(c.synth.num_classes))},
      {"synth_dim", int_field(QDL_REF(c.synth.dim))},
      {"synth_clusters_per_class", int_field(QDL_REF(c.synth.clusters_per_class))},
      {"synth_separation", dbl_field(QDL_REF(c.synth.center_separation))},
      {"synth_std", dbl_field(QDL_REF(c.synth.within_cluster_std))},
      {"synth_samples_per_class", int_field(QDL_REF(c.synth.samples_per_class))},
      {"synth_seed", F{[](RunConfig& c, const std::string& v) { c.synth.seed = parse_number<std::uint64_t>("synth_seed", v); },
                       [](const RunConfig& c) { return std::to_string(c.synth.seed); }}},
      {"blackbox_epochs", int_field(QDL_REF(c.blackbox_epochs))},
      {"record_wall_time", bool_field(QDL_REF(c.record_wall_time))},
  };
#undef QDL_REF
  return table;
}

inline const Field* find_field(const std::string& key) {
  for (const auto& [k, f] : fields())
    if (k == key) return &f;
  return nullptr;
}

}  // namespace config_detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto* f = config_detail::find_field(key);
  if (f == nullptr) throw InvalidArgument("config: unknown key '" + key + "'");
  try {
    f->set(cfg, value);
  } catch (const InvalidArgument& e) {
    throw InvalidArgument("config: bad value '" + value + "' for " + key);
  }
}

inline RunConfig parse_config(std::istream& in, const std::string& origin = "config") {
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InvalidArgument(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    try {
      set_config_value(cfg, key, value);
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse_config(in, path.string());
}

// Renders every key, so the output parses back to the same configuration.
inline std::string config_text(const RunConfig& cfg) {
  std::string s;
  for (const auto& [k, f] : config_detail::fields()) s += k + " = " + f.get(cfg) + "\n";
  return s;
}

}  // namespace qdl
