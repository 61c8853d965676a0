#pragma once

// Accuracy curves, explanation traces, matrix reports and their CSV/SVG
// emission. CSVs are the source of truth; the SVGs are convenience views.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qdl/error.hpp"
#include "qdl/ip_oracle.hpp"
#include "qdl/pursuit_nets.hpp"
#include "qdl/trainer.hpp"
#include "qdl/types.hpp"

namespace qdl {

struct AccuracyCurve {
  std::vector<double> accuracy;  // entry k-1 = accuracy after k queries
  std::string dataset_tag = "data";
  std::string model_tag = "model";
  std::uint64_t seed = 0;

  int budget() const { return static_cast<int>(accuracy.size()); }
};

inline AccuracyCurve accuracy_curve(PursuitModel& model, const Matrix& x, const Labels& y, int tau,
                                    std::string dataset_tag = "data", std::string model_tag = "model",
                                    std::uint64_t seed = 0) {
  if (tau < 1 || tau > model.num_queries()) {
    throw InvalidArgument("accuracy_curve: tau must lie in [1, n=" + std::to_string(model.num_queries()) + "]");
  }
  return {querier_accuracy_curve(model, x, y, tau), std::move(dataset_tag), std::move(model_tag), seed};
}

struct TraceRecord {
  int step = 0;
  Eigen::Index query = 0;
  double answer = 0.0;
  std::vector<double> posterior;
};

struct ExplanationTrace {
  std::vector<TraceRecord> records;
  std::vector<double> prior;  // classifier output on the empty history
  int prediction = 0;
  std::string sample_id;
};

inline std::vector<double> row_vector(const Matrix& m, Eigen::Index r) {
  std::vector<double> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(c)] = m(r, c);
  return out;
}

// Greedy querier rollout on one sample, recording the classifier posterior
// after every answer. Stops once the posterior entropy (bits) is at or below
// the threshold, or after tau queries.
inline ExplanationTrace explanation_trace(PursuitModel& model, const RowVector& x, int tau, double entropy_threshold,
                                          std::string sample_id = "0") {
  const Eigen::Index n = model.num_queries();
  if (tau < 0 || tau > n) throw InvalidArgument("explanation_trace: tau exceeds dictionary size");
  Matrix xs = x;
  const Matrix answers = model.dictionary.infer(xs);
  Matrix mask = Matrix::Zero(1, n);

  ExplanationTrace trace;
  trace.sample_id = std::move(sample_id);
  Matrix post = classifier_forward(model, answers, mask);
  trace.prior = row_vector(post, 0);
  QuerierOptions opts;
  for (int k = 0; k < tau; ++k) {
    if (ip::entropy_bits(row_vector(post, 0)) <= entropy_threshold) break;
    const Matrix sel = querier_forward(model, answers, mask, opts);
    Eigen::Index idx = 0;
    sel.row(0).maxCoeff(&idx);
    mask(0, idx) = 1.0;
    post = classifier_forward(model, answers, mask);
    trace.records.push_back({k + 1, idx, answers(0, idx), row_vector(post, 0)});
  }
  trace.prediction = static_cast<int>(ad::argmax_row(post, 0));
  return trace;
}

// k x C posterior matrix of a trace.
inline Matrix posterior_matrix(const ExplanationTrace& t) {
  const auto c = static_cast<Eigen::Index>(t.prior.size());
  Matrix m(static_cast<Eigen::Index>(t.records.size()), c);
  for (std::size_t k = 0; k < t.records.size(); ++k)
    for (Eigen::Index y = 0; y < c; ++y) m(static_cast<Eigen::Index>(k), y) = t.records[k].posterior[y];
  return m;
}

// Agreement between the learned querier and exact IP on the empirical joint
// of the model's hard answers, over the first `steps` selections.
struct AgreementReport {
  double first_step = 0.0;  // fraction of samples whose first pick matches
  double per_step = 0.0;    // fraction of matching picks over all compared steps
  std::size_t samples = 0;
};

inline AgreementReport querier_ip_agreement(PursuitModel& model, const Matrix& x, const Labels& y, int num_classes,
                                            int steps) {
  const Matrix answers = model.dictionary.infer(x);
  const auto inst = ip::instance_from_answers(answers, y, num_classes);
  std::vector<std::vector<Eigen::Index>> order;
  rollout_masks(model, answers, std::vector<int>(static_cast<std::size_t>(x.rows()), steps), &order);
  AgreementReport rep;
  std::size_t first_hits = 0, hits = 0, total = 0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    ip::OracleState st = ip::initial_state(inst);
    for (int k = 0; k < steps; ++k) {
      const int pick = ip::exact_ip_select(inst, st);
      const auto learned = order[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)];
      const bool same = pick == learned;
      hits += same ? 1 : 0;
      if (k == 0) first_hits += same ? 1 : 0;
      ++total;
      // Follow the learned querier's path so both see the same history.
      st = ip::posterior_update(inst, st, static_cast<int>(learned), answers(r, learned) > 0 ? 1 : -1);
    }
  }
  rep.samples = static_cast<std::size_t>(x.rows());
  rep.first_step = rep.samples ? static_cast<double>(first_hits) / static_cast<double>(rep.samples) : 0.0;
  rep.per_step = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  return rep;
}

// ---------------------------------------------------------------------------
// emission

struct NamedMatrix {
  std::string name;  // file stem, e.g. "classcond_synth_model_s0"
  Matrix values;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
};

struct ReportBundle {
  std::vector<AccuracyCurve> curves;
  std::vector<ExplanationTrace> traces;
  std::vector<NamedMatrix> matrices;
  std::optional<double> reference_accuracy;  // black-box line on the curve plot
  std::string tag = "run";                   // "<dataset>_<model>_s<seed>"
};

namespace report_detail {

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed for " + p.string());
}

inline std::string svg_header(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
         std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " + std::to_string(h) +
         "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  return colors[i % 6];
}

}  // namespace report_detail

inline std::string curve_tag(const AccuracyCurve& c) {
  return c.dataset_tag + "_" + c.model_tag + "_s" + std::to_string(c.seed);
}

inline std::string curve_csv(const AccuracyCurve& c) {
  std::string s = "k,accuracy\n";
  for (std::size_t k = 0; k < c.accuracy.size(); ++k)
    s += std::to_string(k + 1) + "," + report_detail::fmt(c.accuracy[k]) + "\n";
  return s;
}

inline std::string trace_csv(const ExplanationTrace& t) {
  std::string s = "step,query,answer";
  for (std::size_t y = 0; y < t.prior.size(); ++y) s += ",p" + std::to_string(y);
  s += "\n0,-1,0";
  for (double p : t.prior) s += "," + report_detail::fmt(p, 8);
  s += "\n";
  for (const auto& r : t.records) {
    s += std::to_string(r.step) + "," + std::to_string(r.query) + "," + report_detail::fmt(r.answer, 6);
    for (double p : r.posterior) s += "," + report_detail::fmt(p, 8);
    s += "\n";
  }
  s += "# prediction=" + std::to_string(t.prediction) + "\n";
  return s;
}

inline std::string matrix_csv(const NamedMatrix& m) {
  std::string s = "row";
  for (Eigen::Index c = 0; c < m.values.cols(); ++c) {
    s += ",";
    s += static_cast<std::size_t>(c) < m.col_labels.size() ? m.col_labels[c] : "c" + std::to_string(c);
  }
  s += "\n";
  for (Eigen::Index r = 0; r < m.values.rows(); ++r) {
    s += static_cast<std::size_t>(r) < m.row_labels.size() ? m.row_labels[r] : "r" + std::to_string(r);
    for (Eigen::Index c = 0; c < m.values.cols(); ++c) s += "," + report_detail::fmt(m.values(r, c));
    s += "\n";
  }
  return s;
}

inline std::string curves_svg(const std::vector<AccuracyCurve>& curves, std::optional<double> reference) {
  using report_detail::fmt;
  const int w = 480, h = 320, left = 50, right = 20, top = 20, bottom = 40;
  std::size_t kmax = 1;
  for (const auto& c : curves) kmax = std::max(kmax, c.accuracy.size());
  auto px = [&](double k) { return left + (w - left - right) * (kmax > 1 ? (k - 1) / double(kmax - 1) : 0.5); };
  auto py = [&](double a) { return top + (h - top - bottom) * (1.0 - a); };
  std::string s = report_detail::svg_header(w, h);
  s += "<line x1=\"" + fmt(left, 1) + "\" y1=\"" + fmt(py(0), 1) + "\" x2=\"" + fmt(w - right, 1) + "\" y2=\"" +
       fmt(py(0), 1) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + fmt(left, 1) + "\" y1=\"" + fmt(py(0), 1) + "\" x2=\"" + fmt(left, 1) + "\" y2=\"" +
       fmt(py(1), 1) + "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double a = t / 4.0;
    s += "<text x=\"" + fmt(left - 6, 1) + "\" y=\"" + fmt(py(a) + 4, 1) +
         "\" font-size=\"10\" text-anchor=\"end\">" + fmt(a, 2) + "</text>\n";
  }
  for (std::size_t k = 1; k <= kmax; ++k) {
    s += "<text x=\"" + fmt(px(double(k)), 1) + "\" y=\"" + fmt(h - bottom + 14, 1) +
         "\" font-size=\"10\" text-anchor=\"middle\">" + std::to_string(k) + "</text>\n";
  }
  s += "<text x=\"" + fmt((left + w - right) / 2.0, 1) + "\" y=\"" + fmt(h - 8, 1) +
       "\" font-size=\"11\" text-anchor=\"middle\">queries observed (k)</text>\n";
  if (reference) {
    s += "<line x1=\"" + fmt(left, 1) + "\" y1=\"" + fmt(py(*reference), 1) + "\" x2=\"" + fmt(w - right, 1) +
         "\" y2=\"" + fmt(py(*reference), 1) + "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  }
  for (std::size_t i = 0; i < curves.size(); ++i) {
    std::string pts;
    for (std::size_t k = 0; k < curves[i].accuracy.size(); ++k) {
      pts += fmt(px(double(k + 1)), 1) + "," + fmt(py(curves[i].accuracy[k]), 1) + " ";
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(report_detail::palette(i)) + "\" points=\"" + pts +
         "\"/>\n";
    s += "<text x=\"" + fmt(left + 8, 1) + "\" y=\"" + fmt(top + 12 + 12.0 * i, 1) + "\" font-size=\"10\" fill=\"" +
         report_detail::palette(i) + "\">" + curves[i].model_tag + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

inline std::string matrix_svg(const NamedMatrix& m) {
  using report_detail::fmt;
  const int cell = 18, left = 40, top = 20;
  const int w = left + cell * static_cast<int>(m.values.cols()) + 10;
  const int h = top + cell * static_cast<int>(m.values.rows()) + 10;
  std::string s = report_detail::svg_header(w, h);
  for (Eigen::Index r = 0; r < m.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.values.cols(); ++c) {
      const double v = std::clamp(m.values(r, c), 0.0, 1.0);
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - v)));
      s += "<rect x=\"" + std::to_string(left + cell * c) + "\" y=\"" + std::to_string(top + cell * r) +
           "\" width=\"" + std::to_string(cell) + "\" height=\"" + std::to_string(cell) + "\" fill=\"rgb(" +
           std::to_string(shade) + "," + std::to_string(shade) + ",255)\"/>\n";
    }
    s += "<text x=\"" + std::to_string(left - 4) + "\" y=\"" + std::to_string(top + cell * r + 13) +
         "\" font-size=\"9\" text-anchor=\"end\">" +
         (static_cast<std::size_t>(r) < m.row_labels.size() ? m.row_labels[r] : std::to_string(r)) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

// Writes every CSV and SVG of the bundle into out_dir. Output depends only on
// the bundle's contents, so identical inputs give identical bytes.
inline std::vector<std::filesystem::path> emit_reports(const ReportBundle& bundle, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (!std::filesystem::is_directory(out_dir)) throw IoError("cannot create output directory " + out_dir.string());
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    auto p = out_dir / name;
    report_detail::write_text(p, text);
    written.push_back(p);
  };
  for (const auto& c : bundle.curves) emit("curve_" + curve_tag(c) + ".csv", curve_csv(c));
  if (!bundle.curves.empty()) emit("curves_" + bundle.tag + ".svg", curves_svg(bundle.curves, bundle.reference_accuracy));
  for (const auto& t : bundle.traces) {
    emit("trace_" + bundle.tag + "_sample" + t.sample_id + ".csv", trace_csv(t));
    NamedMatrix pm{"posterior_" + bundle.tag + "_sample" + t.sample_id, posterior_matrix(t), {}, {}};
    for (const auto& r : t.records) pm.row_labels.push_back("q" + std::to_string(r.query));
    emit(pm.name + ".csv", matrix_csv(pm));
    emit(pm.name + ".svg", matrix_svg(pm));
  }
  for (const auto& m : bundle.matrices) {
    emit(m.name + ".csv", matrix_csv(m));
    emit(m.name + ".svg", matrix_svg(m));
  }
  return written;
}

}  // namespace qdl
