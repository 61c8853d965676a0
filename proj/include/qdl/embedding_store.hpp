#pragma once

// Embedding datasets: the EMBD binary format, its text sidecar, stratified
// splitting, row normalization and a Gaussian-mixture generator.
//
// EMBD layout (little-endian):
//   "EMBD" | u32 version=1 | u64 N | u32 d | u32 C | u32 flags
//   N*d float32 row-major embeddings
//   N u32 labels            (only when flags bit0 is set)
//
// The optional sidecar lives at "<path>.names" and holds one name per line
// under section markers "#classes", "#concepts" and "#provenance".

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qdl/binary_io.hpp"
#include "qdl/error.hpp"
#include "qdl/types.hpp"

namespace qdl {

inline constexpr std::uint32_t kEmbdVersion = 1;
inline constexpr std::uint32_t kEmbdFlagLabels = 1u;

struct EmbeddingDataset {
  std::uint32_t dim = 0;
  std::uint32_t num_classes = 0;  // 0 for unlabeled files (concept rows)
  std::vector<float> embeddings;  // size() * dim, row-major
  Labels labels;                  // empty when unlabeled
  std::optional<std::vector<std::string>> class_names;
  std::optional<std::vector<std::string>> concept_names;
  std::string provenance = "external";

  std::size_t size() const { return dim == 0 ? 0 : embeddings.size() / dim; }
  bool has_labels() const { return !labels.empty(); }

  std::span<const float> row(std::size_t i) const {
    return {embeddings.data() + i * dim, dim};
  }

  // Widened copy of the selected rows.
  Matrix rows(std::span<const std::size_t> idx) const {
    Matrix out(static_cast<Eigen::Index>(idx.size()), dim);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const float* src = embeddings.data() + idx[r] * dim;
      for (std::uint32_t c = 0; c < dim; ++c) out(r, c) = src[c];
    }
    return out;
  }

  Matrix all_rows() const {
    Indices idx(size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return rows(idx);
  }

  Labels labels_of(std::span<const std::size_t> idx) const {
    Labels out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }

  EmbeddingDataset subset(std::span<const std::size_t> idx) const {
    EmbeddingDataset out;
    out.dim = dim;
    out.num_classes = num_classes;
    out.class_names = class_names;
    out.concept_names = concept_names;
    out.provenance = provenance;
    out.embeddings.reserve(idx.size() * dim);
    for (auto i : idx) {
      auto r = row(i);
      out.embeddings.insert(out.embeddings.end(), r.begin(), r.end());
      if (has_labels()) out.labels.push_back(labels[i]);
    }
    return out;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (auto y : labels) ++counts[y];
    return counts;
  }

  // Throws InvalidArgument describing the first violated invariant.
  void validate() const {
    if (dim < 2) throw InvalidArgument("dataset dim must be >= 2");
    if (embeddings.size() % dim != 0) throw InvalidArgument("embedding buffer is not a multiple of dim");
    if (size() < 1) throw InvalidArgument("dataset must contain at least one row");
    if (has_labels()) {
      if (num_classes < 2) throw InvalidArgument("labeled dataset needs at least 2 classes");
      if (labels.size() != size()) throw InvalidArgument("label count does not match row count");
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) {
          throw InvalidArgument("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                                " is >= C=" + std::to_string(num_classes));
        }
      }
    }
    if (class_names && has_labels() && class_names->size() != num_classes) {
      throw InvalidArgument("class name count does not match C");
    }
  }

  friend bool operator==(const EmbeddingDataset&, const EmbeddingDataset&) = default;
};

// ---------------------------------------------------------------------------
// sidecar

using Sidecar = std::map<std::string, std::vector<std::string>>;

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".names");
}

inline Sidecar read_sidecar_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open sidecar " + path.string());
  Sidecar out;
  std::string section;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty() && line.front() == '#') {
      section = line.substr(1);
      out[section];
      continue;
    }
    if (section.empty()) {
      if (line.empty()) continue;
      throw FormatError("sidecar line outside of any section: " + line);
    }
    out[section].push_back(line);
  }
  return out;
}

inline void write_sidecar_file(const std::filesystem::path& path, const Sidecar& sections) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write sidecar " + path.string());
  for (const auto& [name, lines] : sections) {
    out << '#' << name << '\n';
    for (const auto& l : lines) out << l << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// EMBD I/O

inline std::uint64_t embd_file_size(std::uint64_t n, std::uint32_t d, bool labels) {
  constexpr std::uint64_t header = 4 + 4 + 8 + 4 + 4 + 4;
  return header + 4ull * n * d + (labels ? 4ull * n : 0ull);
}

inline void save_dataset(const EmbeddingDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    binary::put_magic(out, "EMBD");
    binary::put<std::uint32_t>(out, kEmbdVersion);
    binary::put<std::uint64_t>(out, ds.size());
    binary::put<std::uint32_t>(out, ds.dim);
    binary::put<std::uint32_t>(out, ds.num_classes);
    binary::put<std::uint32_t>(out, ds.has_labels() ? kEmbdFlagLabels : 0u);
    for (float v : ds.embeddings) binary::put<float>(out, v);
    for (auto y : ds.labels) binary::put<std::uint32_t>(out, y);
    if (!out) throw IoError("write failed for " + path.string());
  }

  Sidecar sc;
  if (ds.class_names) sc["classes"] = *ds.class_names;
  if (ds.concept_names) sc["concepts"] = *ds.concept_names;
  if (ds.provenance != "external") sc["provenance"] = {ds.provenance};
  auto sc_path = sidecar_path(path);
  if (!sc.empty()) {
    write_sidecar_file(sc_path, sc);
  } else {
    std::error_code ec;
    std::filesystem::remove(sc_path, ec);
  }
}

inline EmbeddingDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());

  std::string magic;
  if (!binary::get_magic(in, magic) || magic != "EMBD") throw FormatError("bad magic in " + path.string());

  std::uint32_t version = 0;
  std::uint64_t n = 0;
  std::uint32_t d = 0, c = 0, flags = 0;
  if (!binary::get(in, version)) throw FormatError("truncated payload: header");
  if (version != kEmbdVersion) {
    throw FormatError("version mismatch: file has " + std::to_string(version) + ", expected " +
                      std::to_string(kEmbdVersion));
  }
  if (!binary::get(in, n) || !binary::get(in, d) || !binary::get(in, c) || !binary::get(in, flags)) {
    throw FormatError("truncated payload: header");
  }
  const bool labeled = (flags & kEmbdFlagLabels) != 0;

  // Check the byte count before allocating so a corrupt N cannot trigger a huge allocation.
  auto here = in.tellg();
  in.seekg(0, std::ios::end);
  const auto total = static_cast<std::uint64_t>(in.tellg());
  in.seekg(here);
  if (total < embd_file_size(n, d, labeled)) {
    throw FormatError("truncated payload: header declares N=" + std::to_string(n) + ", d=" +
                      std::to_string(d) + " but file has " + std::to_string(total) + " bytes");
  }

  EmbeddingDataset ds;
  ds.dim = d;
  ds.num_classes = c;
  ds.embeddings.resize(n * d);
  for (auto& v : ds.embeddings) {
    if (!binary::get(in, v)) throw FormatError("truncated payload: embeddings");
  }
  if (labeled) {
    ds.labels.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      if (!binary::get(in, ds.labels[i])) throw FormatError("truncated payload: labels");
      if (ds.labels[i] >= c) {
        throw FormatError("label out of range: row " + std::to_string(i) + " has label " +
                          std::to_string(ds.labels[i]) + " >= C=" + std::to_string(c));
      }
    }
  }

  auto sc_path = sidecar_path(path);
  if (std::filesystem::exists(sc_path)) {
    auto sc = read_sidecar_file(sc_path);
    if (auto it = sc.find("classes"); it != sc.end()) ds.class_names = it->second;
    if (auto it = sc.find("concepts"); it != sc.end()) ds.concept_names = it->second;
    if (auto it = sc.find("provenance"); it != sc.end() && !it->second.empty()) ds.provenance = it->second.front();
  }

  try {
    ds.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("invalid dataset in ") + path.string() + ": " + e.what());
  }
  return ds;
}

// ---------------------------------------------------------------------------
// transforms

inline EmbeddingDataset normalize_rows(const EmbeddingDataset& ds) {
  EmbeddingDataset out = ds;
  const std::size_t n = ds.size();
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (float v : ds.row(i)) sq += static_cast<double>(v) * v;
    if (sq == 0.0) throw InvalidArgument("zero-norm row at index " + std::to_string(i));
    const double inv = 1.0 / std::sqrt(sq);
    float* dst = out.embeddings.data() + i * ds.dim;
    for (std::uint32_t c = 0; c < ds.dim; ++c) dst[c] = static_cast<float>(dst[c] * inv);
  }
  return out;
}

struct SplitIndices {
  Indices train;
  Indices val;
};

// Stratified split. The total validation size is round(f*N), spread over the
// classes by largest remainder so every per-class count is within one of
// f * (class count).
inline SplitIndices split_indices(const EmbeddingDataset& ds, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw InvalidArgument("val_fraction must lie in (0,1), got " + std::to_string(val_fraction));
  }
  if (!ds.has_labels()) throw InvalidArgument("split requires a labeled dataset");
  const std::size_t n = ds.size();
  if (val_fraction * static_cast<double>(n) < 1.0) throw InvalidArgument("val_fraction * N must be >= 1");

  std::vector<Indices> by_class(ds.num_classes);
  for (std::size_t i = 0; i < n; ++i) by_class[ds.labels[i]].push_back(i);

  std::mt19937_64 rng(seed);
  for (auto& members : by_class) std::shuffle(members.begin(), members.end(), rng);

  const auto target = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  std::vector<std::size_t> take(ds.num_classes);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const double exact = val_fraction * static_cast<double>(by_class[c].size());
    take[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += take[c];
    remainders.emplace_back(exact - static_cast<double>(take[c]), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < target && r < remainders.size(); ++r) {
    const auto c = remainders[r].second;
    if (take[c] < by_class[c].size()) {
      ++take[c];
      ++assigned;
    }
  }

  SplitIndices out;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    for (std::size_t j = 0; j < by_class[c].size(); ++j) {
      (j < take[c] ? out.val : out.train).push_back(by_class[c][j]);
    }
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

inline std::pair<EmbeddingDataset, EmbeddingDataset> split(const EmbeddingDataset& ds, double val_fraction,
                                                           std::uint64_t seed) {
  auto idx = split_indices(ds, val_fraction, seed);
  return {ds.subset(idx.train), ds.subset(idx.val)};
}

// ---------------------------------------------------------------------------
// synthetic data

struct SynthSpec {
  std::uint32_t num_classes = 2;
  std::uint32_t dim = 16;
  std::uint32_t clusters_per_class = 1;
  double center_separation = 20.0;
  double within_cluster_std = 1.0;
  std::uint32_t samples_per_class = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw InvalidArgument("synth: num_classes must be >= 2");
    if (dim < 2) throw InvalidArgument("synth: dim must be >= 2");
    if (clusters_per_class < 1) throw InvalidArgument("synth: clusters_per_class must be >= 1");
    if (!(center_separation > 0.0)) throw InvalidArgument("synth: center_separation must be > 0");
    if (!(within_cluster_std > 0.0)) throw InvalidArgument("synth: within_cluster_std must be > 0");
    if (samples_per_class < 1) throw InvalidArgument("synth: samples_per_class must be >= 1");
  }
};

struct SynthResult {
  EmbeddingDataset data;
  Matrix centers;  // (C * clusters_per_class) x d, before row normalization; row c*K + k
};

// Cluster centers are Gaussian draws rescaled so the closest pair is exactly
// center_separation apart. Samples are interleaved by class and unit-normalized.
inline SynthResult synth_gaussian_mixture_with_centers(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  const std::size_t clusters = std::size_t{spec.num_classes} * spec.clusters_per_class;
  Matrix centers(static_cast<Eigen::Index>(clusters), spec.dim);
  for (Eigen::Index i = 0; i < centers.rows(); ++i)
    for (Eigen::Index j = 0; j < centers.cols(); ++j) centers(i, j) = normal(rng);

  double min_dist = std::numeric_limits<double>::infinity();
  for (Eigen::Index a = 0; a < centers.rows(); ++a)
    for (Eigen::Index b = a + 1; b < centers.rows(); ++b)
      min_dist = std::min(min_dist, (centers.row(a) - centers.row(b)).norm());
  if (!(min_dist > 0.0)) throw InvalidArgument("synth: degenerate cluster centers");
  centers *= spec.center_separation / min_dist;

  EmbeddingDataset ds;
  ds.dim = spec.dim;
  ds.num_classes = spec.num_classes;
  ds.provenance = "synthetic";
  ds.embeddings.reserve(std::size_t{spec.num_classes} * spec.samples_per_class * spec.dim);
  std::vector<std::string> names;
  for (std::uint32_t c = 0; c < spec.num_classes; ++c) names.push_back("class_" + std::to_string(c));
  ds.class_names = names;

  for (std::uint32_t s = 0; s < spec.samples_per_class; ++s) {
    for (std::uint32_t c = 0; c < spec.num_classes; ++c) {
      const auto cluster = static_cast<Eigen::Index>(c * spec.clusters_per_class + s % spec.clusters_per_class);
      RowVector x = centers.row(cluster);
      for (Eigen::Index j = 0; j < x.size(); ++j) x(j) += spec.within_cluster_std * normal(rng);
      const double norm = x.norm();
      for (Eigen::Index j = 0; j < x.size(); ++j) ds.embeddings.push_back(static_cast<float>(x(j) / norm));
      ds.labels.push_back(c);
    }
  }
  return {std::move(ds), std::move(centers)};
}

inline EmbeddingDataset synth_gaussian_mixture(const SynthSpec& spec) {
  return synth_gaussian_mixture_with_centers(spec).data;
}

}  // namespace qdl
