#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ler/common.hpp"
#include "ler/csv.hpp"

namespace ler {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

inline bool is_missing(double v) { return std::isnan(v); }

struct MarkerInfo {
  std::string id;
  std::string chromosome;
  long long position = 0;
};

// Chromosome labels sort numerically when both parse as integers, otherwise
// lexicographically ("1" < "2" < "10" < "X").
inline bool chromosome_less(const std::string& a, const std::string& b) {
  char* end_a = nullptr;
  char* end_b = nullptr;
  const long la = std::strtol(a.c_str(), &end_a, 10);
  const long lb = std::strtol(b.c_str(), &end_b, 10);
  const bool num_a = end_a != a.c_str() && *end_a == '\0';
  const bool num_b = end_b != b.c_str() && *end_b == '\0';
  if (num_a && num_b) return la < lb;
  if (num_a != num_b) return num_a;  // numeric chromosomes first
  return a < b;
}

// n x m genotype matrix coded 0/1/2 with NaN for missing entries, plus the
// marker map. Markers are kept sorted by (chromosome, position).
class MarkerMatrix {
 public:
  MarkerMatrix() = default;

  MarkerMatrix(Eigen::MatrixXd values, std::vector<std::string> sample_ids,
               std::vector<MarkerInfo> markers)
      : values_(std::move(values)),
        sample_ids_(std::move(sample_ids)),
        markers_(std::move(markers)) {
    validate();
  }

  Eigen::Index n_samples() const { return values_.rows(); }
  Eigen::Index n_markers() const { return values_.cols(); }
  const Eigen::MatrixXd& values() const { return values_; }
  const std::vector<std::string>& sample_ids() const { return sample_ids_; }
  const std::vector<MarkerInfo>& markers() const { return markers_; }
  const MarkerInfo& marker(Eigen::Index j) const {
    return markers_[static_cast<std::size_t>(j)];
  }

  int marker_index(const std::string& id) const {
    const auto it = marker_lookup_.find(id);
    return it == marker_lookup_.end() ? -1 : it->second;
  }

  // Replaces the marker map and re-sorts columns by (chromosome, position).
  void set_map(std::vector<MarkerInfo> markers) {
    if (markers.size() != static_cast<std::size_t>(values_.cols())) {
      throw ValidationError("marker map size does not match marker count");
    }
    std::vector<int> order(markers.size());
    for (std::size_t j = 0; j < markers.size(); ++j) order[j] = static_cast<int>(j);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      const auto& ma = markers[static_cast<std::size_t>(a)];
      const auto& mb = markers[static_cast<std::size_t>(b)];
      if (ma.chromosome != mb.chromosome)
        return chromosome_less(ma.chromosome, mb.chromosome);
      return ma.position < mb.position;
    });
    Eigen::MatrixXd sorted(values_.rows(), values_.cols());
    std::vector<MarkerInfo> sorted_markers(markers.size());
    for (std::size_t j = 0; j < order.size(); ++j) {
      sorted.col(static_cast<Eigen::Index>(j)) = values_.col(order[j]);
      sorted_markers[j] = markers[static_cast<std::size_t>(order[j])];
    }
    values_ = std::move(sorted);
    markers_ = std::move(sorted_markers);
    rebuild_lookup();
  }

  MarkerMatrix subset_rows(const std::vector<int>& rows) const {
    Eigen::MatrixXd sub(static_cast<Eigen::Index>(rows.size()), values_.cols());
    std::vector<std::string> ids(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      sub.row(static_cast<Eigen::Index>(i)) = values_.row(rows[i]);
      ids[i] = sample_ids_[static_cast<std::size_t>(rows[i])];
    }
    return MarkerMatrix(std::move(sub), std::move(ids), markers_);
  }

 private:
  void validate() {
    if (values_.rows() != static_cast<Eigen::Index>(sample_ids_.size())) {
      throw ValidationError("sample id count does not match row count");
    }
    if (values_.cols() != static_cast<Eigen::Index>(markers_.size())) {
      throw ValidationError("marker info count does not match column count");
    }
    std::unordered_set<std::string> seen;
    for (const auto& id : sample_ids_) {
      if (!seen.insert(id).second) {
        throw ValidationError("duplicate sample id: " + id);
      }
    }
    for (Eigen::Index i = 0; i < values_.rows(); ++i) {
      for (Eigen::Index j = 0; j < values_.cols(); ++j) {
        const double v = values_(i, j);
        if (!is_missing(v) && v != 0.0 && v != 1.0 && v != 2.0) {
          throw ValidationError("genotype code outside {0,1,2} at row " +
                                std::to_string(i + 1) + ", col " + std::to_string(j + 1));
        }
      }
    }
    rebuild_lookup();
  }

  void rebuild_lookup() {
    marker_lookup_.clear();
    for (std::size_t j = 0; j < markers_.size(); ++j) {
      if (!marker_lookup_.emplace(markers_[j].id, static_cast<int>(j)).second) {
        throw ValidationError("duplicate marker id: " + markers_[j].id);
      }
    }
  }

  Eigen::MatrixXd values_;
  std::vector<std::string> sample_ids_;
  std::vector<MarkerInfo> markers_;
  std::unordered_map<std::string, int> marker_lookup_;
};

// Marker CSV: header row of marker ids (first column is the sample id
// column), one row per sample, cells 0/1/2 or NA/empty for missing.
inline MarkerMatrix load_markers(const std::string& path) {
  const auto rows = csv::read_table(path);
  if (rows.size() < 2) throw ParseError("marker file needs a header and data rows: " + path);
  const auto& header = rows[0];
  if (header.size() < 2) throw ParseError("marker file header has no marker columns: " + path);
  const std::size_t m = header.size() - 1;
  const std::size_t n = rows.size() - 1;
  Eigen::MatrixXd values(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  std::vector<std::string> sample_ids(n);
  std::vector<MarkerInfo> markers(m);
  for (std::size_t j = 0; j < m; ++j) {
    markers[j] = MarkerInfo{header[j + 1], "1", static_cast<long long>(j + 1)};
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = rows[i + 1];
    if (row.size() != header.size()) {
      throw ParseError("row " + std::to_string(i + 1) + " has " + std::to_string(row.size()) +
                       " fields, expected " + std::to_string(header.size()));
    }
    sample_ids[i] = row[0];
    for (std::size_t j = 0; j < m; ++j) {
      const std::string& cell = row[j + 1];
      if (cell.empty() || cell == "NA") {
        values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = kMissing;
      } else if (cell == "0" || cell == "1" || cell == "2") {
        values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            static_cast<double>(cell[0] - '0');
      } else {
        throw ParseError("invalid genotype code \"" + cell + "\" at row " +
                         std::to_string(i + 1) + ", col " + std::to_string(j + 1));
      }
    }
  }
  return MarkerMatrix(std::move(values), std::move(sample_ids), std::move(markers));
}

// Map CSV: marker_id, chromosome, position. Reorders the matrix columns.
inline void attach_map(MarkerMatrix& mm, const std::string& path) {
  const auto rows = csv::read_table(path);
  if (rows.empty()) throw ParseError("empty map file: " + path);
  std::size_t start = 0;
  if (!rows[0].empty() && rows[0][0] == "marker_id") start = 1;
  std::unordered_map<std::string, MarkerInfo> by_id;
  for (std::size_t i = start; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (row.size() < 3) throw ParseError("map row " + std::to_string(i + 1) + " needs 3 fields");
    MarkerInfo info{row[0], row[1], csv::parse_int(row[2], "map row " + std::to_string(i + 1))};
    if (!by_id.emplace(info.id, info).second) {
      throw ValidationError("duplicate marker id in map: " + info.id);
    }
  }
  std::vector<MarkerInfo> ordered;
  ordered.reserve(static_cast<std::size_t>(mm.n_markers()));
  for (const auto& info : mm.markers()) {
    const auto it = by_id.find(info.id);
    if (it == by_id.end()) throw ValidationError("marker missing from map: " + info.id);
    ordered.push_back(it->second);
  }
  mm.set_map(std::move(ordered));
}

struct PhenotypeTable {
  Eigen::VectorXd y;
  Eigen::MatrixXd covariates;  // n x p fixed-effect design, intercept first
  std::vector<std::string> covariate_names;
};

// Phenotype CSV: sample_id, trait, optional covariate columns (header row
// required). Rows are aligned to the marker matrix sample order.
inline PhenotypeTable load_phenotypes(const std::string& path,
                                      const std::vector<std::string>& sample_ids,
                                      bool require_y = true) {
  const auto rows = csv::read_table(path);
  if (rows.size() < 2) throw ParseError("phenotype file needs a header and data rows: " + path);
  const auto& header = rows[0];
  if (header.size() < 2) throw ParseError("phenotype file needs sample_id and trait columns");
  const std::size_t n_cov = header.size() - 2;
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != header.size()) {
      throw ParseError("phenotype row " + std::to_string(i) + " has wrong field count");
    }
    if (!row_of.emplace(rows[i][0], i).second) {
      throw ValidationError("duplicate sample id in phenotype file: " + rows[i][0]);
    }
  }
  const std::size_t n = sample_ids.size();
  PhenotypeTable table;
  table.y.resize(static_cast<Eigen::Index>(n));
  table.covariates.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(1 + n_cov));
  table.covariate_names.push_back("intercept");
  for (std::size_t c = 0; c < n_cov; ++c) table.covariate_names.push_back(header[c + 2]);
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = row_of.find(sample_ids[i]);
    if (it == row_of.end()) {
      throw ValidationError("sample missing from phenotype file: " + sample_ids[i]);
    }
    const auto& row = rows[it->second];
    const std::string& ycell = row[1];
    if (ycell.empty() || ycell == "NA") {
      if (require_y) throw ValidationError("missing trait value for sample " + sample_ids[i]);
      table.y(static_cast<Eigen::Index>(i)) = kMissing;
    } else {
      table.y(static_cast<Eigen::Index>(i)) = csv::parse_double(ycell, "trait for " + sample_ids[i]);
    }
    table.covariates(static_cast<Eigen::Index>(i), 0) = 1.0;
    for (std::size_t c = 0; c < n_cov; ++c) {
      table.covariates(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c + 1)) =
          csv::parse_double(row[c + 2], header[c + 2] + " for " + sample_ids[i]);
    }
  }
  // Full column rank is required for the fixed-effect design.
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(table.covariates);
  if (qr.rank() < table.covariates.cols()) {
    throw ValidationError("covariate matrix is rank deficient");
  }
  return table;
}

// Hotspot CSV: chromosome, position (header optional).
inline std::vector<std::pair<std::string, long long>> load_hotspots(const std::string& path) {
  const auto rows = csv::read_table(path);
  std::vector<std::pair<std::string, long long>> boundaries;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (i == 0 && !row.empty() && row[0] == "chromosome") continue;
    if (row.size() < 2) throw ParseError("hotspot row " + std::to_string(i + 1) + " needs 2 fields");
    boundaries.emplace_back(row[0], csv::parse_int(row[1], "hotspot row " + std::to_string(i + 1)));
  }
  return boundaries;
}

struct CenteredMarkers {
  Eigen::MatrixXd values;  // entries minus 2*p_j, missing imputed to 0
  Eigen::VectorXd freqs;   // per-marker allele frequency p_j
};

// Centers each column at twice its allele frequency. Missing entries become
// 0 in the centered matrix (mean imputation) — used for kinship and PCs
// only; the rule engine consumes raw codes.
inline CenteredMarkers center_markers(const MarkerMatrix& mm) {
  const auto& raw = mm.values();
  CenteredMarkers out;
  out.values.resize(raw.rows(), raw.cols());
  out.freqs.resize(raw.cols());
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    double sum = 0.0;
    Eigen::Index count = 0;
    for (Eigen::Index i = 0; i < raw.rows(); ++i) {
      if (!is_missing(raw(i, j))) {
        sum += raw(i, j);
        ++count;
      }
    }
    if (count == 0) {
      throw ValidationError("marker " + mm.marker(j).id + " has no observed genotypes");
    }
    const double p = sum / (2.0 * static_cast<double>(count));
    out.freqs(j) = p;
    for (Eigen::Index i = 0; i < raw.rows(); ++i) {
      out.values(i, j) = is_missing(raw(i, j)) ? 0.0 : raw(i, j) - 2.0 * p;
    }
  }
  return out;
}

// Centers new genotype rows with stored training frequencies (prediction
// path; unseen/missing entries center to 0).
inline Eigen::MatrixXd center_with_freqs(const Eigen::MatrixXd& raw, const Eigen::VectorXd& freqs) {
  Eigen::MatrixXd out(raw.rows(), raw.cols());
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    for (Eigen::Index i = 0; i < raw.rows(); ++i) {
      out(i, j) = is_missing(raw(i, j)) ? 0.0 : raw(i, j) - 2.0 * freqs(j);
    }
  }
  return out;
}

// Denominator of the VanRaden kinship: twice the sum of expected marker
// heterozygosities, k = 2 * sum_j 2 p_j (1 - p_j).
inline double kinship_denominator(const Eigen::VectorXd& freqs) {
  double het = 0.0;
  for (Eigen::Index j = 0; j < freqs.size(); ++j) {
    het += 2.0 * freqs(j) * (1.0 - freqs(j));
  }
  return 2.0 * het;
}

// G = C C' / k with C the frequency-centered matrix.
inline Eigen::MatrixXd compute_grm(const MarkerMatrix& mm) {
  const CenteredMarkers centered = center_markers(mm);
  const double k = kinship_denominator(centered.freqs);
  if (k <= 0.0) {
    throw ValidationError("degenerate kinship: all markers are monomorphic");
  }
  Eigen::MatrixXd grm(mm.n_samples(), mm.n_samples());
  grm.setZero();
  grm.selfadjointView<Eigen::Lower>().rankUpdate(centered.values, 1.0 / k);
  grm.triangularView<Eigen::StrictlyUpper>() = grm.transpose();
  return grm;
}

struct PrincipalComponents {
  Eigen::MatrixXd scores;             // n x c, column j has variance explained_variance[j]
  Eigen::MatrixXd loadings;           // m x c
  Eigen::VectorXd explained_variance; // non-increasing
};

// Top-c principal components of the centered matrix, score convention
// scores = C * loadings (score column variance equals the eigenvalue of the
// sample covariance). Sign fixed so each component's largest-magnitude
// loading is positive.
inline PrincipalComponents compute_pcs_centered(const Eigen::MatrixXd& centered, int c) {
  const Eigen::Index n = centered.rows();
  const Eigen::Index m = centered.cols();
  if (c < 0 || c > std::min(n, m)) {
    throw ArgumentError("requested " + std::to_string(c) + " components, but min(n,m) = " +
                        std::to_string(std::min(n, m)));
  }
  PrincipalComponents out;
  out.scores.resize(n, c);
  out.loadings.resize(m, c);
  out.explained_variance.resize(c);
  if (c == 0) return out;

  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  if (m <= n) {
    Eigen::MatrixXd gram = centered.transpose() * centered;  // m x m
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
    for (int j = 0; j < c; ++j) {
      const Eigen::Index idx = m - 1 - j;  // eigenvalues ascending
      Eigen::VectorXd v = es.eigenvectors().col(idx);
      Eigen::Index imax = 0;
      v.cwiseAbs().maxCoeff(&imax);
      if (v(imax) < 0.0) v = -v;
      out.loadings.col(j) = v;
      out.scores.col(j) = centered * v;
      out.explained_variance(j) = std::max(0.0, es.eigenvalues()(idx)) / denom;
    }
  } else {
    Eigen::MatrixXd gram = centered * centered.transpose();  // n x n
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
    for (int j = 0; j < c; ++j) {
      const Eigen::Index idx = n - 1 - j;
      const double eig = std::max(0.0, es.eigenvalues()(idx));
      const double s = std::sqrt(eig);
      Eigen::VectorXd u = es.eigenvectors().col(idx);
      Eigen::VectorXd v = s > 0.0 ? Eigen::VectorXd(centered.transpose() * u / s)
                                  : Eigen::VectorXd::Zero(m);
      Eigen::Index imax = 0;
      v.cwiseAbs().maxCoeff(&imax);
      if (v.size() > 0 && v(imax) < 0.0) {
        v = -v;
        u = -u;
      }
      out.loadings.col(j) = v;
      out.scores.col(j) = u * s;
      out.explained_variance(j) = eig / denom;
    }
  }
  return out;
}

inline PrincipalComponents compute_pcs(const MarkerMatrix& mm, int c) {
  return compute_pcs_centered(center_markers(mm).values, c);
}

struct RegionPartition {
  struct Region {
    std::string chromosome;
    int begin = 0;  // first marker index (inclusive)
    int end = 0;    // one past the last marker index
    int size() const { return end - begin; }
  };
  enum class Provenance { EqualCount, Hotspot };

  std::vector<Region> regions;
  Provenance provenance = Provenance::EqualCount;
};

namespace detail {
// Contiguous [begin, end) column ranges per chromosome, in map order.
inline std::vector<std::pair<std::string, std::pair<int, int>>> chromosome_runs(
    const MarkerMatrix& mm) {
  std::vector<std::pair<std::string, std::pair<int, int>>> runs;
  const auto& markers = mm.markers();
  for (std::size_t j = 0; j < markers.size(); ++j) {
    if (runs.empty() || runs.back().first != markers[j].chromosome) {
      runs.push_back({markers[j].chromosome, {static_cast<int>(j), static_cast<int>(j) + 1}});
    } else {
      runs.back().second.second = static_cast<int>(j) + 1;
    }
  }
  return runs;
}
}  // namespace detail

// Splits every chromosome into nsplits contiguous blocks whose sizes differ
// by at most one; remainder markers go to the earliest blocks.
inline RegionPartition partition_equal(const MarkerMatrix& mm, int nsplits) {
  if (nsplits < 1) throw ArgumentError("nsplits must be >= 1");
  RegionPartition partition;
  partition.provenance = RegionPartition::Provenance::EqualCount;
  for (const auto& [chrom, range] : detail::chromosome_runs(mm)) {
    const int count = range.second - range.first;
    if (nsplits > count) {
      throw ArgumentError("nsplits = " + std::to_string(nsplits) + " exceeds the " +
                          std::to_string(count) + " markers on chromosome " + chrom);
    }
    const int base = count / nsplits;
    const int rem = count % nsplits;
    int begin = range.first;
    for (int b = 0; b < nsplits; ++b) {
      const int size = base + (b < rem ? 1 : 0);
      partition.regions.push_back({chrom, begin, begin + size});
      begin += size;
    }
  }
  return partition;
}

// Regions are maximal runs of markers between consecutive boundary
// positions; a marker at position <= boundary falls left of it. Empty
// regions are dropped.
inline RegionPartition partition_hotspots(
    const MarkerMatrix& mm, const std::vector<std::pair<std::string, long long>>& boundaries) {
  const auto runs = detail::chromosome_runs(mm);
  std::unordered_set<std::string> known;
  for (const auto& run : runs) known.insert(run.first);
  std::unordered_map<std::string, std::vector<long long>> by_chrom;
  for (const auto& [chrom, pos] : boundaries) {
    if (!known.count(chrom)) {
      throw ValidationError("hotspot boundary on unknown chromosome " + chrom);
    }
    by_chrom[chrom].push_back(pos);
  }
  RegionPartition partition;
  partition.provenance = RegionPartition::Provenance::Hotspot;
  for (const auto& [chrom, range] : runs) {
    auto it = by_chrom.find(chrom);
    std::vector<long long> cuts = it == by_chrom.end() ? std::vector<long long>{} : it->second;
    std::sort(cuts.begin(), cuts.end());
    int begin = range.first;
    for (long long cut : cuts) {
      int end = begin;
      while (end < range.second && mm.marker(end).position <= cut) ++end;
      if (end == range.second && begin < range.second) {
        warn("hotspot boundary at " + chrom + ":" + std::to_string(cut) +
             " lies beyond the last marker; ignored");
      }
      if (end > begin) {
        partition.regions.push_back({chrom, begin, end});
        begin = end;
      }
      // empty region (cut before the current start) is dropped silently
    }
    if (begin < range.second) {
      partition.regions.push_back({chrom, begin, range.second});
    }
  }
  return partition;
}

}  // namespace ler
