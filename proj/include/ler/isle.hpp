#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ler/common.hpp"
#include "ler/genotype.hpp"
#include "ler/rng.hpp"
#include "ler/rules.hpp"

namespace ler {

struct IsleParams {
  int nrules = 500;        // rules extracted per region
  double mean_depth = 4.0; // mean of the truncated-Poisson tree depth
  double proprow = 0.3;    // fraction of region markers sampled per tree
  double propcol = 0.1;    // fraction of training samples per tree
  double nu = 0.1;         // ensemble memory, 0 = independent trees
  int min_node = 5;
  std::uint64_t seed = 1;

  void validate() const {
    if (nrules < 1) throw ArgumentError("nrules must be >= 1");
    if (mean_depth < 1.0) throw ArgumentError("mean_depth must be >= 1");
    if (!(proprow > 0.0 && proprow <= 1.0)) throw ArgumentError("proprow must be in (0, 1]");
    if (!(propcol > 0.0 && propcol <= 1.0)) throw ArgumentError("propcol must be in (0, 1]");
    if (nu < 0.0 || nu > 1.0) throw ArgumentError("nu must be in [0, 1]");
    if (min_node < 1) throw ArgumentError("min_node must be >= 1");
  }
};

// Tree depth drawn from Poisson(mean_depth) conditioned on being >= 1.
inline int sample_depth(double mean_depth, Rng& rng) {
  if (mean_depth < 1.0) throw ArgumentError("mean_depth must be >= 1");
  int draw = 0;
  do {
    draw = rng.poisson(mean_depth);
  } while (draw == 0);
  return draw;
}

// Observer invoked before each tree is fit; used by tests to intercept the
// fitting targets.
using IsleObserver =
    std::function<void(int tree_index, const std::vector<int>& rows, const Eigen::VectorXd& targets)>;

// Runs the importance-sampling ensemble over one region and harvests the
// conjunctive rules of every internal and leaf node until nrules are
// collected. Each tree j fits the running-ensemble residual on a row
// subsample (fraction propcol) over a marker subsample (fraction proprow,
// principal components always included); the ensemble is updated with
// memory nu and the scale c_j that minimizes squared loss on the subsample.
// Deterministic for a fixed seed regardless of thread count: the RNG stream
// of tree j is derived from (seed, region, j).
inline std::vector<Rule> isle_extract(const MarkerMatrix& mm,
                                      const RegionPartition::Region& region, int region_id,
                                      const Eigen::VectorXd& targets, const IsleParams& params,
                                      const Eigen::MatrixXd& pc_scores,
                                      const IsleObserver& observer = nullptr) {
  params.validate();
  if (region.size() <= 0) throw ArgumentError("region is empty");
  if (!targets.allFinite()) throw ArgumentError("targets must be finite");
  const Eigen::Index n = mm.n_samples();
  if (targets.size() != n) throw ArgumentError("targets do not match sample count");

  // Identify polymorphic markers in the region; monomorphic columns can
  // never split.
  std::vector<int> usable;
  for (int j = region.begin; j < region.end; ++j) {
    double first = kMissing;
    bool poly = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = mm.values()(i, j);
      if (is_missing(v)) continue;
      if (is_missing(first)) {
        first = v;
      } else if (v != first) {
        poly = true;
        break;
      }
    }
    if (poly) usable.push_back(j);
  }
  if (usable.empty()) {
    warn("region " + std::to_string(region_id) + " has no polymorphic markers; no rules");
    return {};
  }

  const int n_pcs = static_cast<int>(pc_scores.cols());
  const int region_markers = static_cast<int>(usable.size());
  const int markers_per_tree =
      std::min(region_markers,
               std::max(1, static_cast<int>(std::ceil(params.proprow * region_markers))));
  const int rows_per_tree = std::min<int>(
      static_cast<int>(n),
      std::max({2 * params.min_node,
                static_cast<int>(std::ceil(params.propcol * static_cast<double>(n)))}));

  Eigen::VectorXd ensemble = Eigen::VectorXd::Zero(n);  // F_{j-1} on all rows
  Eigen::VectorXd residual(n);
  std::vector<Rule> rules;
  rules.reserve(static_cast<std::size_t>(params.nrules));

  const int hard_cap = std::max(64, 10 * params.nrules);
  int barren_streak = 0;
  for (int tree_idx = 0; static_cast<int>(rules.size()) < params.nrules; ++tree_idx) {
    if (tree_idx >= hard_cap || barren_streak >= 64) {
      warn("region " + std::to_string(region_id) + ": stopped after " +
           std::to_string(tree_idx) + " trees with " + std::to_string(rules.size()) +
           " rules (target " + std::to_string(params.nrules) + ")");
      break;
    }
    Rng rng = derive_rng(params.seed, {static_cast<std::uint64_t>(region_id),
                                       static_cast<std::uint64_t>(tree_idx)});
    const int maxdepth = sample_depth(params.mean_depth, rng);
    const std::vector<int> rows = rng.sample_indices(static_cast<int>(n), rows_per_tree);
    const std::vector<int> marker_pick =
        rng.sample_indices(region_markers, markers_per_tree);

    // Assemble the per-tree design: sampled region markers first, then all
    // principal components.
    std::vector<VariableRef> vars;
    vars.reserve(marker_pick.size() + static_cast<std::size_t>(n_pcs));
    Eigen::MatrixXd data(n, static_cast<Eigen::Index>(marker_pick.size()) + n_pcs);
    for (std::size_t c = 0; c < marker_pick.size(); ++c) {
      const int global = usable[static_cast<std::size_t>(marker_pick[c])];
      vars.push_back({VariableRef::Kind::Marker, global});
      data.col(static_cast<Eigen::Index>(c)) = mm.values().col(global);
    }
    for (int c = 0; c < n_pcs; ++c) {
      vars.push_back({VariableRef::Kind::Pc, c});
      data.col(static_cast<Eigen::Index>(marker_pick.size()) + c) = pc_scores.col(c);
    }

    if (params.nu > 0.0) {
      residual = targets - ensemble;
    } else {
      residual = targets;
    }
    if (observer) observer(tree_idx, rows, residual);

    const RegressionTree tree =
        grow_tree(data, rows, residual, vars, maxdepth, params.min_node);
    if (tree.empty()) {
      ++barren_streak;
      continue;
    }

    auto extracted = tree_to_rules(tree, region_id, tree_idx);
    if (extracted.empty()) {
      ++barren_streak;
    } else {
      barren_streak = 0;
    }
    for (auto& rule : extracted) {
      if (static_cast<int>(rules.size()) >= params.nrules) break;
      rules.push_back(std::move(rule));
    }

    if (params.nu > 0.0) {
      // c_j minimizing squared loss of residual against the tree on the
      // subsample; equals 1 when leaves carry exact subsample means.
      Eigen::VectorXd tree_pred(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        tree_pred(i) = tree.predict(GenotypeRowView{&mm.values(), &pc_scores, i});
      }
      double num = 0.0;
      double den = 0.0;
      for (int row : rows) {
        num += residual(row) * tree_pred(row);
        den += tree_pred(row) * tree_pred(row);
      }
      const double scale = den > 0.0 ? num / den : 0.0;
      ensemble += params.nu * scale * tree_pred;
    }
  }
  if (static_cast<int>(rules.size()) > params.nrules) {
    rules.resize(static_cast<std::size_t>(params.nrules));
  }
  return rules;
}

}  // namespace ler
