#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "ler/common.hpp"
#include "ler/genotype.hpp"

namespace ler {

struct VariableRef {
  enum class Kind { Marker, Pc };
  Kind kind = Kind::Marker;
  int index = 0;  // global marker index or principal-component index

  friend bool operator==(const VariableRef& a, const VariableRef& b) {
    return a.kind == b.kind && a.index == b.index;
  }
  friend bool operator<(const VariableRef& a, const VariableRef& b) {
    if (a.kind != b.kind) return a.kind < b.kind;
    return a.index < b.index;
  }
};

// Half-open interval condition (lower, upper] on one variable. missing_in
// tells whether a missing value satisfies the condition; it mirrors the
// routing of missing rows in the source tree.
struct SplitCondition {
  VariableRef var;
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();
  bool missing_in = false;

  bool contains(double value) const {
    if (is_missing(value)) return missing_in;
    return value > lower && value <= upper;
  }
};

struct Rule {
  struct Origin {
    int region = 0;
    int tree = 0;
    int node = 0;
  };
  std::vector<SplitCondition> conditions;  // at most one per variable
  Origin origin;

  int depth() const { return static_cast<int>(conditions.size()); }
};

// Accessor for one genotype row plus its principal-component scores.
struct GenotypeRowView {
  const Eigen::MatrixXd* markers = nullptr;  // raw codes, n x m
  const Eigen::MatrixXd* pcs = nullptr;      // scores, n x c
  Eigen::Index row = 0;

  double value(const VariableRef& var) const {
    if (var.kind == VariableRef::Kind::Marker) return (*markers)(row, var.index);
    if (pcs == nullptr || var.index >= pcs->cols()) return kMissing;
    return (*pcs)(row, var.index);
  }
};

inline double evaluate_rule(const Rule& rule, const GenotypeRowView& row) {
  for (const auto& cond : rule.conditions) {
    if (!cond.contains(row.value(cond.var))) return 0.0;
  }
  return 1.0;
}

// --------------------------------------------------------------------------
// CART-style regression tree with squared-error impurity
// --------------------------------------------------------------------------

struct TreeNode {
  int var = -1;  // local variable index; -1 for leaves
  double threshold = 0.0;
  bool missing_left = false;
  int left = -1;
  int right = -1;
  double value = 0.0;  // mean target in the node
  int count = 0;
  int depth = 0;
};

struct RegressionTree {
  std::vector<TreeNode> nodes;      // preorder, root at 0
  std::vector<VariableRef> vars;    // local variable table

  bool empty() const { return nodes.empty(); }

  // Ids of the nodes visited from the root for one row; missing values
  // follow the recorded direction of each split.
  std::vector<int> traversal_path(const GenotypeRowView& row) const {
    std::vector<int> path;
    int id = 0;
    while (id >= 0) {
      path.push_back(id);
      const TreeNode& node = nodes[static_cast<std::size_t>(id)];
      if (node.var < 0) break;
      const double v = row.value(vars[static_cast<std::size_t>(node.var)]);
      bool go_left;
      if (is_missing(v)) {
        go_left = node.missing_left;
      } else {
        go_left = v <= node.threshold;
      }
      id = go_left ? node.left : node.right;
    }
    return path;
  }

  double predict(const GenotypeRowView& row) const {
    return nodes[static_cast<std::size_t>(traversal_path(row).back())].value;
  }
};

namespace detail {

struct SplitChoice {
  bool found = false;
  int var = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

// Best split of one column over the node's rows. Candidates are scored on
// rows with observed values; both sides must keep at least min_node of them.
// The minimum accepted gain scales with the node's squared-error mass so
// decisions are invariant under rescaling of the targets.
inline void scan_column(const Eigen::MatrixXd& data, int var, const int* rows, int count,
                        const Eigen::VectorXd& targets, int min_node, SplitChoice& best) {
  thread_local std::vector<std::pair<double, double>> pairs;
  pairs.clear();
  double sum = 0.0;
  double sumsq = 0.0;
  for (int i = 0; i < count; ++i) {
    const double x = data(rows[i], var);
    if (is_missing(x)) continue;
    const double t = targets(rows[i]);
    pairs.emplace_back(x, t);
    sum += t;
    sumsq += t * t;
  }
  const int present = static_cast<int>(pairs.size());
  if (present < 2 * min_node) return;
  std::sort(pairs.begin(), pairs.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  if (pairs.front().first == pairs.back().first) return;
  const double total = sum;
  const double present_score = total * total / present;
  const double node_sse = std::max(0.0, sumsq - present_score);
  const double min_gain = std::max(1e-12 * node_sse, 1e-13 * sumsq);
  double left_sum = 0.0;
  for (int i = 0; i + 1 < present; ++i) {
    left_sum += pairs[static_cast<std::size_t>(i)].second;
    if (pairs[static_cast<std::size_t>(i)].first ==
        pairs[static_cast<std::size_t>(i + 1)].first) {
      continue;
    }
    const int nl = i + 1;
    const int nr = present - nl;
    if (nl < min_node || nr < min_node) continue;
    const double right_sum = total - left_sum;
    const double gain =
        left_sum * left_sum / nl + right_sum * right_sum / nr - present_score;
    if (gain > best.gain && gain > min_gain) {
      best.found = true;
      best.var = var;
      best.gain = gain;
      const double lo = pairs[static_cast<std::size_t>(i)].first;
      const double hi = pairs[static_cast<std::size_t>(i + 1)].first;
      // Genotype codes split exactly at the lower code; continuous
      // variables at the midpoint.
      best.threshold = (lo == std::floor(lo) && hi == std::floor(hi) && hi - lo == 1.0)
                           ? lo
                           : 0.5 * (lo + hi);
    }
  }
}

}  // namespace detail

// Grows a binary regression tree on the given rows. targets is indexed by
// absolute row id. Growth stops at maxdepth, when a node has fewer than
// 2*min_node rows, or when no split reduces the squared error.
inline RegressionTree grow_tree(const Eigen::MatrixXd& data, const std::vector<int>& rows,
                                const Eigen::VectorXd& targets,
                                const std::vector<VariableRef>& vars, int maxdepth,
                                int min_node) {
  if (static_cast<Eigen::Index>(vars.size()) != data.cols()) {
    throw ArgumentError("variable table does not match data columns");
  }
  if (maxdepth < 0) throw ArgumentError("maxdepth must be >= 0");
  if (min_node < 1) throw ArgumentError("min_node must be >= 1");
  RegressionTree tree;
  tree.vars = vars;
  if (rows.empty()) return tree;

  std::vector<int> work = rows;
  struct Frame {
    int begin;
    int end;
    int depth;
    int node_id;
  };
  std::vector<Frame> stack;

  auto make_node = [&](int begin, int end, int depth) {
    TreeNode node;
    node.depth = depth;
    node.count = end - begin;
    double sum = 0.0;
    for (int i = begin; i < end; ++i) sum += targets(work[static_cast<std::size_t>(i)]);
    node.value = sum / node.count;
    tree.nodes.push_back(node);
    return static_cast<int>(tree.nodes.size()) - 1;
  };

  const int root = make_node(0, static_cast<int>(work.size()), 0);
  stack.push_back({0, static_cast<int>(work.size()), 0, root});

  while (!stack.empty()) {
    const Frame frame = stack.back();
    stack.pop_back();
    TreeNode& node = tree.nodes[static_cast<std::size_t>(frame.node_id)];
    const int count = frame.end - frame.begin;
    if (frame.depth >= maxdepth || count < 2 * min_node) continue;

    detail::SplitChoice best;
    for (int v = 0; v < static_cast<int>(data.cols()); ++v) {
      detail::scan_column(data, v, work.data() + frame.begin, count, targets, min_node, best);
    }
    if (!best.found) continue;

    // Partition rows: observed values by threshold, missing rows to the
    // child that received more observed rows.
    thread_local std::vector<int> left_buf, right_buf, missing_buf;
    left_buf.clear();
    right_buf.clear();
    missing_buf.clear();
    for (int i = frame.begin; i < frame.end; ++i) {
      const int row = work[static_cast<std::size_t>(i)];
      const double x = data(row, best.var);
      if (is_missing(x)) {
        missing_buf.push_back(row);
      } else if (x <= best.threshold) {
        left_buf.push_back(row);
      } else {
        right_buf.push_back(row);
      }
    }
    const bool missing_left = left_buf.size() >= right_buf.size();
    auto& recipient = missing_left ? left_buf : right_buf;
    recipient.insert(recipient.end(), missing_buf.begin(), missing_buf.end());

    node.var = best.var;
    node.threshold = best.threshold;
    node.missing_left = missing_left;

    std::copy(left_buf.begin(), left_buf.end(), work.begin() + frame.begin);
    std::copy(right_buf.begin(), right_buf.end(),
              work.begin() + frame.begin + static_cast<int>(left_buf.size()));
    const int mid = frame.begin + static_cast<int>(left_buf.size());

    const int left_id = make_node(frame.begin, mid, frame.depth + 1);
    tree.nodes[static_cast<std::size_t>(frame.node_id)].left = left_id;
    stack.push_back({frame.begin, mid, frame.depth + 1, left_id});

    const int right_id = make_node(mid, frame.end, frame.depth + 1);
    tree.nodes[static_cast<std::size_t>(frame.node_id)].right = right_id;
    stack.push_back({mid, frame.end, frame.depth + 1, right_id});
  }
  return tree;
}

// Extracts the conjunctive rule of every non-root node. Conditions on the
// same variable along a path are merged into one interval; a merged
// condition admits missing values only if every contributing split routed
// missing rows along this path.
inline std::vector<Rule> tree_to_rules(const RegressionTree& tree, int region_id, int tree_id) {
  std::vector<Rule> rules;
  if (tree.empty()) return rules;

  struct Edge {
    int var;
    bool is_left;
    double threshold;
    bool missing_left;
  };
  std::vector<Edge> path;

  auto emit = [&](int node_id) {
    std::map<int, SplitCondition> merged;  // keyed by local var index
    for (const Edge& edge : path) {
      auto [it, inserted] = merged.try_emplace(edge.var);
      SplitCondition& cond = it->second;
      if (inserted) {
        cond.var = tree.vars[static_cast<std::size_t>(edge.var)];
        cond.missing_in = true;
      }
      if (edge.is_left) {
        cond.upper = std::min(cond.upper, edge.threshold);
      } else {
        cond.lower = std::max(cond.lower, edge.threshold);
      }
      cond.missing_in = cond.missing_in && (edge.is_left == edge.missing_left);
    }
    Rule rule;
    rule.origin = {region_id, tree_id, node_id};
    rule.conditions.reserve(merged.size());
    for (auto& [var, cond] : merged) rule.conditions.push_back(cond);
    std::sort(rule.conditions.begin(), rule.conditions.end(),
              [](const SplitCondition& a, const SplitCondition& b) { return a.var < b.var; });
    rules.push_back(std::move(rule));
  };

  // Depth-first walk mirroring construction order so node ids are stable.
  struct Visit {
    int node_id;
    std::size_t path_len;
    Edge edge;
    bool has_edge;
  };
  std::vector<Visit> stack{{0, 0, {}, false}};
  while (!stack.empty()) {
    const Visit visit = stack.back();
    stack.pop_back();
    path.resize(visit.path_len);
    if (visit.has_edge) {
      path.push_back(visit.edge);
      emit(visit.node_id);
    }
    const TreeNode& node = tree.nodes[static_cast<std::size_t>(visit.node_id)];
    if (node.var < 0) continue;
    const Edge left_edge{node.var, true, node.threshold, node.missing_left};
    const Edge right_edge{node.var, false, node.threshold, node.missing_left};
    // Push right first so the left subtree is visited first.
    stack.push_back({node.right, path.size(), right_edge, true});
    stack.push_back({node.left, path.size(), left_edge, true});
  }
  return rules;
}

// --------------------------------------------------------------------------
// Standardized rule matrix
// --------------------------------------------------------------------------

struct RuleMatrix {
  std::vector<Rule> rules;
  Eigen::MatrixXd values;  // n x r, columns standardized to sample sd 1
  Eigen::VectorXd means;
  Eigen::VectorXd sds;

  Eigen::Index n_rules() const { return values.cols(); }
};

inline Eigen::VectorXd evaluate_rule_column(const Rule& rule, const Eigen::MatrixXd& markers,
                                            const Eigen::MatrixXd& pcs) {
  Eigen::VectorXd column(markers.rows());
  for (Eigen::Index i = 0; i < markers.rows(); ++i) {
    column(i) = evaluate_rule(rule, GenotypeRowView{&markers, &pcs, i});
  }
  return column;
}

// Centers and scales rule evaluations over the training rows; raw columns
// with zero sample standard deviation are dropped. The (mean, sd) pairs are
// persisted for prediction-time reuse.
inline RuleMatrix standardize_rules(const std::vector<Rule>& rules,
                                    const Eigen::MatrixXd& markers,
                                    const Eigen::MatrixXd& pcs) {
  const Eigen::Index n = markers.rows();
  if (n < 2) throw ArgumentError("standardization needs at least 2 training rows");
  std::vector<Eigen::VectorXd> kept_columns;
  std::vector<Rule> kept_rules;
  std::vector<double> means, sds;
  for (const auto& rule : rules) {
    Eigen::VectorXd col = evaluate_rule_column(rule, markers, pcs);
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().sum() /
                                static_cast<double>(n - 1));
    if (sd < 1e-12) continue;
    kept_columns.push_back((col.array() - mean) / sd);
    kept_rules.push_back(rule);
    means.push_back(mean);
    sds.push_back(sd);
  }
  if (kept_rules.empty()) {
    throw ValidationError("all rules evaluate with zero variance on the training rows");
  }
  RuleMatrix out;
  out.rules = std::move(kept_rules);
  out.values.resize(n, static_cast<Eigen::Index>(kept_columns.size()));
  out.means.resize(static_cast<Eigen::Index>(means.size()));
  out.sds.resize(static_cast<Eigen::Index>(sds.size()));
  for (std::size_t j = 0; j < kept_columns.size(); ++j) {
    out.values.col(static_cast<Eigen::Index>(j)) = kept_columns[j];
    out.means(static_cast<Eigen::Index>(j)) = means[j];
    out.sds(static_cast<Eigen::Index>(j)) = sds[j];
  }
  return out;
}

// --------------------------------------------------------------------------
// Line-oriented rule serialization:
//   region:tree:node | var op value [& ...] | mean | sd
// op is <= or >; a trailing ? (e.g. <=?) marks conditions that missing
// values satisfy.
// --------------------------------------------------------------------------

inline std::string variable_name(const VariableRef& var,
                                 const std::vector<std::string>& marker_ids) {
  if (var.kind == VariableRef::Kind::Pc) return "PC" + std::to_string(var.index + 1);
  return marker_ids[static_cast<std::size_t>(var.index)];
}

inline std::string rule_to_line(const Rule& rule, double mean, double sd,
                                const std::vector<std::string>& marker_ids) {
  std::string out = std::to_string(rule.origin.region) + ":" +
                    std::to_string(rule.origin.tree) + ":" +
                    std::to_string(rule.origin.node) + " | ";
  char buf[64];
  bool first = true;
  for (const auto& cond : rule.conditions) {
    const std::string name = variable_name(cond.var, marker_ids);
    const char* miss = cond.missing_in ? "?" : "";
    if (std::isfinite(cond.lower)) {
      if (!first) out += " & ";
      std::snprintf(buf, sizeof(buf), "%.17g", cond.lower);
      out += name + " >" + miss + " " + buf;
      first = false;
    }
    if (std::isfinite(cond.upper)) {
      if (!first) out += " & ";
      std::snprintf(buf, sizeof(buf), "%.17g", cond.upper);
      out += name + " <=" + miss + " " + buf;
      first = false;
    }
  }
  std::snprintf(buf, sizeof(buf), "%.17g", mean);
  out += " | ";
  out += buf;
  std::snprintf(buf, sizeof(buf), "%.17g", sd);
  out += " | ";
  out += buf;
  return out;
}

}  // namespace ler
