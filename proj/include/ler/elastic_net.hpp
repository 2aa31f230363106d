#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "ler/common.hpp"
#include "ler/rng.hpp"

namespace ler {

// Elastic net in the glmnet parameterization:
//   (1/2n) ||y - X b||^2 + lambda * (alpha ||b||_1 + (1-alpha)/2 ||b||^2)
// solved by coordinate descent on the Gram matrix. Columns are assumed
// standardized and y centered by the caller.

namespace detail {

inline double soft_threshold(double z, double gamma) {
  if (z > gamma) return z - gamma;
  if (z < -gamma) return z + gamma;
  return 0.0;
}

// gram = X'X / n, xy = X'y / n. beta is used as the warm start.
inline void elastic_net_gram(const Eigen::MatrixXd& gram, const Eigen::VectorXd& xy,
                             double lambda, double alpha, Eigen::VectorXd& beta,
                             double tol = 1e-8, int max_passes = 100000) {
  const Eigen::Index r = gram.rows();
  const double l1 = lambda * alpha;
  const double l2 = lambda * (1.0 - alpha);
  Eigen::VectorXd gradient_cache = gram * beta;  // (X'X/n) beta
  for (int pass = 0; pass < max_passes; ++pass) {
    double max_delta = 0.0;
    for (Eigen::Index j = 0; j < r; ++j) {
      const double old = beta(j);
      const double z = xy(j) - gradient_cache(j) + gram(j, j) * old;
      const double denom = gram(j, j) + l2;
      const double updated = denom > 0.0 ? soft_threshold(z, l1) / denom : 0.0;
      if (updated != old) {
        gradient_cache += gram.col(j) * (updated - old);
        beta(j) = updated;
        max_delta = std::max(max_delta, std::abs(updated - old));
      }
    }
    if (max_delta < tol) break;
  }
}

}  // namespace detail

struct ElasticNetPathResult {
  Eigen::VectorXd coef;        // coefficients at the selected lambda (full data)
  double lambda = 0.0;         // selected penalty weight
  double intercept = 0.0;      // mean of y
  std::vector<double> lambdas; // the path, descending
  std::vector<double> cv_mse;  // cross-validated error per path point
};

// Cross-validated elastic net: log-spaced path of path_len lambdas from
// lambda_max (smallest lambda zeroing all coefficients) down to
// lambda_max * path_ratio, k-fold CV, warm starts along the path. Selects
// the lambda with minimal CV mean squared error (ties to the sparser end).
inline ElasticNetPathResult elastic_net_cv(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                           double l1_ratio, int folds, std::uint64_t seed,
                                           int path_len = 50, double path_ratio = 1e-3) {
  const Eigen::Index n = x.rows();
  const Eigen::Index r = x.cols();
  if (r < 1) throw ArgumentError("elastic net needs at least one column");
  if (l1_ratio < 0.0 || l1_ratio > 1.0) throw ArgumentError("l1_ratio must be in [0, 1]");
  if (folds < 2) throw ArgumentError("cross-validation needs at least 2 folds");
  if (n < folds) throw ArgumentError("fewer samples than cross-validation folds");

  ElasticNetPathResult result;
  result.intercept = y.mean();
  const Eigen::VectorXd yc = y.array() - result.intercept;

  if (l1_ratio == 0.0) {
    // Pure ridge applies no selection; the filter treats this as identity,
    // so the coefficient values are not consulted. Fit at a nominal penalty
    // for completeness.
    const double lambda = 1e-3;
    Eigen::MatrixXd gram = x.transpose() * x / static_cast<double>(n);
    Eigen::VectorXd xy = x.transpose() * yc / static_cast<double>(n);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(r);
    detail::elastic_net_gram(gram, xy, lambda, 0.0, beta);
    result.coef = beta;
    result.lambda = lambda;
    return result;
  }

  const Eigen::VectorXd xy_full = x.transpose() * yc / static_cast<double>(n);
  const double lambda_max = xy_full.cwiseAbs().maxCoeff() / l1_ratio;
  if (lambda_max <= 0.0) {
    result.coef = Eigen::VectorXd::Zero(r);
    result.lambda = 0.0;
    return result;
  }
  result.lambdas.resize(static_cast<std::size_t>(path_len));
  for (int i = 0; i < path_len; ++i) {
    const double frac = path_len > 1 ? static_cast<double>(i) / (path_len - 1) : 0.0;
    result.lambdas[static_cast<std::size_t>(i)] = lambda_max * std::pow(path_ratio, frac);
  }

  // Seeded shuffle, folds assigned round-robin.
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = derive_rng(seed, {0x0e1a571cULL});
  rng.shuffle(order);
  std::vector<int> fold_of(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < order.size(); ++i) {
    fold_of[static_cast<std::size_t>(order[i])] = static_cast<int>(i % static_cast<std::size_t>(folds));
  }

  result.cv_mse.assign(static_cast<std::size_t>(path_len), 0.0);
  std::vector<double> fold_weight(static_cast<std::size_t>(path_len), 0.0);
  for (int fold = 0; fold < folds; ++fold) {
    std::vector<int> train, test;
    for (Eigen::Index i = 0; i < n; ++i) {
      (fold_of[static_cast<std::size_t>(i)] == fold ? test : train).push_back(static_cast<int>(i));
    }
    if (test.empty() || train.size() < 2) continue;
    Eigen::MatrixXd x_train(static_cast<Eigen::Index>(train.size()), r);
    Eigen::VectorXd y_train(static_cast<Eigen::Index>(train.size()));
    for (std::size_t i = 0; i < train.size(); ++i) {
      x_train.row(static_cast<Eigen::Index>(i)) = x.row(train[i]);
      y_train(static_cast<Eigen::Index>(i)) = yc(train[i]);
    }
    const double train_mean = y_train.mean();
    y_train.array() -= train_mean;
    const double tn = static_cast<double>(train.size());
    Eigen::MatrixXd gram = x_train.transpose() * x_train / tn;
    Eigen::VectorXd xy = x_train.transpose() * y_train / tn;
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(r);
    for (int li = 0; li < path_len; ++li) {
      detail::elastic_net_gram(gram, xy, result.lambdas[static_cast<std::size_t>(li)],
                               l1_ratio, beta);
      double sse = 0.0;
      for (int row : test) {
        const double pred = train_mean + x.row(row).dot(beta);
        const double err = yc(row) - pred;
        sse += err * err;
      }
      result.cv_mse[static_cast<std::size_t>(li)] += sse;
      fold_weight[static_cast<std::size_t>(li)] += static_cast<double>(test.size());
    }
  }
  int best = 0;
  double best_mse = std::numeric_limits<double>::infinity();
  for (int li = 0; li < path_len; ++li) {
    const double w = fold_weight[static_cast<std::size_t>(li)];
    const double mse = w > 0.0 ? result.cv_mse[static_cast<std::size_t>(li)] / w
                               : std::numeric_limits<double>::infinity();
    result.cv_mse[static_cast<std::size_t>(li)] = mse;
    if (mse < best_mse) {  // strict: ties keep the larger (sparser) lambda
      best_mse = mse;
      best = li;
    }
  }
  result.lambda = result.lambdas[static_cast<std::size_t>(best)];

  // Refit on the full data, warm-started along the path down to the pick.
  Eigen::MatrixXd gram = x.transpose() * x / static_cast<double>(n);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(r);
  for (int li = 0; li <= best; ++li) {
    detail::elastic_net_gram(gram, xy_full, result.lambdas[static_cast<std::size_t>(li)],
                             l1_ratio, beta);
  }
  result.coef = beta;
  return result;
}

// Indices of the rules a region keeps: all of them when l1_ratio is 0 (pure
// ridge applies no selection), otherwise the nonzero coefficients of the
// cross-validated elastic net of y on the region's standardized rule
// columns.
inline std::vector<int> filter_rules_elastic_net(const Eigen::MatrixXd& rule_columns,
                                                 const Eigen::VectorXd& y, double l1_ratio,
                                                 int folds, std::uint64_t seed) {
  const Eigen::Index r = rule_columns.cols();
  if (r < 1) throw ArgumentError("region has no standardized rules to filter");
  std::vector<int> retained;
  if (l1_ratio == 0.0) {
    retained.resize(static_cast<std::size_t>(r));
    std::iota(retained.begin(), retained.end(), 0);
    return retained;
  }
  const ElasticNetPathResult fit = elastic_net_cv(rule_columns, y, l1_ratio, folds, seed);
  for (Eigen::Index j = 0; j < r; ++j) {
    if (fit.coef(j) != 0.0) retained.push_back(static_cast<int>(j));
  }
  return retained;
}

}  // namespace ler
