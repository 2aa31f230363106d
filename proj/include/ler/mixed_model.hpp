#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ler/common.hpp"
#include "ler/genotype.hpp"

namespace ler {

struct VarianceComponents {
  double sigma2_g = 0.0;  // genetic / rule variance
  double sigma2_e = 0.0;  // residual variance

  double ratio() const {
    return sigma2_g > 0.0 ? sigma2_e / sigma2_g
                          : std::numeric_limits<double>::infinity();
  }
};

struct MixedModelFit {
  Eigen::VectorXd beta;            // fixed effects
  Eigen::VectorXd random_effects;  // g for kernel fits, feature effects for rr-BLUP
  Eigen::VectorXd fitted;          // X beta + random-effect contribution, training rows
  Eigen::VectorXd kernel_weights;  // w with g_hat = K w; predictions use K_cross * w
  VarianceComponents vc;
  double log_likelihood = 0.0;     // restricted log-likelihood at the optimum
  bool at_bracket_edge = false;
};

namespace detail {

// REML reduced to one dimension in lambda = sigma2_e / sigma2_g after
// rotating by the eigenvectors of K. Directions with zero eigenvalue can be
// kept implicit: their contribution enters through Gram-matrix residuals
// (complement terms), which is how low-rank feature matrices avoid an n x n
// eigendecomposition.
struct SpectralProblem {
  Eigen::VectorXd d;    // eigenvalues of the rotated part
  Eigen::VectorXd yt;   // U' y
  Eigen::MatrixXd Xt;   // U' X
  double yy_c = 0.0;    // y'y - yt'yt
  Eigen::VectorXd Xy_c; // X'y - Xt'yt
  Eigen::MatrixXd XX_c; // X'X - Xt'Xt
  int n = 0;
  int complement_dim = 0;  // number of implicit zero-eigenvalue directions
};

struct RemlPoint {
  double neg2_rll = 0.0;
  Eigen::VectorXd beta;
  double sigma2_g = 0.0;
};

inline RemlPoint reml_point(const SpectralProblem& prob, double lambda) {
  const int p = static_cast<int>(prob.Xt.cols());
  const Eigen::ArrayXd w = 1.0 / (prob.d.array() + lambda);
  Eigen::MatrixXd a = prob.Xt.transpose() * w.matrix().asDiagonal() * prob.Xt;
  Eigen::VectorXd b = prob.Xt.transpose() * (w * prob.yt.array()).matrix();
  double quad = (prob.yt.array().square() * w).sum();
  double logdet_v = (prob.d.array() + lambda).log().sum();
  if (prob.complement_dim > 0) {
    a += prob.XX_c / lambda;
    b += prob.Xy_c / lambda;
    quad += prob.yy_c / lambda;
    logdet_v += prob.complement_dim * std::log(lambda);
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  RemlPoint point;
  point.beta = ldlt.solve(b);
  quad -= b.dot(point.beta);
  const double df = static_cast<double>(prob.n - p);
  point.sigma2_g = std::max(quad / df, 1e-300);
  double logdet_a = 0.0;
  for (int j = 0; j < p; ++j) {
    logdet_a += std::log(std::max(ldlt.vectorD()(j), 1e-300));
  }
  point.neg2_rll = df * std::log(point.sigma2_g) + logdet_v + logdet_a;
  return point;
}

inline constexpr double kLogLambdaLo = -10.0;
inline constexpr double kLogLambdaHi = 10.0;

struct RemlOptimum {
  double log_lambda = 0.0;
  RemlPoint point;
  bool at_edge = false;
};

// Coarse grid over log lambda followed by golden-section refinement.
inline RemlOptimum optimize_reml(const SpectralProblem& prob) {
  constexpr int kGridPoints = 401;
  const double step = (kLogLambdaHi - kLogLambdaLo) / (kGridPoints - 1);
  double best_ll = kLogLambdaLo;
  double best_val = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kGridPoints; ++i) {
    const double ll = kLogLambdaLo + i * step;
    const double val = reml_point(prob, std::exp(ll)).neg2_rll;
    if (val < best_val) {
      best_val = val;
      best_ll = ll;
    }
  }
  double lo = std::max(kLogLambdaLo, best_ll - step);
  double hi = std::min(kLogLambdaHi, best_ll + step);
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = hi - gr * (hi - lo);
  double x2 = lo + gr * (hi - lo);
  double f1 = reml_point(prob, std::exp(x1)).neg2_rll;
  double f2 = reml_point(prob, std::exp(x2)).neg2_rll;
  while (hi - lo > 1e-10) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - gr * (hi - lo);
      f1 = reml_point(prob, std::exp(x1)).neg2_rll;
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + gr * (hi - lo);
      f2 = reml_point(prob, std::exp(x2)).neg2_rll;
    }
  }
  RemlOptimum opt;
  opt.log_lambda = 0.5 * (lo + hi);
  opt.point = reml_point(prob, std::exp(opt.log_lambda));
  opt.at_edge = opt.log_lambda <= kLogLambdaLo + 2.0 * step ||
                opt.log_lambda >= kLogLambdaHi - 2.0 * step;
  return opt;
}

inline double restricted_log_likelihood(const SpectralProblem& prob, const RemlPoint& point) {
  const double df = static_cast<double>(prob.n - prob.Xt.cols());
  return -0.5 * (point.neg2_rll + df * (std::log(2.0 * M_PI) + 1.0));
}

inline void check_design(const Eigen::VectorXd& y, const Eigen::MatrixXd& x) {
  if (x.rows() != y.size()) throw ArgumentError("design matrix rows do not match y");
  if (y.size() <= x.cols()) throw ArgumentError("need n > p for REML");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  if (qr.rank() < x.cols()) throw ValidationError("fixed-effect design is rank deficient");
}

}  // namespace detail

// Eigendecomposition of a PSD kernel, shared by fits that reuse the basis.
struct SpectralBasis {
  Eigen::MatrixXd u;  // eigenvectors
  Eigen::VectorXd d;  // eigenvalues, clamped at zero
};

inline SpectralBasis compute_basis(const Eigen::MatrixXd& k) {
  if (k.rows() != k.cols()) throw ArgumentError("kernel matrix must be square");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(k);
  if (es.info() != Eigen::Success) throw FitError("eigendecomposition failed");
  if (es.eigenvalues()(0) < -1e-6) {
    throw ValidationError("kernel matrix is not positive semidefinite (min eigenvalue " +
                          format_double(es.eigenvalues()(0)) + ")");
  }
  SpectralBasis basis;
  basis.u = es.eigenvectors();
  basis.d = es.eigenvalues().cwiseMax(0.0);
  return basis;
}

// REML fit of y = X beta + g + e with cov(g) = sigma2_g K, using a
// precomputed eigendecomposition of K.
inline MixedModelFit reml_fit_with_basis(const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
                                         const SpectralBasis& basis) {
  detail::check_design(y, x);
  detail::SpectralProblem prob;
  prob.d = basis.d;
  prob.yt = basis.u.transpose() * y;
  prob.Xt = basis.u.transpose() * x;
  prob.n = static_cast<int>(y.size());
  prob.complement_dim = 0;
  const auto opt = detail::optimize_reml(prob);
  const double lambda = std::exp(opt.log_lambda);

  MixedModelFit fit;
  fit.beta = opt.point.beta;
  fit.vc.sigma2_g = opt.point.sigma2_g;
  fit.vc.sigma2_e = lambda * opt.point.sigma2_g;
  fit.log_likelihood = detail::restricted_log_likelihood(prob, opt.point);
  fit.at_bracket_edge = opt.at_edge;
  if (opt.at_edge) {
    warn("REML optimizer stopped at the bracket edge (log lambda = " +
         format_double(opt.log_lambda) + ")");
  }
  const Eigen::VectorXd resid_rot = prob.yt - prob.Xt * fit.beta;
  const Eigen::ArrayXd w = 1.0 / (prob.d.array() + lambda);
  fit.kernel_weights = basis.u * (w * resid_rot.array()).matrix();
  fit.random_effects =
      basis.u * (prob.d.array() * w * resid_rot.array()).matrix();
  fit.fitted = x * fit.beta + fit.random_effects;
  return fit;
}

inline MixedModelFit reml_fit(const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
                              const Eigen::MatrixXd& k) {
  return reml_fit_with_basis(y, x, compute_basis(k));
}

// --------------------------------------------------------------------------
// G-BLUP
// --------------------------------------------------------------------------

struct GblupModel {
  MixedModelFit fit;
  Eigen::VectorXd freqs;  // training allele frequencies
  double k_denom = 0.0;   // kinship denominator
};

inline GblupModel gblup_fit(const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
                            const MarkerMatrix& mm) {
  GblupModel model;
  const CenteredMarkers centered = center_markers(mm);
  model.freqs = centered.freqs;
  model.k_denom = kinship_denominator(centered.freqs);
  if (model.k_denom <= 0.0) {
    throw ValidationError("degenerate kinship: all markers are monomorphic");
  }
  Eigen::MatrixXd grm(mm.n_samples(), mm.n_samples());
  grm.setZero();
  grm.selfadjointView<Eigen::Lower>().rankUpdate(centered.values, 1.0 / model.k_denom);
  grm.triangularView<Eigen::StrictlyUpper>() = grm.transpose();
  model.fit = reml_fit(y, x, grm);
  return model;
}

// Genetic values for new genotype rows via kinship projection against the
// training set. new_x supplies the fixed-effect design for the new rows.
inline Eigen::VectorXd gblup_predict(const GblupModel& model, const MarkerMatrix& train,
                                     const Eigen::MatrixXd& new_raw,
                                     const Eigen::MatrixXd& new_x) {
  const Eigen::MatrixXd c_train = center_with_freqs(train.values(), model.freqs);
  const Eigen::MatrixXd c_new = center_with_freqs(new_raw, model.freqs);
  const Eigen::MatrixXd cross = c_new * c_train.transpose() / model.k_denom;
  return new_x * model.fit.beta + cross * model.fit.kernel_weights;
}

// --------------------------------------------------------------------------
// rr-BLUP on an n x r feature matrix with shared effect variance
// --------------------------------------------------------------------------

inline MixedModelFit rrblup_fit(const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
                                const Eigen::MatrixXd& features) {
  detail::check_design(y, x);
  const Eigen::Index n = features.rows();
  const Eigen::Index r = features.cols();
  if (r < 1) throw ArgumentError("feature matrix has no columns");
  if (n != y.size()) throw ArgumentError("feature matrix rows do not match y");
  const double rr = static_cast<double>(r);

  detail::SpectralProblem prob;
  prob.n = static_cast<int>(n);
  Eigen::MatrixXd v_kept;   // feature-space eigenvectors (thin path)
  Eigen::VectorXd s_kept;   // singular values of R
  bool thin = r < n;
  if (thin) {
    Eigen::MatrixXd gram = features.transpose() * features;  // r x r
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
    if (es.info() != Eigen::Success) throw FitError("eigendecomposition failed");
    const double max_s2 = std::max(es.eigenvalues()(r - 1), 0.0);
    if (max_s2 <= 0.0) throw FitError("feature matrix has rank zero");
    std::vector<int> kept;
    for (Eigen::Index i = 0; i < r; ++i) {
      if (es.eigenvalues()(i) > max_s2 * 1e-14) kept.push_back(static_cast<int>(i));
    }
    const auto nk = static_cast<Eigen::Index>(kept.size());
    v_kept.resize(r, nk);
    s_kept.resize(nk);
    prob.d.resize(nk);
    for (Eigen::Index j = 0; j < nk; ++j) {
      v_kept.col(j) = es.eigenvectors().col(kept[static_cast<std::size_t>(j)]);
      const double s2 = es.eigenvalues()(kept[static_cast<std::size_t>(j)]);
      s_kept(j) = std::sqrt(s2);
      prob.d(j) = s2 / rr;  // eigenvalue of K = R R' / r
    }
    // Rotated data: u_i = R v_i / s_i.
    const Eigen::MatrixXd rv = features * v_kept;  // n x nk, column i = s_i u_i
    prob.yt = (rv.transpose() * y).cwiseQuotient(s_kept);
    prob.Xt = s_kept.cwiseInverse().asDiagonal() * (rv.transpose() * x);
    prob.yy_c = std::max(0.0, y.squaredNorm() - prob.yt.squaredNorm());
    prob.Xy_c = x.transpose() * y - prob.Xt.transpose() * prob.yt;
    prob.XX_c = x.transpose() * x - prob.Xt.transpose() * prob.Xt;
    prob.complement_dim = static_cast<int>(n - nk);
  } else {
    Eigen::MatrixXd k(n, n);
    k.setZero();
    k.selfadjointView<Eigen::Lower>().rankUpdate(features, 1.0 / rr);
    k.triangularView<Eigen::StrictlyUpper>() = k.transpose();
    SpectralBasis basis = compute_basis(k);
    if (basis.d(n - 1) <= 0.0) throw FitError("feature matrix has rank zero");
    prob.d = basis.d;
    prob.yt = basis.u.transpose() * y;
    prob.Xt = basis.u.transpose() * x;
    prob.complement_dim = 0;
    v_kept = basis.u;  // reused below as the rotation
  }

  const auto opt = detail::optimize_reml(prob);
  const double lambda = std::exp(opt.log_lambda);

  MixedModelFit fit;
  fit.beta = opt.point.beta;
  // sigma2 for K = RR'/r maps to per-feature variance sigma2_alpha = sigma2_K / r.
  fit.vc.sigma2_g = opt.point.sigma2_g / rr;
  fit.vc.sigma2_e = lambda * opt.point.sigma2_g;
  fit.log_likelihood = detail::restricted_log_likelihood(prob, opt.point);
  fit.at_bracket_edge = opt.at_edge;
  if (opt.at_edge) {
    warn("REML optimizer stopped at the bracket edge (log lambda = " +
         format_double(opt.log_lambda) + ")");
  }
  const Eigen::VectorXd eta = prob.yt - prob.Xt * fit.beta;
  const Eigen::ArrayXd w = 1.0 / (prob.d.array() + lambda);
  if (thin) {
    fit.random_effects = v_kept * (s_kept.array() / rr * w * eta.array()).matrix();
  } else {
    fit.random_effects =
        features.transpose() * (v_kept * (w * eta.array() / rr).matrix());
  }
  fit.fitted = x * fit.beta + features * fit.random_effects;
  return fit;
}

// --------------------------------------------------------------------------
// Mixed-model GWAS (EMMAX-style: variance components from the null fit)
// --------------------------------------------------------------------------

struct GwasRow {
  std::string marker_id;
  std::string chromosome;
  long long position = 0;
  double beta = 0.0;
  double se = 0.0;
  double stat = 0.0;
  double pvalue = 1.0;
  bool flagged = false;  // monomorphic or collinear; not tested
};

struct GwasResult {
  std::vector<GwasRow> rows;
  VarianceComponents null_vc;
  double null_log_likelihood = 0.0;
};

struct GwasOptions {
  const Eigen::MatrixXd* pc_covariates = nullptr;  // optional fixed-effect PCs
  bool exact_per_marker = false;                   // re-optimize lambda per marker
};

inline double normal_two_sided_p(double z) {
  const double p = std::erfc(std::abs(z) / std::sqrt(2.0));
  return std::min(1.0, std::max(p, 1e-300));
}

inline GwasResult gwas_emma(const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
                            const MarkerMatrix& mm, const GwasOptions& options = {}) {
  Eigen::MatrixXd x_full = x;
  if (options.pc_covariates != nullptr && options.pc_covariates->cols() > 0) {
    x_full.conservativeResize(Eigen::NoChange, x.cols() + options.pc_covariates->cols());
    x_full.rightCols(options.pc_covariates->cols()) = *options.pc_covariates;
  }
  if (y.size() <= x_full.cols() + 1) throw ArgumentError("need n > p + 1 for GWAS");

  const CenteredMarkers centered = center_markers(mm);
  const double k_denom = kinship_denominator(centered.freqs);
  if (k_denom <= 0.0) {
    throw ValidationError("degenerate kinship: all markers are monomorphic");
  }
  Eigen::MatrixXd grm(mm.n_samples(), mm.n_samples());
  grm.setZero();
  grm.selfadjointView<Eigen::Lower>().rankUpdate(centered.values, 1.0 / k_denom);
  grm.triangularView<Eigen::StrictlyUpper>() = grm.transpose();
  const SpectralBasis basis = compute_basis(grm);
  const MixedModelFit null_fit = reml_fit_with_basis(y, x_full, basis);
  const double lambda_null = null_fit.vc.ratio();

  detail::SpectralProblem prob;
  prob.d = basis.d;
  prob.yt = basis.u.transpose() * y;
  prob.Xt = basis.u.transpose() * x_full;
  prob.n = static_cast<int>(y.size());
  prob.complement_dim = 0;

  const Eigen::ArrayXd w = 1.0 / (basis.d.array() + lambda_null);
  const Eigen::MatrixXd wxt = w.matrix().asDiagonal() * prob.Xt;
  const Eigen::MatrixXd xtwx = prob.Xt.transpose() * wxt;
  const Eigen::VectorXd xtwy = wxt.transpose() * prob.yt;
  const Eigen::VectorXd wyt = (w * prob.yt.array()).matrix();
  const Eigen::MatrixXd ct = basis.u.transpose() * centered.values;  // rotated markers

  const int p = static_cast<int>(x_full.cols());
  GwasResult result;
  result.null_vc = null_fit.vc;
  result.null_log_likelihood = null_fit.log_likelihood;
  result.rows.resize(static_cast<std::size_t>(mm.n_markers()));

  for (Eigen::Index j = 0; j < mm.n_markers(); ++j) {
    GwasRow row;
    const auto& info = mm.marker(j);
    row.marker_id = info.id;
    row.chromosome = info.chromosome;
    row.position = info.position;
    const double freq = centered.freqs(j);
    if (freq <= 0.0 || freq >= 1.0) {
      row.flagged = true;
      result.rows[static_cast<std::size_t>(j)] = row;
      continue;
    }
    const Eigen::VectorXd xj = ct.col(j);
    if (options.exact_per_marker) {
      detail::SpectralProblem aug = prob;
      aug.Xt.conservativeResize(Eigen::NoChange, p + 1);
      aug.Xt.col(p) = xj;
      const auto opt = detail::optimize_reml(aug);
      const double lam = std::exp(opt.log_lambda);
      const Eigen::ArrayXd wj = 1.0 / (basis.d.array() + lam);
      Eigen::MatrixXd a = aug.Xt.transpose() * wj.matrix().asDiagonal() * aug.Xt;
      Eigen::MatrixXd a_inv = a.ldlt().solve(Eigen::MatrixXd::Identity(p + 1, p + 1));
      row.beta = opt.point.beta(p);
      const double var = opt.point.sigma2_g * a_inv(p, p);
      row.se = var > 0.0 ? std::sqrt(var) : 0.0;
    } else {
      Eigen::MatrixXd a(p + 1, p + 1);
      a.topLeftCorner(p, p) = xtwx;
      const Eigen::VectorXd xwj = wxt.transpose() * xj;
      a.topRightCorner(p, 1) = xwj;
      a.bottomLeftCorner(1, p) = xwj.transpose();
      a(p, p) = xj.dot((w * xj.array()).matrix());
      Eigen::VectorXd b(p + 1);
      b.head(p) = xtwy;
      b(p) = xj.dot(wyt);
      const Eigen::MatrixXd a_inv = a.ldlt().solve(Eigen::MatrixXd::Identity(p + 1, p + 1));
      const Eigen::VectorXd theta = a_inv * b;
      row.beta = theta(p);
      const double var = null_fit.vc.sigma2_g * a_inv(p, p);
      row.se = var > 0.0 ? std::sqrt(var) : 0.0;
    }
    if (!std::isfinite(row.se) || row.se <= 0.0) {
      row.flagged = true;
      row.beta = 0.0;
      row.se = 0.0;
    } else {
      row.stat = row.beta / row.se;
      row.pvalue = normal_two_sided_p(row.stat);
    }
    result.rows[static_cast<std::size_t>(j)] = row;
  }
  return result;
}

// Marker order by ascending p-value (flagged markers last), ties broken by
// marker index.
inline std::vector<int> gwas_ranking(const GwasResult& result) {
  std::vector<int> order(result.rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const auto& ra = result.rows[static_cast<std::size_t>(a)];
    const auto& rb = result.rows[static_cast<std::size_t>(b)];
    if (ra.flagged != rb.flagged) return !ra.flagged;
    if (ra.pvalue != rb.pvalue) return ra.pvalue < rb.pvalue;
    return a < b;
  });
  return order;
}

}  // namespace ler
