#pragma once

#include "lmdrop/chain.hpp"
#include "lmdrop/core.hpp"
#include "lmdrop/likelihood.hpp"
#include "lmdrop/parallel.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace lmdrop {

// ---------------------------------------------------------------------------
// Unconstrained coordinates
//
// Block layout follows free_parameter_blocks: beta, zeta, sigma2, gamma, xi,
// (alpha0, psi0), (alpha1 rows, psi1), tau, pi.
//   zeta   -> (zeta_1, log(zeta_g - zeta_{g-1}))
//   sigma2 -> log sigma2
//   alpha  -> decrements, see thresholds_from_decrements
//   tau    -> log(tau_h / tau_1), h = 2..H
//   pi     -> log(pi_k|h / pi_1|h), k = 2..K, row by row

inline int unconstrained_size(const ModelSpec& s) { return count_free_parameters(s); }

namespace detail {

inline void boundary_check(bool ok) {
  if (!ok) throw NumericalError("sandwich undefined at boundary");
}

inline Vector log_ratios(const Vector& probs) {
  Vector out(probs.size() - 1);
  for (Eigen::Index j = 1; j < probs.size(); ++j) {
    boundary_check(probs(0) > 0 && probs(j) > 0);
    out(j - 1) = std::log(probs(j) / probs(0));
  }
  return out;
}

inline Vector softmax_with_reference(const Vector& ratios) {
  Vector out(ratios.size() + 1);
  const double m = ratios.size() ? std::max(0.0, ratios.maxCoeff()) : 0.0;
  out(0) = std::exp(-m);
  for (Eigen::Index j = 0; j < ratios.size(); ++j) out(j + 1) = std::exp(ratios(j) - m);
  return out / out.sum();
}

}  // namespace detail

inline Vector to_unconstrained(const ParameterSet& p) {
  const int G = p.G(), H = p.H();
  std::vector<double> v;
  auto put = [&](const Vector& b) { v.insert(v.end(), b.data(), b.data() + b.size()); };

  put(p.beta);
  v.push_back(p.zeta(0));
  for (int g = 1; g < G; ++g) {
    detail::boundary_check(p.zeta(g) > p.zeta(g - 1));
    v.push_back(std::log(p.zeta(g) - p.zeta(g - 1)));
  }
  detail::boundary_check(p.sigma2 > 0);
  v.push_back(std::log(p.sigma2));
  put(p.gamma);
  put(p.xi);
  try {
    put(decrements_from_thresholds(p.alpha0));
    put(p.psi0);
    for (int r = 0; r < G; ++r) put(decrements_from_thresholds(p.alpha1.row(r).transpose()));
  } catch (const std::domain_error&) {
    detail::boundary_check(false);
  }
  put(p.psi1);
  put(detail::log_ratios(p.tau));
  for (int h = 0; h < H; ++h) put(detail::log_ratios(p.pi.row(h).transpose()));
  return Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline ParameterSet from_unconstrained(const Vector& v, const ModelSpec& s) {
  if (v.size() != unconstrained_size(s)) throw InputError("unconstrained vector has the wrong length");
  ParameterSet p = ParameterSet::zeros(s);
  Eigen::Index at = 0;
  auto take = [&](Eigen::Index n) {
    Vector b = v.segment(at, n);
    at += n;
    return b;
  };

  p.beta = take(s.p_x);
  const Vector z = take(s.G);
  p.zeta(0) = z(0);
  for (int g = 1; g < s.G; ++g) p.zeta(g) = p.zeta(g - 1) + std::exp(z(g));
  p.sigma2 = std::exp(take(1)(0));
  p.gamma = take(s.p_w);
  p.xi = take(s.K);
  p.alpha0 = thresholds_from_decrements(take(s.G - 1));
  p.psi0 = take(s.H - 1);
  for (int r = 0; r < s.G; ++r) p.alpha1.row(r) = thresholds_from_decrements(take(s.G - 1)).transpose();
  p.psi1 = take(s.H - 1);
  p.tau = detail::softmax_with_reference(take(s.H - 1));
  for (int h = 0; h < s.H; ++h) p.pi.row(h) = detail::softmax_with_reference(take(s.K - 1)).transpose();
  return p;
}

/// Natural-scale counterpart of the unconstrained vector: same layout, with
/// tau_2..H and pi_2..K|h standing for the probability blocks.
inline Vector natural_vector(const ParameterSet& p) {
  std::vector<double> v;
  auto put = [&](const auto& b) {
    for (Eigen::Index j = 0; j < b.size(); ++j) v.push_back(b(j));
  };
  put(p.beta);
  put(p.zeta);
  v.push_back(p.sigma2);
  put(p.gamma);
  put(p.xi);
  put(p.alpha0);
  put(p.psi0);
  for (int r = 0; r < p.G(); ++r) put(p.alpha1.row(r));
  put(p.psi1);
  put(p.tau.tail(p.H() - 1));
  for (int h = 0; h < p.H(); ++h) put(p.pi.row(h).tail(p.K() - 1));
  return Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline std::vector<std::string> parameter_names(const ModelSpec& s, const std::vector<std::string>& x_names,
                                                const std::vector<std::string>& w_names) {
  std::vector<std::string> out;
  auto idx = [](int i) { return std::to_string(i); };
  auto cov = [&](const std::vector<std::string>& names, int j) {
    return j < static_cast<int>(names.size()) ? names[j] : idx(j + 1);
  };
  for (int j = 0; j < s.p_x; ++j) out.push_back("beta[" + cov(x_names, j) + "]");
  for (int g = 1; g <= s.G; ++g) out.push_back("zeta[" + idx(g) + "]");
  out.push_back("sigma2");
  for (int j = 0; j < s.p_w; ++j) out.push_back("gamma[" + cov(w_names, j) + "]");
  for (int k = 1; k <= s.K; ++k) out.push_back("xi[" + idx(k) + "]");
  for (int g = 2; g <= s.G; ++g) out.push_back("alpha0[" + idx(g) + "]");
  for (int h = 2; h <= s.H; ++h) out.push_back("psi0[" + idx(h) + "]");
  for (int r = 1; r <= s.G; ++r)
    for (int g = 2; g <= s.G; ++g) out.push_back("alpha1[" + idx(r) + "," + idx(g) + "]");
  for (int h = 2; h <= s.H; ++h) out.push_back("psi1[" + idx(h) + "]");
  for (int h = 2; h <= s.H; ++h) out.push_back("tau[" + idx(h) + "]");
  for (int h = 1; h <= s.H; ++h)
    for (int k = 2; k <= s.K; ++k) out.push_back("pi[" + idx(k) + "|" + idx(h) + "]");
  return out;
}

/// d natural / d unconstrained, block diagonal.
inline Matrix natural_jacobian(const Vector& v, const ModelSpec& s) {
  const Eigen::Index d = v.size();
  Matrix M = Matrix::Zero(d, d);
  Eigen::Index at = 0;
  auto identity = [&](Eigen::Index n) {
    for (Eigen::Index j = 0; j < n; ++j, ++at) M(at, at) = 1.0;
  };
  // cumulative block: out_g = v_0 + sign * sum_{j=1..g} exp(v_j)
  auto cumulative = [&](Eigen::Index n, double sign) {
    for (Eigen::Index g = 0; g < n; ++g) {
      M(at + g, at) = 1.0;
      for (Eigen::Index j = 1; j <= g; ++j) M(at + g, at + j) = sign * std::exp(v(at + j));
    }
    at += n;
  };
  auto softmax = [&](Eigen::Index n) {
    const Vector probs = detail::softmax_with_reference(v.segment(at, n));
    for (Eigen::Index a = 0; a < n; ++a)
      for (Eigen::Index b = 0; b < n; ++b) M(at + a, at + b) = probs(a + 1) * ((a == b ? 1.0 : 0.0) - probs(b + 1));
    at += n;
  };

  identity(s.p_x);
  cumulative(s.G, 1.0);
  M(at, at) = std::exp(v(at));
  ++at;
  identity(s.p_w);
  identity(s.K);
  cumulative(s.G - 1, -1.0);
  identity(s.H - 1);
  for (int r = 0; r < s.G; ++r) cumulative(s.G - 1, -1.0);
  identity(s.H - 1);
  softmax(s.H - 1);
  for (int h = 0; h < s.H; ++h) softmax(s.K - 1);
  return M;
}

// ---------------------------------------------------------------------------
// Numerical scores

inline double score_step(double x) { return std::cbrt(std::numeric_limits<double>::epsilon()) * std::max(1.0, std::abs(x)); }

namespace detail {

inline Vector perturbed_logliks(const PanelData& data, const Vector& v, const ModelSpec& spec) {
  return subject_logliks(data, from_unconstrained(v, spec), spec.process);
}

inline Vector perturbed_logliks_checked(const PanelData& data, const Vector& v, const ModelSpec& spec) {
  Vector out = perturbed_logliks(data, v, spec);
  if (!out.allFinite()) throw NumericalError("non-finite log-likelihood");
  return out;
}

}  // namespace detail

/// n x d matrix of per-subject scores at the unconstrained point v, by central
/// differences. A coordinate whose perturbed likelihood is not finite is
/// retried once with a quarter of the step.
inline Matrix subject_scores(const PanelData& data, const Vector& v, const ModelSpec& spec, int workers = 1) {
  const Eigen::Index d = v.size();
  Matrix S(data.n_subjects(), d);
  parallel_for(static_cast<std::size_t>(d), workers, [&](std::size_t jj) {
    const auto j = static_cast<Eigen::Index>(jj);
    double h = score_step(v(j));
    for (int attempt = 0;; ++attempt) {
      try {
        Vector up = v, down = v;
        up(j) += h;
        down(j) -= h;
        S.col(j) = (detail::perturbed_logliks_checked(data, up, spec) -
                    detail::perturbed_logliks_checked(data, down, spec)) /
                   (2.0 * h);
        return;
      } catch (const NumericalError&) {
        if (attempt == 1)
          throw NumericalError("score undefined near coordinate " + std::to_string(j + 1) +
                               ": perturbed likelihood is not finite");
        h /= 4.0;
      }
    }
  });
  return S;
}

inline Vector subject_score(const PanelData& data, int i, const Vector& v, const ModelSpec& spec) {
  PanelData one;
  one.n_waves = data.n_waves;
  one.x_names = data.x_names;
  one.w_names = data.w_names;
  one.subjects = {data.subjects.at(i)};
  return subject_scores(one, v, spec).row(0).transpose();
}

inline Vector total_score(const PanelData& data, const Vector& v, const ModelSpec& spec, int workers = 1) {
  return subject_scores(data, v, spec, workers).colwise().sum().transpose();
}

// ---------------------------------------------------------------------------
// Sandwich

struct CovarianceReport {
  std::vector<std::string> names;
  Vector theta_star;
  Vector theta;     // natural_vector of the estimate
  Matrix J;         // observed information in unconstrained coordinates
  Matrix K_hat;     // sum of per-subject score outer products
  Matrix cov_star;
  Matrix M;         // d theta / d theta*
  Matrix cov_theta;
  Vector se;        // NaN where the variance came out negative
  std::vector<std::string> negative_variance;
  bool pseudo_inverse = false;
  double condition_number = 0.0;
  double score_norm = 0.0;   // |sum_i S_i| at the estimate
  double score_scale = 0.0;  // spectral norm of J: score change per unit step
};

inline constexpr double kSingularTolerance = 1e-12;

/// Symmetric inverse through the eigendecomposition. Eigenvalues below
/// tol * max|lambda| are dropped (pseudo-inverse).
inline Matrix symmetric_inverse(const Matrix& A, bool& pseudo, double& condition) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(A);
  const Vector& lam = eig.eigenvalues();
  const double top = lam.cwiseAbs().maxCoeff();
  const double bottom = lam.cwiseAbs().minCoeff();
  condition = bottom > 0 ? top / bottom : std::numeric_limits<double>::infinity();
  pseudo = false;
  Vector inv(lam.size());
  for (Eigen::Index j = 0; j < lam.size(); ++j) {
    if (!(lam(j) > kSingularTolerance * top)) {
      pseudo = true;
      inv(j) = 0.0;
    } else {
      inv(j) = 1.0 / lam(j);
    }
  }
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

inline CovarianceReport sandwich_covariance(const PanelData& data, const ParameterSet& theta_hat,
                                            const ModelSpec& spec, int workers = 1) {
  check_conforms(theta_hat, spec);
  CovarianceReport rep;
  rep.names = parameter_names(spec, data.x_names, data.w_names);
  rep.theta_star = to_unconstrained(theta_hat);
  rep.theta = natural_vector(theta_hat);
  const Eigen::Index d = rep.theta_star.size();

  const Matrix S = subject_scores(data, rep.theta_star, spec, workers);
  rep.K_hat = S.transpose() * S;
  const Vector total = S.colwise().sum().transpose();
  rep.score_norm = total.norm();

  const double eps4 = std::pow(std::numeric_limits<double>::epsilon(), 0.25);
  Matrix jac(d, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double h = eps4 * std::max(1.0, std::abs(rep.theta_star(j)));
    Vector up = rep.theta_star, down = rep.theta_star;
    up(j) += h;
    down(j) -= h;
    jac.col(j) = (total_score(data, up, spec, workers) - total_score(data, down, spec, workers)) / (2.0 * h);
  }
  rep.J = -0.5 * (jac + jac.transpose());
  rep.score_scale = Eigen::SelfAdjointEigenSolver<Matrix>(rep.J, Eigen::EigenvaluesOnly).eigenvalues().cwiseAbs().maxCoeff();

  const Matrix Jinv = symmetric_inverse(rep.J, rep.pseudo_inverse, rep.condition_number);
  rep.cov_star = Jinv * rep.K_hat * Jinv;
  rep.cov_star = 0.5 * (rep.cov_star + rep.cov_star.transpose());
  rep.M = natural_jacobian(rep.theta_star, spec);
  rep.cov_theta = rep.M * rep.cov_star * rep.M.transpose();

  rep.se.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double var = rep.cov_theta(j, j);
    if (var < 0) {
      rep.negative_variance.push_back(rep.names[j]);
      rep.se(j) = std::numeric_limits<double>::quiet_NaN();
    } else {
      rep.se(j) = std::sqrt(var);
    }
  }
  return rep;
}

}  // namespace lmdrop
