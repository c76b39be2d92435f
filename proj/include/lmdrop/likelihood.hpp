#pragma once

// Emission and dropout densities, scaled forward/backward recursions and the
// observed-data log-likelihood.

#include "lmdrop/chain.hpp"
#include "lmdrop/core.hpp"
#include "lmdrop/numeric.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace lmdrop {

inline double emission_logdensity(double y, int g, const ParameterSet& p,
                                  const Eigen::Ref<const Vector>& x_row) {
  const double mean = p.zeta(g) + (p.beta.size() ? x_row.dot(p.beta) : 0.0);
  const double r = y - mean;
  return -0.5 * std::log(2.0 * std::numbers::pi * p.sigma2) - 0.5 * r * r / p.sigma2;
}

/// Bernoulli log-probability of indicator r with logit P(R = 0) = xi_k + w'gamma.
inline double dropout_logdensity(int r, int k, const ParameterSet& p,
                                 const Eigen::Ref<const Vector>& w_row) {
  const double eta = p.xi(k) + (p.gamma.size() ? w_row.dot(p.gamma) : 0.0);
  const double lp = r == 0 ? log_logistic(eta) : log_logistic(-eta);
  return std::max(lp, kLogMinProb);
}

/// T_i x G matrix of emission log-densities.
inline Matrix emission_logdensities(const SubjectRecord& s, const ParameterSet& p) {
  const int T = s.n_observed();
  const int G = p.G();
  Matrix out(T, G);
  const double c = -0.5 * std::log(2.0 * std::numbers::pi * p.sigma2);
  const double inv = 0.5 / p.sigma2;
  for (int t = 0; t < T; ++t) {
    const double xb = p.beta.size() ? s.x.row(t).dot(p.beta) : 0.0;
    for (int g = 0; g < G; ++g) {
      const double r = s.y(t) - p.zeta(g) - xb;
      out(t, g) = c - inv * r * r;
    }
  }
  return out;
}

/// Joint dropout log-probability of the subject's indicators, per class k.
inline Vector dropout_class_logliks(const SubjectRecord& s, const ParameterSet& p) {
  Vector out = Vector::Zero(p.K());
  for (int t = 0; t < s.n_indicators(); ++t) {
    const double wg = p.gamma.size() ? s.w.row(t).dot(p.gamma) : 0.0;
    for (int k = 0; k < p.K(); ++k) {
      const double eta = p.xi(k) + wg;
      const double lp = s.r[t] == 0 ? log_logistic(eta) : log_logistic(-eta);
      out(k) += std::max(lp, kLogMinProb);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Rescaling policies. Each row of forward values is divided by the returned
/// constant; any positive choice leaves every derived quantity unchanged.
struct SumToOne {
  static double scale(const Eigen::Ref<const Vector>& row) { return row.sum(); }
};
struct MaxToOne {
  static double scale(const Eigen::Ref<const Vector>& row) { return row.maxCoeff(); }
};

/// Scaled forward/backward values of one subject under one upper-level class.
///
/// With c_t = log_scale(t), the unscaled forward value is
/// forward(t, g) * exp(c_1 + .. + c_t) and the unscaled backward value is
/// backward(t, g) * exp(c_{t+1} + .. + c_T). `scale(t)` is the divisor applied
/// to row t after the per-wave emission shift `shift(t)`, so
/// c_t = shift(t) + log(scale(t)).
struct LatticeSlice {
  Matrix forward;
  Matrix backward;
  Vector log_scale;
  Vector shift;
  Vector scale;
  double terminal = 1.0;        // sum of the last scaled forward row
  double log_normalizer = 0.0;  // log f(y_1..y_T | V = h)

  double forward_log_offset(int t) const { return log_scale.head(t + 1).sum(); }
  double backward_log_offset(int t) const {
    return log_scale.tail(log_scale.size() - t - 1).sum();
  }
};

/// Emission densities divided by their per-wave maximum, with the log of
/// that maximum kept in `shift`.
struct ScaledEmission {
  Matrix density;
  Vector shift;
};

inline ScaledEmission scale_emission(const Matrix& log_emission) {
  ScaledEmission e;
  e.shift = log_emission.rowwise().maxCoeff();
  e.density = (log_emission.colwise() - e.shift).array().exp().matrix();
  return e;
}

/// Forward recursion from scaled emissions, the initial distribution and
/// transition matrix of one class.
template <class Rescale = SumToOne>
LatticeSlice forward_pass(const ScaledEmission& em, const Eigen::Ref<const Vector>& delta, const Matrix& Q,
                          const std::string& subject_id = {}) {
  const Eigen::Index T = em.density.rows();
  const Eigen::Index G = em.density.cols();
  LatticeSlice s;
  s.forward.resize(T, G);
  s.log_scale.resize(T);
  s.shift = em.shift;
  s.scale.resize(T);
  Vector u(G);
  for (Eigen::Index t = 0; t < T; ++t) {
    if (t == 0) {
      u = delta.cwiseProduct(em.density.row(0).transpose());
    } else {
      u.noalias() = Q.transpose() * s.forward.row(t - 1).transpose();
      u.array() *= em.density.row(t).transpose().array();
    }
    const double c = Rescale::scale(u);
    if (!(c > 0) || !std::isfinite(c) || !std::isfinite(em.shift(t)))
      throw NumericalError("forward recursion underflow for subject '" + subject_id + "' at wave " +
                           std::to_string(t + 1));
    s.forward.row(t) = u.transpose() / c;
    s.scale(t) = c;
    s.log_scale(t) = em.shift(t) + std::log(c);
  }
  s.terminal = s.forward.row(T - 1).sum();
  s.log_normalizer = s.log_scale.sum() + std::log(s.terminal);
  return s;
}

template <class Rescale = SumToOne>
LatticeSlice forward_pass(const Matrix& log_emission, const Eigen::Ref<const Vector>& delta, const Matrix& Q,
                          const std::string& subject_id = {}) {
  return forward_pass<Rescale>(scale_emission(log_emission), delta, Q, subject_id);
}

/// Backward recursion reusing the scaling constants of `slice.forward`.
inline void backward_pass(LatticeSlice& slice, const ScaledEmission& em, const Matrix& Q) {
  const Eigen::Index T = em.density.rows();
  const Eigen::Index G = em.density.cols();
  slice.backward.resize(T, G);
  slice.backward.row(T - 1).setOnes();
  Vector v(G);
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    v = em.density.row(t + 1).transpose().cwiseProduct(slice.backward.row(t + 1).transpose());
    slice.backward.row(t).noalias() = (Q * v).transpose() / slice.scale(t + 1);
  }
}

inline void backward_pass(LatticeSlice& slice, const Matrix& log_emission, const Matrix& Q) {
  backward_pass(slice, scale_emission(log_emission), Q);
}

/// Forward and backward passes of subject `s` under class h.
template <class Rescale = SumToOne>
LatticeSlice subject_lattice(const SubjectRecord& s, int h, const ParameterSet& p,
                             const ChainLaw& law) {
  const ScaledEmission em = scale_emission(emission_logdensities(s, p));
  LatticeSlice slice = forward_pass<Rescale>(em, law.delta.row(h).transpose(), law.Q[h], s.id);
  backward_pass(slice, em, law.Q[h]);
  return slice;
}

// ---------------------------------------------------------------------------
// Observed-data likelihood

/// Per-subject pieces of the likelihood on the log scale.
struct SubjectLikelihood {
  Vector longitudinal;  // H: log f(y | V = h)
  Vector dropout;       // K: log f(r | U = k)
  Matrix joint;         // H x K: log tau_h + log f(y|h) + log pi_k|h + log f(r|k)
  double loglik = 0.0;
};

namespace detail {

inline bool uses_longitudinal(Process p) { return p != Process::dropout; }
inline bool uses_dropout(Process p) { return p != Process::longitudinal; }

inline SubjectLikelihood combine(const Vector& longitudinal, const Vector& dropout,
                                 const ParameterSet& p, Process process) {
  SubjectLikelihood out;
  out.longitudinal = longitudinal;
  out.dropout = dropout;
  const int H = p.H();
  const int K = p.K();
  out.joint.resize(H, K);
  const bool use_y = uses_longitudinal(process);
  const bool use_r = uses_dropout(process);
  for (int h = 0; h < H; ++h)
    for (int k = 0; k < K; ++k)
      out.joint(h, k) = safe_log(p.tau(h)) + (use_y ? longitudinal(h) : 0.0) +
                        safe_log(p.pi(h, k)) + (use_r ? dropout(k) : 0.0);
  out.loglik = log_sum_exp(std::span<const double>(out.joint.data(), out.joint.size()));
  return out;
}

}  // namespace detail

inline SubjectLikelihood subject_likelihood(const SubjectRecord& s, const ParameterSet& p,
                                            const ChainLaw& law, Process process = Process::joint) {
  Vector longitudinal = Vector::Zero(p.H());
  if (detail::uses_longitudinal(process)) {
    const ScaledEmission em = scale_emission(emission_logdensities(s, p));
    for (int h = 0; h < p.H(); ++h)
      longitudinal(h) = forward_pass(em, law.delta.row(h).transpose(), law.Q[h], s.id).log_normalizer;
  }
  Vector dropout = detail::uses_dropout(process) ? dropout_class_logliks(s, p) : Vector::Zero(p.K());
  auto out = detail::combine(longitudinal, dropout, p, process);
  if (!std::isfinite(out.loglik))
    throw NumericalError("non-finite log-likelihood for subject '" + s.id + "'");
  return out;
}

/// Log-likelihood contribution of every subject.
inline Vector subject_logliks(const PanelData& data, const ParameterSet& p,
                              Process process = Process::joint) {
  const ChainLaw law = build_chain_law(p);
  Vector out(data.n_subjects());
  for (int i = 0; i < data.n_subjects(); ++i)
    out(i) = subject_likelihood(data.subjects[i], p, law, process).loglik;
  return out;
}

inline double observed_loglik(const PanelData& data, const ParameterSet& p, const ModelSpec& spec) {
  check_conforms(p, spec);
  return subject_logliks(data, p, spec.process).sum();
}

/// HMM log-likelihood of the responses alone, using the chain of class 1.
inline double longitudinal_loglik(const PanelData& data, const ParameterSet& p) {
  const ChainLaw law = build_chain_law(p);
  double total = 0.0;
  for (const auto& s : data.subjects) {
    const Matrix le = emission_logdensities(s, p);
    total += forward_pass(le, law.delta.row(0).transpose(), law.Q[0], s.id).log_normalizer;
  }
  return total;
}

/// Finite-mixture log-likelihood of the indicators alone, using pi row 1.
inline double dropout_mixture_loglik(const PanelData& data, const ParameterSet& p) {
  double total = 0.0;
  std::vector<double> terms(p.K());
  for (const auto& s : data.subjects) {
    const Vector lr = dropout_class_logliks(s, p);
    for (int k = 0; k < p.K(); ++k) terms[k] = safe_log(p.pi(0, k)) + lr(k);
    total += log_sum_exp(terms);
  }
  return total;
}

}  // namespace lmdrop
