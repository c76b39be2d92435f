#pragma once

// EM driver: starting values, iterations, multistart and label conventions.

#include "lmdrop/core.hpp"
#include "lmdrop/estep.hpp"
#include "lmdrop/mstep.hpp"
#include "lmdrop/parallel.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace lmdrop {

struct ProgressEvent {
  int start = 0;
  int iteration = 0;
  double loglik = 0.0;
  double change = 0.0;                 // loglik difference from the previous iteration
  std::array<double, 9> block_change;  // max |delta| per parameter block, storage order
};

using ProgressCallback = std::function<void(const ProgressEvent&)>;

struct StartResult {
  int start_index = 0;
  ParameterSet params;
  double loglik = 0.0;
  int n_iter = 0;
  bool converged = false;
  bool degenerate = false;
  std::string note;
  std::vector<double> trace;
};

struct FitResult {
  ParameterSet theta_hat;
  ModelSpec spec;
  double loglik = 0.0;
  int n_iter = 0;
  bool converged = false;
  std::vector<double> loglik_trace;
  int start_index = 0;
  int n_params = 0;
  int n_subjects = 0;
  double bic = 0.0;
  double aic = 0.0;
  int degenerate_starts = 0;
  std::vector<StartResult> starts;  // params and traces of every start, in start order
};

// ---------------------------------------------------------------------------
// Label conventions

/// Sorts dropout classes by xi ascending and upper-level classes by tau
/// descending. The likelihood is unchanged: class shifts are re-anchored on
/// the new reference class and absorbed into the thresholds.
inline ParameterSet canonicalize(const ParameterSet& in) {
  ParameterSet p = in;
  const int K = p.K();
  const int H = p.H();

  std::vector<int> k_order(K);
  std::iota(k_order.begin(), k_order.end(), 0);
  std::stable_sort(k_order.begin(), k_order.end(), [&](int a, int b) { return in.xi(a) < in.xi(b); });
  for (int k = 0; k < K; ++k) {
    p.xi(k) = in.xi(k_order[k]);
    p.pi.col(k) = in.pi.col(k_order[k]);
  }

  std::vector<int> h_order(H);
  std::iota(h_order.begin(), h_order.end(), 0);
  std::stable_sort(h_order.begin(), h_order.end(), [&](int a, int b) { return in.tau(a) > in.tau(b); });
  const Matrix pi_sorted_k = p.pi;
  const double ref0 = in.initial_shift(h_order[0]);
  const double ref1 = in.transition_shift(h_order[0]);
  for (int h = 0; h < H; ++h) {
    p.tau(h) = in.tau(h_order[h]);
    p.pi.row(h) = pi_sorted_k.row(h_order[h]);
    if (h > 0) {
      p.psi0(h - 1) = in.initial_shift(h_order[h]) - ref0;
      p.psi1(h - 1) = in.transition_shift(h_order[h]) - ref1;
    }
  }
  p.alpha0.array() += ref0;
  p.alpha1.array() += ref1;
  return p;
}

// ---------------------------------------------------------------------------
// Starting values

namespace detail {

enum Stream : std::uint32_t { kLongitudinalStream = 1, kChainStream = 2, kDropoutStream = 3, kMixtureStream = 4 };

inline std::mt19937_64 start_stream(std::uint64_t seed, int start, Stream block) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(start), static_cast<std::uint32_t>(block)};
  return std::mt19937_64(seq);
}

inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * (static_cast<double>(v.size()) - 1.0);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Thresholds of a uniform distribution over G levels plus jitter, kept
/// strictly decreasing.
inline Vector jittered_uniform_thresholds(int G, std::mt19937_64& rng, double sd) {
  std::normal_distribution<double> noise(0.0, sd);
  Vector a(G - 1);
  for (int j = 0; j < G - 1; ++j) a(j) = std::log(double(G - 1 - j) / double(j + 1)) + noise(rng);
  std::sort(a.data(), a.data() + a.size(), std::greater<>());
  for (int j = 1; j < G - 1; ++j) a(j) = std::min(a(j), a(j - 1) - 0.05);
  return a;
}

inline Vector jittered_simplex(int n, std::mt19937_64& rng) {
  std::gamma_distribution<double> draw(1.0, 1.0);
  Vector d(n);
  for (int j = 0; j < n; ++j) d(j) = draw(rng);
  d /= d.sum();
  return 0.5 * Vector::Constant(n, 1.0 / n) + 0.5 * d;
}

}  // namespace detail

/// Deterministic starting values for start `start`: each parameter block
/// draws from its own stream of (seed, start, block).
inline ParameterSet initial_parameters(const PanelData& data, const ModelSpec& spec, int start) {
  ParameterSet p = ParameterSet::zeros(spec);
  const int G = spec.G, K = spec.K, H = spec.H;

  // Longitudinal block: pooled OLS for beta, residual quantiles for zeta.
  {
    auto rng = detail::start_stream(spec.em.seed, start, detail::kLongitudinalStream);
    int rows = 0;
    for (const auto& s : data.subjects) rows += s.n_observed();
    Matrix X(rows, spec.p_x + 1);
    Vector y(rows);
    int n = 0;
    for (const auto& s : data.subjects) {
      for (int t = 0; t < s.n_observed(); ++t, ++n) {
        X(n, 0) = 1.0;
        if (spec.p_x) X.row(n).tail(spec.p_x) = s.x.row(t);
        y(n) = s.y(t);
      }
    }
    Eigen::ColPivHouseholderQR<Matrix> qr(X);
    if (qr.rank() < X.cols())
      throw InputError("longitudinal covariates are collinear with the state intercepts");
    const Vector coef = qr.solve(y);
    p.beta = coef.tail(spec.p_x);
    std::vector<double> resid(rows);
    for (int i = 0; i < rows; ++i) resid[i] = y(i) - (spec.p_x ? X.row(i).tail(spec.p_x).dot(p.beta) : 0.0);
    const double mean = std::accumulate(resid.begin(), resid.end(), 0.0) / rows;
    double var = 0.0;
    for (double r : resid) var += (r - mean) * (r - mean);
    var = std::max(var / rows, 1e-8);
    std::normal_distribution<double> noise(0.0, 0.1 * std::sqrt(var));
    for (int g = 0; g < G; ++g) p.zeta(g) = detail::quantile(resid, (g + 0.5) / G) + noise(rng);
    std::sort(p.zeta.data(), p.zeta.data() + G);
    for (int g = 1; g < G; ++g) p.zeta(g) = std::max(p.zeta(g), p.zeta(g - 1) + 1e-3 * std::sqrt(var));
    double within = 0.0;
    for (double r : resid) {
      double best = std::numeric_limits<double>::infinity();
      for (int g = 0; g < G; ++g) best = std::min(best, (r - p.zeta(g)) * (r - p.zeta(g)));
      within += best;
    }
    p.sigma2 = std::max(within / rows, 1e-2 * var);
  }

  // Chain block: near-uniform initial and transition laws.
  {
    auto rng = detail::start_stream(spec.em.seed, start, detail::kChainStream);
    if (G > 1) {
      p.alpha0 = detail::jittered_uniform_thresholds(G, rng, 0.3);
      for (int r = 0; r < G; ++r) p.alpha1.row(r) = detail::jittered_uniform_thresholds(G, rng, 0.3).transpose();
    }
    std::normal_distribution<double> shift(0.0, 0.5);
    for (int h = 0; h < H - 1; ++h) {
      p.psi0(h) = shift(rng);
      p.psi1(h) = shift(rng);
    }
  }

  // Dropout block: pooled logistic fit, class intercepts spread around it.
  {
    auto rng = detail::start_stream(spec.em.seed, start, detail::kDropoutStream);
    int rows = 0;
    for (const auto& s : data.subjects) rows += s.n_indicators();
    std::vector<int> r;
    r.reserve(rows);
    Matrix w(rows, spec.p_w);
    int n = 0;
    for (const auto& s : data.subjects)
      for (int t = 0; t < s.n_indicators(); ++t, ++n) {
        r.push_back(s.r[t]);
        if (spec.p_w) w.row(n) = s.w.row(t);
      }
    const auto pooled = fit_class_logistic(r, w, Matrix::Ones(rows, 1), Vector::Zero(1), Vector::Zero(spec.p_w));
    p.gamma = pooled.gamma;
    std::normal_distribution<double> noise(0.0, 0.5);
    for (int k = 0; k < K; ++k) {
      const double anchor = K == 1 ? 0.0 : -2.0 + 4.0 * k / (K - 1);
      p.xi(k) = pooled.xi(0) + anchor + (K == 1 ? 0.0 : noise(rng));
    }
    std::sort(p.xi.data(), p.xi.data() + K);
  }

  // Mixture block.
  {
    auto rng = detail::start_stream(spec.em.seed, start, detail::kMixtureStream);
    p.tau = detail::jittered_simplex(H, rng);
    for (int h = 0; h < H; ++h) p.pi.row(h) = detail::jittered_simplex(K, rng).transpose();
  }
  return p;
}

// ---------------------------------------------------------------------------
// EM iterations

namespace detail {

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

inline std::array<double, 9> block_changes(const ParameterSet& a, const ParameterSet& b) {
  return {max_abs_diff(a.beta, b.beta),
          max_abs_diff(a.zeta, b.zeta),
          std::abs(a.sigma2 - b.sigma2),
          max_abs_diff(a.gamma, b.gamma),
          max_abs_diff(a.xi, b.xi),
          std::max(max_abs_diff(a.alpha0, b.alpha0), max_abs_diff(a.psi0, b.psi0)),
          std::max(max_abs_diff(a.alpha1, b.alpha1), max_abs_diff(a.psi1, b.psi1)),
          max_abs_diff(a.tau, b.tau),
          max_abs_diff(a.pi, b.pi)};
}

}  // namespace detail

inline constexpr double kDeathThreshold = 1e-8;

/// One EM run from `init`. Numerical failures mark the start as degenerate
/// instead of throwing.
inline StartResult run_em(const PanelData& data, const ModelSpec& spec, ParameterSet init, int start_index,
                          const ProgressCallback& progress = {}) {
  StartResult out;
  out.start_index = start_index;
  out.params = std::move(init);
  const bool use_y = detail::uses_longitudinal(spec.process);
  const bool use_r = detail::uses_dropout(spec.process);
  double total_obs = 0.0;
  for (const auto& s : data.subjects) total_obs += s.n_observed();
  double last_param_change = std::numeric_limits<double>::infinity();

  try {
    for (int iter = 1; iter <= spec.em.max_iter; ++iter) {
      const Posteriors post = e_step(data, out.params, spec);
      out.trace.push_back(post.loglik);
      out.loglik = post.loglik;
      out.n_iter = iter;
      if (iter > 1) {
        const double delta = post.loglik - out.trace[out.trace.size() - 2];
        const bool done = spec.em.norm == ConvergenceNorm::loglik ? std::abs(delta) < spec.em.tol
                                                                  : last_param_change < spec.em.tol;
        if (done) {
          out.converged = true;
          break;
        }
      }
      if ((out.params.tau.array() < kDeathThreshold).any()) {
        out.degenerate = true;
        out.note = "upper-level class weight below threshold";
        break;
      }
      if (use_y) {
        Vector occupancy = Vector::Zero(spec.G);
        for (const auto& s : post.subjects) occupancy += s.a_marg.colwise().sum().transpose();
        if ((occupancy.array() / total_obs < kDeathThreshold).any()) {
          out.degenerate = true;
          out.note = "hidden state occupancy below threshold";
          break;
        }
      }
      if (iter == spec.em.max_iter) break;

      ParameterSet next = out.params;
      if (use_y) {
        const auto lon = m_step_longitudinal(data, post);
        next.beta = lon.beta;
        next.zeta = lon.zeta;
        next.sigma2 = lon.sigma2;
        const auto chain = m_step_chain(post, out.params);
        next.alpha0 = chain.alpha0;
        next.psi0 = chain.psi0;
        next.alpha1 = chain.alpha1;
        next.psi1 = chain.psi1;
      }
      if (use_r) {
        const auto drop = m_step_dropout(data, post, out.params);
        next.gamma = drop.gamma;
        next.xi = drop.xi;
      }
      const auto mix = m_step_mixture(post, spec.H, spec.K);
      next.tau = mix.tau;
      next.pi = mix.pi;
      if (mix.degenerate) {
        out.degenerate = true;
        out.note = "upper-level class lost all mass";
        break;
      }
      const auto changes = detail::block_changes(next, out.params);
      last_param_change = *std::max_element(changes.begin(), changes.end());
      if (progress) {
        ProgressEvent ev;
        ev.start = start_index;
        ev.iteration = iter;
        ev.loglik = post.loglik;
        ev.change = iter > 1 ? post.loglik - out.trace[out.trace.size() - 2] : 0.0;
        ev.block_change = changes;
        progress(ev);
      }
      out.params = std::move(next);
    }
  } catch (const NumericalError& e) {
    out.degenerate = true;
    out.note = e.what();
  }
  return out;
}

inline void check_data_matches(const PanelData& data, const ModelSpec& spec) {
  if (data.p_x() != spec.p_x || data.p_w() != spec.p_w)
    throw InputError("covariate dimensions of the panel do not match the model specification");
  if (data.subjects.empty()) throw InputError("panel has no subjects");
  const auto report = validate_panel(data);
  if (!report.ok()) throw InputError("invalid panel:\n" + report.to_string());
}

/// Multistart EM. Returns the non-degenerate start with the highest
/// log-likelihood, in canonical label order.
inline FitResult fit(const PanelData& data, const ModelSpec& spec, const ProgressCallback& progress = {}) {
  spec.validate();
  check_data_matches(data, spec);

  std::vector<StartResult> runs(spec.em.n_starts);
  parallel_for(runs.size(), spec.em.workers, [&](size_t s) {
    runs[s] = run_em(data, spec, initial_parameters(data, spec, static_cast<int>(s)), static_cast<int>(s), progress);
  });

  FitResult out;
  out.spec = spec;
  int best = -1;
  for (size_t s = 0; s < runs.size(); ++s) {
    if (runs[s].degenerate) {
      ++out.degenerate_starts;
      continue;
    }
    if (best < 0 || runs[s].loglik > runs[best].loglik) best = static_cast<int>(s);
  }
  if (best < 0)
    throw DegenerateFit("all " + std::to_string(runs.size()) +
                        " starts were degenerate; consider smaller (G, K, H)");
  const StartResult& win = runs[best];
  out.theta_hat = canonicalize(win.params);
  out.loglik = win.loglik;
  out.n_iter = win.n_iter;
  out.converged = win.converged;
  out.loglik_trace = win.trace;
  out.start_index = best;
  out.n_params = count_free_parameters(spec);
  out.n_subjects = data.n_subjects();
  out.bic = -2.0 * out.loglik + out.n_params * std::log(static_cast<double>(out.n_subjects));
  out.aic = -2.0 * out.loglik + 2.0 * out.n_params;
  out.starts = std::move(runs);
  return out;
}

}  // namespace lmdrop
