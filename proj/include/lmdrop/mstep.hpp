#pragma once

// M-step blocks: closed-form mixture weights, global-logit chain parameters,
// ordered-intercept Gaussian regression and class-intercept logistic
// regression.

#include "lmdrop/chain.hpp"
#include "lmdrop/estep.hpp"

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace lmdrop {

// ---------------------------------------------------------------------------
// Mixture weights

struct MixtureUpdate {
  Vector tau;
  Matrix pi;
  bool degenerate = false;  // some upper-level class lost all its mass
};

inline MixtureUpdate m_step_mixture(const Posteriors& post, int H, int K) {
  MixtureUpdate out;
  out.tau = Vector::Zero(H);
  out.pi = Matrix::Zero(H, K);
  for (const auto& s : post.subjects) {
    out.tau += s.e;
    for (int h = 0; h < H; ++h) out.pi.row(h) += s.e(h) * s.d_cond.row(h);
  }
  const double n = static_cast<double>(post.subjects.size());
  for (int h = 0; h < H; ++h) {
    const double mass = out.pi.row(h).sum();
    if (mass < 1e-12) {
      out.degenerate = true;
      out.pi.row(h).setConstant(1.0 / K);
    } else {
      out.pi.row(h) /= mass;
    }
  }
  out.tau /= n;
  return out;
}

// ---------------------------------------------------------------------------
// Hidden chain

/// Expected initial-state and transition counts per upper-level class.
struct ChainStatistics {
  Matrix initial;                   // H x G
  std::vector<Matrix> transitions;  // H of G x G, row = previous state
};

inline ChainStatistics chain_statistics(const Posteriors& post, int G, int H) {
  ChainStatistics st;
  st.initial = Matrix::Zero(H, G);
  st.transitions.assign(H, Matrix::Zero(G, G));
  for (const auto& s : post.subjects) {
    for (int h = 0; h < H; ++h) {
      st.initial.row(h) += s.e(h) * s.a_cond[h].row(0);
      for (const auto& m : s.a_trans[h]) st.transitions[h] += s.e(h) * m;
    }
  }
  return st;
}

/// Weighted multinomial log-likelihood of ordered categories whose
/// cumulative logits are alpha_row + psi_h. Rows share the class shifts.
///
/// Free coordinates: for each row, (alpha_2, log-decrements) as in
/// thresholds_from_decrements; then psi_2..psi_H.
class GlobalLogitProblem {
public:
  /// `counts[h]` is R x G: one row of category counts per threshold row.
  explicit GlobalLogitProblem(std::vector<Matrix> counts)
      : counts_(std::move(counts)),
        H_(static_cast<int>(counts_.size())),
        R_(static_cast<int>(counts_.front().rows())),
        G_(static_cast<int>(counts_.front().cols())) {}

  int dim() const { return R_ * (G_ - 1) + (H_ - 1); }
  int rows() const { return R_; }

  Vector pack(const Matrix& alpha, const Vector& psi) const {
    Vector x(dim());
    for (int r = 0; r < R_; ++r)
      x.segment(r * (G_ - 1), G_ - 1) = decrements_from_thresholds(alpha.row(r).transpose());
    x.tail(H_ - 1) = psi;
    return x;
  }

  void unpack(const Vector& x, Matrix& alpha, Vector& psi) const {
    alpha.resize(R_, G_ - 1);
    for (int r = 0; r < R_; ++r)
      alpha.row(r) = thresholds_from_decrements(x.segment(r * (G_ - 1), G_ - 1)).transpose();
    psi = x.tail(H_ - 1);
  }

  double value(const Vector& x) const {
    Matrix alpha;
    Vector psi;
    unpack(x, alpha, psi);
    double f = 0.0;
    Vector p(G_);
    for (int h = 0; h < H_; ++h) {
      const double shift = h == 0 ? 0.0 : psi(h - 1);
      for (int r = 0; r < R_; ++r) {
        probabilities(alpha.row(r).transpose(), shift, p);
        for (int g = 0; g < G_; ++g)
          if (counts_[h](r, g) != 0.0) f += counts_[h](r, g) * safe_log(p(g));
      }
    }
    return f;
  }

  Vector gradient(const Vector& x) const {
    Matrix alpha;
    Vector psi;
    unpack(x, alpha, psi);
    Matrix d_alpha = Matrix::Zero(R_, G_ - 1);
    Vector d_psi = Vector::Zero(H_ - 1);
    Vector p(G_);
    for (int h = 0; h < H_; ++h) {
      const double shift = h == 0 ? 0.0 : psi(h - 1);
      for (int r = 0; r < R_; ++r) {
        probabilities(alpha.row(r).transpose(), shift, p);
        for (int j = 0; j < G_ - 1; ++j) {
          const double l = alpha(r, j) + shift;
          const double slope = logistic(l) * logistic(-l);
          const double pu = std::max(p(j + 1), kMinProb);
          const double pl = std::max(p(j), kMinProb);
          const double dl = slope * (counts_[h](r, j + 1) / pu - counts_[h](r, j) / pl);
          d_alpha(r, j) += dl;
          if (h > 0) d_psi(h - 1) += dl;
        }
      }
    }
    Vector grad(dim());
    for (int r = 0; r < R_; ++r) {
      const Vector free = x.segment(r * (G_ - 1), G_ - 1);
      // alpha_j = a - sum_{m <= j, m >= 1} exp(k_m)
      double tail = 0.0;
      for (int j = G_ - 2; j >= 0; --j) {
        tail += d_alpha(r, j);
        grad(r * (G_ - 1) + j) = j == 0 ? tail : -std::exp(free(j)) * tail;
      }
    }
    grad.tail(H_ - 1) = d_psi;
    return grad;
  }

  /// Keeps the free coordinates in a box where probabilities stay representable.
  void project(Vector& x) const {
    for (int r = 0; r < R_; ++r) {
      x(r * (G_ - 1)) = std::clamp(x(r * (G_ - 1)), -50.0, 50.0);
      for (int j = 1; j < G_ - 1; ++j) x(r * (G_ - 1) + j) = std::clamp(x(r * (G_ - 1) + j), -25.0, 4.0);
    }
    for (int h = 0; h < H_ - 1; ++h) x(R_ * (G_ - 1) + h) = std::clamp(x(R_ * (G_ - 1) + h), -50.0, 50.0);
  }

private:
  void probabilities(const Vector& alpha, double shift, Vector& p) const {
    p(0) = logistic(-(alpha(0) + shift));
    for (int g = 1; g + 1 < G_; ++g) p(g) = logistic_difference(alpha(g - 1) + shift, alpha(g) + shift);
    p(G_ - 1) = logistic(alpha(G_ - 2) + shift);
  }

  std::vector<Matrix> counts_;
  int H_;
  int R_;
  int G_;
};

struct InnerOptimum {
  Vector x;
  std::vector<double> trace;  // objective after each accepted step, starting value first
  int iterations = 0;
  bool converged = false;
};

/// Damped Newton ascent with a finite-difference Hessian of the analytic
/// gradient. Only objective-increasing steps are accepted.
template <class Problem>
InnerOptimum newton_ascent(const Problem& problem, Vector x, int max_iter = 50) {
  InnerOptimum out;
  double f = problem.value(x);
  out.trace.push_back(f);
  const int n = static_cast<int>(x.size());
  if (n == 0) {
    out.x = x;
    out.converged = true;
    return out;
  }
  for (int it = 0; it < max_iter; ++it) {
    out.iterations = it + 1;
    const Vector g = problem.gradient(x);
    if (g.lpNorm<Eigen::Infinity>() < 1e-9 * (1.0 + std::abs(f))) {
      out.converged = true;
      break;
    }
    Matrix hess(n, n);
    for (int j = 0; j < n; ++j) {
      const double step = 1e-5 * std::max(1.0, std::abs(x(j)));
      Vector xp = x, xm = x;
      xp(j) += step;
      xm(j) -= step;
      hess.col(j) = (problem.gradient(xp) - problem.gradient(xm)) / (2 * step);
    }
    Matrix A = -0.5 * (hess + hess.transpose());
    double lambda = 0.0;
    Vector d;
    for (int attempt = 0; attempt < 60; ++attempt) {
      Matrix B = A;
      B.diagonal().array() += lambda;
      Eigen::LDLT<Matrix> ldlt(B);
      if (ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0).all()) {
        d = ldlt.solve(g);
        if (d.allFinite()) break;
      }
      lambda = lambda == 0.0 ? 1e-8 * (1.0 + A.diagonal().cwiseAbs().maxCoeff()) : lambda * 10;
      d.resize(0);
    }
    if (d.size() == 0) d = g;
    if (d.lpNorm<Eigen::Infinity>() < 1e-9) break;
    bool accepted = false;
    double t = 1.0;
    for (int halving = 0; halving < 40; ++halving, t *= 0.5) {
      Vector trial = x + t * d;
      problem.project(trial);
      const double ft = problem.value(trial);
      if (std::isfinite(ft) && ft > f) {
        const double gain = ft - f;
        x = trial;
        f = ft;
        out.trace.push_back(f);
        accepted = true;
        if (gain < 1e-12 * (1.0 + std::abs(f))) out.converged = true;
        break;
      }
    }
    if (!accepted) {
      out.converged = true;  // no ascent direction left at working precision
      break;
    }
    if (out.converged) break;
  }
  out.x = x;
  return out;
}

struct ChainUpdate {
  Vector alpha0;
  Vector psi0;
  Matrix alpha1;
  Vector psi1;
  InnerOptimum initial;
  InnerOptimum transition;
};

/// Generalized M-step for the chain: ascends the expected complete-data
/// log-likelihood of the initial and transition probabilities.
inline ChainUpdate m_step_chain(const ChainStatistics& st, const ParameterSet& current, int max_inner = 50) {
  const int G = current.G();
  const int H = current.H();
  ChainUpdate out{current.alpha0, current.psi0, current.alpha1, current.psi1, {}, {}};
  if (G == 1) return out;

  std::vector<Matrix> c0(H), c1(H);
  for (int h = 0; h < H; ++h) {
    c0[h] = st.initial.row(h);
    c1[h] = st.transitions[h];
  }
  const GlobalLogitProblem p0(c0);
  Matrix a0 = current.alpha0.transpose();
  out.initial = newton_ascent(p0, p0.pack(a0, current.psi0), max_inner);
  p0.unpack(out.initial.x, a0, out.psi0);
  out.alpha0 = a0.row(0).transpose();

  const GlobalLogitProblem p1(c1);
  out.transition = newton_ascent(p1, p1.pack(current.alpha1, current.psi1), max_inner);
  p1.unpack(out.transition.x, out.alpha1, out.psi1);
  return out;
}

inline ChainUpdate m_step_chain(const Posteriors& post, const ParameterSet& current, int max_inner = 50) {
  return m_step_chain(chain_statistics(post, current.G(), current.H()), current, max_inner);
}

// ---------------------------------------------------------------------------
// Longitudinal regression with ordered state intercepts

struct LongitudinalUpdate {
  Vector beta;
  Vector zeta;
  double sigma2 = 0.0;
  bool pooled = false;  // some ordering constraints are active
};

/// Weighted Gaussian regression of stacked rows: row n contributes to state g
/// with weight `weights(n, g)`. Minimizes the weighted residual sum of squares
/// subject to zeta_1 <= .. <= zeta_G by searching over sets of tied adjacent
/// intercepts (the optimum is the best feasible equality-constrained fit).
inline LongitudinalUpdate fit_ordered_state_regression(const Vector& y, const Matrix& x,
                                                       const Matrix& weights,
                                                       const std::vector<std::string>& x_names = {}) {
  const int G = static_cast<int>(weights.cols());
  const int p = static_cast<int>(x.cols());
  const int m = G + p;
  if (G > 20) throw InputError("ordered state regression supports at most 20 states");

  Matrix N = Matrix::Zero(m, m);
  Vector b = Vector::Zero(m);
  const Vector W = weights.rowwise().sum();
  for (int g = 0; g < G; ++g) {
    N(g, g) = weights.col(g).sum();
    b(g) = weights.col(g).dot(y);
    if (p) N.block(g, G, 1, p) = weights.col(g).transpose() * x;
  }
  if (p) {
    const Matrix xw = x.array().colwise() * W.array();
    N.bottomRightCorner(p, p) = xw.transpose() * x;
    N.block(G, 0, p, G) = N.block(0, G, G, p).transpose();
    b.tail(p) = xw.transpose() * y;
  }

  struct Candidate {
    Vector zeta, beta;
    double rss = std::numeric_limits<double>::infinity();
    int groups = 0;
  };
  auto solve_pattern = [&](unsigned mask, Candidate& c) {
    // Tied pairs (j, j+1) for set bits j.
    std::vector<int> group(G);
    int ng = 0;
    for (int g = 0; g < G; ++g) {
      if (g > 0 && !(mask & (1u << (g - 1)))) ++ng;
      group[g] = ng;
    }
    ++ng;
    Matrix M = Matrix::Zero(m, ng + p);
    for (int g = 0; g < G; ++g) M(g, group[g]) = 1.0;
    for (int j = 0; j < p; ++j) M(G + j, ng + j) = 1.0;
    const Matrix Np = M.transpose() * N * M;
    const Vector bp = M.transpose() * b;
    Eigen::LDLT<Matrix> ldlt(Np);
    if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-13) return false;
    const Vector theta = ldlt.solve(bp);
    for (int k = 1; k < ng; ++k)
      if (theta(k) < theta(k - 1)) return false;
    c.zeta.resize(G);
    for (int g = 0; g < G; ++g) c.zeta(g) = theta(group[g]);
    c.beta = theta.tail(p);
    c.rss = -theta.dot(bp);  // up to the constant y'Wy
    c.groups = ng;
    return true;
  };

  Candidate best;
  bool found = solve_pattern(0u, best);
  bool pooled = false;
  if (!found) {
    for (unsigned mask = 1; mask < (1u << (G - 1)); ++mask) {
      Candidate c;
      if (!solve_pattern(mask, c)) continue;
      if (!found || c.rss < best.rss - 1e-12 * std::abs(best.rss) ||
          (std::abs(c.rss - best.rss) <= 1e-12 * std::abs(best.rss) && c.groups > best.groups)) {
        best = c;
        found = true;
      }
    }
    pooled = found;
  }
  if (!found) {
    // Name the columns that add no rank.
    std::string names;
    std::vector<int> kept;
    for (int j = 0; j < m; ++j) {
      std::vector<int> trial = kept;
      trial.push_back(j);
      Matrix sub(trial.size(), trial.size());
      for (size_t a = 0; a < trial.size(); ++a)
        for (size_t c = 0; c < trial.size(); ++c) sub(a, c) = N(trial[a], trial[c]);
      Eigen::FullPivLU<Matrix> lu(sub);
      lu.setThreshold(1e-10);
      if (lu.rank() == static_cast<Eigen::Index>(trial.size())) {
        kept = trial;
      } else {
        if (!names.empty()) names += ", ";
        names += j < G ? "state " + std::to_string(j + 1)
                       : (static_cast<size_t>(j - G) < x_names.size() ? x_names[j - G]
                                                                       : "x" + std::to_string(j - G + 1));
      }
    }
    throw NumericalError("singular weighted design in the longitudinal M-step; collinear columns: " + names);
  }

  LongitudinalUpdate out;
  out.beta = best.beta;
  out.zeta = best.zeta;
  out.pooled = pooled;
  double rss = 0.0;
  const Vector xb = p ? Vector(x * best.beta) : Vector::Zero(y.size());
  for (Eigen::Index n = 0; n < y.size(); ++n)
    for (int g = 0; g < G; ++g) {
      const double r = y(n) - best.zeta(g) - xb(n);
      rss += weights(n, g) * r * r;
    }
  out.sigma2 = std::max(rss / W.sum(), 1e-12);
  return out;
}

inline LongitudinalUpdate m_step_longitudinal(const PanelData& data, const Posteriors& post) {
  int rows = 0;
  for (const auto& s : data.subjects) rows += s.n_observed();
  const int G = static_cast<int>(post.subjects.front().a_marg.cols());
  Vector y(rows);
  Matrix x(rows, data.p_x());
  Matrix w(rows, G);
  int n = 0;
  for (size_t i = 0; i < data.subjects.size(); ++i) {
    const auto& s = data.subjects[i];
    const int T = s.n_observed();
    y.segment(n, T) = s.y;
    x.middleRows(n, T) = s.x;
    w.middleRows(n, T) = post.subjects[i].a_marg;
    n += T;
  }
  return fit_ordered_state_regression(y, x, w, data.x_names);
}

// ---------------------------------------------------------------------------
// Dropout regression with class intercepts

struct DropoutUpdate {
  Vector gamma;
  Vector xi;
  bool capped = false;  // a step was cut back at the linear-predictor cap
  int iterations = 0;
  double objective = 0.0;
};

inline constexpr double kLinearPredictorCap = 30.0;

/// Weighted logistic regression for P(R = 0) = logistic(xi_k + w'gamma) over
/// stacked rows, row n counting for class k with weight `weights(n, k)`.
/// Newton iterations with step halving; starts from (xi0, gamma0).
inline DropoutUpdate fit_class_logistic(const std::vector<int>& r, const Matrix& w, const Matrix& weights,
                                        const Vector& xi0, const Vector& gamma0, int max_iter = 100) {
  const int K = static_cast<int>(weights.cols());
  const int p = static_cast<int>(w.cols());
  const int m = K + p;
  const Eigen::Index N = weights.rows();

  auto objective = [&](const Vector& xi, const Vector& gamma, double* max_eta) {
    double f = 0.0;
    double biggest = 0.0;
    const Vector wg = p ? Vector(w * gamma) : Vector::Zero(N);
    for (Eigen::Index n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k) {
        const double om = weights(n, k);
        if (om == 0.0) continue;
        const double eta = xi(k) + wg(n);
        biggest = std::max(biggest, std::abs(eta));
        f += om * std::max(r[n] == 0 ? log_logistic(eta) : log_logistic(-eta), kLogMinProb);
      }
    if (max_eta) *max_eta = biggest;
    return f;
  };

  Eigen::ArrayXd stay(N);
  for (Eigen::Index n = 0; n < N; ++n) stay(n) = r[n] == 0 ? 1.0 : 0.0;

  DropoutUpdate out;
  out.xi = xi0;
  out.gamma = gamma0;
  double current_max = 0.0;
  double f = objective(out.xi, out.gamma, &current_max);
  const double cap = std::max(kLinearPredictorCap, current_max);

  for (int it = 0; it < max_iter; ++it) {
    out.iterations = it + 1;
    Vector grad = Vector::Zero(m);
    Matrix info = Matrix::Zero(m, m);
    const Vector wg = p ? Vector(w * out.gamma) : Vector::Zero(N);
    for (int k = 0; k < K; ++k) {
      const auto om = weights.col(k).array();
      const Eigen::ArrayXd mu = (out.xi(k) + wg.array()).unaryExpr([](double e) { return logistic(e); });
      const Eigen::ArrayXd resid = om * (stay - mu);
      const Eigen::ArrayXd curv = om * mu * (1.0 - mu);
      grad(k) = resid.sum();
      info(k, k) = curv.sum();
      if (p) {
        grad.tail(p) += w.transpose() * resid.matrix();
        const Vector cross = w.transpose() * curv.matrix();
        info.block(K, k, p, 1) = cross;
        info.block(k, K, 1, p) = cross.transpose();
        info.bottomRightCorner(p, p) += w.transpose() * curv.matrix().asDiagonal() * w;
      }
    }
    if (grad.lpNorm<Eigen::Infinity>() == 0.0) break;
    Eigen::LDLT<Matrix> ldlt(info);
    Vector d;
    if (ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 1e-14 * (1.0 + info.diagonal().maxCoeff())).all()) {
      d = ldlt.solve(grad);
    } else {
      Matrix ridge = info;
      ridge.diagonal().array() += 1e-6 * (1.0 + info.diagonal().maxCoeff());
      d = ridge.ldlt().solve(grad);
    }
    bool accepted = false;
    double t = 1.0;
    for (int halving = 0; halving < 50; ++halving, t *= 0.5) {
      const Vector xi = out.xi + t * d.head(K);
      const Vector gamma = out.gamma + t * d.tail(p);
      double mx = 0.0;
      const double ft = objective(xi, gamma, &mx);
      if (mx > cap) {
        out.capped = true;
        continue;
      }
      if (std::isfinite(ft) && ft >= f) {
        out.xi = xi;
        out.gamma = gamma;
        f = ft;
        accepted = true;
        break;
      }
    }
    // Under separation the objective flattens while full Newton steps stay
    // large, so convergence is judged on the step length.
    if (!accepted || t * d.lpNorm<Eigen::Infinity>() < 1e-9) break;
  }
  out.objective = f;
  return out;
}

/// Stacks the (i, t, k) rows of the dropout regression. Rows sharing the same
/// indicator and covariate values are merged with summed weights, which keeps
/// the Newton iterations cheap for discrete designs.
inline DropoutUpdate m_step_dropout(const PanelData& data, const Posteriors& post, const ParameterSet& current) {
  const int K = current.K();
  const int p = data.p_w();
  Eigen::Index total = 0;
  for (const auto& s : data.subjects) total += s.n_indicators();
  Matrix keys(total, 1 + p);
  Matrix acc(total, K);
  Eigen::Index n = 0;
  for (size_t i = 0; i < data.subjects.size(); ++i) {
    const auto& s = data.subjects[i];
    for (int t = 0; t < s.n_indicators(); ++t, ++n) {
      keys(n, 0) = s.r[t];
      if (p) keys.row(n).tail(p) = s.w.row(t);
      acc.row(n) = post.subjects[i].d_marg.transpose();
    }
  }
  std::vector<Eigen::Index> order(total);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  auto less = [&](Eigen::Index a, Eigen::Index b) {
    for (int j = 0; j <= p; ++j)
      if (keys(a, j) != keys(b, j)) return keys(a, j) < keys(b, j);
    return false;
  };
  std::stable_sort(order.begin(), order.end(), less);

  std::vector<Eigen::Index> first;
  for (Eigen::Index m = 0; m < total; ++m)
    if (m == 0 || less(order[m - 1], order[m])) first.push_back(m);
  const auto rows = static_cast<Eigen::Index>(first.size());
  std::vector<int> r(rows);
  Matrix w(rows, p);
  Matrix weights = Matrix::Zero(rows, K);
  for (Eigen::Index u = 0; u < rows; ++u) {
    const Eigen::Index end = u + 1 < rows ? first[u + 1] : total;
    const Eigen::Index lead = order[first[u]];
    r[u] = static_cast<int>(keys(lead, 0));
    if (p) w.row(u) = keys.row(lead).tail(p);
    for (Eigen::Index m = first[u]; m < end; ++m) weights.row(u) += acc.row(order[m]);
  }
  return fit_class_logistic(r, w, weights, current.xi, current.gamma);
}

}  // namespace lmdrop
