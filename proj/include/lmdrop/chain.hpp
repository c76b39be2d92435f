#pragma once

// Global-logit construction of the initial and transition probabilities of
// the hidden chain, per upper-level class.

#include "lmdrop/core.hpp"
#include "lmdrop/numeric.hpp"

#include <optional>
#include <stdexcept>
#include <vector>

namespace lmdrop {

/// Initial distribution (one row per upper-level class) and transition
/// matrices (one per class; row = previous state).
struct ChainLaw {
  Matrix delta;
  std::vector<Matrix> Q;

  int G() const { return static_cast<int>(delta.cols()); }
  int H() const { return static_cast<int>(delta.rows()); }
};

/// Probabilities of G ordered levels whose cumulative logits
/// log P(Z >= g) / P(Z < g) equal alphas(g-2) + psi for g = 2..G.
/// `alphas` must be strictly decreasing.
inline Vector invert_global_logit(const Vector& alphas, double psi) {
  const Eigen::Index G = alphas.size() + 1;
  for (Eigen::Index j = 1; j < alphas.size(); ++j) {
    if (!(alphas(j) < alphas(j - 1)))
      throw std::domain_error("global-logit thresholds must be strictly decreasing");
  }
  Vector p(G);
  if (G == 1) {
    p(0) = 1.0;
    return p;
  }
  p(0) = logistic(-(alphas(0) + psi));
  for (Eigen::Index g = 1; g + 1 < G; ++g)
    p(g) = logistic_difference(alphas(g - 1) + psi, alphas(g) + psi);
  p(G - 1) = logistic(alphas(G - 2) + psi);
  return p;
}

/// Cumulative logits of a probability vector at thresholds g = 2..G, or
/// nullopt when some threshold has probability 0 or 1 on one side.
inline std::optional<Vector> cumulative_logits(const Vector& probs) {
  const Eigen::Index G = probs.size();
  Vector out(std::max<Eigen::Index>(G - 1, 0));
  double below = 0.0;
  for (Eigen::Index g = 1; g < G; ++g) {
    below += probs(g - 1);
    const double above = probs.tail(G - g).sum();
    if (!(below > 0) || !(above > 0)) return std::nullopt;
    out(g - 1) = std::log(above) - std::log(below);
  }
  return out;
}

// Free parameterization of a strictly decreasing threshold vector:
// (a, k_3, .., k_G) with alpha_2 = a and alpha_g = alpha_{g-1} - exp(k_g).

inline Vector thresholds_from_decrements(const Vector& free) {
  Vector alpha(free.size());
  if (free.size() == 0) return alpha;
  alpha(0) = free(0);
  for (Eigen::Index j = 1; j < free.size(); ++j) alpha(j) = alpha(j - 1) - std::exp(free(j));
  return alpha;
}

inline Vector decrements_from_thresholds(const Vector& alpha) {
  Vector free(alpha.size());
  if (alpha.size() == 0) return free;
  free(0) = alpha(0);
  for (Eigen::Index j = 1; j < alpha.size(); ++j) {
    const double gap = alpha(j - 1) - alpha(j);
    if (!(gap > 0)) throw std::domain_error("global-logit thresholds must be strictly decreasing");
    free(j) = std::log(gap);
  }
  return free;
}

inline ChainLaw build_chain_law(const Vector& alpha0, const Vector& psi0, const Matrix& alpha1,
                                const Vector& psi1, int G, int H) {
  if (alpha0.size() != G - 1 || psi0.size() != H - 1 || alpha1.rows() != G ||
      alpha1.cols() != G - 1 || psi1.size() != H - 1)
    throw InputError("chain parameters do not match (G, H)");
  ChainLaw law;
  law.delta.resize(H, G);
  law.Q.assign(H, Matrix(G, G));
  for (int h = 0; h < H; ++h) {
    const double s0 = h == 0 ? 0.0 : psi0(h - 1);
    const double s1 = h == 0 ? 0.0 : psi1(h - 1);
    law.delta.row(h) = invert_global_logit(alpha0, s0).transpose();
    for (int prev = 0; prev < G; ++prev)
      law.Q[h].row(prev) = invert_global_logit(alpha1.row(prev).transpose(), s1).transpose();
  }
  return law;
}

inline ChainLaw build_chain_law(const ParameterSet& p) {
  return build_chain_law(p.alpha0, p.psi0, p.alpha1, p.psi1, p.G(), p.H());
}

/// Cumulative logits of one row of the law: the initial distribution of
/// class h when `previous_state` is empty, otherwise the transition row.
inline std::optional<Vector> chain_law_logits(const ChainLaw& law, int h,
                                              std::optional<int> previous_state = std::nullopt) {
  if (previous_state) return cumulative_logits(law.Q.at(h).row(*previous_state).transpose());
  return cumulative_logits(law.delta.row(h).transpose());
}

}  // namespace lmdrop
