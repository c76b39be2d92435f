#pragma once

// Exhaustive enumeration of (h, z-path, k) for small instances. Used as an
// independent reference for the recursions.

#include "lmdrop/chain.hpp"
#include "lmdrop/estep.hpp"
#include "lmdrop/likelihood.hpp"

#include <cmath>
#include <vector>

namespace lmdrop {

inline constexpr double kBruteForceLimit = 1e7;

namespace detail {

inline void check_enumerable(const SubjectRecord& s, const ParameterSet& p) {
  const double cells = std::pow(double(p.G()), s.n_observed()) * p.K() * p.H();
  if (cells > kBruteForceLimit)
    throw InputError("instance too large for enumeration: subject '" + s.id + "' needs " +
                     std::to_string(cells) + " terms");
}

/// Log joint density of the subject's data with every latent configuration,
/// passed to `visit(h, path, k, log_term)`.
template <class Visit>
void enumerate_configurations(const SubjectRecord& s, const ParameterSet& p, const ChainLaw& law, Visit&& visit) {
  check_enumerable(s, p);
  const int G = p.G(), K = p.K(), H = p.H(), T = s.n_observed();
  std::vector<int> path(T, 0);
  std::vector<double> emis(T * G);
  for (int t = 0; t < T; ++t)
    for (int g = 0; g < G; ++g) emis[t * G + g] = emission_logdensity(s.y(t), g, p, s.x.row(t).transpose());
  std::vector<double> drop(K, 0.0);
  for (int k = 0; k < K; ++k)
    for (int t = 0; t < s.n_indicators(); ++t) drop[k] += dropout_logdensity(s.r[t], k, p, s.w.row(t).transpose());

  long long n_paths = 1;
  for (int t = 0; t < T; ++t) n_paths *= G;
  for (int h = 0; h < H; ++h) {
    for (long long code = 0; code < n_paths; ++code) {
      long long c = code;
      for (int t = 0; t < T; ++t) {
        path[t] = static_cast<int>(c % G);
        c /= G;
      }
      double chain = std::log(law.delta(h, path[0])) + emis[path[0]];
      for (int t = 1; t < T; ++t) chain += std::log(law.Q[h](path[t - 1], path[t])) + emis[t * G + path[t]];
      for (int k = 0; k < K; ++k)
        visit(h, path, k, std::log(p.tau(h)) + chain + std::log(p.pi(h, k)) + drop[k]);
    }
  }
}

}  // namespace detail

inline double brute_force_subject_loglik(const SubjectRecord& s, const ParameterSet& p, const ChainLaw& law) {
  std::vector<double> terms;
  detail::enumerate_configurations(s, p, law,
                                   [&](int, const std::vector<int>&, int, double v) { terms.push_back(v); });
  return log_sum_exp(terms);
}

inline double brute_force_loglik(const PanelData& data, const ParameterSet& p, const ModelSpec& spec) {
  check_conforms(p, spec);
  const ChainLaw law = build_chain_law(p);
  double total = 0.0;
  for (const auto& s : data.subjects) total += brute_force_subject_loglik(s, p, law);
  return total;
}

/// Posterior blocks obtained by normalizing the full joint table.
inline SubjectPosterior brute_force_subject_posterior(const SubjectRecord& s, const ParameterSet& p,
                                                      const ChainLaw& law) {
  const int G = p.G(), K = p.K(), H = p.H(), T = s.n_observed();
  const double total = brute_force_subject_loglik(s, p, law);
  SubjectPosterior out;
  out.loglik = total;
  out.e = Vector::Zero(H);
  out.d_cond = Matrix::Zero(H, K);
  out.d_marg = Vector::Zero(K);
  out.a_marg = Matrix::Zero(T, G);
  out.a_cond.assign(H, Matrix::Zero(T, G));
  out.a_trans.assign(H, std::vector<Matrix>(std::max(T - 1, 0), Matrix::Zero(G, G)));
  detail::enumerate_configurations(s, p, law, [&](int h, const std::vector<int>& path, int k, double v) {
    const double w = std::exp(v - total);
    out.e(h) += w;
    out.d_cond(h, k) += w;
    out.d_marg(k) += w;
    for (int t = 0; t < T; ++t) {
      out.a_marg(t, path[t]) += w;
      out.a_cond[h](t, path[t]) += w;
      if (t > 0) out.a_trans[h][t - 1](path[t - 1], path[t]) += w;
    }
  });
  for (int h = 0; h < H; ++h) {
    out.d_cond.row(h) /= out.e(h);
    out.a_cond[h] /= out.e(h);
    for (auto& m : out.a_trans[h]) m /= out.e(h);
  }
  return out;
}

inline Posteriors brute_force_posteriors(const PanelData& data, const ParameterSet& p, const ModelSpec& spec) {
  check_conforms(p, spec);
  const ChainLaw law = build_chain_law(p);
  Posteriors post;
  for (const auto& s : data.subjects) {
    post.subjects.push_back(brute_force_subject_posterior(s, p, law));
    post.loglik += post.subjects.back().loglik;
  }
  return post;
}

}  // namespace lmdrop
