#pragma once

// Posterior expectations of the latent indicators given the data and the
// current parameters.

#include "lmdrop/chain.hpp"
#include "lmdrop/likelihood.hpp"

#include <vector>

namespace lmdrop {

struct SubjectPosterior {
  Matrix a_marg;                             // T_i x G
  std::vector<Matrix> a_cond;                // H of T_i x G
  std::vector<std::vector<Matrix>> a_trans;  // H of (T_i - 1) G x G, row = previous state
  Matrix d_cond;                             // H x K
  Vector d_marg;                             // K
  Vector e;                                  // H
  double loglik = 0.0;
};

struct Posteriors {
  std::vector<SubjectPosterior> subjects;
  double loglik = 0.0;
};

template <class Rescale = SumToOne>
SubjectPosterior subject_posterior(const SubjectRecord& s, const ParameterSet& p,
                                   const ChainLaw& law, Process process = Process::joint) {
  const int H = p.H();
  const int G = p.G();
  const int K = p.K();
  const int T = s.n_observed();
  const bool use_y = detail::uses_longitudinal(process);

  SubjectPosterior out;
  out.a_cond.resize(H);
  out.a_trans.resize(H);
  Vector longitudinal = Vector::Zero(H);
  // With responses ignored every emission is 1 and the posterior state law is the prior chain.
  const ScaledEmission em = scale_emission(use_y ? emission_logdensities(s, p) : Matrix::Zero(T, G));
  Vector fb(G);
  for (int h = 0; h < H; ++h) {
    LatticeSlice slice = forward_pass<Rescale>(em, law.delta.row(h).transpose(), law.Q[h], s.id);
    backward_pass(slice, em, law.Q[h]);
    longitudinal(h) = slice.log_normalizer;
    out.a_cond[h] = (slice.forward.array() * slice.backward.array()) / slice.terminal;
    out.a_trans[h].resize(std::max(T - 1, 0));
    for (int t = 1; t < T; ++t) {
      fb = em.density.row(t).transpose().cwiseProduct(slice.backward.row(t).transpose());
      out.a_trans[h][t - 1].noalias() =
          (slice.forward.row(t - 1).transpose() * fb.transpose()).cwiseProduct(law.Q[h]) /
          (slice.scale(t) * slice.terminal);
    }
  }
  const Vector dropout = detail::uses_dropout(process) ? dropout_class_logliks(s, p) : Vector::Zero(K);
  const SubjectLikelihood lik = detail::combine(longitudinal, dropout, p, process);
  if (!std::isfinite(lik.loglik))
    throw NumericalError("degenerate posterior for subject '" + s.id + "'");
  out.loglik = lik.loglik;

  out.e.resize(H);
  out.d_cond.resize(H, K);
  for (int h = 0; h < H; ++h) {
    std::vector<double> row(K);
    for (int k = 0; k < K; ++k) row[k] = lik.joint(h, k);
    const double row_lse = log_sum_exp(row);
    out.e(h) = std::exp(row_lse - lik.loglik);
    for (int k = 0; k < K; ++k) out.d_cond(h, k) = std::exp(row[k] - row_lse);
  }
  out.a_marg = Matrix::Zero(T, G);
  out.d_marg = Vector::Zero(K);
  for (int h = 0; h < H; ++h) {
    out.a_marg += out.e(h) * out.a_cond[h];
    out.d_marg += out.e(h) * out.d_cond.row(h).transpose();
  }
  return out;
}

inline Posteriors e_step(const PanelData& data, const ParameterSet& p, const ModelSpec& spec) {
  check_conforms(p, spec);
  const ChainLaw law = build_chain_law(p);
  Posteriors post;
  post.subjects.reserve(data.subjects.size());
  for (const auto& s : data.subjects) {
    post.subjects.push_back(subject_posterior(s, p, law, spec.process));
    post.loglik += post.subjects.back().loglik;
  }
  return post;
}

}  // namespace lmdrop
