#pragma once

// Synthetic panels drawn from the joint model, with the latent labels kept.

#include "lmdrop/chain.hpp"
#include "lmdrop/core.hpp"
#include "lmdrop/numeric.hpp"

#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace lmdrop {

struct SubjectTruth {
  std::string id;
  int v = 0;             // upper-level class, 0-based
  int u = 0;             // dropout class, 0-based
  std::vector<int> z;    // hidden states over the observed waves, 0-based
  int dropout_wave = 0;  // 1-based wave of the first R = 1, or 0 for completers
};

struct SimTruth {
  ParameterSet params;
  std::uint64_t seed = 0;
  std::vector<SubjectTruth> subjects;
};

/// Full-length (T rows) covariate matrices of one subject.
struct SubjectCovariates {
  Matrix x;
  Matrix w;
};

using CovariateGenerator = std::function<SubjectCovariates(int subject, int n_waves, std::mt19937_64& rng)>;

/// Wave offset 0..T-1 followed by `n_continuous` standard normal and
/// `n_binary` Bernoulli(p) columns, all drawn once per subject. The same
/// columns feed the response and dropout designs.
struct TimeAndBaseline {
  int n_continuous = 0;
  int n_binary = 1;
  double p = 0.5;

  int width() const { return 1 + n_continuous + n_binary; }

  std::vector<std::string> names() const {
    std::vector<std::string> out{"time"};
    for (int j = 0; j < n_continuous; ++j) out.push_back("c" + std::to_string(j + 1));
    for (int j = 0; j < n_binary; ++j) out.push_back("b" + std::to_string(j + 1));
    return out;
  }

  SubjectCovariates operator()(int, int n_waves, std::mt19937_64& rng) const {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::bernoulli_distribution coin(p);
    Vector fixed(n_continuous + n_binary);
    for (int j = 0; j < n_continuous; ++j) fixed(j) = normal(rng);
    for (int j = 0; j < n_binary; ++j) fixed(n_continuous + j) = coin(rng) ? 1.0 : 0.0;
    Matrix m(n_waves, width());
    for (int t = 0; t < n_waves; ++t) {
      m(t, 0) = t;
      m.row(t).tail(fixed.size()) = fixed.transpose();
    }
    return {m, m};
  }
};

namespace detail {

inline int draw_category(const Eigen::Ref<const Vector>& probs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng) * probs.sum();
  double acc = 0.0;
  for (Eigen::Index j = 0; j < probs.size(); ++j) {
    acc += probs(j);
    if (u < acc) return static_cast<int>(j);
  }
  return static_cast<int>(probs.size() - 1);
}

inline std::mt19937_64 subject_stream(std::uint64_t seed, int subject) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(subject), 0x5eedu};
  return std::mt19937_64(seq);
}

}  // namespace detail

struct SimulatedPanel {
  PanelData data;
  SimTruth truth;
};

/// Draws n subjects over T waves. Wave 1 is always observed; at later waves
/// the subject stays with probability logistic(xi_u + w'gamma), and the first
/// exit truncates the responses.
inline SimulatedPanel simulate_panel(const ParameterSet& params, const ModelSpec& spec, int n, int T,
                                     const CovariateGenerator& covariates, std::vector<std::string> x_names,
                                     std::vector<std::string> w_names, std::uint64_t seed) {
  check_conforms(params, spec);
  if (const auto bad = parameter_violations(params); !bad.empty())
    throw InputError("invalid generating parameters: " + bad.front());
  if (n < 1 || T < 1) throw InputError("need at least one subject and one wave");
  if (static_cast<int>(x_names.size()) != spec.p_x || static_cast<int>(w_names.size()) != spec.p_w)
    throw InputError("covariate names do not match the model dimensions");

  const ChainLaw law = build_chain_law(params);
  SimulatedPanel out;
  out.data.n_waves = T;
  out.data.x_names = std::move(x_names);
  out.data.w_names = std::move(w_names);
  out.data.subjects.resize(n);
  out.truth.params = params;
  out.truth.seed = seed;
  out.truth.subjects.resize(n);
  const double sd = std::sqrt(params.sigma2);

  for (int i = 0; i < n; ++i) {
    auto rng = detail::subject_stream(seed, i);
    SubjectCovariates cov = covariates(i, T, rng);
    if (cov.x.rows() != T || cov.x.cols() != spec.p_x || cov.w.rows() != T || cov.w.cols() != spec.p_w)
      throw InputError("covariate generator returned matrices of the wrong shape");
    SubjectTruth& truth = out.truth.subjects[i];
    truth.id = std::to_string(i + 1);
    truth.v = detail::draw_category(params.tau, rng);
    truth.u = detail::draw_category(params.pi.row(truth.v).transpose(), rng);

    std::vector<int> r{0};
    int observed = T;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int t = 1; t < T; ++t) {
      const double eta = params.xi(truth.u) + (spec.p_w ? cov.w.row(t).dot(params.gamma) : 0.0);
      const int rt = unif(rng) < logistic(eta) ? 0 : 1;
      r.push_back(rt);
      if (rt == 1) {
        observed = t;
        truth.dropout_wave = t + 1;
        break;
      }
    }

    std::normal_distribution<double> noise(0.0, sd);
    SubjectRecord& s = out.data.subjects[i];
    s.id = truth.id;
    s.y.resize(observed);
    truth.z.resize(observed);
    for (int t = 0; t < observed; ++t) {
      truth.z[t] = t == 0 ? detail::draw_category(law.delta.row(truth.v).transpose(), rng)
                          : detail::draw_category(law.Q[truth.v].row(truth.z[t - 1]).transpose(), rng);
      const double mean = params.zeta(truth.z[t]) + (spec.p_x ? cov.x.row(t).dot(params.beta) : 0.0);
      s.y(t) = mean + noise(rng);
    }
    s.r = std::move(r);
    s.x = cov.x.topRows(observed);
    s.w = cov.w.topRows(static_cast<Eigen::Index>(s.r.size()));
  }
  return out;
}

inline SimulatedPanel simulate_panel(const ParameterSet& params, const ModelSpec& spec, int n, int T,
                                     std::uint64_t seed, TimeAndBaseline design = {}) {
  if (spec.p_x != 0 && spec.p_x != design.width())
    throw InputError("default covariate design has " + std::to_string(design.width()) + " columns");
  if (spec.p_w != 0 && spec.p_w != design.width())
    throw InputError("default covariate design has " + std::to_string(design.width()) + " columns");
  const bool has_x = spec.p_x > 0;
  const bool has_w = spec.p_w > 0;
  auto gen = [design, has_x, has_w](int i, int waves, std::mt19937_64& rng) {
    SubjectCovariates c = design(i, waves, rng);
    if (!has_x) c.x.resize(waves, 0);
    if (!has_w) c.w.resize(waves, 0);
    return c;
  };
  return simulate_panel(params, spec, n, T, gen, has_x ? design.names() : std::vector<std::string>{},
                        has_w ? design.names() : std::vector<std::string>{}, seed);
}

/// Complete-data log-likelihood of a simulated panel at `p`, given the true labels.
inline double complete_data_loglik(const PanelData& data, const SimTruth& truth, const ParameterSet& p) {
  const ChainLaw law = build_chain_law(p);
  double total = 0.0;
  for (size_t i = 0; i < data.subjects.size(); ++i) {
    const SubjectRecord& s = data.subjects[i];
    const SubjectTruth& tr = truth.subjects[i];
    total += safe_log(p.tau(tr.v)) + safe_log(p.pi(tr.v, tr.u));
    for (int t = 0; t < s.n_observed(); ++t) {
      total += t == 0 ? safe_log(law.delta(tr.v, tr.z[0])) : safe_log(law.Q[tr.v](tr.z[t - 1], tr.z[t]));
      const double mean = p.zeta(tr.z[t]) + (p.beta.size() ? s.x.row(t).dot(p.beta) : 0.0);
      const double res = s.y(t) - mean;
      total += -0.5 * std::log(2.0 * std::numbers::pi * p.sigma2) - 0.5 * res * res / p.sigma2;
    }
    for (int t = 0; t < s.n_indicators(); ++t) {
      const double eta = p.xi(tr.u) + (p.gamma.size() ? s.w.row(t).dot(p.gamma) : 0.0);
      total += std::max(s.r[t] == 0 ? log_logistic(eta) : log_logistic(-eta), kLogMinProb);
    }
  }
  return total;
}

}  // namespace lmdrop
