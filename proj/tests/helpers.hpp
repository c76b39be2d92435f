#pragma once

// Random instances shared by the test binaries.

#include "lmdrop/core.hpp"

#include <algorithm>
#include <functional>
#include <random>
#include <string>

namespace lmdrop::testing {

inline Vector random_simplex(int n, std::mt19937_64& rng, double floor = 0.05) {
  std::gamma_distribution<double> draw(2.0, 1.0);
  Vector v(n);
  for (int j = 0; j < n; ++j) v(j) = draw(rng) + floor;
  return v / v.sum();
}

inline Vector random_decreasing(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> top(0.5, 1.0);
  std::normal_distribution<double> step(-0.3, 0.6);
  Vector a(n);
  for (int j = 0; j < n; ++j) a(j) = j == 0 ? top(rng) : a(j - 1) - std::exp(step(rng));
  return a;
}

inline ParameterSet random_parameters(const ModelSpec& spec, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  ParameterSet p = ParameterSet::zeros(spec);
  for (int j = 0; j < spec.p_x; ++j) p.beta(j) = 0.5 * n01(rng);
  for (int g = 0; g < spec.G; ++g) p.zeta(g) = 1.5 * n01(rng);
  std::sort(p.zeta.data(), p.zeta.data() + spec.G);
  p.sigma2 = 0.3 + 1.5 * unif(rng);
  for (int j = 0; j < spec.p_w; ++j) p.gamma(j) = 0.5 * n01(rng);
  for (int k = 0; k < spec.K; ++k) p.xi(k) = 1.0 + n01(rng);
  std::sort(p.xi.data(), p.xi.data() + spec.K);
  p.alpha0 = random_decreasing(spec.G - 1, rng);
  for (int r = 0; r < spec.G; ++r) p.alpha1.row(r) = random_decreasing(spec.G - 1, rng).transpose();
  for (int h = 0; h < spec.H - 1; ++h) {
    p.psi0(h) = n01(rng);
    p.psi1(h) = n01(rng);
  }
  p.tau = random_simplex(spec.H, rng);
  for (int h = 0; h < spec.H; ++h) p.pi.row(h) = random_simplex(spec.K, rng).transpose();
  return p;
}

/// Panel with random monotone dropout, standard normal responses and
/// covariates; wave 1 is always observed.
inline PanelData random_panel(int n, int T, int p_x, int p_w, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_int_distribution<int> waves(1, T);
  std::bernoulli_distribution drop(0.6);
  PanelData d;
  d.n_waves = T;
  for (int j = 0; j < p_x; ++j) d.x_names.push_back("x" + std::to_string(j + 1));
  for (int j = 0; j < p_w; ++j) d.w_names.push_back("w" + std::to_string(j + 1));
  for (int i = 0; i < n; ++i) {
    SubjectRecord s;
    s.id = "s" + std::to_string(i + 1);
    int Ti = waves(rng);
    if (Ti < T && !drop(rng)) Ti = T;
    const int Tstar = std::min(Ti + 1, T);
    s.y.resize(Ti);
    for (int t = 0; t < Ti; ++t) s.y(t) = n01(rng);
    s.r.assign(Tstar, 0);
    if (Ti < T) s.r.back() = 1;
    s.x.resize(Ti, p_x);
    for (int t = 0; t < Ti; ++t)
      for (int j = 0; j < p_x; ++j) s.x(t, j) = n01(rng);
    s.w.resize(Tstar, p_w);
    for (int t = 0; t < Tstar; ++t)
      for (int j = 0; j < p_w; ++j) s.w(t, j) = n01(rng);
    d.subjects.push_back(std::move(s));
  }
  return d;
}

inline ModelSpec small_spec(int G, int K, int H, int p_x, int p_w) {
  ModelSpec s;
  s.G = G;
  s.K = K;
  s.H = H;
  s.p_x = p_x;
  s.p_w = p_w;
  return s;
}

}  // namespace lmdrop::testing
