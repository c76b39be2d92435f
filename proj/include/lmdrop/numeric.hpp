#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

namespace lmdrop {

/// Probabilities are kept inside [kMinProb, kMaxProb] before taking logs.
inline constexpr double kMinProb = 1e-300;
inline constexpr double kMaxProb = 1.0 - 1e-15;
inline constexpr double kLogMinProb = -690.77552789821368;  // log(1e-300)

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(logistic(x)) without overflow for large |x|.
inline double log_logistic(double x) {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

/// logistic(a) - logistic(b) for a >= b, accurate when both are close to 0 or 1.
inline double logistic_difference(double a, double b) {
  return logistic(a) * logistic(-b) * -std::expm1(b - a);
}

inline double safe_log(double p) {
  return std::log(std::clamp(p, kMinProb, kMaxProb));
}

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  if (!std::isfinite(m)) return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace lmdrop
