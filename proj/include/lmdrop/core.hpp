#pragma once

// Shared data model: panel records, model specification, parameter set and
// the validation every other module relies on.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lmdrop {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Malformed or inconsistent user input (files, dimensions, configuration).
class InputError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Numerical breakdown inside the likelihood or an optimizer.
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Every start of a fit collapsed onto the boundary of the parameter space.
class DegenerateFit : public NumericalError {
public:
  using NumericalError::NumericalError;
};

/// No fit reached the convergence tolerance where one was required.
class NotConverged : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Panel data

/// One subject in long format, truncated at its monotone dropout.
///
/// `y` and the rows of `x` cover the T_i observed waves; `r` and the rows of
/// `w` cover the T_i* = min(T_i + 1, T) waves that enter the dropout model.
struct SubjectRecord {
  std::string id;
  Vector y;
  std::vector<int> r;
  Matrix x;
  Matrix w;

  int n_observed() const { return static_cast<int>(y.size()); }
  int n_indicators() const { return static_cast<int>(r.size()); }
};

struct PanelData {
  int n_waves = 0;
  std::vector<std::string> x_names;
  std::vector<std::string> w_names;
  std::vector<SubjectRecord> subjects;

  int n_subjects() const { return static_cast<int>(subjects.size()); }
  int p_x() const { return static_cast<int>(x_names.size()); }
  int p_w() const { return static_cast<int>(w_names.size()); }
};

/// T_i* for a subject with `observed` responses out of `n_waves` planned.
inline int indicator_length(int observed, int n_waves) {
  return std::min(observed + 1, n_waves);
}

inline bool is_completer(const SubjectRecord& s, int n_waves) {
  return s.n_observed() == n_waves;
}

struct Violation {
  std::string subject_id;
  int wave = 0;  // 1-based; 0 when the problem is not tied to one wave
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  int completers = 0;
  int dropouts = 0;

  bool ok() const { return violations.empty(); }

  std::string to_string() const {
    std::ostringstream os;
    for (const auto& v : violations) {
      os << "subject " << v.subject_id;
      if (v.wave > 0) os << " wave " << v.wave;
      os << ": " << v.message << '\n';
    }
    return os.str();
  }
};

namespace detail {

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace detail

/// Collects every invariant violation in the panel. Never throws.
inline ValidationReport validate_panel(const PanelData& data) {
  ValidationReport report;
  auto add = [&](const SubjectRecord& s, int wave, std::string msg) {
    report.violations.push_back({s.id, wave, std::move(msg)});
  };
  const int T = data.n_waves;
  if (T < 1) {
    report.violations.push_back({"", 0, "panel has no waves"});
    return report;
  }
  for (const auto& s : data.subjects) {
    const int n_obs = s.n_observed();
    const int n_ind = s.n_indicators();
    bool monotone = true;
    int first_one = -1;
    for (int t = 0; t < n_ind; ++t) {
      if (s.r[t] != 0 && s.r[t] != 1) {
        add(s, t + 1, "missingness indicator is not binary");
        monotone = false;
        continue;
      }
      if (s.r[t] == 1 && first_one < 0) first_one = t;
      if (s.r[t] == 0 && first_one >= 0) {
        add(s, t + 1, "non-monotone missingness");
        monotone = false;
      }
    }
    if (first_one >= 0 && first_one != n_ind - 1 && monotone) {
      add(s, first_one + 2, "indicators continue past the dropout wave");
    }
    if (n_obs < 1) {
      add(s, 0, "no observed responses");
    } else if (n_obs > T) {
      add(s, 0, "more responses than planned waves");
    } else {
      const int expected = indicator_length(n_obs, T);
      if (n_ind != expected) {
        add(s, 0, "expected " + std::to_string(expected) +
                      " missingness indicators, found " + std::to_string(n_ind));
      } else if (monotone) {
        if (n_obs < T && (first_one != n_obs)) {
          add(s, n_obs + 1, "dropout wave must carry indicator 1");
        }
        if (n_obs == T && first_one >= 0) {
          add(s, first_one + 1, "completer has a dropout indicator");
        }
      }
    }
    if (!s.y.allFinite()) add(s, 0, "non-finite response");
    if (s.x.rows() != n_obs || s.x.cols() != data.p_x()) {
      add(s, 0, "longitudinal design is " + std::to_string(s.x.rows()) + "x" +
                    std::to_string(s.x.cols()) + ", expected " + std::to_string(n_obs) +
                    "x" + std::to_string(data.p_x()));
    } else if (!detail::all_finite(s.x)) {
      add(s, 0, "missing longitudinal covariate");
    }
    if (s.w.rows() != n_ind || s.w.cols() != data.p_w()) {
      add(s, 0, "dropout design is " + std::to_string(s.w.rows()) + "x" +
                    std::to_string(s.w.cols()) + ", expected " + std::to_string(n_ind) +
                    "x" + std::to_string(data.p_w()));
    } else if (!detail::all_finite(s.w)) {
      add(s, 0, "missing dropout covariate");
    }
    if (n_obs == T) {
      ++report.completers;
    } else {
      ++report.dropouts;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Model specification

enum class ConvergenceNorm { loglik, parameters };

/// Which factors of the joint likelihood are active. `longitudinal` and
/// `dropout` fit one process while ignoring the other (used to check the
/// factorization of the ignorable H = 1 model).
enum class Process { joint, longitudinal, dropout };

struct EmControls {
  int max_iter = 1000;
  double tol = 1e-6;
  ConvergenceNorm norm = ConvergenceNorm::loglik;
  int n_starts = 50;
  std::uint64_t seed = 20240917;
  int workers = 0;  // 0: hardware concurrency
};

struct ModelSpec {
  int G = 1;
  int K = 1;
  int H = 1;
  int p_x = 0;
  int p_w = 0;
  Process process = Process::joint;
  EmControls em;

  void validate() const {
    if (G < 1 || K < 1 || H < 1) throw InputError("G, K and H must all be at least 1");
    if (p_x < 0 || p_w < 0) throw InputError("covariate dimensions must be nonnegative");
    if (!(em.tol > 0)) throw InputError("convergence tolerance must be positive");
    if (em.n_starts < 1) throw InputError("at least one start is required");
    if (em.max_iter < 1) throw InputError("max iterations must be at least 1");
  }
};

inline ModelSpec make_spec(const PanelData& data, int G, int K, int H, EmControls em = {}) {
  ModelSpec spec;
  spec.G = G;
  spec.K = K;
  spec.H = H;
  spec.p_x = data.p_x();
  spec.p_w = data.p_w();
  spec.em = em;
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Parameters

/// All model parameters on their natural scale.
///
/// Chain parameters follow the global-logit construction: `alpha0` holds the
/// initial-state thresholds g = 2..G, `alpha1` one row of thresholds per
/// previous state, and `psi0`/`psi1` the shifts of upper-level classes
/// 2..H (class 1 is the reference with zero shift).
struct ParameterSet {
  Vector beta;
  Vector zeta;
  double sigma2 = 1.0;
  Vector gamma;
  Vector xi;
  Vector alpha0;
  Vector psi0;
  Matrix alpha1;
  Vector psi1;
  Matrix pi;
  Vector tau;

  int G() const { return static_cast<int>(zeta.size()); }
  int K() const { return static_cast<int>(xi.size()); }
  int H() const { return static_cast<int>(tau.size()); }

  /// Shift of class h (0-based) on the initial-state logit scale.
  double initial_shift(int h) const { return h == 0 ? 0.0 : psi0(h - 1); }
  double transition_shift(int h) const { return h == 0 ? 0.0 : psi1(h - 1); }

  static ParameterSet zeros(const ModelSpec& spec) {
    ParameterSet p;
    p.beta = Vector::Zero(spec.p_x);
    p.zeta = Vector::Zero(spec.G);
    p.gamma = Vector::Zero(spec.p_w);
    p.xi = Vector::Zero(spec.K);
    p.alpha0 = Vector::Zero(spec.G - 1);
    p.psi0 = Vector::Zero(spec.H - 1);
    p.alpha1 = Matrix::Zero(spec.G, spec.G - 1);
    p.psi1 = Vector::Zero(spec.H - 1);
    p.pi = Matrix::Constant(spec.H, spec.K, 1.0 / spec.K);
    p.tau = Vector::Constant(spec.H, 1.0 / spec.H);
    return p;
  }
};

inline bool operator==(const ParameterSet& a, const ParameterSet& b) {
  auto same = [](const auto& u, const auto& v) {
    return u.rows() == v.rows() && u.cols() == v.cols() && (u.array() == v.array()).all();
  };
  return same(a.beta, b.beta) && same(a.zeta, b.zeta) && a.sigma2 == b.sigma2 &&
         same(a.gamma, b.gamma) && same(a.xi, b.xi) && same(a.alpha0, b.alpha0) &&
         same(a.psi0, b.psi0) && same(a.alpha1, b.alpha1) && same(a.psi1, b.psi1) &&
         same(a.pi, b.pi) && same(a.tau, b.tau);
}

/// Throws InputError if any block does not match the model dimensions.
inline void check_conforms(const ParameterSet& p, const ModelSpec& s) {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw InputError(std::string("parameter block '") + what + "' does not match the model dimensions");
  };
  need(p.beta.size() == s.p_x, "beta");
  need(p.zeta.size() == s.G, "zeta");
  need(p.gamma.size() == s.p_w, "gamma");
  need(p.xi.size() == s.K, "xi");
  need(p.alpha0.size() == s.G - 1, "alpha0");
  need(p.psi0.size() == s.H - 1, "psi0");
  need(p.alpha1.rows() == s.G && p.alpha1.cols() == s.G - 1, "alpha1");
  need(p.psi1.size() == s.H - 1, "psi1");
  need(p.pi.rows() == s.H && p.pi.cols() == s.K, "pi");
  need(p.tau.size() == s.H, "tau");
}

/// Human-readable list of broken natural-scale constraints (empty when valid).
inline std::vector<std::string> parameter_violations(const ParameterSet& p) {
  std::vector<std::string> out;
  for (int g = 1; g < p.G(); ++g)
    if (p.zeta(g) < p.zeta(g - 1)) out.push_back("zeta not nondecreasing at state " + std::to_string(g + 1));
  if (!(p.sigma2 > 0)) out.push_back("sigma2 must be positive");
  for (int g = 1; g < p.alpha0.size(); ++g)
    if (!(p.alpha0(g) < p.alpha0(g - 1))) out.push_back("alpha0 not strictly decreasing");
  for (int r = 0; r < p.alpha1.rows(); ++r)
    for (int g = 1; g < p.alpha1.cols(); ++g)
      if (!(p.alpha1(r, g) < p.alpha1(r, g - 1)))
        out.push_back("alpha1 row " + std::to_string(r + 1) + " not strictly decreasing");
  for (int h = 0; h < p.pi.rows(); ++h)
    if (std::abs(p.pi.row(h).sum() - 1.0) > 1e-12 || (p.pi.row(h).array() < 0).any())
      out.push_back("pi row " + std::to_string(h + 1) + " is not a probability vector");
  if (std::abs(p.tau.sum() - 1.0) > 1e-12 || (p.tau.array() < 0).any())
    out.push_back("tau is not a probability vector");
  return out;
}

// ---------------------------------------------------------------------------
// Parameter counting

struct ParameterBlock {
  std::string_view name;
  int count;
};

/// Free-parameter count of each of the nine blocks, in storage order.
inline std::array<ParameterBlock, 9> free_parameter_blocks(const ModelSpec& s) {
  return {{{"beta", s.p_x},
           {"zeta", s.G},
           {"sigma2", 1},
           {"gamma", s.p_w},
           {"xi", s.K},
           {"eta0", (s.G - 1) + (s.H - 1)},
           {"eta1", s.G * (s.G - 1) + (s.H - 1)},
           {"tau", s.H - 1},
           {"pi", s.H * (s.K - 1)}}};
}

inline int count_free_parameters(const ModelSpec& s) {
  int total = 0;
  for (const auto& b : free_parameter_blocks(s)) total += b.count;
  return total;
}

}  // namespace lmdrop
