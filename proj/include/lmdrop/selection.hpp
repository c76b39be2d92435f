#pragma once

#include "lmdrop/core.hpp"
#include "lmdrop/fit.hpp"
#include "lmdrop/inference.hpp"
#include "lmdrop/parallel.hpp"

#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace lmdrop {

inline double bic(double loglik, int n_params, int n) {
  if (n < 1) throw InputError("BIC needs at least one subject");
  return -2.0 * loglik + n_params * std::log(static_cast<double>(n));
}

inline double aic(double loglik, int n_params) { return -2.0 * loglik + 2.0 * n_params; }

struct GridCell {
  int G = 1;
  int K = 1;
  int H = 1;
  double loglik = std::numeric_limits<double>::quiet_NaN();
  int n_params = 0;
  double bic = std::numeric_limits<double>::quiet_NaN();
  double aic = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  int degenerate_starts = 0;
  std::string error;  // non-empty when the cell could not be fitted
};

struct GridReport {
  std::vector<GridCell> cells;
  std::size_t selected = 0;

  const GridCell& best() const { return cells.at(selected); }
};

inline GridCell cell_from_fit(const FitResult& f) {
  GridCell c;
  c.G = f.spec.G;
  c.K = f.spec.K;
  c.H = f.spec.H;
  c.loglik = f.loglik;
  c.n_params = f.n_params;
  c.bic = f.bic;
  c.aic = f.aic;
  c.converged = f.converged;
  c.degenerate_starts = f.degenerate_starts;
  return c;
}

/// Picks the converged cell with the smallest BIC; exact ties go to the
/// smaller H, then G, then K.
inline GridReport select(std::vector<GridCell> cells) {
  GridReport rep;
  rep.cells = std::move(cells);
  std::optional<std::size_t> best;
  auto key = [](const GridCell& c) { return std::make_tuple(c.bic, c.H, c.G, c.K); };
  for (std::size_t i = 0; i < rep.cells.size(); ++i) {
    const auto& c = rep.cells[i];
    if (!c.converged || !c.error.empty() || !std::isfinite(c.bic)) continue;
    if (!best || key(c) < key(rep.cells[*best])) best = i;
  }
  if (!best) throw NotConverged("no converged cell in the grid");
  rep.selected = *best;
  return rep;
}

struct GridRanges {
  std::vector<int> G{1};
  std::vector<int> K{1};
  std::vector<int> H{1};
};

struct GridFit {
  GridReport report;
  std::vector<std::optional<FitResult>> fits;  // same order as report.cells
};

/// Fits every (G, K, H) combination. Failed cells are recorded in the report
/// with their error message rather than thrown.
inline GridFit fit_grid(const PanelData& data, const GridRanges& ranges, const EmControls& em) {
  std::vector<ModelSpec> specs;
  for (int H : ranges.H)
    for (int G : ranges.G)
      for (int K : ranges.K) specs.push_back(make_spec(data, G, K, H, em));
  if (specs.empty()) throw InputError("grid ranges are empty");

  const bool nested = specs.size() > 1;
  std::vector<std::optional<FitResult>> fits(specs.size());
  std::vector<GridCell> cells(specs.size());
  parallel_for(specs.size(), nested ? em.workers : 1, [&](std::size_t i) {
    ModelSpec spec = specs[i];
    if (nested) spec.em.workers = 1;
    try {
      fits[i] = fit(data, spec);
      cells[i] = cell_from_fit(*fits[i]);
    } catch (const std::exception& e) {
      cells[i].G = spec.G;
      cells[i].K = spec.K;
      cells[i].H = spec.H;
      cells[i].n_params = count_free_parameters(spec);
      cells[i].degenerate_starts = dynamic_cast<const DegenerateFit*>(&e) ? spec.em.n_starts : 0;
      cells[i].error = e.what();
    }
  });
  GridFit out;
  out.fits = std::move(fits);
  out.report = select(std::move(cells));
  return out;
}

// ---------------------------------------------------------------------------
// Table layout: one row per G, one column per (H, K), headed "H<h>K<k>".

inline void write_grid_table(std::ostream& out, const std::vector<GridCell>& cells) {
  std::vector<int> Gs;
  std::vector<std::pair<int, int>> cols;
  std::map<std::tuple<int, int, int>, double> value;
  for (const auto& c : cells) {
    if (std::find(Gs.begin(), Gs.end(), c.G) == Gs.end()) Gs.push_back(c.G);
    if (std::find(cols.begin(), cols.end(), std::make_pair(c.H, c.K)) == cols.end()) cols.emplace_back(c.H, c.K);
    if (c.error.empty()) value[{c.G, c.K, c.H}] = c.bic;
  }
  std::sort(Gs.begin(), Gs.end());
  std::sort(cols.begin(), cols.end());
  out << "G";
  for (auto [h, k] : cols) out << ",H" << h << "K" << k;
  out << "\n";
  std::ostringstream num;
  num.precision(17);
  for (int G : Gs) {
    out << G;
    for (auto [h, k] : cols) {
      out << ",";
      auto it = value.find({G, k, h});
      if (it != value.end()) {
        num.str("");
        num << it->second;
        out << num.str();
      }
    }
    out << "\n";
  }
}

/// Reads a BIC table written by write_grid_table (or transcribed by hand).
/// Cells come back converged with only G, K, H and BIC filled in.
inline std::vector<GridCell> read_grid_table(std::istream& in) {
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  };
  std::string line;
  if (!std::getline(in, line)) throw InputError("grid table: empty input");
  const auto header = split(line);
  if (header.empty() || header[0] != "G") throw InputError("grid table: first column must be 'G'");
  std::vector<std::pair<int, int>> cols;
  for (std::size_t j = 1; j < header.size(); ++j) {
    int h = 0, k = 0;
    char c1 = 0, c2 = 0;
    std::istringstream hs(header[j]);
    if (!(hs >> c1 >> h >> c2 >> k) || c1 != 'H' || c2 != 'K')
      throw InputError("grid table: bad column header '" + header[j] + "'");
    cols.emplace_back(h, k);
  }
  std::vector<GridCell> cells;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != header.size())
      throw InputError("grid table line " + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " fields");
    try {
      const int G = std::stoi(f[0]);
      for (std::size_t j = 1; j < f.size(); ++j) {
        if (f[j].empty()) continue;
        GridCell c;
        c.G = G;
        c.H = cols[j - 1].first;
        c.K = cols[j - 1].second;
        c.bic = std::stod(f[j]);
        c.converged = true;
        cells.push_back(c);
      }
    } catch (const std::logic_error&) {
      throw InputError("grid table line " + std::to_string(line_no) + ": not a number");
    }
  }
  return cells;
}

// ---------------------------------------------------------------------------
// MNAR vs MAR comparison

struct SensitivityRow {
  std::string name;
  double mnar = 0.0;
  double mar = 0.0;
  double diff = 0.0;  // mnar - mar
  double se_mnar = std::numeric_limits<double>::quiet_NaN();
  double se_mar = std::numeric_limits<double>::quiet_NaN();
  double scaled = std::numeric_limits<double>::quiet_NaN();  // diff / sqrt(se_mnar^2 + se_mar^2)
};

struct SensitivityReport {
  std::vector<SensitivityRow> rows;
  double bic_mnar = 0.0;
  double bic_mar = 0.0;
  double bic_diff = 0.0;  // mnar - mar; negative favours the non-ignorable model
};

/// Compares the longitudinal and dropout blocks (beta, zeta, sigma2, gamma,
/// xi) of two fits on the same data. Standard errors are optional.
inline SensitivityReport sensitivity_compare(const FitResult& mnar, const FitResult& mar,
                                             const std::vector<std::string>& names_mnar = {},
                                             const CovarianceReport* cov_mnar = nullptr,
                                             const CovarianceReport* cov_mar = nullptr) {
  const auto& a = mnar.spec;
  const auto& b = mar.spec;
  if (a.G != b.G || a.K != b.K || a.p_x != b.p_x || a.p_w != b.p_w || mnar.n_subjects != mar.n_subjects)
    throw InputError("sensitivity comparison needs fits with the same G, K, covariates and subjects");

  SensitivityReport rep;
  rep.bic_mnar = mnar.bic;
  rep.bic_mar = mar.bic;
  rep.bic_diff = mnar.bic - mar.bic;

  const Vector va = natural_vector(mnar.theta_hat);
  const Vector vb = natural_vector(mar.theta_hat);
  const int shared = a.p_x + a.G + 1 + a.p_w + a.K;  // leading blocks, same positions in both layouts
  const auto names = names_mnar.empty() ? parameter_names(a, {}, {}) : names_mnar;
  for (int j = 0; j < shared; ++j) {
    SensitivityRow row;
    row.name = names.at(j);
    row.mnar = va(j);
    row.mar = vb(j);
    row.diff = va(j) - vb(j);
    if (cov_mnar && cov_mar) {
      row.se_mnar = cov_mnar->se(j);
      row.se_mar = cov_mar->se(j);
      const double denom = std::hypot(row.se_mnar, row.se_mar);
      row.scaled = row.diff == 0.0 ? 0.0 : row.diff / denom;
    }
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace lmdrop
