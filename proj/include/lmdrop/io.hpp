#pragma once

// CSV readers and writers for panels, parameters, simulation truth, traces
// and posteriors. Fields are comma separated without quoting.

#include "lmdrop/core.hpp"
#include "lmdrop/estep.hpp"
#include "lmdrop/inference.hpp"
#include "lmdrop/simulate.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace lmdrop {

namespace detail {

inline std::vector<std::string> split_csv(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  for (auto& f : out) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long> parse_int(std::string_view s) {
  long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

/// Shortest decimal form that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, ptr) : std::string("nan");
}

inline InputError line_error(const std::string& what, int line, const std::string& message) {
  return InputError(what + " line " + std::to_string(line) + ": " + message);
}

inline std::map<std::string, std::size_t> column_index(const std::vector<std::string>& header) {
  std::map<std::string, std::size_t> idx;
  for (std::size_t j = 0; j < header.size(); ++j) idx.emplace(header[j], j);
  return idx;
}

inline std::size_t require_column(const std::map<std::string, std::size_t>& idx, const std::string& name,
                                  const std::string& what) {
  const auto it = idx.find(name);
  if (it == idx.end()) throw InputError(what + ": missing column '" + name + "'");
  return it->second;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Panel

struct PanelReadOptions {
  std::vector<std::string> x_columns;
  std::vector<std::string> w_columns;
  std::optional<double> ceiling;  // y <- log(1 + (ceiling - raw)) when set
  int n_waves = 0;                // 0: largest wave in the file
};

struct PanelReadResult {
  PanelData data;
  std::vector<std::string> warnings;
};

/// Long format: id, wave, y, r, then covariate columns. One row per wave up
/// to and including the dropout wave; y is empty once r = 1. Rows after the
/// first r = 1 are ignored when they also carry r = 1.
inline PanelReadResult read_panel_csv(std::istream& in, const PanelReadOptions& opt) {
  const std::string what = "panel";
  std::string line;
  if (!std::getline(in, line)) throw InputError("panel: empty input");
  const auto header = detail::split_csv(line);
  const auto idx = detail::column_index(header);
  const auto c_id = detail::require_column(idx, "id", what);
  const auto c_wave = detail::require_column(idx, "wave", what);
  const auto c_y = detail::require_column(idx, "y", what);
  const auto c_r = detail::require_column(idx, "r", what);
  std::vector<std::size_t> cx, cw;
  for (const auto& n : opt.x_columns) cx.push_back(detail::require_column(idx, n, what));
  for (const auto& n : opt.w_columns) cw.push_back(detail::require_column(idx, n, what));

  struct Row {
    int line;
    int wave;
    std::optional<double> y;
    int r;
    std::vector<std::optional<double>> x, w;
  };
  std::vector<std::string> order;
  std::map<std::string, std::vector<Row>> rows;
  int line_no = 1;
  int max_wave = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv(line);
    if (f.size() != header.size())
      throw detail::line_error(what, line_no,
                               "expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size()));
    Row row;
    row.line = line_no;
    const auto wave = detail::parse_int(f[c_wave]);
    if (!wave || *wave < 1) throw detail::line_error(what, line_no, "wave must be a positive integer");
    row.wave = static_cast<int>(*wave);
    const auto r = detail::parse_int(f[c_r]);
    if (!r || (*r != 0 && *r != 1)) throw detail::line_error(what, line_no, "r must be 0 or 1");
    row.r = static_cast<int>(*r);
    if (!f[c_y].empty()) {
      row.y = detail::parse_double(f[c_y]);
      if (!row.y) throw detail::line_error(what, line_no, "y is not a number: '" + f[c_y] + "'");
      if (opt.ceiling) {
        const double arg = 1.0 + (*opt.ceiling - *row.y);
        if (!(arg > 0)) throw detail::line_error(what, line_no, "response exceeds the transform ceiling");
        row.y = std::log(arg);
      }
    }
    auto covariates = [&](const std::vector<std::size_t>& cols, std::vector<std::optional<double>>& out) {
      for (auto c : cols) {
        if (f[c].empty()) {
          out.emplace_back();
          continue;
        }
        const auto v = detail::parse_double(f[c]);
        if (!v) throw detail::line_error(what, line_no, "column '" + header[c] + "' is not a number: '" + f[c] + "'");
        out.push_back(v);
      }
    };
    covariates(cx, row.x);
    covariates(cw, row.w);
    if (!rows.count(f[c_id])) order.push_back(f[c_id]);
    rows[f[c_id]].push_back(std::move(row));
    max_wave = std::max(max_wave, static_cast<int>(*wave));
  }

  PanelReadResult out;
  out.data.n_waves = opt.n_waves > 0 ? opt.n_waves : max_wave;
  out.data.x_names = opt.x_columns;
  out.data.w_names = opt.w_columns;
  for (const auto& id : order) {
    auto& rs = rows[id];
    std::stable_sort(rs.begin(), rs.end(), [](const Row& a, const Row& b) { return a.wave < b.wave; });
    for (std::size_t t = 0; t < rs.size(); ++t) {
      if (rs[t].wave != static_cast<int>(t) + 1) {
        if (t > 0 && rs[t].wave == rs[t - 1].wave)
          throw detail::line_error(what, rs[t].line, "duplicate wave " + std::to_string(rs[t].wave) + " for subject '" + id + "'");
        throw detail::line_error(what, rs[t].line, "waves of subject '" + id + "' must run 1, 2, ... without gaps");
      }
      if (rs[t].wave > out.data.n_waves)
        throw detail::line_error(what, rs[t].line, "wave beyond the planned horizon");
    }
    // Trailing r = 1 rows after the first one carry nothing.
    std::size_t keep = rs.size();
    for (std::size_t t = 0; t < rs.size(); ++t)
      if (rs[t].r == 1) {
        std::size_t u = t + 1;
        while (u < rs.size() && rs[u].r == 1 && !rs[u].y) ++u;
        if (u == rs.size()) keep = t + 1;
        break;
      }
    rs.resize(keep);

    bool missing = false;
    std::vector<const Row*> observed;
    for (const auto& row : rs) {
      if (row.r == 0) {
        if (!row.y) throw detail::line_error(what, row.line, "observed wave (r = 0) has no response");
        observed.push_back(&row);
        for (const auto& v : row.x) missing |= !v.has_value();
      }
      for (const auto& v : row.w) missing |= !v.has_value();
    }
    if (missing) {
      out.warnings.push_back("subject '" + id + "' dropped: incomplete covariates");
      continue;
    }
    SubjectRecord s;
    s.id = id;
    s.y.resize(static_cast<Eigen::Index>(observed.size()));
    s.x.resize(static_cast<Eigen::Index>(observed.size()), static_cast<Eigen::Index>(cx.size()));
    for (std::size_t t = 0; t < observed.size(); ++t) {
      s.y(t) = *observed[t]->y;
      for (std::size_t j = 0; j < cx.size(); ++j) s.x(t, j) = *observed[t]->x[j];
    }
    s.w.resize(static_cast<Eigen::Index>(rs.size()), static_cast<Eigen::Index>(cw.size()));
    for (std::size_t t = 0; t < rs.size(); ++t) {
      s.r.push_back(rs[t].r);
      for (std::size_t j = 0; j < cw.size(); ++j) s.w(t, j) = *rs[t].w[j];
    }
    out.data.subjects.push_back(std::move(s));
  }
  return out;
}

/// Writes the long format read by read_panel_csv. Covariate columns are the
/// union of the x and w names; a column in both takes the x value on
/// observed waves.
inline void write_panel_csv(std::ostream& out, const PanelData& data) {
  std::vector<std::string> cols = data.x_names;
  for (const auto& n : data.w_names)
    if (std::find(cols.begin(), cols.end(), n) == cols.end()) cols.push_back(n);
  out << "id,wave,y,r";
  for (const auto& c : cols) out << "," << c;
  out << "\n";
  for (const auto& s : data.subjects) {
    const int rows = std::max(s.n_observed(), s.n_indicators());
    for (int t = 0; t < rows; ++t) {
      out << s.id << "," << (t + 1) << ",";
      if (t < s.n_observed()) out << detail::format_double(s.y(t));
      out << "," << (t < s.n_indicators() ? s.r[t] : 0);
      for (const auto& c : cols) {
        out << ",";
        const auto xi = std::find(data.x_names.begin(), data.x_names.end(), c) - data.x_names.begin();
        const auto wi = std::find(data.w_names.begin(), data.w_names.end(), c) - data.w_names.begin();
        if (xi < data.p_x() && t < s.n_observed())
          out << detail::format_double(s.x(t, xi));
        else if (wi < data.p_w() && t < s.n_indicators())
          out << detail::format_double(s.w(t, wi));
      }
      out << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Parameters: block,i,j,value with 1-based indices

inline void write_params_csv(std::ostream& out, const ParameterSet& p) {
  out << "block,i,j,value\n";
  auto put = [&](const char* name, const Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        out << name << "," << (i + 1) << "," << (j + 1) << "," << detail::format_double(m(i, j)) << "\n";
  };
  put("beta", p.beta);
  put("zeta", p.zeta);
  put("sigma2", Matrix::Constant(1, 1, p.sigma2));
  put("gamma", p.gamma);
  put("xi", p.xi);
  put("alpha0", p.alpha0);
  put("psi0", p.psi0);
  put("alpha1", p.alpha1);
  put("psi1", p.psi1);
  put("pi", p.pi);
  put("tau", p.tau);
}

/// Block sizes are taken from the largest indices present. `spec`, when
/// given, fixes the sizes instead (needed for empty blocks such as beta with
/// p_x = 0 next to a nonempty spec) and is checked against the file.
inline ParameterSet read_params_csv(std::istream& in, const std::optional<ModelSpec>& spec = std::nullopt) {
  const std::string what = "parameters";
  std::string line;
  if (!std::getline(in, line)) throw InputError("parameters: empty input");
  const auto header = detail::split_csv(line);
  if (header != std::vector<std::string>{"block", "i", "j", "value"})
    throw InputError("parameters: header must be block,i,j,value");
  struct Entry {
    int i, j;
    double v;
  };
  std::map<std::string, std::vector<Entry>> blocks;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 4) throw detail::line_error(what, line_no, "expected 4 fields");
    const auto i = detail::parse_int(f[1]);
    const auto j = detail::parse_int(f[2]);
    const auto v = detail::parse_double(f[3]);
    if (!i || !j || !v || *i < 1 || *j < 1) throw detail::line_error(what, line_no, "malformed entry");
    static const std::vector<std::string> known{"beta", "zeta", "sigma2", "gamma", "xi", "alpha0",
                                                "psi0", "alpha1", "psi1", "pi", "tau"};
    if (std::find(known.begin(), known.end(), f[0]) == known.end())
      throw detail::line_error(what, line_no, "unknown block '" + f[0] + "'");
    blocks[f[0]].push_back({static_cast<int>(*i), static_cast<int>(*j), *v});
  }
  auto extent = [&](const std::string& b, bool rows) {
    int n = 0;
    for (const auto& e : blocks[b]) n = std::max(n, rows ? e.i : e.j);
    return n;
  };
  ModelSpec s;
  if (spec) {
    s = *spec;
  } else {
    s.G = extent("zeta", true);
    s.K = extent("xi", true);
    s.H = extent("tau", true);
    s.p_x = extent("beta", true);
    s.p_w = extent("gamma", true);
  }
  if (s.G < 1 || s.K < 1 || s.H < 1) throw InputError("parameters: zeta, xi and tau must be present");
  ParameterSet p = ParameterSet::zeros(s);
  auto fill = [&](const std::string& b, auto& target, Eigen::Index rows, Eigen::Index cols) {
    if (static_cast<Eigen::Index>(blocks[b].size()) != rows * cols)
      throw InputError("parameters: block '" + b + "' has " + std::to_string(blocks[b].size()) + " entries, expected " +
                       std::to_string(rows * cols));
    for (const auto& e : blocks[b]) {
      if (e.i > rows || e.j > cols) throw InputError("parameters: index out of range in block '" + b + "'");
      target(e.i - 1 + (e.j - 1) * rows) = e.v;
    }
  };
  Matrix sig(1, 1);
  fill("beta", p.beta, s.p_x, 1);
  fill("zeta", p.zeta, s.G, 1);
  fill("sigma2", sig, 1, 1);
  p.sigma2 = sig(0, 0);
  fill("gamma", p.gamma, s.p_w, 1);
  fill("xi", p.xi, s.K, 1);
  fill("alpha0", p.alpha0, s.G - 1, 1);
  fill("psi0", p.psi0, s.H - 1, 1);
  fill("alpha1", p.alpha1, s.G, s.G - 1);
  fill("psi1", p.psi1, s.H - 1, 1);
  fill("pi", p.pi, s.H, s.K);
  fill("tau", p.tau, s.H, 1);
  return p;
}

/// name,estimate[,se] using the names of parameter_names.
inline void write_estimates_csv(std::ostream& out, const std::vector<std::string>& names, const Vector& estimate,
                                const Vector* se = nullptr) {
  out << "name,estimate" << (se ? ",se" : "") << "\n";
  for (std::size_t j = 0; j < names.size(); ++j) {
    out << names[j] << "," << detail::format_double(estimate(static_cast<Eigen::Index>(j)));
    if (se) out << "," << detail::format_double((*se)(static_cast<Eigen::Index>(j)));
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Simulation truth: id,wave,z,v,u,dropout_wave with 1-based labels, one row
// per observed wave

inline void write_truth_csv(std::ostream& out, const SimTruth& truth) {
  out << "id,wave,z,v,u,dropout_wave\n";
  for (const auto& s : truth.subjects)
    for (std::size_t t = 0; t < s.z.size(); ++t)
      out << s.id << "," << (t + 1) << "," << (s.z[t] + 1) << "," << (s.v + 1) << "," << (s.u + 1) << ","
          << s.dropout_wave << "\n";
}

inline std::vector<SubjectTruth> read_truth_csv(std::istream& in) {
  const std::string what = "truth";
  std::string line;
  if (!std::getline(in, line)) throw InputError("truth: empty input");
  if (detail::split_csv(line) != std::vector<std::string>{"id", "wave", "z", "v", "u", "dropout_wave"})
    throw InputError("truth: header must be id,wave,z,v,u,dropout_wave");
  std::vector<SubjectTruth> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 6) throw detail::line_error(what, line_no, "expected 6 fields");
    std::array<long, 5> v{};
    for (int j = 0; j < 5; ++j) {
      const auto x = detail::parse_int(f[j + 1]);
      if (!x) throw detail::line_error(what, line_no, "malformed integer");
      v[j] = *x;
    }
    if (out.empty() || out.back().id != f[0]) {
      out.push_back({f[0], static_cast<int>(v[2] - 1), static_cast<int>(v[3] - 1), {}, static_cast<int>(v[4])});
    }
    if (v[0] != static_cast<long>(out.back().z.size()) + 1) throw detail::line_error(what, line_no, "waves out of order");
    out.back().z.push_back(static_cast<int>(v[1] - 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Traces and posteriors

inline void write_trace_csv(std::ostream& out, const std::vector<double>& trace) {
  out << "iteration,loglik\n";
  for (std::size_t r = 0; r < trace.size(); ++r) out << (r + 1) << "," << detail::format_double(trace[r]) << "\n";
}

namespace detail {

inline int argmax(const Vector& v) {
  Eigen::Index j = 0;
  v.maxCoeff(&j);
  return static_cast<int>(j);
}

}  // namespace detail

/// id,e_1..e_H,d_1..d_K,v_map,u_map (labels 1-based).
inline void write_class_posteriors_csv(std::ostream& out, const PanelData& data, const Posteriors& post) {
  if (post.subjects.empty()) return;
  const auto H = post.subjects[0].e.size();
  const auto K = post.subjects[0].d_marg.size();
  out << "id";
  for (Eigen::Index h = 0; h < H; ++h) out << ",e" << (h + 1);
  for (Eigen::Index k = 0; k < K; ++k) out << ",d" << (k + 1);
  out << ",v_map,u_map\n";
  for (std::size_t i = 0; i < post.subjects.size(); ++i) {
    const auto& s = post.subjects[i];
    out << data.subjects[i].id;
    for (Eigen::Index h = 0; h < H; ++h) out << "," << detail::format_double(s.e(h));
    for (Eigen::Index k = 0; k < K; ++k) out << "," << detail::format_double(s.d_marg(k));
    out << "," << (detail::argmax(s.e) + 1) << "," << (detail::argmax(s.d_marg) + 1) << "\n";
  }
}

/// id,wave,a_1..a_G,z_map (labels 1-based), state posteriors mixed over V.
inline void write_state_posteriors_csv(std::ostream& out, const PanelData& data, const Posteriors& post) {
  if (post.subjects.empty()) return;
  const auto G = post.subjects[0].a_marg.cols();
  out << "id,wave";
  for (Eigen::Index g = 0; g < G; ++g) out << ",a" << (g + 1);
  out << ",z_map\n";
  for (std::size_t i = 0; i < post.subjects.size(); ++i) {
    const auto& a = post.subjects[i].a_marg;
    for (Eigen::Index t = 0; t < a.rows(); ++t) {
      out << data.subjects[i].id << "," << (t + 1);
      for (Eigen::Index g = 0; g < G; ++g) out << "," << detail::format_double(a(t, g));
      out << "," << (detail::argmax(a.row(t).transpose()) + 1) << "\n";
    }
  }
}

}  // namespace lmdrop
