// lmdrop command-line tool: simulate, fit, select, se, decode, sensitivity.

#include "lmdrop/lmdrop.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
namespace pt = boost::property_tree;
using namespace lmdrop;

namespace {

enum Exit { kOk = 0, kInput = 1, kNotConverged = 2, kNumerical = 3 };

// Settings shared by every command. Values start empty; the config file
// fills what the flags left unset, then defaults apply.
struct Settings {
  std::string config;
  std::string input;
  std::string output_dir;
  std::string params;
  std::string x;  // comma-separated column names
  std::string w;
  std::optional<double> ceiling;
  std::optional<int> waves;
  std::string G, K, H;  // single values or ranges
  std::optional<int> starts, max_iter, workers;
  std::optional<double> tol;
  std::optional<std::uint64_t> seed;
  std::string norm;
  bool se = false;
  bool mar = false;
  bool progress = false;
  std::string replay;
  // simulate
  std::optional<int> n, T, binary, continuous;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::vector<int> parse_range(const std::string& s, const char* what) {
  std::vector<int> out;
  try {
    for (const auto& part : split_list(s)) {
      const auto dash = part.find('-');
      if (dash == std::string::npos) {
        out.push_back(std::stoi(part));
      } else {
        const int lo = std::stoi(part.substr(0, dash));
        const int hi = std::stoi(part.substr(dash + 1));
        for (int v = lo; v <= hi; ++v) out.push_back(v);
      }
    }
  } catch (const std::logic_error&) {
    throw InputError(std::string("cannot parse ") + what + " range '" + s + "'");
  }
  if (out.empty()) throw InputError(std::string(what) + " range is empty");
  for (int v : out)
    if (v < 1) throw InputError(std::string(what) + " must be at least 1");
  return out;
}

int single(const std::string& s, const char* what) {
  const auto r = parse_range(s.empty() ? "1" : s, what);
  if (r.size() != 1) throw InputError(std::string(what) + " must be a single value for this command");
  return r.front();
}

template <class T>
void fill(std::optional<T>& slot, const pt::ptree& tree, const char* key) {
  if (!slot) {
    if (auto v = tree.get_optional<T>(key)) slot = *v;
  }
}

void fill(std::string& slot, const pt::ptree& tree, const char* key) {
  if (slot.empty()) {
    if (auto v = tree.get_optional<std::string>(key)) slot = *v;
  }
}

void apply_config(Settings& s) {
  if (s.config.empty()) return;
  pt::ptree tree;
  try {
    pt::read_ini(s.config, tree);
  } catch (const pt::ini_parser_error& e) {
    throw InputError("config: " + std::string(e.what()));
  }
  try {
    fill(s.input, tree, "data.input");
    fill(s.x, tree, "data.x");
    fill(s.w, tree, "data.w");
    fill(s.ceiling, tree, "data.ceiling");
    fill(s.waves, tree, "data.waves");
    fill(s.params, tree, "data.params");
    fill(s.G, tree, "model.G");
    fill(s.K, tree, "model.K");
    fill(s.H, tree, "model.H");
    fill(s.starts, tree, "em.starts");
    fill(s.max_iter, tree, "em.max_iter");
    fill(s.tol, tree, "em.tol");
    fill(s.seed, tree, "em.seed");
    fill(s.workers, tree, "em.workers");
    fill(s.norm, tree, "em.norm");
    fill(s.output_dir, tree, "output.dir");
    fill(s.n, tree, "simulate.n");
    fill(s.T, tree, "simulate.T");
    fill(s.binary, tree, "simulate.binary");
    fill(s.continuous, tree, "simulate.continuous");
  } catch (const pt::ptree_bad_data& e) {
    throw InputError("config: bad value: " + std::string(e.what()));
  }
}

EmControls em_controls(const Settings& s) {
  EmControls em;
  if (s.starts) em.n_starts = *s.starts;
  if (s.max_iter) em.max_iter = *s.max_iter;
  if (s.tol) em.tol = *s.tol;
  if (s.seed) em.seed = *s.seed;
  if (s.workers) em.workers = *s.workers;
  if (s.norm == "parameters")
    em.norm = ConvergenceNorm::parameters;
  else if (!s.norm.empty() && s.norm != "loglik")
    throw InputError("norm must be 'loglik' or 'parameters'");
  return em;
}

fs::path output_dir(const Settings& s) {
  const fs::path dir = s.output_dir.empty() ? fs::path(".") : fs::path(s.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create output directory '" + dir.string() + "'");
  return dir;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  return out;
}

// Effective settings, so a run can be repeated from its output directory.
void write_run_config(const fs::path& dir, const std::string& command, const Settings& s, const EmControls& em) {
  pt::ptree tree;
  tree.put("run.command", command);
  tree.put("data.input", s.input);
  tree.put("data.x", s.x);
  tree.put("data.w", s.w);
  if (s.ceiling) tree.put("data.ceiling", *s.ceiling);
  if (s.waves) tree.put("data.waves", *s.waves);
  if (!s.params.empty()) tree.put("data.params", s.params);
  tree.put("model.G", s.G.empty() ? "1" : s.G);
  tree.put("model.K", s.K.empty() ? "1" : s.K);
  tree.put("model.H", s.mar ? "1" : (s.H.empty() ? "1" : s.H));
  tree.put("em.starts", em.n_starts);
  tree.put("em.max_iter", em.max_iter);
  tree.put("em.tol", em.tol);
  tree.put("em.seed", em.seed);
  tree.put("em.workers", em.workers);
  tree.put("em.norm", em.norm == ConvergenceNorm::loglik ? "loglik" : "parameters");
  tree.put("output.dir", s.output_dir);
  if (command == "simulate") {
    tree.put("simulate.n", s.n.value_or(500));
    tree.put("simulate.T", s.T.value_or(6));
    tree.put("simulate.binary", s.binary.value_or(1));
    tree.put("simulate.continuous", s.continuous.value_or(0));
  }
  pt::write_ini((dir / "run_config.ini").string(), tree);
}

PanelData load_panel(const Settings& s) {
  if (s.input.empty()) throw InputError("no input panel given (--input)");
  std::ifstream in(s.input);
  if (!in) throw InputError("cannot read '" + s.input + "'");
  PanelReadOptions opt;
  opt.x_columns = split_list(s.x);
  opt.w_columns = split_list(s.w);
  opt.ceiling = s.ceiling;
  opt.n_waves = s.waves.value_or(0);
  auto res = read_panel_csv(in, opt);
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
  const auto report = validate_panel(res.data);
  if (!report.ok()) throw InputError("invalid panel:\n" + report.to_string());
  return std::move(res.data);
}

ParameterSet load_params(const Settings& s, const std::optional<ModelSpec>& spec = std::nullopt) {
  if (s.params.empty()) throw InputError("no parameter file given (--params)");
  std::ifstream in(s.params);
  if (!in) throw InputError("cannot read '" + s.params + "'");
  return read_params_csv(in, spec);
}

ProgressCallback progress_printer(bool enabled, const std::string& label) {
  if (!enabled) return {};
  auto mu = std::make_shared<std::mutex>();
  return [mu, label](const ProgressEvent& ev) {
    nlohmann::json j;
    j["model"] = label;
    j["start"] = ev.start;
    j["iteration"] = ev.iteration;
    j["loglik"] = ev.loglik;
    j["change"] = ev.change;
    j["block_change"] = ev.block_change;
    std::lock_guard<std::mutex> lock(*mu);
    std::cerr << j.dump() << "\n";
  };
}

std::string label(const ModelSpec& s) {
  return "G" + std::to_string(s.G) + "K" + std::to_string(s.K) + "H" + std::to_string(s.H);
}

void write_fit_outputs(const fs::path& dir, const PanelData& data, const FitResult& f,
                       const CovarianceReport* cov, const std::string& prefix = "") {
  {
    auto out = open_out(dir / (prefix + "params.csv"));
    write_params_csv(out, f.theta_hat);
  }
  {
    auto out = open_out(dir / (prefix + "estimates.csv"));
    const auto names = parameter_names(f.spec, data.x_names, data.w_names);
    write_estimates_csv(out, names, natural_vector(f.theta_hat), cov ? &cov->se : nullptr);
  }
  {
    auto out = open_out(dir / (prefix + "trace.csv"));
    write_trace_csv(out, f.loglik_trace);
  }
  const auto post = e_step(data, f.theta_hat, f.spec);
  {
    auto out = open_out(dir / (prefix + "posterior_classes.csv"));
    write_class_posteriors_csv(out, data, post);
  }
  {
    auto out = open_out(dir / (prefix + "posterior_states.csv"));
    write_state_posteriors_csv(out, data, post);
  }
  {
    pt::ptree tree;
    tree.put("fit.G", f.spec.G);
    tree.put("fit.K", f.spec.K);
    tree.put("fit.H", f.spec.H);
    tree.put("fit.loglik", detail::format_double(f.loglik));
    tree.put("fit.n_params", f.n_params);
    tree.put("fit.n_subjects", f.n_subjects);
    tree.put("fit.bic", detail::format_double(f.bic));
    tree.put("fit.aic", detail::format_double(f.aic));
    tree.put("fit.converged", f.converged);
    tree.put("fit.iterations", f.n_iter);
    tree.put("fit.best_start", f.start_index + 1);
    tree.put("fit.degenerate_starts", f.degenerate_starts);
    if (cov) {
      tree.put("se.pseudo_inverse", cov->pseudo_inverse);
      tree.put("se.condition_number", detail::format_double(cov->condition_number));
      tree.put("se.score_norm", detail::format_double(cov->score_norm));
      tree.put("se.score_scale", detail::format_double(cov->score_scale));
      std::string neg;
      for (const auto& n : cov->negative_variance) neg += (neg.empty() ? "" : ",") + n;
      tree.put("se.negative_variance", neg);
    }
    pt::write_ini((dir / (prefix + "summary.ini")).string(), tree);
  }
}

void write_covariance(const fs::path& dir, const CovarianceReport& cov, const std::string& prefix = "") {
  auto out = open_out(dir / (prefix + "covariance.csv"));
  out << "name";
  for (const auto& n : cov.names) out << "," << n;
  out << "\n";
  for (std::size_t i = 0; i < cov.names.size(); ++i) {
    out << cov.names[i];
    for (std::size_t j = 0; j < cov.names.size(); ++j)
      out << "," << detail::format_double(cov.cov_theta(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Commands

int cmd_simulate(const Settings& s) {
  const auto em = em_controls(s);
  const auto p = load_params(s);
  const TimeAndBaseline design{s.continuous.value_or(0), s.binary.value_or(1)};
  ModelSpec spec;
  spec.G = p.G();
  spec.K = p.K();
  spec.H = p.H();
  spec.p_x = static_cast<int>(p.beta.size());
  spec.p_w = static_cast<int>(p.gamma.size());
  const auto sim = simulate_panel(p, spec, s.n.value_or(500), s.T.value_or(6), em.seed, design);
  const auto dir = output_dir(s);
  {
    auto out = open_out(dir / "panel.csv");
    write_panel_csv(out, sim.data);
  }
  {
    auto out = open_out(dir / "truth.csv");
    write_truth_csv(out, sim.truth);
  }
  {
    auto out = open_out(dir / "params.csv");
    write_params_csv(out, p);
  }
  write_run_config(dir, "simulate", s, em);
  return kOk;
}

int cmd_fit(const Settings& s) {
  const auto data = load_panel(s);
  const auto em = em_controls(s);
  const auto spec = make_spec(data, single(s.G, "G"), single(s.K, "K"), s.mar ? 1 : single(s.H, "H"), em);
  const auto f = fit(data, spec, progress_printer(s.progress, label(spec)));
  std::optional<CovarianceReport> cov;
  if (s.se) cov = sandwich_covariance(data, f.theta_hat, spec, em.workers);
  const auto dir = output_dir(s);
  write_fit_outputs(dir, data, f, cov ? &*cov : nullptr);
  if (cov) write_covariance(dir, *cov);
  write_run_config(dir, "fit", s, em);
  if (!f.converged) {
    std::cerr << "fit did not converge within " << em.max_iter << " iterations\n";
    return kNotConverged;
  }
  return kOk;
}

void write_selection(const fs::path& dir, const GridReport& rep) {
  {
    auto out = open_out(dir / "grid.csv");
    write_grid_table(out, rep.cells);
  }
  {
    auto out = open_out(dir / "cells.csv");
    out << "G,K,H,loglik,n_params,bic,aic,converged,degenerate_starts,error\n";
    for (const auto& c : rep.cells)
      out << c.G << "," << c.K << "," << c.H << "," << detail::format_double(c.loglik) << "," << c.n_params << ","
          << detail::format_double(c.bic) << "," << detail::format_double(c.aic) << "," << (c.converged ? 1 : 0)
          << "," << c.degenerate_starts << "," << c.error << "\n";
  }
  pt::ptree tree;
  tree.put("selected.G", rep.best().G);
  tree.put("selected.K", rep.best().K);
  tree.put("selected.H", rep.best().H);
  tree.put("selected.bic", detail::format_double(rep.best().bic));
  pt::write_ini((dir / "selected.ini").string(), tree);
  std::cout << "selected G=" << rep.best().G << " K=" << rep.best().K << " H=" << rep.best().H
            << " BIC=" << detail::format_double(rep.best().bic) << "\n";
}

int cmd_select(const Settings& s) {
  const auto em = em_controls(s);
  const auto dir = output_dir(s);
  if (!s.replay.empty()) {
    std::ifstream in(s.replay);
    if (!in) throw InputError("cannot read '" + s.replay + "'");
    write_selection(dir, select(read_grid_table(in)));
    write_run_config(dir, "select", s, em);
    return kOk;
  }
  const auto data = load_panel(s);
  GridRanges ranges{parse_range(s.G.empty() ? "1" : s.G, "G"), parse_range(s.K.empty() ? "1" : s.K, "K"),
                    parse_range(s.mar ? "1" : (s.H.empty() ? "1" : s.H), "H")};
  const auto grid = fit_grid(data, ranges, em);
  write_selection(dir, grid.report);
  for (std::size_t i = 0; i < grid.fits.size(); ++i)
    if (grid.fits[i]) {
      auto out = open_out(dir / (label(grid.fits[i]->spec) + "_params.csv"));
      write_params_csv(out, grid.fits[i]->theta_hat);
    }
  write_run_config(dir, "select", s, em);
  return kOk;
}

ModelSpec spec_for_params(const PanelData& data, const ParameterSet& p) {
  ModelSpec spec;
  spec.G = p.G();
  spec.K = p.K();
  spec.H = p.H();
  spec.p_x = data.p_x();
  spec.p_w = data.p_w();
  check_conforms(p, spec);
  return spec;
}

int cmd_se(const Settings& s) {
  const auto data = load_panel(s);
  const auto em = em_controls(s);
  const auto p = load_params(s);
  const auto spec = spec_for_params(data, p);
  const auto cov = sandwich_covariance(data, p, spec, em.workers);
  const auto dir = output_dir(s);
  {
    auto out = open_out(dir / "estimates.csv");
    write_estimates_csv(out, cov.names, cov.theta, &cov.se);
  }
  write_covariance(dir, cov);
  write_run_config(dir, "se", s, em);
  if (cov.pseudo_inverse) std::cerr << "warning: observed information is singular; pseudo-inverse used\n";
  for (const auto& n : cov.negative_variance) std::cerr << "warning: negative variance for " << n << "\n";
  return kOk;
}

int cmd_decode(const Settings& s) {
  const auto data = load_panel(s);
  const auto em = em_controls(s);
  const auto p = load_params(s);
  const auto spec = spec_for_params(data, p);
  const auto post = e_step(data, p, spec);
  const auto dir = output_dir(s);
  {
    auto out = open_out(dir / "posterior_classes.csv");
    write_class_posteriors_csv(out, data, post);
  }
  {
    auto out = open_out(dir / "posterior_states.csv");
    write_state_posteriors_csv(out, data, post);
  }
  write_run_config(dir, "decode", s, em);
  return kOk;
}

int cmd_sensitivity(const Settings& s) {
  const auto data = load_panel(s);
  const auto em = em_controls(s);
  const int G = single(s.G, "G"), K = single(s.K, "K"), H = single(s.H.empty() ? "2" : s.H, "H");
  const auto mnar_spec = make_spec(data, G, K, H, em);
  const auto mar_spec = make_spec(data, G, K, 1, em);
  const auto mnar = fit(data, mnar_spec, progress_printer(s.progress, label(mnar_spec)));
  const auto mar = fit(data, mar_spec, progress_printer(s.progress, label(mar_spec)));
  const auto cov_mnar = sandwich_covariance(data, mnar.theta_hat, mnar_spec, em.workers);
  const auto cov_mar = sandwich_covariance(data, mar.theta_hat, mar_spec, em.workers);
  const auto rep = sensitivity_compare(mnar, mar, cov_mnar.names, &cov_mnar, &cov_mar);
  const auto dir = output_dir(s);
  write_fit_outputs(dir, data, mnar, &cov_mnar, "mnar_");
  write_fit_outputs(dir, data, mar, &cov_mar, "mar_");
  {
    auto out = open_out(dir / "sensitivity.csv");
    out << "name,mnar,mar,diff,se_mnar,se_mar,scaled\n";
    for (const auto& r : rep.rows)
      out << r.name << "," << detail::format_double(r.mnar) << "," << detail::format_double(r.mar) << ","
          << detail::format_double(r.diff) << "," << detail::format_double(r.se_mnar) << ","
          << detail::format_double(r.se_mar) << "," << detail::format_double(r.scaled) << "\n";
    out << "bic,," << "," << detail::format_double(rep.bic_diff) << ",,,\n";
  }
  write_run_config(dir, "sensitivity", s, em);
  return mnar.converged && mar.converged ? kOk : kNotConverged;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hidden Markov models for longitudinal responses with non-ignorable dropout"};
  app.require_subcommand(1);
  Settings s;

  auto common = [&](CLI::App* c, bool data, bool model) {
    c->add_option("--config", s.config, "INI configuration file")->check(CLI::ExistingFile);
    c->add_option("--output-dir", s.output_dir, "Directory for output files");
    c->add_option("--seed", s.seed, "Master seed");
    c->add_option("--workers", s.workers, "Worker threads (0: all cores)");
    if (data) {
      c->add_option("--input", s.input, "Long-format panel CSV");
      c->add_option("--x", s.x, "Comma-separated response covariate columns");
      c->add_option("--w", s.w, "Comma-separated dropout covariate columns");
      c->add_option("--ceiling", s.ceiling, "Transform y <- log(1 + (ceiling - y))");
      c->add_option("--waves", s.waves, "Planned number of waves (default: largest in the file)");
    }
    if (model) {
      c->add_option("--G", s.G, "Hidden states (value or range such as 2-5)");
      c->add_option("--K", s.K, "Dropout classes");
      c->add_option("--H", s.H, "Upper-level classes");
      c->add_option("--starts", s.starts, "Random starts per model");
      c->add_option("--tol", s.tol, "Convergence tolerance");
      c->add_option("--max-iter", s.max_iter, "EM iteration limit");
      c->add_option("--norm", s.norm, "Convergence norm: loglik or parameters");
      c->add_flag("--mar", s.mar, "Force H = 1 (ignorable dropout)");
      c->add_flag("--progress", s.progress, "JSON-lines progress on stderr");
    }
  };

  auto* sim = app.add_subcommand("simulate", "Draw a synthetic panel from a parameter file");
  common(sim, false, false);
  sim->add_option("--params", s.params, "Parameter CSV")->required();
  sim->add_option("--n", s.n, "Subjects");
  sim->add_option("--T", s.T, "Waves");
  sim->add_option("--binary", s.binary, "Baseline binary covariates after time");
  sim->add_option("--continuous", s.continuous, "Baseline standard-normal covariates after time");

  auto* fitc = app.add_subcommand("fit", "Fit one (G, K, H) model");
  common(fitc, true, true);
  fitc->add_flag("--se", s.se, "Sandwich standard errors");

  auto* sel = app.add_subcommand("select", "Fit a grid of models and pick the smallest BIC");
  common(sel, true, true);
  sel->add_option("--replay", s.replay, "Select from a precomputed BIC table instead of fitting");

  auto* se = app.add_subcommand("se", "Sandwich standard errors at given parameters");
  common(se, true, false);
  se->add_option("--params", s.params, "Parameter CSV");

  auto* dec = app.add_subcommand("decode", "Posterior class and state probabilities");
  common(dec, true, false);
  dec->add_option("--params", s.params, "Parameter CSV");

  auto* sens = app.add_subcommand("sensitivity", "Compare the non-ignorable fit with its H = 1 counterpart");
  common(sens, true, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kInput;
  }

  try {
    apply_config(s);
    if (sim->parsed()) return cmd_simulate(s);
    if (fitc->parsed()) return cmd_fit(s);
    if (sel->parsed()) return cmd_select(s);
    if (se->parsed()) return cmd_se(s);
    if (dec->parsed()) return cmd_decode(s);
    if (sens->parsed()) return cmd_sensitivity(s);
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInput;
  } catch (const NotConverged& e) {
    std::cerr << "not converged: " << e.what() << "\n";
    return kNotConverged;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  }
  return kInput;
}
