#include "rap/serialization.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rap/brusselator.hpp"
#include "rap/errors.hpp"

namespace rap {

using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open: " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

[[noreturn]] void rethrow_with_position(const std::string& text, const nlohmann::detail::parse_error& e,
                                        const std::string& where) {
  // The exception carries a byte offset; translate to line/column.
  std::size_t line = 1, col = 1;
  const std::size_t upto = std::min(text.size(), e.byte > 0 ? static_cast<std::size_t>(e.byte - 1) : 0);
  for (std::size_t i = 0; i < upto; ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  throw ParseError(where + ": malformed JSON at line " + std::to_string(line) + ", column " +
                   std::to_string(col) + " (" + e.what() + ")");
}

json parse_text(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const nlohmann::detail::parse_error& e) {
    rethrow_with_position(text, e, where);
  }
}

json parse_file(const std::string& path) {
  const std::string text = read_file(path);
  json j = parse_text(text, path);
  if (j.is_object() && j.contains("schema_version")) {
    const int v = j["schema_version"].get<int>();
    if (v > kSchemaVersion)
      throw ParseError(path + ": unsupported schema_version " + std::to_string(v));
  }
  return j;
}

Eigen::VectorXd vector_from(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  Eigen::Index i = 0;
  for (const auto& e : j) v(i++) = e.get<double>();
  return v;
}

Eigen::MatrixXd matrix_from(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) throw ParseError("matrix: empty");
  const auto cols = static_cast<Eigen::Index>(j.at(0).size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j.at(r).size()) != cols) throw ParseError("matrix: ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

json vector_json(const Eigen::VectorXd& v) {
  json j = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(v(i));
  return j;
}

const char* slow_id(SlowKind k) {
  switch (k) {
    case SlowKind::Arctan: return "arctan";
    case SlowKind::Tanh: return "tanh";
    case SlowKind::TOverOnePlusAbsT: return "t_over_one_plus_abs_t";
    case SlowKind::SinSqrtOnePlusT2: return "sin_sqrt_one_plus_t2";
  }
  return "arctan";
}

SlowKind slow_from_id(const std::string& id) {
  if (id == "arctan") return SlowKind::Arctan;
  if (id == "tanh") return SlowKind::Tanh;
  if (id == "t_over_one_plus_abs_t") return SlowKind::TOverOnePlusAbsT;
  if (id == "sin_sqrt_one_plus_t2") return SlowKind::SinSqrtOnePlusT2;
  throw ParseError("unknown slow-term id: " + id);
}

Signal signal_from(const json& j) {
  const auto dim = j.at("dimension").get<Eigen::Index>();
  Signal s(dim);
  for (const auto& term : j.at("terms")) {
    const std::string kind = term.at("kind").get<std::string>();
    if (kind == "trig") {
      TrigTerm t;
      t.omega = term.at("omega").get<double>();
      t.cos_coef = vector_from(term.at("cos"));
      t.sin_coef = vector_from(term.at("sin"));
      s.add(std::move(t));
    } else if (kind == "slow") {
      SlowTerm t;
      t.kind = slow_from_id(term.at("id").get<std::string>());
      t.scale = vector_from(term.at("scale"));
      s.add(std::move(t));
    } else if (kind == "const") {
      s.add(ConstTerm{vector_from(term.at("value"))});
    } else {
      throw ParseError("unknown signal term kind: " + kind);
    }
  }
  return s;
}

json signal_json(const Signal& s) {
  json terms = json::array();
  for (const auto& term : s.terms()) {
    json t;
    if (const auto* trig = std::get_if<TrigTerm>(&term)) {
      t["kind"] = "trig";
      t["omega"] = trig->omega;
      t["cos"] = vector_json(trig->cos_coef);
      t["sin"] = vector_json(trig->sin_coef);
    } else if (const auto* slow = std::get_if<SlowTerm>(&term)) {
      t["kind"] = "slow";
      t["id"] = slow_id(slow->kind);
      t["scale"] = vector_json(slow->scale);
    } else if (const auto* c = std::get_if<ConstTerm>(&term)) {
      t["kind"] = "const";
      t["value"] = vector_json(c->value);
    } else {
      throw Error("signal_to_json: custom terms are not serializable");
    }
    terms.push_back(std::move(t));
  }
  return json{{"schema_version", kSchemaVersion}, {"dimension", s.dimension()}, {"terms", terms}};
}

MatrixFunction matrix_function_from(const json& j) {
  const Eigen::MatrixXd base = matrix_from(j.at("base"));
  std::vector<std::pair<Signal, Eigen::MatrixXd>> terms;
  if (j.contains("terms")) {
    for (const auto& term : j.at("terms"))
      terms.emplace_back(signal_from(term.at("signal")), matrix_from(term.at("matrix")));
  }
  if (terms.empty()) return MatrixFunction::constant(base);
  return MatrixFunction::from_terms(base, std::move(terms));
}

StateMap state_map_from(const json& j, Eigen::Index dim) {
  StateMap f = StateMap::zero(dim);
  if (j.is_null()) return f;
  for (const auto& comp : j.at("components")) {
    const std::string kind = comp.at("kind").get<std::string>();
    if (kind == "linear") {
      f = f + StateMap::linear(matrix_from(comp.at("matrix")));
    } else if (kind == "forcing") {
      f = f + StateMap::forcing(signal_from(comp.at("signal")));
    } else if (kind == "quadratic_scalar") {
      if (dim != 1) throw ParseError("quadratic_scalar needs a one-dimensional problem");
      f = f + StateMap::scalar_quadratic(comp.at("coeff").get<double>());
    } else {
      throw ParseError("unknown f component kind: " + kind);
    }
  }
  return f;
}

ParamMap param_map_from(const json& j, Eigen::Index dim) {
  if (j.is_null()) return ParamMap::zero(dim);
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "zero") return ParamMap::zero(dim);
  if (kind == "nu_signal") return ParamMap::nu_signal(signal_from(j.at("signal")));
  if (kind == "nu_linear") return ParamMap::nu_linear(matrix_from(j.at("matrix")));
  throw ParseError("unknown g kind: " + kind);
}

std::function<Eigen::VectorXd(double, const Eigen::VectorXd&, const Eigen::VectorXd&)>
delay_map_from(const json& j, Eigen::Index dim) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "signal") {
    const Signal s = signal_from(j.at("signal"));
    if (s.dimension() != dim) throw ParseError("delay g: signal dimension mismatch");
    return [s](double t, const Eigen::VectorXd&, const Eigen::VectorXd&) { return s.eval(t); };
  }
  if (kind == "linear_feedback") {
    const Eigen::MatrixXd B = matrix_from(j.at("matrix"));
    return [B](double, const Eigen::VectorXd&, const Eigen::VectorXd& z) -> Eigen::VectorXd {
      return B * z;
    };
  }
  if (kind == "mixed_linear") {
    const Eigen::MatrixXd By = matrix_from(j.at("y_matrix"));
    const Eigen::MatrixXd Bz = matrix_from(j.at("z_matrix"));
    return [By, Bz](double, const Eigen::VectorXd& y, const Eigen::VectorXd& z) -> Eigen::VectorXd {
      return By * y + Bz * z;
    };
  }
  throw ParseError("unknown delay g kind: " + kind);
}

TimeGrid grid_from(const json& j) {
  return TimeGrid::over(j.at("t_min").get<double>(), j.at("t_max").get<double>(),
                        j.at("dt").get<double>());
}

void apply_tolerances(const json& j, SolverOptions& opts) {
  if (!j.contains("tolerances")) return;
  const auto& t = j.at("tolerances");
  if (t.contains("fixed_point_tol")) opts.tol = t.at("fixed_point_tol").get<double>();
  if (t.contains("tail_tol")) opts.tail_tol = t.at("tail_tol").get<double>();
  if (t.contains("residual_tol"))
    opts.residual_factor = t.at("residual_tol").get<double>() / opts.tol;
  for (const double v : {opts.tol, opts.tail_tol, opts.residual_factor})
    if (!(v > 0.0)) throw ParseError("tolerances must be positive");
}

std::optional<DichotomyData> dichotomy_from(const json& j) {
  if (!j.contains("dichotomy")) return std::nullopt;
  const auto& d = j.at("dichotomy");
  DichotomyData out;
  out.P = matrix_from(d.at("P"));
  out.K = d.at("K").get<double>();
  out.alpha = d.at("alpha").get<double>();
  return out;
}

json diagnostics_json(const NearIdentityMap::Diagnostics& d) {
  return json{{"sup_nu_U", d.sup_nu_U},
              {"sup_nu_dU", d.sup_nu_dU},
              {"sup_G", d.sup_G},
              {"sup_dG", d.sup_dG}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Signals
// ---------------------------------------------------------------------------

std::string signal_to_json(const Signal& s) { return signal_json(s).dump(2); }

Signal signal_from_json_text(const std::string& text) {
  return signal_from(parse_text(text, "signal"));
}

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

SignalScanConfig signal_scan_config_from_file(const std::string& path) {
  const json j = parse_file(path);
  SignalScanConfig c;
  c.signal = signal_from(j.at("signal"));
  if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
  if (j.contains("search_range")) c.search_range = j.at("search_range").get<double>();
  if (j.contains("tail")) c.tail = j.at("tail").get<double>();
  if (j.contains("horizon")) c.horizon = j.at("horizon").get<double>();
  if (j.contains("scan_step")) c.scan_step = j.at("scan_step").get<double>();
  if (j.contains("grid_dt")) c.grid_dt = j.at("grid_dt").get<double>();
  return c;
}

DichotomyConfig dichotomy_config_from_file(const std::string& path) {
  const json j = parse_file(path);
  DichotomyConfig c;
  c.A = matrix_function_from(j.at("A"));
  if (j.contains("projection")) c.projection = matrix_from(j.at("projection"));
  if (j.contains("grid")) c.grid = grid_from(j.at("grid"));
  if (j.contains("sample_pairs")) c.sample_pairs = j.at("sample_pairs").get<std::size_t>();
  if (j.contains("verification_pairs"))
    c.verification_pairs = j.at("verification_pairs").get<std::size_t>();
  if (j.contains("integrator_tol")) c.integrator_tol = j.at("integrator_tol").get<double>();
  return c;
}

SolveConfig solve_config_from_file(const std::string& path) {
  const json j = parse_file(path);
  SolveConfig c;
  const auto& p = j.at("problem");
  c.problem.A = matrix_function_from(p.at("A"));
  const Eigen::Index dim = c.problem.A.dimension();
  c.problem.dichotomy = dichotomy_from(p);
  if (p.contains("projection")) c.problem.projection = matrix_from(p.at("projection"));
  c.problem.f = state_map_from(p.contains("f") ? p.at("f") : json(), dim);
  c.problem.g = param_map_from(p.contains("g") ? p.at("g") : json(), dim);
  c.problem.nu = p.at("nu").get<double>();
  c.problem.r = p.at("r").get<double>();
  if (j.contains("grid")) c.options.core = grid_from(j.at("grid"));
  apply_tolerances(j, c.options);
  if (j.contains("seed")) c.options.moduli.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("enforce_hypotheses"))
    c.options.enforce_hypotheses = j.at("enforce_hypotheses").get<bool>();
  if (j.contains("nu_list")) for (const auto& v : j.at("nu_list")) c.nu_list.push_back(v.get<double>());
  return c;
}

DelayConfig delay_config_from_file(const std::string& path) {
  const json j = parse_file(path);
  DelayConfig c;
  const auto& p = j.at("problem");
  c.problem.A = matrix_function_from(p.at("A"));
  const Eigen::Index dim = c.problem.A.dimension();
  c.problem.dichotomy = dichotomy_from(p);
  if (p.contains("projection")) c.problem.projection = matrix_from(p.at("projection"));
  c.problem.h = p.contains("h") ? signal_from(p.at("h")) : Signal::constant(Eigen::VectorXd::Zero(dim));
  c.problem.g = delay_map_from(p.at("g"), dim);
  c.problem.lag = p.at("lag").get<double>();
  c.problem.nu = p.at("nu").get<double>();
  c.problem.r = p.at("r").get<double>();
  if (p.contains("g_sup")) c.problem.g_sup = p.at("g_sup").get<double>();
  if (p.contains("M1")) c.problem.M1 = p.at("M1").get<double>();
  if (j.contains("grid")) c.options.core = grid_from(j.at("grid"));
  apply_tolerances(j, c.options);
  if (j.contains("seed")) c.options.moduli.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("nu_list")) for (const auto& v : j.at("nu_list")) c.nu_list.push_back(v.get<double>());
  return c;
}

AverageConfig average_config_from_file(const std::string& path) {
  const json j = parse_file(path);
  AverageConfig c;
  const auto& fj = j.at("field");
  const std::string kind = fj.at("kind").get<std::string>();
  const Eigen::MatrixXd M = matrix_from(fj.at("matrix"));
  const Signal s = signal_from(fj.at("signal"));
  const Eigen::Index dim = M.rows();
  if (s.dimension() != dim) throw ParseError("average field: signal dimension mismatch");
  const bool nu_scaled = kind == "nu_linear_plus_signal";
  if (!nu_scaled && kind != "linear_plus_signal")
    throw ParseError("unknown field kind: " + kind);
  c.field.dim = dim;
  c.field.value = [M, s, nu_scaled](double t, const Eigen::VectorXd& x, double nu) -> Eigen::VectorXd {
    Eigen::VectorXd v = M * x + s.eval(t);
    return nu_scaled ? (nu * v).eval() : v;
  };
  c.field.jacobian = [M, nu_scaled](double, const Eigen::VectorXd&, double nu) -> Eigen::MatrixXd {
    return nu_scaled ? (nu * M).eval() : M;
  };
  c.field.W_radius = fj.contains("W_radius") ? fj.at("W_radius").get<double>() : 1.0;
  c.field.sup_bound = fj.contains("sup_bound")
                          ? fj.at("sup_bound").get<double>()
                          : M.operatorNorm() * c.field.W_radius + s.sup_bound();
  if (j.contains("r0")) c.r0 = j.at("r0").get<double>();
  if (j.contains("nu_list")) {
    c.nu_list.clear();
    for (const auto& v : j.at("nu_list")) c.nu_list.push_back(v.get<double>());
  }
  if (j.contains("grid")) c.options.core = grid_from(j.at("grid"));
  if (j.contains("tolerances")) {
    const auto& t = j.at("tolerances");
    if (t.contains("fixed_point_tol")) c.options.tol = t.at("fixed_point_tol").get<double>();
    if (t.contains("tail_tol")) c.options.z_tail_tol = t.at("tail_tol").get<double>();
  }
  if (j.contains("q")) c.options.mollifier_q = j.at("q").get<int>();
  if (j.contains("x_init")) c.options.x_init = vector_from(j.at("x_init"));
  if (j.contains("T_average")) c.options.averaging.T_average = j.at("T_average").get<double>();
  return c;
}

BrusselatorSpec brusselator_spec_from_file(const std::string& path) {
  const json j = parse_file(path);
  BrusselatorSpec spec;
  spec.a = signal_from(j.at("a"));
  spec.b = signal_from(j.at("b"));
  if (j.contains("nu")) spec.nu = j.at("nu").get<double>();
  if (j.contains("g")) spec.g = param_map_from(j.at("g"), 2);
  if (j.contains("r")) spec.r = j.at("r").get<double>();
  if (j.contains("grid")) spec.core = grid_from(j.at("grid"));
  if (j.contains("tolerances")) {
    const auto& t = j.at("tolerances");
    if (t.contains("fixed_point_tol")) spec.tol = t.at("fixed_point_tol").get<double>();
    if (t.contains("tail_tol")) spec.tail_tol = t.at("tail_tol").get<double>();
  }
  if (j.contains("mean_T")) spec.mean_T = j.at("mean_T").get<double>();
  return spec;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace {

json hypothesis_json_obj(const HypothesisReport& r) {
  return json{{"K", r.K},
              {"alpha", r.alpha},
              {"M_r", r.M_r},
              {"delta", r.delta},
              {"N1", r.N1},
              {"N2", r.N2},
              {"M1", r.M1},
              {"g_sup", r.g_sup},
              {"g0_defect", r.g0_defect},
              {"Lstar", r.Lstar},
              {"contraction_q", std::isfinite(r.contraction_q) ? json(r.contraction_q) : json("inf")},
              {"nu0", r.nu0},
              {"r", r.r},
              {"r_tilde", r.r_tilde},
              {"nu", r.nu},
              {"pass",
               {{"h1_dichotomy", r.h1_dichotomy},
                {"h2_lipschitz", r.h2_lipschitz},
                {"h3_delta", r.h3_delta},
                {"h4_g_vanishes", r.h4_g_vanishes},
                {"ball_condition", r.ball_condition},
                {"q_contractive", r.q_contractive},
                {"all", r.all_pass()}}}};
}

}  // namespace

std::string hypothesis_to_json(const HypothesisReport& rep) {
  json j = hypothesis_json_obj(rep);
  j["schema_version"] = kSchemaVersion;
  return j.dump(2);
}

std::string scan_report_json(const TranslationScan& scan, double epsilon) {
  json accepted = json::array();
  for (const auto& [tau, defect] : scan.accepted) accepted.push_back(json::array({tau, defect}));
  json j{{"schema_version", kSchemaVersion},
         {"epsilon", epsilon},
         {"scan_step", scan.scan_step},
         {"accepted_count", scan.accepted.size()},
         {"accepted", accepted}};
  j["max_gap"] = scan.max_gap ? json(*scan.max_gap) : json();
  return j.dump(2);
}

std::string dichotomy_report_json(const DichotomyEstimate& est, const DichotomyVerification& ver) {
  json P = json::array();  // row-major
  for (Eigen::Index r = 0; r < est.data.P.rows(); ++r)
    for (Eigen::Index c = 0; c < est.data.P.cols(); ++c) P.push_back(est.data.P(r, c));
  json j{{"schema_version", kSchemaVersion},
         {"found", est.report.found},
         {"K", est.data.K},
         {"alpha", est.data.alpha},
         {"P", P},
         {"alpha_forward", est.report.alpha_forward},
         {"alpha_backward", est.report.alpha_backward},
         {"worst_ratio", ver.worst_ratio},
         {"worst_pair", json::array({ver.worst_t, ver.worst_s})},
         {"samples", ver.samples},
         {"message", est.report.message}};
  return j.dump(2);
}

std::string solve_report_json(const SolveResult& result) {
  json j{{"schema_version", kSchemaVersion},
         {"iterate_norms", result.iterate_norms},
         {"residual_sup", result.residual_sup},
         {"iterations", result.iterations},
         {"hypothesis", hypothesis_json_obj(result.hypothesis)},
         {"base_dichotomy", {{"K", result.base_dichotomy.K}, {"alpha", result.base_dichotomy.alpha}}},
         {"perturbed_fitted",
          {{"K", result.perturbed_fitted.K}, {"alpha", result.perturbed_fitted.alpha}}},
         {"roughness_valid", result.roughness_valid}};
  if (result.roughness_valid)
    j["perturbed_guaranteed"] = {{"K", result.perturbed_guaranteed.K},
                                 {"alpha", result.perturbed_guaranteed.alpha}};
  return j.dump(2);
}

std::string averaging_report_json(const EquilibriumReport& eq,
                                  const std::vector<AveragingRunRow>& rows) {
  json eigs = json::array();
  for (Eigen::Index i = 0; i < eq.eigenvalues.size(); ++i)
    eigs.push_back(json::array({eq.eigenvalues(i).real(), eq.eigenvalues(i).imag()}));
  json per_nu = json::array();
  for (const auto& row : rows) {
    json r{{"nu", row.nu},
           {"sup_F", row.sup_F},
           {"residual", row.residual},
           {"sup_deviation", row.sup_deviation}};
    r["diagnostics"] = diagnostics_json(row.diag);
    per_nu.push_back(std::move(r));
  }
  json j{{"schema_version", kSchemaVersion},
         {"x0", vector_json(eq.x0)},
         {"eigenvalues", eigs},
         {"hyperbolic", eq.hyperbolic},
         {"min_abs_re", eq.min_abs_re},
         {"runs", per_nu}};
  return j.dump(2);
}

std::string brusselator_report_json(const BrusselatorRun& run) {
  json eigs = json::array();
  for (Eigen::Index i = 0; i < run.build.eigenvalues.size(); ++i)
    eigs.push_back(json::array({run.build.eigenvalues(i).real(), run.build.eigenvalues(i).imag()}));
  json j{{"schema_version", kSchemaVersion},
         {"reference", json::array({run.build.reference(0), run.build.reference(1)})},
         {"a_mean", run.build.a_mean},
         {"b_mean", run.build.b_mean},
         {"eigenvalues", eigs},
         {"components_positive", run.components_positive},
         {"residual_sup", run.solve.residual_sup},
         {"iterate_norms", run.solve.iterate_norms},
         {"hypothesis", hypothesis_json_obj(run.solve.hypothesis)}};
  return j.dump(2);
}

std::string failure_report_json(const std::string& command, const std::string& error) {
  return json{{"schema_version", kSchemaVersion}, {"command", command}, {"status", "error"},
              {"error", error}}
      .dump(2);
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

void write_xi_psi_csv(const GridFunction& xi, const GridFunction& psi, const std::string& path) {
  if (xi.size() != psi.size() || xi.dimension() != psi.dimension())
    throw PreconditionError("write_xi_psi_csv: shape mismatch");
  std::ofstream os(path);
  if (!os) throw Error("cannot open for writing: " + path);
  os << "t";
  for (Eigen::Index j = 0; j < xi.dimension(); ++j) os << ",xi_" << (j + 1);
  for (Eigen::Index j = 0; j < psi.dimension(); ++j) os << ",psi_" << (j + 1);
  os << "\n";
  char buf[40];
  for (std::size_t k = 0; k < xi.size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%.17g", xi.grid.node(k));
    os << buf;
    for (Eigen::Index j = 0; j < xi.dimension(); ++j) {
      std::snprintf(buf, sizeof(buf), ",%.17g", xi.values(static_cast<Eigen::Index>(k), j));
      os << buf;
    }
    for (Eigen::Index j = 0; j < psi.dimension(); ++j) {
      std::snprintf(buf, sizeof(buf), ",%.17g", psi.values(static_cast<Eigen::Index>(k), j));
      os << buf;
    }
    os << "\n";
  }
}

void write_reduced_trace_csv(const std::vector<AveragingRunRow>& rows, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for writing: " + path);
  os << "nu,sup_F,sup_nuU,sup_nudU,sup_G,sup_dG\n";
  char buf[192];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", row.nu, row.sup_F,
                  row.diag.sup_nu_U, row.diag.sup_nu_dU, row.diag.sup_G, row.diag.sup_dG);
    os << buf;
  }
}

}  // namespace rap
