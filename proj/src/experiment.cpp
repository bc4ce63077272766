#include "xxz/experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unistd.h>

#include <fmt/format.h>

#include "xxz/dtwa.hpp"
#include "xxz/exact.hpp"
#include "xxz/oat.hpp"
#include "xxz/observables.hpp"
#include "xxz/thermal.hpp"

#ifndef XXZ_VERSION
#define XXZ_VERSION "unknown"
#endif

namespace xxz {

namespace {

using nlohmann::json;

constexpr std::pair<ExperimentKind, std::string_view> kKindNames[] = {
    {ExperimentKind::dynamics_dtwa, "dynamics-dtwa"},
    {ExperimentKind::dynamics_ed, "dynamics-ed"},
    {ExperimentKind::oat_ref, "oat-ref"},
    {ExperimentKind::thermal_match, "thermal-match"},
    {ExperimentKind::sweep, "sweep"},
    {ExperimentKind::fit_scaling, "fit-scaling"},
    {ExperimentKind::entropy_rate, "entropy-rate"},
    {ExperimentKind::coupling_sweep, "coupling-sweep"},
};

const std::map<std::string, std::set<std::string>> kSections = {
    {"lattice", {"Lx", "Ly"}},
    {"model", {"Jperp", "Delta", "alpha"}},
    {"time", {"tau_max", "n_points", "scaled"}},
    {"sampler", {"n_traj", "master_seed"}},
    {"output", {"path"}},
    {"grid", {"deltas", "alphas", "sizes"}},
    {"entropy", {"window"}},
};

std::vector<double> default_sweep_deltas() {
    std::vector<double> d;
    for (int k = 0; k <= 30; ++k) d.push_back(std::round((-4.0 + 0.2 * k) * 1e10) / 1e10);
    return d;
}

const std::vector<double> kDefaultAlphas = {1, 2, 3, 4, 6};

std::vector<int> default_coupling_sizes() {
    std::vector<int> s;
    for (int l = 2; l <= 10; ++l) s.push_back(l);
    return s;
}

const json* find(const json& j, const std::string& section, const std::string& key) {
    auto s = j.find(section);
    if (s == j.end()) return nullptr;
    auto k = s->find(key);
    return k == s->end() ? nullptr : &*k;
}

double get_number(const json& v, const std::string& field) {
    if (!v.is_number()) throw ConfigError(field, "expected a number");
    double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError(field, "must be finite");
    return x;
}

long long get_integer(const json& v, const std::string& field) {
    if (!v.is_number_integer()) throw ConfigError(field, "expected an integer");
    return v.get<long long>();
}

std::vector<double> get_number_list(const json& v, const std::string& field) {
    if (!v.is_array() || v.empty()) throw ConfigError(field, "expected a non-empty array");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(get_number(v[i], fmt::format("{}[{}]", field, i)));
    }
    return out;
}

bool uses_model_point(ExperimentKind k) {
    return k == ExperimentKind::dynamics_dtwa || k == ExperimentKind::dynamics_ed ||
           k == ExperimentKind::oat_ref || k == ExperimentKind::fit_scaling;
}

bool uses_lattice(ExperimentKind k) {
    return k != ExperimentKind::fit_scaling && k != ExperimentKind::coupling_sweep;
}

bool uses_time(ExperimentKind k) {
    return k != ExperimentKind::thermal_match && k != ExperimentKind::coupling_sweep;
}

bool uses_sampler(const ExperimentConfig& c) {
    switch (c.kind) {
    case ExperimentKind::dynamics_dtwa: return true;
    case ExperimentKind::sweep:
    case ExperimentKind::fit_scaling: return c.engine == Engine::dtwa;
    default: return false;
    }
}

std::string num(double x) { return fmt::format("{}", x); }

std::string csv_opt(const std::optional<double>& x) { return x ? num(*x) : std::string(); }

double s2_norm(const CollectiveMoments& m, int n) {
    return m.total_spin_sq() / (0.5 * n * (0.5 * n + 1.0));
}

double sperp2_norm(const CollectiveMoments& m, int n) {
    return m.transverse_spin_sq() / (0.25 * n * (n + 1.0));
}

struct DynamicsPoint {
    double t = 0.0;
    double tau = 0.0;
    CollectiveMoments moments;
    std::optional<SqueezingResult> squeezing;
    std::optional<double> entropy;
    std::optional<double> xi2_se;
    std::optional<double> s2_se;
};

struct DynamicsRun {
    std::string engine;
    LatticeSpec lattice;
    ModelParams model;
    std::vector<DynamicsPoint> points;
    std::optional<std::size_t> n_traj;
    std::optional<std::uint64_t> seed;
    json diagnostics = json::object();
};

std::optional<SqueezingResult> try_squeezing(const CollectiveMoments& m, int n) {
    try {
        return squeezing_from_moments(m, n);
    } catch (const SqueezingUndefined&) {
        return std::nullopt;
    }
}

struct Grid {
    std::vector<double> t;
    std::vector<double> tau;
};

Grid make_grid(const TimeGrid& g, double rate) {
    Grid out;
    out.t = time_grid(g, rate);
    for (int k = 0; k < g.n_points; ++k) {
        double tk = g.tau_max * k / (g.n_points - 1);
        out.tau.push_back(g.scaled ? tk : tk * rate);
    }
    return out;
}

DynamicsRun run_dtwa(const LatticeSpec& lattice, const ModelParams& model, const TimeGrid& tg,
                     std::size_t n_traj, std::uint64_t seed, int threads) {
    auto sites = build_lattice(lattice);
    auto cm = coupling_matrix(sites, model.jperp, model.alpha);
    const int n = lattice.site_count();
    Grid g = make_grid(tg, scaled_time_rate(cm.mean(), model.delta));
    EnsembleOptions opts;
    opts.threads = threads;
    auto res = run_ensemble(cm, model.delta, g.t, SamplerPolicy{seed, n_traj}, opts);

    DynamicsRun run{"dtwa", lattice, model, {}, n_traj, seed};
    for (std::size_t k = 0; k < g.t.size(); ++k) {
        DynamicsPoint p;
        p.t = g.t[k];
        p.tau = g.tau[k];
        p.moments = res.total[k].moments();
        p.squeezing = try_squeezing(p.moments, n);
        try {
            p.xi2_se = xi2_stderr(res, k, n);
        } catch (const SqueezingUndefined&) {
        }
        p.s2_se = jackknife_stderr(res, k, [n](const CollectiveMoments& m) { return s2_norm(m, n); });
        run.points.push_back(std::move(p));
    }
    run.diagnostics = {
        {"n_traj", res.n_traj},
        {"n_aborted", res.n_aborted},
        {"abort_messages", res.abort_messages},
        {"max_energy_drift", res.max_energy_drift},
        {"max_norm_drift", res.max_norm_drift},
        {"max_sz_drift", res.max_sz_drift},
        {"min_step", res.min_step},
    };
    return run;
}

DynamicsRun run_ed(const LatticeSpec& lattice, const ModelParams& model, const TimeGrid& tg) {
    auto sites = build_lattice(lattice);
    auto cm = coupling_matrix(sites, model.jperp, model.alpha);
    const int n = lattice.site_count();
    Grid g = make_grid(tg, scaled_time_rate(cm.mean(), model.delta));
    PairOperator h(n, hamiltonian_terms(cm, model.delta));

    DynamicsRun run{"ed", lattice, model, {}, std::nullopt, std::nullopt};
    evolve_state(build_initial_state(n), h, g.t,
                 [&](std::size_t k, double t, const StateVector& psi) {
                     DynamicsPoint p;
                     p.t = t;
                     p.tau = g.tau[k];
                     p.moments = collective_moments(psi);
                     p.squeezing = try_squeezing(p.moments, n);
                     p.entropy = entanglement_entropy(psi);
                     run.points.push_back(std::move(p));
                 });
    run.diagnostics = {{"cut_sites", cut_sites(n)}};
    return run;
}

DynamicsRun run_engine(Engine e, const LatticeSpec& lattice, const ModelParams& model,
                       const ExperimentConfig& c, int threads) {
    return e == Engine::dtwa ? run_dtwa(lattice, model, c.time, c.n_traj, c.master_seed, threads)
                             : run_ed(lattice, model, c.time);
}

void append_dynamics_rows(std::string& csv, const DynamicsRun& run) {
    const int n = run.lattice.site_count();
    for (const auto& p : run.points) {
        const auto& m = p.moments;
        std::optional<double> xi2, db;
        if (p.squeezing) {
            xi2 = p.squeezing->xi2;
            db = p.squeezing->xi2_db;
        }
        csv += fmt::format(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", run.engine,
            run.lattice.lx, run.lattice.ly, num(run.model.alpha), num(run.model.delta), num(p.t),
            num(p.tau), csv_opt(xi2), csv_opt(db), num(s2_norm(m, n)), num(sperp2_norm(m, n)),
            num(m.first.x), num(m.first.y), num(m.first.z), csv_opt(p.entropy),
            run.n_traj ? std::to_string(*run.n_traj) : std::string(),
            run.seed ? std::to_string(*run.seed) : std::string(), csv_opt(p.xi2_se),
            csv_opt(p.s2_se));
    }
}

OptimalSqueezing optimum_of(const DynamicsRun& run, double& tau_star) {
    std::vector<std::pair<double, double>> series;
    std::vector<std::pair<double, double>> tau_series;
    for (const auto& p : run.points) {
        if (!p.squeezing) continue;
        series.emplace_back(p.t, p.squeezing->xi2);
        tau_series.emplace_back(p.tau, p.squeezing->xi2);
    }
    auto opt = optimal_squeezing(series);
    tau_star = optimal_squeezing(tau_series).t_star;
    return opt;
}

json optimum_json(const OptimalSqueezing& o, double tau_star) {
    return {{"t_star", o.t_star},
            {"tau_star", tau_star},
            {"xi2_min", o.xi2_min},
            {"xi2_min_db", to_db(o.xi2_min)},
            {"reached", o.reached}};
}

std::vector<double> alpha_list(const ExperimentConfig& c) {
    return c.alphas.empty() ? std::vector<double>{c.model.alpha} : c.alphas;
}

std::vector<double> delta_list(const ExperimentConfig& c) {
    return c.deltas.empty() ? std::vector<double>{c.model.delta} : c.deltas;
}

json design_constants() {
    StepControl step;
    KrylovOptions krylov;
    EnsembleOptions ens;
    return {
        {"db_convention", "xi2_db = 10 log10(xi2)"},
        {"s2_norm", "<S^2> / ((N/2)(N/2+1))"},
        {"sperp2_norm", "<S_perp^2> / (N(N+1)/4)"},
        {"scaled_time", "tau = t Jbar |Delta|; tau = t Jbar when Delta = 0"},
        {"squeezing_undefined_below", "|<S>| < 1e-9 N"},
        {"entropy_window_default", kDefaultEntropyWindow},
        {"entropy_cut", "first ceil(N/2) sites in row-major order"},
        {"scaling_fit", "unweighted least squares of ln xi2_min against ln N"},
        {"dtwa_energy_tolerance", step.energy_tolerance},
        {"dtwa_norm_tolerance", step.norm_tolerance},
        {"dtwa_step_factor", step.step_factor},
        {"dtwa_max_refinements", step.max_refinements},
        {"dtwa_jackknife_batches", ens.batches},
        {"dtwa_max_abort_fraction", ens.max_abort_fraction},
        {"krylov_tolerance", krylov.tolerance},
        {"krylov_max_subspace", krylov.max_subspace},
        {"thermal_tolerance", 1e-8},
    };
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", p.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_atomic(const std::filesystem::path& target, const std::string& content) {
    auto tmp = target;
    tmp += fmt::format(".tmp{}", static_cast<long>(::getpid()));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error(fmt::format("cannot write {}", tmp.string()));
        out << content;
        out.close();
        if (!out) {
            std::filesystem::remove(tmp);
            throw std::runtime_error(fmt::format("write failed for {}", tmp.string()));
        }
    }
    std::filesystem::rename(tmp, target);
}

struct CsvTable {
    std::map<std::string, std::size_t> columns;
    std::vector<std::vector<std::string>> rows;

    const std::string& at(std::size_t r, const std::string& col) const {
        auto it = columns.find(col);
        if (it == columns.end()) throw std::invalid_argument("missing column " + col);
        return rows[r].at(it->second);
    }
};

std::vector<std::string> split(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(',', start);
        out.emplace_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

CsvTable parse_csv(std::string_view text) {
    CsvTable table;
    std::size_t pos = 0;
    bool header = true;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(pos, end - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        pos = end + 1;
        if (line.empty()) continue;
        auto cells = split(line);
        if (header) {
            for (std::size_t i = 0; i < cells.size(); ++i) table.columns[cells[i]] = i;
            header = false;
        } else {
            if (cells.size() != table.columns.size()) {
                throw std::invalid_argument(
                    fmt::format("row {} has {} cells, header has {}", table.rows.size() + 1,
                                cells.size(), table.columns.size()));
            }
            table.rows.push_back(std::move(cells));
        }
    }
    if (header) throw std::invalid_argument("empty CSV");
    return table;
}

std::optional<double> parse_cell(const std::string& s) {
    if (s.empty()) return std::nullopt;
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("malformed number '" + s + "'");
    return v;
}

}  // namespace

ConfigError::ConfigError(std::string field, const std::string& message)
    : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}

std::string_view kind_name(ExperimentKind kind) {
    for (const auto& [k, name] : kKindNames) {
        if (k == kind) return name;
    }
    return "unknown";
}

std::optional<ExperimentKind> parse_kind(std::string_view name) {
    for (const auto& [k, n] : kKindNames) {
        if (n == name) return k;
    }
    return std::nullopt;
}

ExperimentConfig parse_config(const json& j) {
    if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "kind" || key == "engine") continue;
        auto sec = kSections.find(key);
        if (sec == kSections.end()) throw ConfigError(key, "unknown key");
        if (!value.is_object()) throw ConfigError(key, "expected an object");
        for (const auto& [sub, _] : value.items()) {
            if (!sec->second.count(sub)) throw ConfigError(key + "." + sub, "unknown key");
        }
    }

    ExperimentConfig c;
    auto kind_it = j.find("kind");
    if (kind_it == j.end()) throw ConfigError("kind", "required");
    if (!kind_it->is_string()) throw ConfigError("kind", "expected a string");
    auto kind = parse_kind(kind_it->get<std::string>());
    if (!kind) throw ConfigError("kind", "unknown kind '" + kind_it->get<std::string>() + "'");
    c.kind = *kind;

    if (auto e = j.find("engine"); e != j.end()) {
        if (c.kind != ExperimentKind::sweep && c.kind != ExperimentKind::fit_scaling) {
            throw ConfigError("engine", "only used by sweep and fit-scaling");
        }
        if (*e == "dtwa") {
            c.engine = Engine::dtwa;
        } else if (*e == "ed") {
            c.engine = Engine::ed;
        } else {
            throw ConfigError("engine", "expected \"dtwa\" or \"ed\"");
        }
    }

    if (auto v = find(j, "grid", "deltas")) c.deltas = get_number_list(*v, "grid.deltas");
    if (auto v = find(j, "grid", "alphas")) c.alphas = get_number_list(*v, "grid.alphas");
    if (auto v = find(j, "grid", "sizes")) {
        for (double s : get_number_list(*v, "grid.sizes")) {
            if (s != std::floor(s) || s < 2 || s > 1000) {
                throw ConfigError("grid.sizes", "entries must be integers in [2, 1000]");
            }
            c.sizes.push_back(static_cast<int>(s));
        }
    }
    for (double a : c.alphas) {
        if (a < 0) throw ConfigError("grid.alphas", "exponents must be >= 0");
    }

    if (c.kind == ExperimentKind::sweep) {
        if (c.deltas.empty()) c.deltas = default_sweep_deltas();
        if (c.alphas.empty()) c.alphas = kDefaultAlphas;
    }
    if (c.kind == ExperimentKind::coupling_sweep) {
        if (c.alphas.empty()) c.alphas = kDefaultAlphas;
        if (c.sizes.empty()) c.sizes = default_coupling_sizes();
    }
    if (c.kind == ExperimentKind::fit_scaling && c.sizes.size() < 2) {
        throw ConfigError("grid.sizes", "fit-scaling needs at least two lattice sizes");
    }

    if (uses_lattice(c.kind)) {
        for (const char* key : {"Lx", "Ly"}) {
            std::string field = std::string("lattice.") + key;
            auto v = find(j, "lattice", key);
            if (!v) throw ConfigError(field, "required");
            long long x = get_integer(*v, field);
            if (x < 1 || x > 1000) throw ConfigError(field, "must be in [1, 1000]");
            (key[1] == 'x' ? c.lattice.lx : c.lattice.ly) = static_cast<int>(x);
        }
        if (c.lattice.site_count() < 2) throw ConfigError("lattice", "needs at least two sites");
    }

    if (auto v = find(j, "model", "Jperp")) {
        c.model.jperp = get_number(*v, "model.Jperp");
        if (!(c.model.jperp > 0)) throw ConfigError("model.Jperp", "must be > 0");
    }
    const bool grid_deltas = !c.deltas.empty();
    const bool grid_alphas = !c.alphas.empty();
    if (auto v = find(j, "model", "Delta")) {
        c.model.delta = get_number(*v, "model.Delta");
    } else if (uses_model_point(c.kind) || (!grid_deltas && c.kind != ExperimentKind::coupling_sweep)) {
        throw ConfigError("model.Delta", "required");
    }
    if (auto v = find(j, "model", "alpha")) {
        c.model.alpha = get_number(*v, "model.alpha");
        if (c.model.alpha < 0) throw ConfigError("model.alpha", "must be >= 0");
    } else if (uses_model_point(c.kind) || !grid_alphas) {
        throw ConfigError("model.alpha", "required");
    }
    if (c.kind == ExperimentKind::oat_ref && c.model.delta == 0.0) {
        throw ConfigError("model.Delta", "oat-ref needs Delta != 0 (chi = Jbar |Delta| / 2)");
    }

    if (uses_time(c.kind)) {
        auto tm = find(j, "time", "tau_max");
        if (!tm) throw ConfigError("time.tau_max", "required");
        c.time.tau_max = get_number(*tm, "time.tau_max");
        if (!(c.time.tau_max > 0)) throw ConfigError("time.tau_max", "must be > 0");
        auto np = find(j, "time", "n_points");
        if (!np) throw ConfigError("time.n_points", "required");
        long long n = get_integer(*np, "time.n_points");
        if (n < 2 || n > 1000000) {
            throw ConfigError("time.n_points", "must be in [2, 1000000] for a strictly increasing grid");
        }
        c.time.n_points = static_cast<int>(n);
        if (auto s = find(j, "time", "scaled")) {
            if (!s->is_boolean()) throw ConfigError("time.scaled", "expected true or false");
            c.time.scaled = s->get<bool>();
        }
    }

    if (auto v = find(j, "sampler", "n_traj")) {
        long long n = get_integer(*v, "sampler.n_traj");
        if (n < 2) throw ConfigError("sampler.n_traj", "must be >= 2");
        c.n_traj = static_cast<std::size_t>(n);
    }
    if (auto v = find(j, "sampler", "master_seed")) {
        if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0)) {
            throw ConfigError("sampler.master_seed", "expected a non-negative integer");
        }
        c.master_seed = v->get<std::uint64_t>();
    }
    if (auto v = find(j, "output", "path")) {
        if (!v->is_string() || v->get<std::string>().empty()) {
            throw ConfigError("output.path", "expected a non-empty string");
        }
        c.output = v->get<std::string>();
    } else {
        c.output = std::string(kind_name(c.kind)) + ".csv";
    }
    if (auto v = find(j, "entropy", "window")) {
        c.entropy_window = get_number(*v, "entropy.window");
        if (!(c.entropy_window > 0)) throw ConfigError("entropy.window", "must be > 0");
    }
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("<file>", fmt::format("{}: {}", path.string(), e.what()));
    }
    return parse_config(j);
}

json config_to_json(const ExperimentConfig& c) {
    json j;
    j["kind"] = std::string(kind_name(c.kind));
    if (uses_lattice(c.kind)) j["lattice"] = {{"Lx", c.lattice.lx}, {"Ly", c.lattice.ly}};
    j["model"] = {{"Jperp", c.model.jperp}, {"Delta", c.model.delta}, {"alpha", c.model.alpha}};
    if (uses_time(c.kind)) {
        j["time"] = {{"tau_max", c.time.tau_max},
                     {"n_points", c.time.n_points},
                     {"scaled", c.time.scaled}};
    }
    if (uses_sampler(c)) j["sampler"] = {{"n_traj", c.n_traj}, {"master_seed", c.master_seed}};
    if (c.kind == ExperimentKind::sweep || c.kind == ExperimentKind::fit_scaling) {
        j["engine"] = c.engine == Engine::dtwa ? "dtwa" : "ed";
    }
    json grid = json::object();
    if (!c.deltas.empty()) grid["deltas"] = c.deltas;
    if (!c.alphas.empty()) grid["alphas"] = c.alphas;
    if (!c.sizes.empty()) grid["sizes"] = c.sizes;
    if (!grid.empty()) j["grid"] = grid;
    if (c.kind == ExperimentKind::entropy_rate) j["entropy"] = {{"window", c.entropy_window}};
    j["output"] = {{"path", c.output}};
    return j;
}

void check_resource_guards(const ExperimentConfig& c) {
    auto ed_guard = [](int n, const std::string& what) {
        if (n > kMaxDynamicsSites) {
            throw ResourceGuardError(fmt::format(
                "ED engine cap N <= {} exceeded: {} has N = {}", kMaxDynamicsSites, what, n));
        }
    };
    const int n = c.lattice.site_count();
    const std::string lat = fmt::format("{}x{} lattice", c.lattice.lx, c.lattice.ly);
    switch (c.kind) {
    case ExperimentKind::dynamics_ed:
    case ExperimentKind::entropy_rate: ed_guard(n, lat); break;
    case ExperimentKind::sweep:
        if (c.engine == Engine::ed) ed_guard(n, lat);
        break;
    case ExperimentKind::fit_scaling:
        if (c.engine == Engine::ed) {
            for (int l : c.sizes) ed_guard(l * l, fmt::format("{}x{} lattice", l, l));
        }
        break;
    case ExperimentKind::thermal_match:
        if (n > kMaxThermalSites) {
            throw ResourceGuardError(fmt::format("thermal matcher cap N <= {} exceeded: {} has N = {}",
                                                 kMaxThermalSites, lat, n));
        }
        break;
    default: break;
    }
}

std::vector<double> time_grid(const TimeGrid& grid, double rate) {
    if (grid.n_points < 2 || !(grid.tau_max > 0)) {
        throw std::invalid_argument("time grid needs n_points >= 2 and tau_max > 0");
    }
    std::vector<double> t;
    for (int k = 0; k < grid.n_points; ++k) {
        double x = grid.tau_max * k / (grid.n_points - 1);
        t.push_back(grid.scaled ? x / rate : x);
    }
    return t;
}

RunArtifacts run_experiment(const ExperimentConfig& c, const RunOptions& options) {
    check_resource_guards(c);
    const auto start = std::chrono::steady_clock::now();
    RunArtifacts out;
    json results = json::object();

    switch (c.kind) {
    case ExperimentKind::dynamics_dtwa:
    case ExperimentKind::dynamics_ed: {
        auto run = c.kind == ExperimentKind::dynamics_dtwa
                       ? run_dtwa(c.lattice, c.model, c.time, c.n_traj, c.master_seed, options.threads)
                       : run_ed(c.lattice, c.model, c.time);
        out.csv = std::string(kDynamicsHeader) + "\n";
        append_dynamics_rows(out.csv, run);
        results["diagnostics"] = run.diagnostics;
        try {
            double tau_star = 0.0;
            auto opt = optimum_of(run, tau_star);
            results["optimal_squeezing"] = optimum_json(opt, tau_star);
        } catch (const std::invalid_argument&) {
            results["optimal_squeezing"] = nullptr;
        }
        break;
    }
    case ExperimentKind::oat_ref: {
        auto sites = build_lattice(c.lattice);
        auto cm = coupling_matrix(sites, c.model.jperp, c.model.alpha);
        const int n = c.lattice.site_count();
        const double chi = cm.mean() * std::abs(c.model.delta) / 2.0;
        Grid g = make_grid(c.time, scaled_time_rate(cm.mean(), c.model.delta));
        DynamicsRun run{"oat", c.lattice, c.model, {}, std::nullopt, std::nullopt};
        auto pts = oat_reference(n, chi, g.t);
        for (std::size_t k = 0; k < pts.size(); ++k) {
            DynamicsPoint p;
            p.t = g.t[k];
            p.tau = g.tau[k];
            p.moments = pts[k].moments;
            p.squeezing = pts[k].squeezing;
            run.points.push_back(std::move(p));
        }
        out.csv = std::string(kDynamicsHeader) + "\n";
        append_dynamics_rows(out.csv, run);
        auto opt = oat_tstar(n, chi);
        results["chi"] = chi;
        results["oat_t_star"] = opt.t_star;
        results["oat_xi2_min"] = opt.xi2_min;
        results["oat_xi2_min_db"] = to_db(opt.xi2_min);
        break;
    }
    case ExperimentKind::thermal_match: {
        out.csv =
            "engine,Lx,Ly,alpha,Delta,E_target,Sz2_target,beta,lambda,T_over_Jbar,energy,Sz2,S2,"
            "Sperp2_norm,residual_energy,residual_Sz2\n";
        auto sites = build_lattice(c.lattice);
        auto refl = lattice_reflections(c.lattice);
        const int n = c.lattice.site_count();
        for (double alpha : alpha_list(c)) {
            auto cm = coupling_matrix(sites, c.model.jperp, alpha);
            for (double delta : delta_list(c)) {
                PairOperator h(n, hamiltonian_terms(cm, delta));
                const double e_target = -n * (n - 1.0) * cm.mean() / 8.0;
                const double sz2_target = n / 4.0;
                auto sol = thermal_match(h, e_target, sz2_target, refl);
                const double t_over = sol.beta == 0.0
                                          ? std::numeric_limits<double>::infinity()
                                          : 1.0 / (sol.beta * cm.mean());
                out.csv += fmt::format(
                    "thermal,{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", c.lattice.lx,
                    c.lattice.ly, num(alpha), num(delta), num(e_target), num(sz2_target),
                    num(sol.beta), num(sol.lambda), num(t_over), num(sol.energy), num(sol.sz2),
                    num(sol.s2), num(sol.sperp2 / (0.25 * n * (n + 1.0))),
                    num(sol.residual_energy), num(sol.residual_sz2));
            }
        }
        break;
    }
    case ExperimentKind::sweep: {
        out.csv =
            "engine,Lx,Ly,alpha,Delta,t_star,tau_star,xi2_min,xi2_min_db,reached,n_traj,seed\n";
        const char* engine = c.engine == Engine::dtwa ? "dtwa" : "ed";
        for (double alpha : c.alphas) {
            for (double delta : c.deltas) {
                ModelParams m{c.model.jperp, delta, alpha};
                auto run = run_engine(c.engine, c.lattice, m, c, options.threads);
                double tau_star = 0.0;
                std::optional<OptimalSqueezing> opt;
                try {
                    opt = optimum_of(run, tau_star);
                } catch (const std::invalid_argument&) {
                }
                out.csv += fmt::format(
                    "{},{},{},{},{},{},{},{},{},{},{},{}\n", engine, c.lattice.lx, c.lattice.ly,
                    num(alpha), num(delta), opt ? num(opt->t_star) : "", opt ? num(tau_star) : "",
                    opt ? num(opt->xi2_min) : "", opt ? num(to_db(opt->xi2_min)) : "",
                    opt ? (opt->reached ? "1" : "0") : "",
                    c.engine == Engine::dtwa ? std::to_string(c.n_traj) : "",
                    c.engine == Engine::dtwa ? std::to_string(c.master_seed) : "");
            }
        }
        break;
    }
    case ExperimentKind::fit_scaling: {
        const char* engine = c.engine == Engine::dtwa ? "dtwa" : "ed";
        std::vector<std::pair<double, double>> pts;
        std::string rows;
        for (int l : c.sizes) {
            auto run = run_engine(c.engine, {l, l}, c.model, c, options.threads);
            double tau_star = 0.0;
            auto opt = optimum_of(run, tau_star);
            if (opt.reached) pts.emplace_back(l * l, opt.xi2_min);
            rows += fmt::format("{},{},{},{},{},{},{},{},{},{},{}", engine, l, l, l * l,
                                num(c.model.alpha), num(c.model.delta), num(opt.t_star),
                                num(tau_star), num(opt.xi2_min), num(to_db(opt.xi2_min)),
                                opt.reached ? 1 : 0);
            rows += "\n";
        }
        std::optional<ScalingFit> fit;
        if (pts.size() >= 2) fit = scaling_fit(pts);
        out.csv = "engine,Lx,Ly,N,alpha,Delta,t_star,tau_star,xi2_min,xi2_min_db,reached,nu,nu_stderr\n";
        std::istringstream lines(rows);
        for (std::string line; std::getline(lines, line);) {
            out.csv += fmt::format("{},{},{}\n", line, fit ? num(fit->nu) : "",
                                   fit && fit->stderr_nu ? num(*fit->stderr_nu) : "");
        }
        if (fit) {
            results["fit"] = {{"nu", fit->nu},
                              {"intercept", fit->intercept},
                              {"nu_stderr", fit->stderr_nu ? json(*fit->stderr_nu) : json()},
                              {"max_residual", fit->max_residual},
                              {"points", fit->points}};
        } else {
            results["fit"] = nullptr;
            results["fit_skipped"] = "fewer than two sizes reached the squeezing minimum";
        }
        break;
    }
    case ExperimentKind::entropy_rate: {
        out.csv = "engine,Lx,Ly,alpha,Delta,window,points_in_window,rate\n";
        for (double alpha : alpha_list(c)) {
            for (double delta : delta_list(c)) {
                auto run = run_ed(c.lattice, {c.model.jperp, delta, alpha}, c.time);
                std::vector<std::pair<double, double>> series;
                int inside = 0;
                for (const auto& p : run.points) {
                    series.emplace_back(p.tau, *p.entropy);
                    if (p.tau <= c.entropy_window) ++inside;
                }
                double rate = entropy_rate(series, c.entropy_window);
                out.csv += fmt::format("ed,{},{},{},{},{},{},{}\n", c.lattice.lx, c.lattice.ly,
                                       num(alpha), num(delta), num(c.entropy_window), inside,
                                       num(rate));
            }
        }
        break;
    }
    case ExperimentKind::coupling_sweep: {
        out.csv = "Lx,Ly,N,alpha,Jbar_over_Jperp\n";
        for (double alpha : c.alphas) {
            for (int l : c.sizes) {
                auto sites = build_lattice({l, l});
                auto cm = coupling_matrix(sites, c.model.jperp, alpha);
                out.csv += fmt::format("{},{},{},{},{}\n", l, l, l * l, num(alpha),
                                       num(cm.mean() / c.model.jperp));
            }
        }
        break;
    }
    }

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json caps_hit = json::array();
    if (auto d = results.find("diagnostics"); d != results.end() && d->contains("n_aborted") &&
                                              (*d)["n_aborted"].get<std::size_t>() > 0) {
        caps_hit.push_back("dtwa trajectories aborted after max step refinements");
    }
    out.manifest = {
        {"config", config_to_json(c)},
        {"version", XXZ_VERSION},
        {"seed", c.master_seed},
        {"threads", options.threads},
        {"wall_time_s", wall},
        {"engine_caps",
         {{"ed_max_sites", kMaxDynamicsSites},
          {"thermal_max_sites", kMaxThermalSites},
          {"hit", caps_hit}}},
        {"constants", design_constants()},
        {"results", results},
        {"csv_bytes", out.csv.size()},
    };
    return out;
}

std::filesystem::path manifest_path_for(const std::filesystem::path& csv_path) {
    auto p = csv_path;
    p.replace_extension(".json");
    if (p == csv_path) p += ".json";
    return p;
}

std::filesystem::path write_artifacts(const RunArtifacts& artifacts,
                                      const std::filesystem::path& csv_path) {
    if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
    auto manifest = artifacts.manifest;
    manifest["csv"] = csv_path.filename().string();
    const auto mpath = manifest_path_for(csv_path);
    write_atomic(csv_path, artifacts.csv);
    write_atomic(mpath, manifest.dump(2) + "\n");
    return mpath;
}

CompareReport compare_runs(std::string_view csv_a, std::string_view csv_b,
                           const CompareOptions& options) {
    auto a = parse_csv(csv_a);
    auto b = parse_csv(csv_b);
    for (const auto* table : {&a, &b}) {
        for (const char* col : {"Lx", "Ly", "t", "tau", "xi2_db", "S2_norm"}) {
            if (!table->columns.count(col)) {
                throw std::invalid_argument(fmt::format("not a dynamics CSV: no '{}' column", col));
            }
        }
    }
    if (a.rows.size() != b.rows.size()) {
        throw GridMismatch(fmt::format("time grids differ: {} rows vs {} rows", a.rows.size(),
                                       b.rows.size()));
    }
    CompareReport report;
    std::vector<std::optional<double>> db_a(a.rows.size());
    for (std::size_t r = 0; r < a.rows.size(); ++r) {
        for (const char* col : {"Lx", "Ly"}) {
            if (a.at(r, col) != b.at(r, col)) {
                throw GridMismatch(fmt::format("lattice differs at row {}: {} {} vs {}", r + 1,
                                               col, a.at(r, col), b.at(r, col)));
            }
        }
        const double ta = *parse_cell(a.at(r, "t"));
        const double tb = *parse_cell(b.at(r, "t"));
        if (std::abs(ta - tb) > 1e-9 * std::max(1.0, std::abs(ta))) {
            throw GridMismatch(fmt::format("time grids differ at row {}: t = {} vs {}", r + 1, ta, tb));
        }
        db_a[r] = parse_cell(a.at(r, "xi2_db"));
        auto db_b = parse_cell(b.at(r, "xi2_db"));
        CompareRow row;
        row.t = ta;
        row.tau = *parse_cell(a.at(r, "tau"));
        row.d_xi2_db = db_a[r] && db_b ? std::abs(*db_a[r] - *db_b)
                                        : std::numeric_limits<double>::quiet_NaN();
        row.d_s2_norm = std::abs(*parse_cell(a.at(r, "S2_norm")) - *parse_cell(b.at(r, "S2_norm")));
        report.rows.push_back(row);
    }

    std::size_t last = report.rows.empty() ? 0 : report.rows.size() - 1;
    if (options.up_to_minimum) {
        std::optional<std::size_t> imin;
        for (std::size_t r = 0; r < db_a.size(); ++r) {
            if (db_a[r] && (!imin || *db_a[r] < *db_a[*imin])) imin = r;
        }
        if (imin) last = *imin;
    }
    std::size_t n_db = 0;
    double sum_db = 0.0, sum_s2 = 0.0;
    for (std::size_t r = 0; r <= last && r < report.rows.size(); ++r) {
        const auto& row = report.rows[r];
        ++report.checked_rows;
        if (!std::isnan(row.d_xi2_db)) {
            report.max_d_xi2_db = std::max(report.max_d_xi2_db, row.d_xi2_db);
            sum_db += row.d_xi2_db;
            ++n_db;
        }
        report.max_d_s2_norm = std::max(report.max_d_s2_norm, row.d_s2_norm);
        sum_s2 += row.d_s2_norm;
    }
    if (n_db) report.mean_d_xi2_db = sum_db / n_db;
    if (report.checked_rows) report.mean_d_s2_norm = sum_s2 / report.checked_rows;
    report.pass = report.max_d_xi2_db <= options.max_db && report.max_d_s2_norm <= options.max_s2;
    return report;
}

}  // namespace xxz
