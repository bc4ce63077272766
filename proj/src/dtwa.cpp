#include "xxz/dtwa.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

#include <fmt/format.h>

namespace xxz {

namespace {

// splitmix64 finalizer
std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

void check_grid(std::span<const double> times) {
    if (times.empty() || times[0] != 0.0) throw std::invalid_argument("time grid must start at 0");
    for (std::size_t k = 1; k < times.size(); ++k)
        if (!(times[k] > times[k - 1])) throw std::invalid_argument("time grid must be strictly increasing");
}

// Upper bound on the precession rate |dH/dS_i| over spins of length sqrt(3)/2.
double precession_bound(const CouplingMatrix& cm, double delta) {
    double omega = 0.0;
    const double aniso = std::max(1.0, std::abs(1.0 + delta));
    for (std::size_t i = 0; i < cm.size(); ++i) {
        double s = 0.0;
        for (double j : cm.row(i)) s += j;
        omega = std::max(omega, s * aniso * std::sqrt(3.0) / 2.0);
    }
    return omega;
}

double pair_sum(const CouplingMatrix& cm) {
    double s = 0.0;
    for (std::size_t i = 0; i < cm.size(); ++i)
        for (std::size_t j = i + 1; j < cm.size(); ++j) s += cm(i, j);
    return s;
}

class Rk4 {
public:
    Rk4(const CouplingMatrix& cm, double delta)
        : cm_(cm), delta_(delta), k1_(cm.size()), k2_(cm.size()), k3_(cm.size()), k4_(cm.size()),
          tmp_(cm.size()) {}

    void step(std::vector<Vec3>& s, double h) {
        const std::size_t n = s.size();
        classical_drift(s, cm_, delta_, k1_);
        for (std::size_t i = 0; i < n; ++i) tmp_[i] = s[i] + (0.5 * h) * k1_[i];
        classical_drift(tmp_, cm_, delta_, k2_);
        for (std::size_t i = 0; i < n; ++i) tmp_[i] = s[i] + (0.5 * h) * k2_[i];
        classical_drift(tmp_, cm_, delta_, k3_);
        for (std::size_t i = 0; i < n; ++i) tmp_[i] = s[i] + h * k3_[i];
        classical_drift(tmp_, cm_, delta_, k4_);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] += (h / 6.0) * (k1_[i] + 2.0 * k2_[i] + 2.0 * k3_[i] + k4_[i]);
        }
    }

private:
    const CouplingMatrix& cm_;
    double delta_;
    std::vector<Vec3> k1_, k2_, k3_, k4_, tmp_;
};

Vec3 collective(std::span<const Vec3> cfg) {
    Vec3 s;
    for (const auto& v : cfg) s += v;
    return s;
}

}  // namespace

std::uint64_t sample_bits(std::uint64_t master_seed, std::uint64_t trajectory, std::uint64_t site) {
    return mix64(mix64(master_seed ^ mix64(trajectory)) + site);
}

ClassicalConfig sample_initial(int n_sites, std::uint64_t trajectory, const SamplerPolicy& policy) {
    ClassicalConfig cfg(static_cast<std::size_t>(n_sites));
    for (int i = 0; i < n_sites; ++i) {
        const std::uint64_t b = sample_bits(policy.master_seed, trajectory, static_cast<std::uint64_t>(i));
        cfg[i] = {0.5, (b >> 63) ? 0.5 : -0.5, ((b >> 62) & 1U) ? 0.5 : -0.5};
    }
    return cfg;
}

TrajectoryStats integrate_trajectory(const ClassicalConfig& initial, const CouplingMatrix& cm,
                                     double delta, std::span<const double> times,
                                     const ConfigCallback& on_grid_point,
                                     const StepControl& control) {
    check_grid(times);
    if (initial.size() != cm.size()) {
        throw std::invalid_argument("configuration and coupling matrix have different sizes");
    }
    const double e0 = classical_energy(initial, cm, delta);
    const double e_scale = std::max(std::abs(e0), 0.25 * pair_sum(cm));
    std::vector<double> norms0(initial.size());
    for (std::size_t i = 0; i < initial.size(); ++i) norms0[i] = norm(initial[i]);
    const double sz0 = collective(initial).z;

    const double omega = precession_bound(cm, delta);
    double h = control.step_factor / std::max(omega, 1e-300);
    Rk4 rk(cm, delta);

    // grid configurations are held back until the whole run meets the budgets
    std::vector<ClassicalConfig> grid_states;
    for (int attempt = 0; attempt <= control.max_refinements; ++attempt, h *= 0.5) {
        TrajectoryStats stats;
        stats.step = h;
        stats.refinements = attempt;
        grid_states.assign(1, initial);
        std::vector<Vec3> s = initial;
        bool ok = true;
        for (std::size_t k = 1; k < times.size() && ok; ++k) {
            const double span_t = times[k] - times[k - 1];
            const auto n_sub = static_cast<long>(std::ceil(span_t / h - 1e-9));
            const double sub = span_t / static_cast<double>(std::max(1L, n_sub));
            for (long q = 0; q < std::max(1L, n_sub); ++q) rk.step(s, sub);

            const double e = classical_energy(s, cm, delta);
            stats.energy_drift = std::max(stats.energy_drift, std::abs(e - e0) / e_scale);
            for (std::size_t i = 0; i < s.size(); ++i)
                stats.norm_drift = std::max(stats.norm_drift, std::abs(norm(s[i]) - norms0[i]));
            stats.sz_drift = std::max(stats.sz_drift, std::abs(collective(s).z - sz0));
            ok = stats.energy_drift <= control.energy_tolerance && stats.norm_drift <= control.norm_tolerance;
            grid_states.push_back(s);
        }
        if (ok) {
            for (std::size_t k = 0; k < grid_states.size(); ++k) on_grid_point(k, grid_states[k]);
            return stats;
        }
    }
    throw TrajectoryAborted(fmt::format(
        "energy/norm budget ({:g}/{:g}) not met after {} step halvings (last step {:g})",
        control.energy_tolerance, control.norm_tolerance, control.max_refinements, 2.0 * h));
}

std::vector<ClassicalConfig> integrate_trajectory(const ClassicalConfig& initial,
                                                  const CouplingMatrix& cm, double delta,
                                                  std::span<const double> times,
                                                  const StepControl& control,
                                                  TrajectoryStats* stats) {
    std::vector<ClassicalConfig> out;
    out.reserve(times.size());
    const auto st = integrate_trajectory(
        initial, cm, delta, times,
        [&](std::size_t, std::span<const Vec3> cfg) { out.emplace_back(cfg.begin(), cfg.end()); },
        control);
    if (stats) *stats = st;
    return out;
}

void MomentAccumulator::add(const Vec3& s, double energy) {
    count += 1.0;
    sum[0] += s.x;
    sum[1] += s.y;
    sum[2] += s.z;
    sum_products[0] += s.x * s.x;
    sum_products[1] += s.x * s.y;
    sum_products[2] += s.x * s.z;
    sum_products[3] += s.y * s.y;
    sum_products[4] += s.y * s.z;
    sum_products[5] += s.z * s.z;
    energy_sum += energy;
    energy_sq_sum += energy * energy;
}

void MomentAccumulator::merge(const MomentAccumulator& o) {
    count += o.count;
    for (int k = 0; k < 3; ++k) sum[k] += o.sum[k];
    for (int k = 0; k < 6; ++k) sum_products[k] += o.sum_products[k];
    energy_sum += o.energy_sum;
    energy_sq_sum += o.energy_sq_sum;
}

CollectiveMoments MomentAccumulator::moments() const {
    CollectiveMoments m;
    for (int k = 0; k < 3; ++k) m.first[k] = sum[k] / count;
    const int idx[3][3] = {{0, 1, 2}, {1, 3, 4}, {2, 4, 5}};
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) m.second[a][b] = sum_products[idx[a][b]] / count;
    return m;
}

namespace {

// Pairwise reduction in index order; the tree shape depends only on the count.
std::vector<MomentAccumulator> tree_reduce(std::vector<std::vector<MomentAccumulator>> parts) {
    while (parts.size() > 1) {
        std::vector<std::vector<MomentAccumulator>> next;
        next.reserve((parts.size() + 1) / 2);
        for (std::size_t k = 0; k + 1 < parts.size(); k += 2) {
            auto merged = std::move(parts[k]);
            for (std::size_t t = 0; t < merged.size(); ++t) merged[t].merge(parts[k + 1][t]);
            next.push_back(std::move(merged));
        }
        if (parts.size() % 2 == 1) next.push_back(std::move(parts.back()));
        parts = std::move(next);
    }
    return std::move(parts.front());
}

struct WorkUnit {
    int batch;
    std::size_t begin;
    std::size_t end;
};

struct UnitResult {
    std::vector<MomentAccumulator> series;
    std::size_t aborted = 0;
    std::vector<std::string> messages;
    double energy_drift = 0.0;
    double norm_drift = 0.0;
    double sz_drift = 0.0;
    double min_step = 0.0;
};

}  // namespace

EnsembleResult run_ensemble(const CouplingMatrix& cm, double delta, std::span<const double> times,
                            const SamplerPolicy& policy, const EnsembleOptions& options) {
    check_grid(times);
    if (policy.n_traj == 0) throw std::invalid_argument("n_traj must be positive");
    const int n_batches = static_cast<int>(std::min<std::size_t>(
        static_cast<std::size_t>(std::max(1, options.batches)), policy.n_traj));
    const std::size_t chunk = std::max<std::size_t>(1, options.chunk);
    const int n_sites = static_cast<int>(cm.size());

    std::vector<WorkUnit> units;
    for (int b = 0; b < n_batches; ++b) {
        const std::size_t lo = policy.n_traj * b / n_batches;
        const std::size_t hi = policy.n_traj * (b + 1) / n_batches;
        for (std::size_t s = lo; s < hi; s += chunk) units.push_back({b, s, std::min(hi, s + chunk)});
    }

    std::vector<UnitResult> results(units.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;

    auto worker = [&]() {
        try {
            for (std::size_t u = next++; u < units.size(); u = next++) {
                UnitResult& r = results[u];
                r.series.assign(times.size(), MomentAccumulator{});
                r.min_step = std::numeric_limits<double>::infinity();
                for (std::size_t traj = units[u].begin; traj < units[u].end; ++traj) {
                    const auto init = sample_initial(n_sites, traj, policy);
                    try {
                        const auto st = integrate_trajectory(
                            init, cm, delta, times,
                            [&](std::size_t k, std::span<const Vec3> cfg) {
                                r.series[k].add(collective(cfg), classical_energy(cfg, cm, delta));
                            },
                            options.step);
                        r.energy_drift = std::max(r.energy_drift, st.energy_drift);
                        r.norm_drift = std::max(r.norm_drift, st.norm_drift);
                        r.sz_drift = std::max(r.sz_drift, st.sz_drift);
                        r.min_step = std::min(r.min_step, st.step);
                    } catch (const TrajectoryAborted& e) {
                        ++r.aborted;
                        if (r.messages.size() < 4) r.messages.push_back(fmt::format("trajectory {}: {}", traj, e.what()));
                    }
                }
            }
        } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = units.size();
        }
    };

    const int n_threads = std::max(1, options.threads);
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);

    EnsembleResult out;
    out.times.assign(times.begin(), times.end());
    out.n_traj = policy.n_traj;
    out.min_step = std::numeric_limits<double>::infinity();
    std::vector<std::vector<std::vector<MomentAccumulator>>> per_batch(n_batches);
    for (std::size_t u = 0; u < units.size(); ++u) {
        auto& r = results[u];
        out.n_aborted += r.aborted;
        for (auto& m : r.messages)
            if (out.abort_messages.size() < 16) out.abort_messages.push_back(std::move(m));
        out.max_energy_drift = std::max(out.max_energy_drift, r.energy_drift);
        out.max_norm_drift = std::max(out.max_norm_drift, r.norm_drift);
        out.max_sz_drift = std::max(out.max_sz_drift, r.sz_drift);
        out.min_step = std::min(out.min_step, r.min_step);
        per_batch[units[u].batch].push_back(std::move(r.series));
    }
    if (static_cast<double>(out.n_aborted) > options.max_abort_fraction * static_cast<double>(policy.n_traj)) {
        throw EnsembleFailed(fmt::format("{} of {} trajectories aborted (limit {:g}); first: {}",
                                         out.n_aborted, policy.n_traj, options.max_abort_fraction,
                                         out.abort_messages.empty() ? "" : out.abort_messages.front()));
    }
    for (auto& b : per_batch) out.batches.push_back(tree_reduce(std::move(b)));
    out.total = tree_reduce(out.batches);
    return out;
}

EnsembleResult run_ensemble(const LatticeSpec& lattice, const ModelParams& params,
                            std::span<const double> times, const SamplerPolicy& policy,
                            const EnsembleOptions& options) {
    validate(params);
    const auto sites = build_lattice(lattice);
    const auto cm = coupling_matrix(sites, params.jperp, params.alpha);
    return run_ensemble(cm, params.delta, times, policy, options);
}

double jackknife_stderr(const EnsembleResult& result, std::size_t time_index,
                        const std::function<double(const CollectiveMoments&)>& statistic) {
    const std::size_t nb = result.batches.size();
    if (nb < 2) return std::numeric_limits<double>::quiet_NaN();
    std::vector<double> loo(nb);
    double mean = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
        MomentAccumulator acc;
        for (std::size_t c = 0; c < nb; ++c)
            if (c != b) acc.merge(result.batches[c][time_index]);
        loo[b] = statistic(acc.moments());
        mean += loo[b];
    }
    mean /= static_cast<double>(nb);
    double ss = 0.0;
    for (double v : loo) ss += (v - mean) * (v - mean);
    return std::sqrt(static_cast<double>(nb - 1) / static_cast<double>(nb) * ss);
}

double xi2_stderr(const EnsembleResult& result, std::size_t time_index, int n_sites) {
    return jackknife_stderr(result, time_index, [n_sites](const CollectiveMoments& m) {
        return squeezing_from_moments(m, n_sites).xi2;
    });
}

}  // namespace xxz
