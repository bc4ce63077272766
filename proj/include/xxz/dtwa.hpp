#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xxz/lattice.hpp"
#include "xxz/model.hpp"
#include "xxz/observables.hpp"

namespace xxz {

struct SamplerPolicy {
    std::uint64_t master_seed = 0;
    std::size_t n_traj = 10000;
};

/// Counter-based 64-bit draw for (master_seed, trajectory, site); independent of
/// evaluation order.
std::uint64_t sample_bits(std::uint64_t master_seed, std::uint64_t trajectory, std::uint64_t site);

/// One draw from the discrete Wigner distribution of the +x product state:
/// S_x = 1/2, and (S_y, S_z) uniform over {+-1/2}^2 independently per site.
ClassicalConfig sample_initial(int n_sites, std::uint64_t trajectory, const SamplerPolicy& policy);

struct StepControl {
    /// Budgets checked at every grid point against the initial values.
    double energy_tolerance = 1e-8;
    double norm_tolerance = 1e-8;
    /// First RK4 substep is step_factor / omega, omega bounding the precession rate.
    double step_factor = 0.05;
    /// Step halvings tried before the trajectory is aborted.
    int max_refinements = 8;
};

class TrajectoryAborted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrajectoryStats {
    double step = 0.0;
    int refinements = 0;
    double energy_drift = 0.0;  // relative, max over the grid
    double norm_drift = 0.0;    // max over sites and grid points
    double sz_drift = 0.0;      // |sum_i S_zi(t) - sum_i S_zi(0)|, max over the grid
};

/// Called with (grid index, configuration at that grid time).
using ConfigCallback = std::function<void(std::size_t, std::span<const Vec3>)>;

/// Fixed-substep classical RK4 flow of the drift through the (unscaled) time grid.
/// The substep is halved until the energy and norm budgets hold. Throws
/// TrajectoryAborted when max_refinements is exhausted, std::invalid_argument for a
/// grid that does not start at 0 or is not strictly increasing.
TrajectoryStats integrate_trajectory(const ClassicalConfig& initial, const CouplingMatrix& cm,
                                     double delta, std::span<const double> times,
                                     const ConfigCallback& on_grid_point,
                                     const StepControl& control = {});

std::vector<ClassicalConfig> integrate_trajectory(const ClassicalConfig& initial,
                                                  const CouplingMatrix& cm, double delta,
                                                  std::span<const double> times,
                                                  const StepControl& control = {},
                                                  TrajectoryStats* stats = nullptr);

/// Ensemble sums of the collective spin S = sum_i S_i at one time point. Second
/// moments are trajectory-wise products S_mu S_nu, which keeps on-site i = j terms as
/// phase-space products.
struct MomentAccumulator {
    double count = 0.0;
    std::array<double, 3> sum{};
    std::array<double, 6> sum_products{};  // xx, xy, xz, yy, yz, zz
    double energy_sum = 0.0;
    double energy_sq_sum = 0.0;

    void add(const Vec3& collective, double energy);
    void merge(const MomentAccumulator& other);

    CollectiveMoments moments() const;
    double mean_energy() const { return energy_sum / count; }
};

struct EnsembleOptions {
    int threads = 1;
    /// Trajectories per work unit, summed sequentially before the tree reduction. Part of
    /// the reduction order, so results depend on it but never on `threads`.
    std::size_t chunk = 64;
    /// Fixed partition of the trajectory index range used for jackknife errors.
    int batches = 20;
    StepControl step;
    /// Abort fraction above which the run fails.
    double max_abort_fraction = 1e-3;
};

struct EnsembleResult {
    std::vector<double> times;
    std::vector<MomentAccumulator> total;
    /// batches[b][k]: batch b at time index k.
    std::vector<std::vector<MomentAccumulator>> batches;
    std::size_t n_traj = 0;
    std::size_t n_aborted = 0;
    std::vector<std::string> abort_messages;
    double max_energy_drift = 0.0;
    double max_norm_drift = 0.0;
    double max_sz_drift = 0.0;
    double min_step = 0.0;
};

class EnsembleFailed : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Samples and integrates policy.n_traj trajectories and accumulates collective
/// moments per grid time. Reductions run in a fixed tree order, so results are
/// bit-identical for any thread count. Throws EnsembleFailed when more than
/// max_abort_fraction of the trajectories abort.
EnsembleResult run_ensemble(const CouplingMatrix& cm, double delta, std::span<const double> times,
                            const SamplerPolicy& policy, const EnsembleOptions& options = {});

EnsembleResult run_ensemble(const LatticeSpec& lattice, const ModelParams& params,
                            std::span<const double> times, const SamplerPolicy& policy,
                            const EnsembleOptions& options = {});

/// Jackknife over the fixed batches of any statistic of the collective moments.
double jackknife_stderr(const EnsembleResult& result, std::size_t time_index,
                        const std::function<double(const CollectiveMoments&)>& statistic);

double xi2_stderr(const EnsembleResult& result, std::size_t time_index, int n_sites);

}  // namespace xxz
