#pragma once

#include <complex>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "xxz/model.hpp"
#include "xxz/observables.hpp"

namespace xxz {

using cplx = std::complex<double>;

inline constexpr int kMaxDynamicsSites = 20;

/// Dense spin-1/2 state in the s_z product basis. Bit i of a basis index is site i
/// (row-major lattice order); a set bit means s_z = +1/2.
struct StateVector {
    int n_sites = 0;
    std::vector<cplx> amplitudes;

    std::size_t dim() const { return amplitudes.size(); }
    double norm() const;
};

/// Every spin in the +x eigenstate. Throws std::invalid_argument unless 2 <= N <= 20.
StateVector build_initial_state(int n_sites);

/// Coefficients of one interacting pair: xx * s_x s_x + yy * s_y s_y + zz * s_z s_z.
struct PairCoupling {
    int i = 0;
    int j = 0;
    double xx = 0.0;
    double yy = 0.0;
    double zz = 0.0;
};

/// Real two-body spin operator compiled for matrix-free application on the full
/// 2^N space. Accepts any term list (Hamiltonian, total spin, ...).
class PairOperator {
public:
    PairOperator(int n_sites, std::span<const PairTerm> terms, double constant = 0.0);

    int n_sites() const { return n_sites_; }
    std::size_t dim() const { return std::size_t{1} << n_sites_; }
    double constant() const { return constant_; }
    const std::vector<PairCoupling>& pairs() const { return pairs_; }

    /// Diagonal element for a basis state.
    double diagonal(std::uint64_t state) const;

    /// out = O in.
    void apply(std::span<const cplx> in, std::span<cplx> out) const;

    /// Trace over the full space divided by its dimension.
    double mean_trace() const { return constant_; }

    /// <psi|O|psi>
    double expectation(const StateVector& psi) const;

private:
    int n_sites_;
    double constant_;
    std::vector<PairCoupling> pairs_;
    std::vector<double> diag_;

    struct Flip {
        std::uint64_t mask;
        int i;
        int j;
        double anti;  // amplitude for antiparallel spins
        double par;   // amplitude for parallel spins
    };
    std::vector<Flip> flips_;
};

/// S^2 = 3N/4 + 2 sum_{i<j} s_i . s_j as a pair operator.
PairOperator total_spin_operator(int n_sites);

class PropagatorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct KrylovOptions {
    /// Bound on the estimated local error of each propagation step.
    double tolerance = 1e-12;
    int max_subspace = 40;
};

/// Called once per grid point with (index, time, state).
using StateCallback = std::function<void(std::size_t, double, const StateVector&)>;

/// Propagates exp(-i H t)|psi> through the grid with a Lanczos short-time propagator.
/// The grid must start at 0 and be strictly increasing. Throws PropagatorError when
/// the step size required by the tolerance collapses.
void evolve_state(const StateVector& psi, const PairOperator& h, std::span<const double> times,
                  const StateCallback& on_grid_point, const KrylovOptions& options = {});

std::vector<StateVector> evolve_state(const StateVector& psi, const PairOperator& h,
                                      std::span<const double> times,
                                      const KrylovOptions& options = {});

/// Collective first moments and symmetrized second moments, by applying S_mu to the state.
CollectiveMoments collective_moments(const StateVector& psi);

/// Von Neumann entropy (nats) of the first ceil(N/2) row-major sites, from the
/// Schmidt spectrum; weights below 1e-14 are dropped.
double entanglement_entropy(const StateVector& psi);

/// Number of sites in the entropy cut's first half.
inline int cut_sites(int n_sites) { return (n_sites + 1) / 2; }

}  // namespace xxz
