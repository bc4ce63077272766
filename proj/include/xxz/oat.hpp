#pragma once

#include <span>
#include <vector>

#include "xxz/exact.hpp"
#include "xxz/observables.hpp"

namespace xxz {

/// State in the maximal-spin (S = N/2) sector, amplitudes c_m for m = -N/2 ... N/2
/// stored at index k = m + N/2.
struct DickeState {
    int n_sites = 0;
    std::vector<cplx> amplitudes;

    double m(std::size_t k) const { return static_cast<double>(k) - 0.5 * n_sites; }
};

/// x-polarized coherent state: c_m = sqrt(C(N, m + N/2)) / 2^(N/2).
DickeState dicke_initial_state(int n_sites);

/// Phases c_m -> c_m exp(-i chi m^2 t) of the one-axis-twisting Hamiltonian chi S_z^2.
DickeState oat_evolve(const DickeState& initial, double chi, double t);

/// Collective moments from ladder-operator matrix elements in the Dicke sector.
CollectiveMoments dicke_moments(const DickeState& psi);

struct OatPoint {
    double t = 0.0;
    CollectiveMoments moments;
    SqueezingResult squeezing;
};

/// OAT observables along a time grid. Throws std::invalid_argument unless N >= 2, chi > 0.
std::vector<OatPoint> oat_reference(int n_sites, double chi, std::span<const double> times);

struct OatOptimum {
    double t_star = 0.0;
    double xi2_min = 1.0;
};

/// First local minimum of xi^2(t) for chi t in (0, pi/2], located by a grid scan and
/// golden-section refinement to relative tolerance `rtol` in t, then Newton steps on a
/// Richardson-extrapolated central difference of xi^2.
OatOptimum oat_tstar(int n_sites, double chi, double rtol = 1e-6);

}  // namespace xxz
