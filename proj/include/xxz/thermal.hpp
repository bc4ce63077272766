#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xxz/exact.hpp"

namespace xxz {

inline constexpr int kMaxThermalSites = 16;

/// Full spectrum of an S_z-conserving pair Hamiltonian, with the diagonal matrix
/// elements of S_z^2 and S^2 in the eigenbasis.
struct Spectrum {
    int n_sites = 0;
    std::vector<double> energy;
    std::vector<double> sz2;
    std::vector<double> s2;
    /// Degeneracy factor of each listed level (2 for the m and -m copies).
    std::vector<double> multiplicity;
    std::size_t largest_block = 0;

    double min_energy() const;
    double max_energy() const;
    double total_states() const;
};

/// Dense diagonalization block by block. H is split by S_z sector (only m >= 0 is
/// diagonalized; m < 0 follows by global spin flip), then by the abelian group
/// generated by `site_symmetries` (commuting involutive site permutations that leave
/// H invariant) plus the spin flip inside m = 0.
/// Throws std::invalid_argument if N > 16, H does not conserve S_z, or a permutation
/// is not a symmetry of H.
Spectrum diagonalize_by_sector(const PairOperator& h,
                               std::span<const std::vector<int>> site_symmetries = {});

/// Averages in rho ~ exp(-beta H - gamma S_z^2).
struct EnsembleAverages {
    double energy = 0.0;
    double sz2 = 0.0;
    double s2 = 0.0;
    double var_energy = 0.0;
    double cov_energy_sz2 = 0.0;
    double var_sz2 = 0.0;
};

EnsembleAverages ensemble_averages(const Spectrum& spec, double beta, double gamma);

/// <H - lambda S_z^2> in rho ~ exp(-beta (H - lambda S_z^2)).
double shifted_energy(const Spectrum& spec, double beta, double lambda);

struct ThermalSolution {
    double beta = 0.0;
    /// rho ~ exp(-beta (H - lambda S_z^2)).
    double lambda = 0.0;
    /// Multiplier as it enters the exponent: gamma = -beta lambda.
    double gamma = 0.0;
    double temperature = 0.0;  // 1/beta, infinite at beta = 0
    double energy = 0.0;
    double sz2 = 0.0;
    double s2 = 0.0;
    double sperp2 = 0.0;  // <S^2> - <S_z^2>
    double residual_energy = 0.0;
    double residual_sz2 = 0.0;
    int outer_iterations = 0;
};

class ThermalMatchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Finds (beta, lambda) with <H> = energy_target and <S_z^2> = sz2_target. The inner
/// solve is in beta at fixed gamma, the outer one in gamma; both are monotone and
/// use bisection-safeguarded Newton steps.
/// Throws ThermalMatchError when the target energy lies outside the spectrum or the
/// root is not bracketed.
ThermalSolution thermal_match(const Spectrum& spec, double energy_target, double sz2_target);

ThermalSolution thermal_match(const PairOperator& h, double energy_target, double sz2_target,
                              std::span<const std::vector<int>> site_symmetries = {});

}  // namespace xxz
