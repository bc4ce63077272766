#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace xxz {

/// Open-boundary rectangular lattice, lattice constant 1.
struct LatticeSpec {
    int lx = 0;  // columns
    int ly = 0;  // rows

    int site_count() const { return lx * ly; }
};

struct Site {
    int x = 0;
    int y = 0;

    bool operator==(const Site&) const = default;
};

/// Row-major site enumeration: site index i = y * lx + x.
/// Throws std::invalid_argument for non-positive extents or fewer than two sites.
std::vector<Site> build_lattice(const LatticeSpec& spec);

/// Dense symmetric matrix of power-law couplings J_ij = jperp * |r_i - r_j|^(-alpha).
class CouplingMatrix {
public:
    CouplingMatrix() = default;

    std::size_t size() const { return n_; }
    double alpha() const { return alpha_; }
    double jperp() const { return jperp_; }

    /// Mean over ordered pairs i != j.
    double mean() const { return jbar_; }

    double operator()(std::size_t i, std::size_t j) const { return entries_[i * n_ + j]; }

    /// Row i, including the zero diagonal entry.
    std::span<const double> row(std::size_t i) const {
        return {entries_.data() + i * n_, n_};
    }

    friend CouplingMatrix coupling_matrix(std::span<const Site> sites, double jperp, double alpha);

private:
    std::size_t n_ = 0;
    double alpha_ = 0.0;
    double jperp_ = 1.0;
    double jbar_ = 0.0;
    std::vector<double> entries_;
};

/// Throws std::invalid_argument for alpha < 0, non-finite alpha, jperp <= 0,
/// fewer than two sites, or coincident sites.
CouplingMatrix coupling_matrix(std::span<const Site> sites, double jperp, double alpha);

/// J-bar = sum_{i != j} J_ij / (N (N - 1)).
double mean_coupling(const CouplingMatrix& cm);

/// Site permutations for the x and y mirror images of the lattice (only those that
/// are not the identity). Each one maps the coupling matrix onto itself.
std::vector<std::vector<int>> lattice_reflections(const LatticeSpec& spec);

}  // namespace xxz
