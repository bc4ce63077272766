#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "xxz/lattice.hpp"

namespace xxz {

struct ModelParams {
    double jperp = 1.0;
    double delta = 0.0;
    double alpha = 0.0;
};

/// Converts t to scaled time tau = t * rate with rate = J-bar |Delta|; falls back to
/// J-bar when Delta = 0.
inline double scaled_time_rate(double jbar, double delta) {
    return delta != 0.0 ? jbar * std::abs(delta) : jbar;
}

/// Throws std::invalid_argument unless jperp > 0, delta finite and alpha >= 0 finite.
void validate(const ModelParams& p);

struct Vec3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }

    double operator[](int k) const { return k == 0 ? x : (k == 1 ? y : z); }
    double& operator[](int k) { return k == 0 ? x : (k == 1 ? y : z); }

    bool operator==(const Vec3&) const = default;
};

inline Vec3 operator+(Vec3 a, const Vec3& b) { return a += b; }
inline Vec3 operator-(Vec3 a, const Vec3& b) { return a -= b; }
inline Vec3 operator*(double s, Vec3 a) { return a *= s; }
inline Vec3 operator*(Vec3 a, double s) { return a *= s; }
inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

/// One classical spin vector per site.
using ClassicalConfig = std::vector<Vec3>;

enum class Channel { xx, yy, zz };

/// coefficient * s_{channel,i} s_{channel,j}, i < j.
struct PairTerm {
    int i = 0;
    int j = 0;
    Channel channel = Channel::xx;
    double coefficient = 0.0;
};

/// Quantum XXZ Hamiltonian H = -sum_{i<j} J_ij (s_i . s_j + delta s_zi s_zj) as a
/// pairwise term list: three channel terms per pair, in pair order (i<j, row-major),
/// channel order xx, yy, zz.
std::vector<PairTerm> hamiltonian_terms(const CouplingMatrix& cm, double delta);

/// Weyl symbol of the XXZ Hamiltonian evaluated on a classical configuration.
double classical_energy(std::span<const Vec3> cfg, const CouplingMatrix& cm, double delta);

/// Gradient dH/dS_i = -sum_j J_ij (S_xj, S_yj, (1 + delta) S_zj), written into `field`.
void effective_field(std::span<const Vec3> cfg, const CouplingMatrix& cm, double delta,
                     std::span<Vec3> field);

/// Classical equations of motion dS_i/dt = {H, S_i}. With the bracket
/// {S_mu, S_nu} = -eps_{mu nu rho} S_rho this is the precession
/// dS_i/dt = (dH/dS_i) x S_i.
void classical_drift(std::span<const Vec3> cfg, const CouplingMatrix& cm, double delta,
                     std::span<Vec3> out);

ClassicalConfig classical_drift(std::span<const Vec3> cfg, const CouplingMatrix& cm,
                                double delta);

}  // namespace xxz
