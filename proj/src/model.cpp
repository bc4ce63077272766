#include "xxz/model.hpp"

#include <cassert>
#include <stdexcept>

#include <fmt/format.h>

namespace xxz {

void validate(const ModelParams& p) {
    if (!std::isfinite(p.jperp) || p.jperp <= 0.0)
        throw std::invalid_argument(fmt::format("Jperp must be positive (got {})", p.jperp));
    if (!std::isfinite(p.delta))
        throw std::invalid_argument("Delta must be finite");
    if (!std::isfinite(p.alpha) || p.alpha < 0.0)
        throw std::invalid_argument(fmt::format("alpha must be finite and >= 0 (got {})", p.alpha));
}

std::vector<PairTerm> hamiltonian_terms(const CouplingMatrix& cm, double delta) {
    const int n = static_cast<int>(cm.size());
    std::vector<PairTerm> terms;
    terms.reserve(static_cast<std::size_t>(3 * n * (n - 1) / 2));
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            const double jij = cm(i, j);
            terms.push_back({i, j, Channel::xx, -jij});
            terms.push_back({i, j, Channel::yy, -jij});
            terms.push_back({i, j, Channel::zz, -jij * (1.0 + delta)});
        }
    }
    return terms;
}

double classical_energy(std::span<const Vec3> cfg, const CouplingMatrix& cm, double delta) {
    assert(cfg.size() == cm.size());
    const std::size_t n = cfg.size();
    double energy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = cm.row(i);
        double partial = 0.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            partial += row[j] * (dot(cfg[i], cfg[j]) + delta * cfg[i].z * cfg[j].z);
        }
        energy -= partial;
    }
    return energy;
}

void effective_field(std::span<const Vec3> cfg, const CouplingMatrix& cm, double delta,
                     std::span<Vec3> field) {
    assert(cfg.size() == cm.size() && field.size() == cfg.size());
    const std::size_t n = cfg.size();
    const double zscale = 1.0 + delta;
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = cm.row(i);
        double bx = 0.0, by = 0.0, bz = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            bx += row[j] * cfg[j].x;
            by += row[j] * cfg[j].y;
            bz += row[j] * cfg[j].z;
        }
        field[i] = {-bx, -by, -zscale * bz};
    }
}

void classical_drift(std::span<const Vec3> cfg, const CouplingMatrix& cm, double delta,
                     std::span<Vec3> out) {
    effective_field(cfg, cm, delta, out);
    for (std::size_t i = 0; i < cfg.size(); ++i) {
        out[i] = cross(out[i], cfg[i]);
    }
}

ClassicalConfig classical_drift(std::span<const Vec3> cfg, const CouplingMatrix& cm,
                                double delta) {
    ClassicalConfig out(cfg.size());
    classical_drift(cfg, cm, delta, out);
    return out;
}

}  // namespace xxz
