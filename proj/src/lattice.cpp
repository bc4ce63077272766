#include "xxz/lattice.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace xxz {

std::vector<Site> build_lattice(const LatticeSpec& spec) {
    if (spec.lx < 1 || spec.ly < 1) {
        throw std::invalid_argument(
            fmt::format("lattice extents must be positive (got {}x{})", spec.lx, spec.ly));
    }
    if (spec.site_count() < 2) {
        throw std::invalid_argument("lattice needs at least two sites to have any interactions");
    }

    std::vector<Site> sites;
    sites.reserve(static_cast<std::size_t>(spec.site_count()));
    for (int y = 0; y < spec.ly; ++y) {
        for (int x = 0; x < spec.lx; ++x) {
            sites.push_back({x, y});
        }
    }
    return sites;
}

CouplingMatrix coupling_matrix(std::span<const Site> sites, double jperp, double alpha) {
    if (!std::isfinite(alpha) || alpha < 0.0) {
        throw std::invalid_argument(fmt::format("alpha must be finite and >= 0 (got {})", alpha));
    }
    if (!std::isfinite(jperp) || jperp <= 0.0) {
        throw std::invalid_argument(fmt::format("Jperp must be positive (got {})", jperp));
    }
    if (sites.size() < 2) {
        throw std::invalid_argument("coupling matrix needs at least two sites");
    }

    CouplingMatrix cm;
    const std::size_t n = sites.size();
    cm.n_ = n;
    cm.alpha_ = alpha;
    cm.jperp_ = jperp;
    cm.entries_.assign(n * n, 0.0);

    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dx = sites[i].x - sites[j].x;
            const double dy = sites[i].y - sites[j].y;
            const double r2 = dx * dx + dy * dy;
            if (r2 == 0.0) {
                throw std::invalid_argument(fmt::format("sites {} and {} coincide", i, j));
            }
            // r^-alpha = (r^2)^(-alpha/2); exact 1 for alpha = 0
            const double value = alpha == 0.0 ? jperp : jperp * std::pow(r2, -0.5 * alpha);
            cm.entries_[i * n + j] = value;
            cm.entries_[j * n + i] = value;
            total += value;
        }
    }
    cm.jbar_ = 2.0 * total / (static_cast<double>(n) * static_cast<double>(n - 1));
    return cm;
}

double mean_coupling(const CouplingMatrix& cm) { return cm.mean(); }

std::vector<std::vector<int>> lattice_reflections(const LatticeSpec& spec) {
    std::vector<std::vector<int>> out;
    const int n = spec.site_count();
    if (spec.lx > 1) {
        std::vector<int> perm(static_cast<std::size_t>(n));
        for (int y = 0; y < spec.ly; ++y)
            for (int x = 0; x < spec.lx; ++x) perm[y * spec.lx + x] = y * spec.lx + (spec.lx - 1 - x);
        out.push_back(std::move(perm));
    }
    if (spec.ly > 1) {
        std::vector<int> perm(static_cast<std::size_t>(n));
        for (int y = 0; y < spec.ly; ++y)
            for (int x = 0; x < spec.lx; ++x) perm[y * spec.lx + x] = (spec.ly - 1 - y) * spec.lx + x;
        out.push_back(std::move(perm));
    }
    return out;
}

}  // namespace xxz
