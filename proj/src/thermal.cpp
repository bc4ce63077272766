#include "xxz/thermal.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <utility>

#include <fmt/format.h>
#include <lapacke.h>

namespace xxz {

double Spectrum::min_energy() const { return *std::min_element(energy.begin(), energy.end()); }
double Spectrum::max_energy() const { return *std::max_element(energy.begin(), energy.end()); }
double Spectrum::total_states() const {
    double s = 0.0;
    for (double w : multiplicity) s += w;
    return s;
}

namespace {

// Site permutation optionally followed by a global spin flip.
struct SymmetryOp {
    std::vector<int> perm;
    bool flip = false;
};

std::uint32_t apply_op(const SymmetryOp& op, std::uint32_t s, int n_sites) {
    std::uint32_t r = 0;
    for (int i = 0; i < n_sites; ++i) {
        if ((s >> i) & 1U) r |= std::uint32_t{1} << op.perm[i];
    }
    if (op.flip) r ^= (std::uint32_t{1} << n_sites) - 1U;
    return r;
}

void check_symmetry(const PairOperator& h, const std::vector<int>& perm) {
    const int n = h.n_sites();
    if (static_cast<int>(perm.size()) != n) throw std::invalid_argument("symmetry permutation has wrong length");
    std::vector<int> seen(n, 0);
    for (int i = 0; i < n; ++i) {
        if (perm[i] < 0 || perm[i] >= n || seen[perm[i]]++) throw std::invalid_argument("symmetry is not a permutation");
        if (perm[perm[i]] != i) throw std::invalid_argument("symmetry permutation must be an involution");
    }
    std::map<std::pair<int, int>, PairCoupling> by_pair;
    for (const auto& pc : h.pairs()) by_pair[{pc.i, pc.j}] = pc;
    for (const auto& pc : h.pairs()) {
        const auto key = std::minmax(perm[pc.i], perm[pc.j]);
        const auto it = by_pair.find(key);
        const double tol = 1e-12 * (std::abs(pc.xx) + std::abs(pc.zz) + 1e-300);
        if (it == by_pair.end() || std::abs(it->second.xx - pc.xx) > tol ||
            std::abs(it->second.yy - pc.yy) > tol || std::abs(it->second.zz - pc.zz) > tol) {
            throw std::invalid_argument(
                fmt::format("site permutation is not a symmetry of H (pair {}-{})", pc.i, pc.j));
        }
    }
}

struct Triplet {
    int row;
    int col;
    double value;
};

// Matrix elements <r'_chi| O |r_chi> for all valid representatives of one character.
class SymmetryBlock {
public:
    SymmetryBlock(int n_sites, std::vector<std::uint32_t> states, std::vector<SymmetryOp> generators)
        : n_sites_(n_sites), states_(std::move(states)), gens_(std::move(generators)) {
        const std::size_t n_elem = std::size_t{1} << gens_.size();
        index_.assign(std::size_t{1} << n_sites_, -1);
        for (std::size_t k = 0; k < states_.size(); ++k) index_[states_[k]] = static_cast<int>(k);

        rep_.resize(states_.size());
        elem_.resize(states_.size());
        stab_mask_.assign(states_.size(), 0);
        for (std::size_t k = 0; k < states_.size(); ++k) {
            std::uint32_t best = states_[k];
            unsigned best_e = 0;
            for (unsigned e = 1; e < n_elem; ++e) {
                const std::uint32_t img = image(e, states_[k]);
                if (img < best) { best = img; best_e = e; }
            }
            rep_[k] = index_[best];
            elem_[k] = best_e;
        }
        for (std::size_t k = 0; k < states_.size(); ++k) {
            if (rep_[k] != static_cast<int>(k)) continue;
            for (unsigned e = 0; e < n_elem; ++e)
                if (image(e, states_[k]) == states_[k]) stab_mask_[k] |= std::uint64_t{1} << e;
        }
    }

    std::size_t n_characters() const { return std::size_t{1} << gens_.size(); }

    // Representatives compatible with character c (character trivial on the stabilizer).
    std::vector<int> valid_reps(unsigned c) const {
        std::vector<int> out;
        const std::size_t n_elem = n_characters();
        for (std::size_t k = 0; k < states_.size(); ++k) {
            if (rep_[k] != static_cast<int>(k)) continue;
            bool ok = true;
            for (unsigned e = 0; e < n_elem && ok; ++e)
                if (((stab_mask_[k] >> e) & 1U) && character(c, e) < 0) ok = false;
            if (ok) out.push_back(static_cast<int>(k));
        }
        return out;
    }

    std::vector<Triplet> matrix(const PairOperator& op, unsigned c, const std::vector<int>& reps) const {
        std::vector<int> local(states_.size(), -1);
        for (std::size_t a = 0; a < reps.size(); ++a) local[reps[a]] = static_cast<int>(a);

        std::vector<Triplet> out;
        for (std::size_t col = 0; col < reps.size(); ++col) {
            const int r = reps[col];
            const std::uint32_t s = states_[r];
            const double stab_r = std::popcount(stab_mask_[r]);
            out.push_back({static_cast<int>(col), static_cast<int>(col), op.diagonal(s)});
            for (const auto& pc : op.pairs()) {
                if (pc.xx == 0.0) continue;
                if ((((s >> pc.i) ^ (s >> pc.j)) & 1U) == 0) continue;
                const std::uint32_t b = s ^ ((std::uint32_t{1} << pc.i) | (std::uint32_t{1} << pc.j));
                const int kb = index_[b];
                const int rp = rep_[kb];
                if (local[rp] < 0) continue;
                const double stab_rp = std::popcount(stab_mask_[rp]);
                const double amp = 0.5 * pc.xx * character(c, elem_[kb]) * std::sqrt(stab_rp / stab_r);
                out.push_back({local[rp], static_cast<int>(col), amp});
            }
        }
        return out;
    }

private:
    std::uint32_t image(unsigned e, std::uint32_t s) const {
        for (std::size_t g = 0; g < gens_.size(); ++g)
            if ((e >> g) & 1U) s = apply_op(gens_[g], s, n_sites_);
        return s;
    }
    static double character(unsigned c, unsigned e) { return (std::popcount(c & e) & 1) ? -1.0 : 1.0; }

    int n_sites_;
    std::vector<std::uint32_t> states_;
    std::vector<SymmetryOp> gens_;
    std::vector<int> index_;
    std::vector<int> rep_;
    std::vector<unsigned> elem_;
    std::vector<std::uint64_t> stab_mask_;
};

struct LogSumTerms {
    double shift;
    std::vector<double> p;
};

LogSumTerms boltzmann(const Spectrum& spec, double beta, double gamma) {
    LogSumTerms t;
    t.p.resize(spec.energy.size());
    t.shift = -std::numeric_limits<double>::infinity();
    for (std::size_t n = 0; n < spec.energy.size(); ++n) {
        t.p[n] = -beta * spec.energy[n] - gamma * spec.sz2[n];
        t.shift = std::max(t.shift, t.p[n]);
    }
    double z = 0.0;
    for (std::size_t n = 0; n < t.p.size(); ++n) {
        t.p[n] = spec.multiplicity[n] * std::exp(t.p[n] - t.shift);
        z += t.p[n];
    }
    for (auto& v : t.p) v /= z;
    return t;
}

}  // namespace

Spectrum diagonalize_by_sector(const PairOperator& h, std::span<const std::vector<int>> site_symmetries) {
    const int n = h.n_sites();
    if (n > kMaxThermalSites) {
        throw std::invalid_argument(fmt::format(
            "dense diagonalization is capped at N = {} sites (got {})", kMaxThermalSites, n));
    }
    for (const auto& pc : h.pairs()) {
        if (std::abs(pc.xx - pc.yy) > 1e-14 * (std::abs(pc.xx) + std::abs(pc.yy))) {
            throw std::invalid_argument("operator does not conserve S_z (xx and yy couplings differ)");
        }
    }
    for (const auto& perm : site_symmetries) check_symmetry(h, perm);
    const PairOperator s2_op = total_spin_operator(n);

    Spectrum spec;
    spec.n_sites = n;
    for (int ups = (n + 1) / 2; ups <= n; ++ups) {
        const double m = ups - 0.5 * n;
        std::vector<std::uint32_t> states;
        for (std::uint32_t s = 0; s < (std::uint32_t{1} << n); ++s)
            if (std::popcount(s) == ups) states.push_back(s);

        std::vector<SymmetryOp> gens;
        for (const auto& perm : site_symmetries) gens.push_back({perm, false});
        if (2 * ups == n) {
            std::vector<int> id(n);
            for (int i = 0; i < n; ++i) id[i] = i;
            gens.push_back({id, true});
        }
        const SymmetryBlock block(n, std::move(states), std::move(gens));
        const double copies = (2 * ups == n) ? 1.0 : 2.0;

        for (unsigned c = 0; c < block.n_characters(); ++c) {
            const auto reps = block.valid_reps(c);
            const int d = static_cast<int>(reps.size());
            if (d == 0) continue;
            spec.largest_block = std::max(spec.largest_block, reps.size());

            std::vector<double> a(static_cast<std::size_t>(d) * d, 0.0);
            for (const auto& t : block.matrix(h, c, reps)) a[static_cast<std::size_t>(t.col) * d + t.row] += t.value;
            const auto s2_entries = block.matrix(s2_op, c, reps);

            std::vector<double> w(d);
            const int info = LAPACKE_dsyevd(LAPACK_COL_MAJOR, 'V', 'U', d, a.data(), d, w.data());
            if (info != 0) throw std::runtime_error(fmt::format("dsyevd failed with info {}", info));

            std::vector<double> sv(d);
            for (int k = 0; k < d; ++k) {
                const double* v = a.data() + static_cast<std::size_t>(k) * d;
                std::fill(sv.begin(), sv.end(), 0.0);
                for (const auto& t : s2_entries) sv[t.row] += t.value * v[t.col];
                double e2 = 0.0;
                for (int r = 0; r < d; ++r) e2 += v[r] * sv[r];
                spec.energy.push_back(w[k]);
                spec.sz2.push_back(m * m);
                spec.s2.push_back(e2);
                spec.multiplicity.push_back(copies);
            }
        }
    }
    return spec;
}

EnsembleAverages ensemble_averages(const Spectrum& spec, double beta, double gamma) {
    const auto t = boltzmann(spec, beta, gamma);
    EnsembleAverages avg;
    for (std::size_t n = 0; n < t.p.size(); ++n) {
        avg.energy += t.p[n] * spec.energy[n];
        avg.sz2 += t.p[n] * spec.sz2[n];
        avg.s2 += t.p[n] * spec.s2[n];
    }
    for (std::size_t n = 0; n < t.p.size(); ++n) {
        const double de = spec.energy[n] - avg.energy;
        const double dq = spec.sz2[n] - avg.sz2;
        avg.var_energy += t.p[n] * de * de;
        avg.cov_energy_sz2 += t.p[n] * de * dq;
        avg.var_sz2 += t.p[n] * dq * dq;
    }
    return avg;
}

double shifted_energy(const Spectrum& spec, double beta, double lambda) {
    const auto avg = ensemble_averages(spec, beta, -beta * lambda);
    return avg.energy - lambda * avg.sz2;
}

namespace {

// Root of a decreasing function by Newton steps kept inside a sign-change bracket.
template <typename F>
double safeguarded_newton(F&& f, double lo, double hi, double f_tol, int max_iter,
                          const char* what) {
    double x = 0.5 * (lo + hi);
    for (int it = 0; it < max_iter; ++it) {
        const auto [fx, dfx] = f(x);
        if (std::abs(fx) <= f_tol) return x;
        if (fx > 0.0) lo = x; else hi = x;
        double next = (dfx < 0.0) ? x - fx / dfx : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (hi - lo <= 1e-15 * std::max(1.0, std::abs(x))) return next;
        x = next;
    }
    throw ThermalMatchError(fmt::format("{} root-finder did not converge in {} iterations (bracket [{}, {}])",
                                        what, max_iter, lo, hi));
}

// Expands [-scale, scale] until f(lo) > 0 > f(hi) for a decreasing f.
template <typename F>
std::pair<double, double> bracket(F&& f, double scale, double limit, const char* what) {
    double lo = -scale, hi = scale;
    while (f(lo) <= 0.0) {
        lo *= 2.0;
        if (std::abs(lo) > limit) {
            throw ThermalMatchError(fmt::format("{} root not bracketed: f({}) = {} <= 0", what, lo, f(lo)));
        }
    }
    while (f(hi) >= 0.0) {
        hi *= 2.0;
        if (hi > limit) {
            throw ThermalMatchError(fmt::format("{} root not bracketed: f({}) = {} >= 0", what, hi, f(hi)));
        }
    }
    return {lo, hi};
}

}  // namespace

ThermalSolution thermal_match(const Spectrum& spec, double energy_target, double sz2_target) {
    const double e_min = spec.min_energy();
    const double e_max = spec.max_energy();
    const double width = e_max - e_min;
    if (!(energy_target > e_min && energy_target < e_max)) {
        throw ThermalMatchError(fmt::format("target energy {} outside the spectrum ({}, {})",
                                            energy_target, e_min, e_max));
    }
    const int n = spec.n_sites;
    const double sz2_inf = 0.25 * n;
    const auto inf = ensemble_averages(spec, 0.0, 0.0);

    ThermalSolution sol;
    auto finish = [&](double beta, double gamma) {
        const auto avg = ensemble_averages(spec, beta, gamma);
        sol.beta = beta;
        sol.gamma = gamma;
        sol.lambda = beta != 0.0 ? -gamma / beta : (gamma == 0.0 ? 0.0 : std::numeric_limits<double>::quiet_NaN());
        sol.temperature = beta != 0.0 ? 1.0 / beta : std::numeric_limits<double>::infinity();
        sol.energy = avg.energy;
        sol.sz2 = avg.sz2;
        sol.s2 = avg.s2;
        sol.sperp2 = avg.s2 - avg.sz2;
        const double e_scale = energy_target != 0.0 ? std::abs(energy_target) : width;
        sol.residual_energy = std::abs(avg.energy - energy_target) / e_scale;
        sol.residual_sz2 = std::abs(avg.sz2 - sz2_target) / std::abs(sz2_target);
        return sol;
    };

    if (std::abs(energy_target - inf.energy) <= 1e-14 * width &&
        std::abs(sz2_target - sz2_inf) <= 1e-14 * sz2_inf) {
        return finish(0.0, 0.0);
    }

    const double beta_scale = 1.0 / width;
    const double beta_limit = 1e4 / width * std::max(1.0, static_cast<double>(n));
    const double e_tol = 1e-14 * std::max(std::abs(energy_target), width);

    auto solve_beta = [&](double gamma) {
        auto f = [&](double beta) { return ensemble_averages(spec, beta, gamma).energy - energy_target; };
        const auto [lo, hi] = bracket(f, beta_scale, beta_limit, "inverse temperature");
        return safeguarded_newton(
            [&](double beta) {
                const auto a = ensemble_averages(spec, beta, gamma);
                return std::pair{a.energy - energy_target, -a.var_energy};
            },
            lo, hi, e_tol, 200, "inverse temperature");
    };

    int outer = 0;
    auto outer_f = [&](double gamma) {
        ++outer;
        const double beta = solve_beta(gamma);
        const auto a = ensemble_averages(spec, beta, gamma);
        // derivative along the constraint curve <H> = const: -(Var Q - Cov^2 / Var H)
        const double slope = a.var_energy > 0.0
                                 ? -(a.var_sz2 - a.cov_energy_sz2 * a.cov_energy_sz2 / a.var_energy)
                                 : -a.var_sz2;
        return std::pair{a.sz2 - sz2_target, slope};
    };

    const double q_scale = 0.25 * n * n;
    const double gamma_scale = 1.0 / q_scale;
    const double gamma_limit = 1e4;
    const auto [g_lo, g_hi] =
        bracket([&](double g) { return outer_f(g).first; }, gamma_scale, gamma_limit, "S_z^2 multiplier");
    const double gamma =
        safeguarded_newton(outer_f, g_lo, g_hi, 1e-13 * std::abs(sz2_target), 200, "S_z^2 multiplier");
    const double beta = solve_beta(gamma);
    finish(beta, gamma);
    sol.outer_iterations = outer;
    return sol;
}

ThermalSolution thermal_match(const PairOperator& h, double energy_target, double sz2_target,
                              std::span<const std::vector<int>> site_symmetries) {
    return thermal_match(diagonalize_by_sector(h, site_symmetries), energy_target, sz2_target);
}

}  // namespace xxz
