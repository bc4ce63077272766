#include "xxz/exact.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <utility>

#include <Eigen/Dense>
#include <fmt/format.h>

namespace xxz {

namespace {

void check_dynamics_size(int n_sites) {
    if (n_sites < 2 || n_sites > kMaxDynamicsSites) {
        throw std::invalid_argument(fmt::format(
            "exact engine supports 2 <= N <= {} sites (got {})", kMaxDynamicsSites, n_sites));
    }
}

cplx inner(std::span<const cplx> a, std::span<const cplx> b) {
    cplx s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += std::conj(a[k]) * b[k];
    return s;
}

double norm2(std::span<const cplx> a) {
    double s = 0.0;
    for (const auto& z : a) s += std::norm(z);
    return std::sqrt(s);
}

inline double spin_z(std::uint64_t state, int site) {
    return ((state >> site) & 1U) ? 0.5 : -0.5;
}

}  // namespace

double StateVector::norm() const { return norm2(amplitudes); }

StateVector build_initial_state(int n_sites) {
    check_dynamics_size(n_sites);
    StateVector psi;
    psi.n_sites = n_sites;
    const std::size_t dim = std::size_t{1} << n_sites;
    psi.amplitudes.assign(dim, cplx(std::pow(2.0, -0.5 * n_sites), 0.0));
    return psi;
}

PairOperator::PairOperator(int n_sites, std::span<const PairTerm> terms, double constant)
    : n_sites_(n_sites), constant_(constant) {
    if (n_sites < 1 || n_sites > kMaxDynamicsSites) {
        throw std::invalid_argument(
            fmt::format("pair operator supports 1 <= N <= {} sites (got {})", kMaxDynamicsSites,
                        n_sites));
    }
    std::map<std::pair<int, int>, PairCoupling> merged;
    for (const auto& t : terms) {
        if (t.i == t.j || t.i < 0 || t.j < 0 || t.i >= n_sites || t.j >= n_sites) {
            throw std::invalid_argument(
                fmt::format("invalid pair term ({}, {}) for {} sites", t.i, t.j, n_sites));
        }
        const auto key = std::minmax(t.i, t.j);
        auto& pc = merged[key];
        pc.i = key.first;
        pc.j = key.second;
        switch (t.channel) {
            case Channel::xx: pc.xx += t.coefficient; break;
            case Channel::yy: pc.yy += t.coefficient; break;
            case Channel::zz: pc.zz += t.coefficient; break;
        }
    }
    for (const auto& [key, pc] : merged) {
        pairs_.push_back(pc);
        if (pc.xx != 0.0 || pc.yy != 0.0) {
            flips_.push_back({(std::uint64_t{1} << pc.i) | (std::uint64_t{1} << pc.j), pc.i, pc.j,
                              0.25 * (pc.xx + pc.yy), 0.25 * (pc.xx - pc.yy)});
        }
    }

    diag_.resize(dim());
    for (std::uint64_t s = 0; s < dim(); ++s) {
        double d = constant_;
        for (const auto& pc : pairs_) d += pc.zz * spin_z(s, pc.i) * spin_z(s, pc.j);
        diag_[s] = d;
    }
}

double PairOperator::diagonal(std::uint64_t state) const { return diag_[state]; }

void PairOperator::apply(std::span<const cplx> in, std::span<cplx> out) const {
    const std::size_t n = dim();
    for (std::size_t s = 0; s < n; ++s) out[s] = diag_[s] * in[s];
    for (const auto& f : flips_) {
        for (std::uint64_t s = 0; s < n; ++s) {
            const bool anti = ((s >> f.i) ^ (s >> f.j)) & 1U;
            const double amp = anti ? f.anti : f.par;
            if (amp != 0.0) out[s ^ f.mask] += amp * in[s];
        }
    }
}

double PairOperator::expectation(const StateVector& psi) const {
    std::vector<cplx> tmp(dim());
    apply(psi.amplitudes, tmp);
    return inner(psi.amplitudes, tmp).real();
}

PairOperator total_spin_operator(int n_sites) {
    std::vector<PairTerm> terms;
    for (int i = 0; i < n_sites; ++i) {
        for (int j = i + 1; j < n_sites; ++j) {
            terms.push_back({i, j, Channel::xx, 2.0});
            terms.push_back({i, j, Channel::yy, 2.0});
            terms.push_back({i, j, Channel::zz, 2.0});
        }
    }
    return PairOperator(n_sites, terms, 0.75 * n_sites);
}

namespace {

// Lanczos basis of the Krylov space of (h, v0) with full reorthogonalization.
struct Lanczos {
    std::vector<std::vector<cplx>> basis;
    std::vector<double> alpha;
    std::vector<double> beta;  // beta[k] couples basis k and k+1
    bool invariant = false;    // space closed under h

    std::vector<cplx> small_propagator(double h, double& err_estimate) const {
        const int m = static_cast<int>(alpha.size());
        Eigen::MatrixXd t = Eigen::MatrixXd::Zero(m, m);
        for (int k = 0; k < m; ++k) {
            t(k, k) = alpha[k];
            if (k + 1 < m) t(k, k + 1) = t(k + 1, k) = beta[k];
        }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(t);
        const auto& q = es.eigenvectors();
        const auto& lam = es.eigenvalues();
        std::vector<cplx> coeff(m);
        for (int r = 0; r < m; ++r) {
            cplx s = 0.0;
            for (int k = 0; k < m; ++k) s += q(r, k) * std::exp(cplx(0.0, -h * lam(k))) * q(0, k);
            coeff[r] = s;
        }
        const double next_beta = (invariant || beta.size() < alpha.size()) ? 0.0 : beta.back();
        err_estimate = next_beta * std::abs(coeff[m - 1]);
        return coeff;
    }
};

void krylov_step(std::vector<cplx>& psi, const PairOperator& h, double& remaining,
                 const KrylovOptions& opt) {
    const std::size_t dim = psi.size();
    const double psi_norm = norm2(psi);

    Lanczos lz;
    lz.basis.emplace_back(psi);
    for (auto& z : lz.basis[0]) z /= psi_norm;

    std::vector<cplx> w(dim);
    double step = remaining;
    std::vector<cplx> coeff;
    for (int k = 0; k < opt.max_subspace; ++k) {
        h.apply(lz.basis[k], w);
        const double a = inner(lz.basis[k], w).real();
        lz.alpha.push_back(a);
        // two passes of classical Gram-Schmidt against the whole basis
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& v : lz.basis) {
                const cplx c = inner(v, w);
                for (std::size_t s = 0; s < dim; ++s) w[s] -= c * v[s];
            }
        }
        const double b = norm2(w);
        lz.beta.push_back(b);
        if (b < 1e-13 * std::max(1.0, std::abs(a))) {
            lz.invariant = true;
            break;
        }
        double err = 0.0;
        coeff = lz.small_propagator(remaining, err);
        if (err <= opt.tolerance) {
            step = remaining;
            break;
        }
        if (k + 1 == opt.max_subspace) break;
        std::vector<cplx> next(w);
        for (auto& z : next) z /= b;
        lz.basis.push_back(std::move(next));
    }

    double err = 0.0;
    if (lz.invariant) {
        step = remaining;
        coeff = lz.small_propagator(step, err);
    } else {
        coeff = lz.small_propagator(step, err);
        while (err > opt.tolerance) {
            step *= 0.5;
            if (step < 1e-10 * std::max(1.0, remaining)) {
                throw PropagatorError(fmt::format(
                    "Krylov propagator failed to reach tolerance {} with subspace {} (step {})",
                    opt.tolerance, opt.max_subspace, step));
            }
            coeff = lz.small_propagator(step, err);
        }
    }

    std::fill(psi.begin(), psi.end(), cplx(0.0));
    for (std::size_t r = 0; r < coeff.size(); ++r) {
        const cplx c = psi_norm * coeff[r];
        const auto& v = lz.basis[r];
        for (std::size_t s = 0; s < dim; ++s) psi[s] += c * v[s];
    }
    remaining -= step;
    if (remaining < 1e-14 * step) remaining = 0.0;
}

}  // namespace

void evolve_state(const StateVector& psi, const PairOperator& h, std::span<const double> times,
                  const StateCallback& on_grid_point, const KrylovOptions& options) {
    check_dynamics_size(psi.n_sites);
    if (h.n_sites() != psi.n_sites) {
        throw std::invalid_argument("operator and state have different site counts");
    }
    if (times.empty() || times[0] != 0.0) {
        throw std::invalid_argument("time grid must start at 0");
    }
    for (std::size_t k = 1; k < times.size(); ++k) {
        if (!(times[k] > times[k - 1])) throw std::invalid_argument("time grid must be strictly increasing");
    }

    StateVector cur = psi;
    on_grid_point(0, 0.0, cur);
    for (std::size_t k = 1; k < times.size(); ++k) {
        double remaining = times[k] - times[k - 1];
        while (remaining > 0.0) krylov_step(cur.amplitudes, h, remaining, options);
        on_grid_point(k, times[k], cur);
    }
}

std::vector<StateVector> evolve_state(const StateVector& psi, const PairOperator& h,
                                      std::span<const double> times,
                                      const KrylovOptions& options) {
    std::vector<StateVector> out;
    out.reserve(times.size());
    evolve_state(
        psi, h, times, [&](std::size_t, double, const StateVector& s) { out.push_back(s); },
        options);
    return out;
}

CollectiveMoments collective_moments(const StateVector& psi) {
    const std::size_t dim = psi.dim();
    const auto& in = psi.amplitudes;
    std::vector<cplx> ax(dim, 0.0), ay(dim, 0.0), az(dim);

    for (std::uint64_t s = 0; s < dim; ++s) {
        const int ups = std::popcount(s);
        az[s] = (ups - 0.5 * psi.n_sites) * in[s];
    }
    const cplx half_i(0.0, 0.5);
    for (int site = 0; site < psi.n_sites; ++site) {
        const std::uint64_t bit = std::uint64_t{1} << site;
        for (std::uint64_t s = 0; s < dim; ++s) {
            ax[s ^ bit] += 0.5 * in[s];
            // s_y |up> = (i/2)|down>, s_y |down> = (-i/2)|up>
            ay[s ^ bit] += ((s & bit) ? half_i : -half_i) * in[s];
        }
    }

    const std::span<const cplx> ops[3] = {ax, ay, az};
    CollectiveMoments m;
    for (int mu = 0; mu < 3; ++mu) {
        m.first[mu] = inner(in, ops[mu]).real();
        for (int nu = mu; nu < 3; ++nu) {
            m.second[mu][nu] = m.second[nu][mu] = inner(ops[mu], ops[nu]).real();
        }
    }
    return m;
}

double entanglement_entropy(const StateVector& psi) {
    const int na = cut_sites(psi.n_sites);
    const Eigen::Index rows = Eigen::Index{1} << na;
    const Eigen::Index cols = Eigen::Index{1} << (psi.n_sites - na);
    // index = a + rows * b, i.e. column-major with the first-half sites as rows
    const Eigen::Map<const Eigen::MatrixXcd> m(psi.amplitudes.data(), rows, cols);
    Eigen::BDCSVD<Eigen::MatrixXcd> svd(m);
    double entropy = 0.0;
    for (Eigen::Index k = 0; k < svd.singularValues().size(); ++k) {
        const double p = svd.singularValues()(k) * svd.singularValues()(k);
        if (p < 1e-14) continue;
        entropy -= p * std::log(p);
    }
    return std::max(entropy, 0.0);
}

}  // namespace xxz
