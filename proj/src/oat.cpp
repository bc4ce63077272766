#include "xxz/oat.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>

namespace xxz {

namespace {

void check_oat(int n_sites, double chi) {
    if (n_sites < 2) throw std::invalid_argument(fmt::format("OAT needs N >= 2 (got {})", n_sites));
    if (!(chi > 0.0) || !std::isfinite(chi))
        throw std::invalid_argument(fmt::format("OAT needs chi > 0 (got {})", chi));
}

double xi2_at(const DickeState& init, double chi, double t) {
    return squeezing_from_moments(dicke_moments(oat_evolve(init, chi, t)), init.n_sites).xi2;
}

}  // namespace

DickeState dicke_initial_state(int n_sites) {
    DickeState d;
    d.n_sites = n_sites;
    d.amplitudes.resize(static_cast<std::size_t>(n_sites) + 1);
    const double log_norm = 0.5 * n_sites * std::log(2.0);
    for (int k = 0; k <= n_sites; ++k) {
        const double log_binom =
            std::lgamma(n_sites + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n_sites - k + 1.0);
        d.amplitudes[k] = std::exp(0.5 * log_binom - log_norm);
    }
    return d;
}

DickeState oat_evolve(const DickeState& initial, double chi, double t) {
    DickeState out = initial;
    for (std::size_t k = 0; k < out.amplitudes.size(); ++k) {
        const double m = out.m(k);
        out.amplitudes[k] *= std::exp(cplx(0.0, -chi * m * m * t));
    }
    return out;
}

CollectiveMoments dicke_moments(const DickeState& psi) {
    const std::size_t dim = psi.amplitudes.size();
    const double s = 0.5 * psi.n_sites;
    const auto& c = psi.amplitudes;

    // S_+ |m> = sqrt(s(s+1) - m(m+1)) |m+1>
    std::vector<cplx> raise(dim, 0.0), lower(dim, 0.0), az(dim);
    for (std::size_t k = 0; k < dim; ++k) {
        const double m = psi.m(k);
        az[k] = m * c[k];
        if (k + 1 < dim) raise[k + 1] = std::sqrt(s * (s + 1.0) - m * (m + 1.0)) * c[k];
        if (k > 0) lower[k - 1] = std::sqrt(s * (s + 1.0) - m * (m - 1.0)) * c[k];
    }
    std::vector<cplx> ax(dim), ay(dim);
    for (std::size_t k = 0; k < dim; ++k) {
        ax[k] = 0.5 * (raise[k] + lower[k]);
        ay[k] = cplx(0.0, -0.5) * (raise[k] - lower[k]);
    }

    auto inner = [](const std::vector<cplx>& a, const std::vector<cplx>& b) {
        cplx acc = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) acc += std::conj(a[k]) * b[k];
        return acc;
    };
    const std::vector<cplx>* ops[3] = {&ax, &ay, &az};
    CollectiveMoments mom;
    for (int mu = 0; mu < 3; ++mu) {
        mom.first[mu] = inner(c, *ops[mu]).real();
        for (int nu = mu; nu < 3; ++nu)
            mom.second[mu][nu] = mom.second[nu][mu] = inner(*ops[mu], *ops[nu]).real();
    }
    return mom;
}

std::vector<OatPoint> oat_reference(int n_sites, double chi, std::span<const double> times) {
    check_oat(n_sites, chi);
    const DickeState init = dicke_initial_state(n_sites);
    std::vector<OatPoint> out;
    out.reserve(times.size());
    for (const double t : times) {
        OatPoint p;
        p.t = t;
        p.moments = dicke_moments(oat_evolve(init, chi, t));
        p.squeezing = squeezing_from_moments(p.moments, n_sites);
        p.squeezing.t = t;
        out.push_back(p);
    }
    return out;
}

OatOptimum oat_tstar(int n_sites, double chi, double rtol) {
    check_oat(n_sites, chi);
    const DickeState init = dicke_initial_state(n_sites);

    // optimum sits near chi t ~ N^(-2/3); resolve that scale with ~200 points
    const double h = std::min(1e-3, std::pow(static_cast<double>(n_sites), -2.0 / 3.0) / 200.0) / chi;
    const double t_end = 0.5 * std::numbers::pi / chi;
    double t_prev = 0.0, f_prev = 1.0;
    double t_cur = h, f_cur = xi2_at(init, chi, h);
    double lo = 0.0, hi = 0.0;
    bool found = false;
    for (double t_next = 2.0 * h; t_next <= t_end; t_next += h) {
        const double f_next = xi2_at(init, chi, t_next);
        if (f_cur < f_prev && f_cur <= f_next) {
            lo = t_prev;
            hi = t_next;
            found = true;
            break;
        }
        t_prev = t_cur; f_prev = f_cur;
        t_cur = t_next; f_cur = f_next;
    }
    if (!found) {
        throw std::runtime_error(fmt::format("no squeezing minimum found for N={} chi={}", n_sites, chi));
    }

    const double inv_phi = 0.5 * (std::sqrt(5.0) - 1.0);
    double a = lo, b = hi;
    double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
    double fc = xi2_at(init, chi, c), fd = xi2_at(init, chi, d);
    while (b - a > rtol * 0.5 * (a + b)) {
        if (fc < fd) {
            b = d; d = c; fd = fc;
            c = b - inv_phi * (b - a);
            fc = xi2_at(init, chi, c);
        } else {
            a = c; c = d; fc = fd;
            d = a + inv_phi * (b - a);
            fd = xi2_at(init, chi, d);
        }
    }
    double t_star = 0.5 * (a + b);

    // function values only fix the minimum to ~sqrt(eps); polish on the derivative
    auto derivative = [&](double t, double step) {
        return (xi2_at(init, chi, t + step) - xi2_at(init, chi, t - step)) / (2.0 * step);
    };
    for (int it = 0; it < 20; ++it) {
        const double step = 1e-3 * t_star;
        const double d1 = (4.0 * derivative(t_star, 0.5 * step) - derivative(t_star, step)) / 3.0;
        const double d2 = (xi2_at(init, chi, t_star + step) - 2.0 * xi2_at(init, chi, t_star) +
                           xi2_at(init, chi, t_star - step)) / (step * step);
        if (!(d2 > 0.0)) break;
        const double next = t_star - d1 / d2;
        if (!(next > lo && next < hi)) break;
        const bool done = std::abs(next - t_star) <= 1e-13 * t_star;
        t_star = next;
        if (done) break;
    }
    return {t_star, xi2_at(init, chi, t_star)};
}

}  // namespace xxz
