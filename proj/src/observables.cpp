#include "xxz/observables.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

namespace xxz {

namespace {

double quad_form(const Mat3& m, const Vec3& a, const Vec3& b) {
    double s = 0.0;
    for (int mu = 0; mu < 3; ++mu)
        for (int nu = 0; nu < 3; ++nu) s += a[mu] * m[mu][nu] * b[nu];
    return s;
}

}  // namespace

double to_db(double xi2) { return 10.0 * std::log10(xi2); }

std::pair<Vec3, Vec3> transverse_frame(const Vec3& bloch) {
    const double len = norm(bloch);
    const Vec3 n = (1.0 / len) * bloch;

    int ref_axis = 0;
    for (int k = 1; k < 3; ++k) {
        if (std::abs(n[k]) < std::abs(n[ref_axis])) ref_axis = k;
    }
    Vec3 ref;
    ref[ref_axis] = 1.0;

    Vec3 e1 = ref - dot(ref, n) * n;
    e1 = (1.0 / norm(e1)) * e1;
    // second pass removes the residual overlap left by rounding
    e1 = e1 - dot(e1, n) * n;
    e1 = (1.0 / norm(e1)) * e1;
    const Vec3 e2 = cross(n, e1);
    return {e1, e2};
}

SqueezingResult squeezing_from_moments(const Vec3& first, const Mat3& second, int n_sites) {
    const double len = norm(first);
    if (!(len >= 1e-9 * n_sites)) {
        throw SqueezingUndefined(
            fmt::format("squeezing undefined: Bloch vector length {} is below 1e-9 N", len));
    }
    const auto [e1, e2] = transverse_frame(first);

    // transverse covariance in the (e1, e2) frame
    const double c11 = quad_form(second, e1, e1) - dot(first, e1) * dot(first, e1);
    const double c22 = quad_form(second, e2, e2) - dot(first, e2) * dot(first, e2);
    const double c12 = quad_form(second, e1, e2) - dot(first, e1) * dot(first, e2);

    const double mean = 0.5 * (c11 + c22);
    const double radius = std::hypot(0.5 * (c11 - c22), c12);
    const double lambda_min = mean - radius;

    // eigenvector of the smaller eigenvalue: angle theta with tan(2 theta) = 2 c12 / (c11 - c22)
    double theta = 0.5 * std::atan2(2.0 * c12, c11 - c22) + 0.5 * std::numbers::pi;
    theta = std::fmod(theta, std::numbers::pi);
    if (theta < 0.0) theta += std::numbers::pi;

    SqueezingResult r;
    r.xi2 = n_sites * lambda_min / (len * len);
    r.xi2_db = to_db(r.xi2);
    r.axis_angle = theta;
    r.axis = std::cos(theta) * e1 + std::sin(theta) * e2;
    r.bloch = first;
    r.frame_e1 = e1;
    r.frame_e2 = e2;
    return r;
}

OptimalSqueezing optimal_squeezing(const std::vector<std::pair<double, double>>& series) {
    if (series.size() < 3) {
        throw std::invalid_argument(
            fmt::format("optimal squeezing needs at least 3 time points (got {})", series.size()));
    }
    std::size_t k = 0;
    for (std::size_t i = 1; i < series.size(); ++i) {
        if (series[i].second < series[k].second) k = i;
    }

    OptimalSqueezing out{series[k].first, series[k].second, true};
    if (k + 1 == series.size()) {
        out.reached = false;
        return out;
    }
    if (k == 0) return out;

    const auto [t0, f0] = series[k - 1];
    const auto [t1, f1] = series[k];
    const auto [t2, f2] = series[k + 1];
    // vertex of the interpolating parabola on a possibly non-uniform grid
    const double d01 = (f1 - f0) / (t1 - t0);
    const double d12 = (f2 - f1) / (t2 - t1);
    const double curv = (d12 - d01) / (t2 - t0);
    if (curv > 0.0) {
        const double tv = 0.5 * (t0 + t1) - d01 / (2.0 * curv);
        const double tc = std::clamp(tv, t0, t2);
        out.t_star = tc;
        out.xi2_min = f1 + d01 * (tc - t1) + curv * (tc - t0) * (tc - t1);
    }
    return out;
}

ScalingFit scaling_fit(const std::vector<std::pair<double, double>>& points) {
    if (points.size() < 2) {
        throw std::invalid_argument("scaling fit needs at least 2 points");
    }
    const std::size_t n = points.size();
    std::vector<double> xs(n), ys(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto [size, xi2] = points[i];
        if (!(size > 0.0) || !(xi2 > 0.0)) {
            throw std::invalid_argument(
                fmt::format("scaling fit needs positive N and xi2 (point {}: N={}, xi2={})", i,
                            size, xi2));
        }
        xs[i] = std::log(size);
        ys[i] = std::log(xi2);
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) { mx += xs[i]; my += ys[i]; }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if (sxx == 0.0) throw std::invalid_argument("scaling fit needs at least two distinct N");

    ScalingFit fit;
    fit.nu = sxy / sxx;
    fit.intercept = my - fit.nu * mx;
    fit.points = points;
    double rss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double res = ys[i] - (fit.intercept + fit.nu * xs[i]);
        rss += res * res;
        fit.max_residual = std::max(fit.max_residual, std::abs(res));
    }
    if (n >= 3) fit.stderr_nu = std::sqrt(rss / static_cast<double>(n - 2) / sxx);
    return fit;
}

double entropy_rate(const std::vector<std::pair<double, double>>& series, double window) {
    double stt = 0.0, sts = 0.0;
    int used = 0;
    for (const auto& [tau, s] : series) {
        if (tau > window) continue;
        stt += tau * tau;
        sts += tau * s;
        ++used;
    }
    if (used < 3 || stt == 0.0) {
        throw std::invalid_argument(
            fmt::format("entropy rate needs at least 3 points with tau <= {} (got {})", window, used));
    }
    return sts / stt;
}

}  // namespace xxz
