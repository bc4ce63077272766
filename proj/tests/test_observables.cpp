#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "xxz/exact.hpp"
#include "xxz/lattice.hpp"
#include "xxz/oat.hpp"
#include "xxz/observables.hpp"

using namespace xxz;

namespace {

CollectiveMoments coherent(int n) {
    CollectiveMoments m;
    m.first = {0.5 * n, 0, 0};
    m.second[0][0] = 0.25 * n * n;
    m.second[1][1] = m.second[2][2] = 0.25 * n;
    return m;
}

// N Var(S_n) / |<S>|^2 along n = cos(th) u + sin(th) v.
double axis_value(const CollectiveMoments& m, int n, const Eigen::Vector3d& u,
                  const Eigen::Vector3d& v, double th) {
    Eigen::Vector3d a = std::cos(th) * u + std::sin(th) * v;
    Eigen::Matrix3d second;
    Eigen::Vector3d first(m.first.x, m.first.y, m.first.z);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) second(i, j) = m.second[i][j];
    double var = a.dot(second * a) - std::pow(a.dot(first), 2);
    return n * var / first.squaredNorm();
}

// Minimum over a uniform scan of 10^4 transverse angles, refined by a parabola through
// the scan's best triple.
double axis_scan_oracle(const CollectiveMoments& m, int n) {
    Eigen::Vector3d b(m.first.x, m.first.y, m.first.z);
    b.normalize();
    Eigen::Vector3d r(0.3, -0.8, 0.52);
    Eigen::Vector3d u = (r - r.dot(b) * b).normalized();
    Eigen::Vector3d v = b.cross(u);
    const int k = 10000;
    const double h = M_PI / k;
    int best = 0;
    double fbest = 1e300;
    for (int i = 0; i < k; ++i) {
        double f = axis_value(m, n, u, v, i * h);
        if (f < fbest) {
            fbest = f;
            best = i;
        }
    }
    double fm = axis_value(m, n, u, v, (best - 1) * h), fp = axis_value(m, n, u, v, (best + 1) * h);
    double denom = fm - 2 * fbest + fp;
    double shift = denom > 0 ? 0.5 * (fm - fp) / denom : 0.0;
    return axis_value(m, n, u, v, (best + shift) * h);
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> g;
    Eigen::Vector4d q(g(rng), g(rng), g(rng), g(rng));
    q.normalize();
    return Eigen::Quaterniond(q(0), q(1), q(2), q(3)).toRotationMatrix();
}

CollectiveMoments rotate(const CollectiveMoments& m, const Eigen::Matrix3d& r) {
    Eigen::Vector3d f(m.first.x, m.first.y, m.first.z);
    Eigen::Matrix3d s;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) s(i, j) = m.second[i][j];
    f = r * f;
    s = r * s * r.transpose();
    CollectiveMoments out;
    out.first = {f(0), f(1), f(2)};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) out.second[i][j] = s(i, j);
    return out;
}

double slope_oracle(const std::vector<std::pair<double, double>>& pts) {
    Eigen::MatrixXd a(pts.size(), 2);
    Eigen::VectorXd y(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        a(i, 0) = 1.0;
        a(i, 1) = std::log(pts[i].first);
        y(i) = std::log(pts[i].second);
    }
    return a.colPivHouseholderQr().solve(y)(1);
}

}  // namespace

TEST_CASE("coherent moments give the standard quantum limit") {
    for (int n : {2, 9, 36, 100}) {
        auto r = squeezing_from_moments(coherent(n), n);
        CHECK(r.xi2 == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(std::abs(r.xi2_db) <= 1e-12);
    }
}

TEST_CASE("zero Bloch vector is rejected") {
    CollectiveMoments m;
    m.second[0][0] = m.second[1][1] = m.second[2][2] = 1.0;
    CHECK_THROWS_AS(squeezing_from_moments(m, 4), SqueezingUndefined);
    m.first = {1e-12, 0, 0};
    CHECK_THROWS_AS(squeezing_from_moments(m, 4), SqueezingUndefined);
}

TEST_CASE("dB conversion") {
    CHECK(to_db(1.0) == 0.0);
    CHECK(to_db(0.1) == doctest::Approx(-10.0));
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-3, 3);
    for (int i = 0; i < 100; ++i) {
        double x = std::pow(10.0, u(rng));
        CHECK((to_db(x) < 0) == (x < 1));
    }
}

TEST_CASE("OAT N=8 squeezing matches a dense axis scan") {
    auto pts = oat_reference(8, 1.0, std::vector<double>{0.0, 0.1});
    const auto& m = pts[1].moments;
    auto r = squeezing_from_moments(m, 8);
    double scan = axis_scan_oracle(m, 8);
    CHECK(r.xi2 < 1.0);
    CHECK(std::abs(r.xi2 - scan) <= 1e-8 * scan);
    CHECK(std::abs(dot(r.axis, r.bloch)) <= 1e-12 * norm(r.bloch));
    CHECK(norm(r.axis) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(r.axis_angle >= 0.0);
    CHECK(r.axis_angle < M_PI);
}

TEST_CASE("property: lambda_min equals the axis scan and is rotation invariant") {
    std::mt19937_64 rng(29);
    std::uniform_real_distribution<double> ut(0.01, 1.2);
    for (int trial = 0; trial < 20; ++trial) {
        int n = 4 + trial % 13;
        double t = ut(rng) / n;
        auto m = oat_reference(n, 1.0, std::vector<double>{0.0, t})[1].moments;
        m = rotate(m, random_rotation(rng));
        auto r = squeezing_from_moments(m, n);
        CHECK(std::abs(r.xi2 - axis_scan_oracle(m, n)) <= 1e-8 * r.xi2);
        auto r2 = squeezing_from_moments(rotate(m, random_rotation(rng)), n);
        CHECK(std::abs(r2.xi2 - r.xi2) <= 1e-10 * r.xi2);
        CHECK(std::abs(dot(r.axis, r.bloch)) <= 1e-12 * norm(r.bloch));
        CHECK(std::abs(dot(r.frame_e1, r.frame_e2)) <= 1e-14);
    }
}

TEST_CASE("transverse frame is orthonormal and tie-broken by coordinate order") {
    auto [e1, e2] = transverse_frame({1, 0, 0});
    CHECK(e1 == Vec3{0, 1, 0});
    CHECK(e2 == Vec3{0, 0, 1});
    std::mt19937_64 rng(2);
    std::normal_distribution<double> g;
    for (int i = 0; i < 50; ++i) {
        Vec3 b{g(rng), g(rng), g(rng)};
        auto [a, c] = transverse_frame(b);
        CHECK(norm(a) == doctest::Approx(1.0));
        CHECK(norm(c) == doctest::Approx(1.0));
        CHECK(std::abs(dot(a, b)) <= 1e-14 * norm(b));
        CHECK(std::abs(dot(c, b)) <= 1e-14 * norm(b));
        CHECK(std::abs(dot(a, c)) <= 1e-14);
    }
}

TEST_CASE("optimal squeezing on a grid") {
    auto v = optimal_squeezing({{1, 4}, {2, 1}, {3, 4}});
    CHECK(v.t_star == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(v.xi2_min == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(v.reached);

    auto off = optimal_squeezing({{0, 2.0}, {0.5, 0.9}, {1.5, 1.1}, {2, 3}});
    // parabola through (0,2), (0.5,0.9), (1.5,1.1)
    Eigen::Matrix3d a;
    a << 0, 0, 1, 0.25, 0.5, 1, 2.25, 1.5, 1;
    Eigen::Vector3d c = a.fullPivLu().solve(Eigen::Vector3d(2.0, 0.9, 1.1));
    double tv = -c(1) / (2 * c(0));
    CHECK(off.t_star == doctest::Approx(tv).epsilon(1e-12));
    CHECK(off.xi2_min == doctest::Approx(c(0) * tv * tv + c(1) * tv + c(2)).epsilon(1e-12));

    auto dec = optimal_squeezing({{0, 1.0}, {1, 0.8}, {2, 0.7}, {3, 0.65}});
    CHECK_FALSE(dec.reached);
    CHECK(dec.t_star == 3.0);
    CHECK(dec.xi2_min == 0.65);

    CHECK_THROWS_AS(optimal_squeezing({{0, 1}, {1, 0.5}}), std::invalid_argument);
}

TEST_CASE("optimal squeezing of an OAT series agrees with golden section") {
    const int n = 36;
    auto ref = oat_tstar(n, 1.0);
    std::vector<double> t;
    for (int k = 0; k <= 400; ++k) t.push_back(ref.t_star * 2.0 * k / 400);
    std::vector<std::pair<double, double>> series;
    for (const auto& p : oat_reference(n, 1.0, t)) series.emplace_back(p.t, p.squeezing.xi2);
    auto opt = optimal_squeezing(series);
    CHECK(opt.reached);
    CHECK(std::abs(opt.t_star - ref.t_star) <= 1e-4 * ref.t_star);
    CHECK(std::abs(opt.xi2_min - ref.xi2_min) <= 1e-4 * ref.xi2_min);
}

TEST_CASE("scaling fit") {
    std::vector<std::pair<double, double>> pts;
    for (double n : {9.0, 16.0, 36.0, 64.0, 100.0}) pts.emplace_back(n, 1.7 * std::pow(n, -0.5));
    auto f = scaling_fit(pts);
    CHECK(std::abs(f.nu + 0.5) <= 1e-12);
    REQUIRE(f.stderr_nu.has_value());
    CHECK(*f.stderr_nu <= 1e-12);
    CHECK(f.max_residual <= 1e-12);
    CHECK(std::exp(f.intercept) == doctest::Approx(1.7).epsilon(1e-12));

    auto two = scaling_fit({{16, 0.5}, {64, 0.25}});
    CHECK(two.nu == doctest::Approx(-0.5).epsilon(1e-14));
    CHECK_FALSE(two.stderr_nu.has_value());

    CHECK_THROWS_AS(scaling_fit({{16, 0.5}}), std::invalid_argument);
    CHECK_THROWS_AS(scaling_fit({{16, 0.5}, {36, 0.0}}), std::invalid_argument);
    CHECK_THROWS_AS(scaling_fit({{16, 0.5}, {36, -1.0}}), std::invalid_argument);
}

TEST_CASE("OAT minima scale with a negative exponent") {
    std::vector<std::pair<double, double>> pts;
    for (int n : {16, 36, 64}) pts.emplace_back(n, oat_tstar(n, 1.0).xi2_min);
    auto f = scaling_fit(pts);
    CHECK(f.nu < 0.0);
    CHECK(std::abs(f.nu - slope_oracle(pts)) <= 1e-10);
    CHECK(-f.nu > 0.4);
    CHECK(-f.nu < 0.8);
}

TEST_CASE("entropy rate") {
    std::vector<std::pair<double, double>> lin, zero;
    for (int k = 0; k <= 20; ++k) {
        double tau = 0.05 * k;
        lin.emplace_back(tau, 0.7 * tau);
        zero.emplace_back(tau, 0.0);
    }
    CHECK(std::abs(entropy_rate(lin) - 0.7) <= 1e-12);
    CHECK(entropy_rate(zero) == 0.0);

    std::vector<std::pair<double, double>> kinked = lin;
    for (auto& [tau, s] : kinked)
        if (tau > 0.3 + 1e-12) s = 5.0;
    CHECK(std::abs(entropy_rate(kinked) - 0.7) <= 1e-12);
    CHECK(std::abs(entropy_rate(kinked, 0.5) - 0.7) > 0.1);

    CHECK_THROWS_AS(entropy_rate({{0.0, 0.0}, {0.1, 0.1}}), std::invalid_argument);
    CHECK_THROWS_AS(entropy_rate(lin, 0.06), std::invalid_argument);
}

TEST_CASE("entropy rate of a 2x2 ED series matches an independent fit") {
    LatticeSpec spec{2, 2};
    const double delta = -1.8;
    auto cm = coupling_matrix(build_lattice(spec), 1.0, 3.0);
    const double rate = scaled_time_rate(cm.mean(), delta);
    std::vector<double> t;
    for (int k = 0; k <= 30; ++k) t.push_back(0.02 * k / rate);
    PairOperator h(4, hamiltonian_terms(cm, delta));
    std::vector<std::pair<double, double>> series;
    for (const auto& psi : evolve_state(build_initial_state(4), h, t)) {
        series.emplace_back(series.size() * 0.02, entanglement_entropy(psi));
    }
    double r = entropy_rate(series);
    Eigen::VectorXd x, y;
    std::vector<double> xs, ys;
    for (auto [tau, s] : series) {
        if (tau <= 0.3 + 1e-12) {
            xs.push_back(tau);
            ys.push_back(s);
        }
    }
    x = Eigen::Map<Eigen::VectorXd>(xs.data(), xs.size());
    y = Eigen::Map<Eigen::VectorXd>(ys.data(), ys.size());
    double oracle = x.colPivHouseholderQr().solve(y)(0);
    CHECK(r > 0.0);
    CHECK(std::abs(r - oracle) <= 0.05 * std::abs(oracle));
}
