#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "xxz/model.hpp"

namespace xxz {

/// Symmetric 3x3 matrix of symmetrized collective second moments <{S_mu, S_nu}/2>.
using Mat3 = std::array<std::array<double, 3>, 3>;

/// First and second moments of the collective spin (S_x, S_y, S_z).
struct CollectiveMoments {
    Vec3 first;
    Mat3 second{};

    double total_spin_sq() const { return second[0][0] + second[1][1] + second[2][2]; }
    double transverse_spin_sq() const { return second[0][0] + second[1][1]; }
};

class SqueezingUndefined : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

struct SqueezingResult {
    double xi2 = 1.0;
    double xi2_db = 0.0;
    /// Angle of the optimal axis in the transverse frame, in [0, pi).
    double axis_angle = 0.0;
    Vec3 axis;
    Vec3 bloch;
    /// Transverse frame (e1, e2), both orthogonal to the Bloch vector.
    Vec3 frame_e1;
    Vec3 frame_e2;
    double t = 0.0;
    double tau = 0.0;
};

double to_db(double xi2);

/// Wineland squeezing parameter xi^2 = N min_n Var(S_n) / |<S>|^2 over axes n
/// orthogonal to <S>. Throws SqueezingUndefined if |<S>| < 1e-9 N.
SqueezingResult squeezing_from_moments(const Vec3& first, const Mat3& second, int n_sites);

inline SqueezingResult squeezing_from_moments(const CollectiveMoments& m, int n_sites) {
    return squeezing_from_moments(m.first, m.second, n_sites);
}

/// Transverse orthonormal frame (e1, e2) for a Bloch direction; e1 comes from
/// Gram-Schmidt on the coordinate axis least aligned with `bloch` (first such axis
/// on ties) and e2 = n x e1.
std::pair<Vec3, Vec3> transverse_frame(const Vec3& bloch);

struct OptimalSqueezing {
    double t_star = 0.0;
    double xi2_min = 1.0;
    /// False when the grid minimum sits on the last sample (minimum not yet reached).
    bool reached = true;
};

/// Grid minimum of a (t, xi2) series refined by a parabola through the bracketing
/// triple. Throws std::invalid_argument for fewer than three points.
OptimalSqueezing optimal_squeezing(const std::vector<std::pair<double, double>>& series);

struct ScalingFit {
    double nu = 0.0;
    double intercept = 0.0;
    /// Present only with three or more points.
    std::optional<double> stderr_nu;
    double max_residual = 0.0;
    std::vector<std::pair<double, double>> points;
};

/// Least-squares line through (ln N, ln xi2); slope nu.
ScalingFit scaling_fit(const std::vector<std::pair<double, double>>& points);

inline constexpr double kDefaultEntropyWindow = 0.3;

/// Through-origin least-squares slope of S_vN versus scaled time over tau <= window.
/// Throws std::invalid_argument when fewer than three points fall inside the window.
double entropy_rate(const std::vector<std::pair<double, double>>& series,
                    double window = kDefaultEntropyWindow);

}  // namespace xxz
