#include "raypose/liegroup.hpp"

#include <algorithm>
#include <cmath>

#include "raypose/error.hpp"

namespace raypose {

namespace {
constexpr double kSmallAngle = 1e-8;
}

bool Rotation::is_valid(double eps) const {
    const Mat3 gram = m.transposed() * m;
    if (max_abs_diff(gram, Mat3::identity()) > eps) return false;
    return std::abs(m.det() - 1.0) <= eps;
}

Pose exp_map(const Twist& x) {
    const Mat3 w_hat = skew(x.w);
    const double theta_sq = dot(x.w, x.w);
    const double theta = std::sqrt(theta_sq);

    Mat3 rot;
    Mat3 v;
    if (theta < kSmallAngle) {
        rot = Mat3::identity() + w_hat;
        v = Mat3::identity() + w_hat * 0.5;
    } else {
        // (1 - cos t)/t^2 written as 2 sin^2(t/2)/t^2 to avoid cancellation.
        const double a = std::sin(theta) / theta;
        const double sh = std::sin(0.5 * theta);
        const double b = 2.0 * sh * sh / theta_sq;
        const double c = (theta - std::sin(theta)) / (theta_sq * theta);
        const Mat3 w_hat_sq = w_hat * w_hat;
        rot = Mat3::identity() + w_hat * a + w_hat_sq * b;
        v = Mat3::identity() + w_hat * b + w_hat_sq * c;
    }
    return Pose{Rotation{rot}, v * x.t};
}

Twist log_map(const Pose& p) {
    const Mat3& rot = p.r.m;
    const double cos_theta = std::clamp(0.5 * (rot.trace() - 1.0), -1.0, 1.0);
    const double theta = std::acos(cos_theta);
    if (theta >= M_PI - 1e-6)
        throw RotationNearPi("log_map: rotation angle " + std::to_string(theta) +
                             " is outside the principal branch");

    const Vec3 half_vee = vee(rot - rot.transposed()) * 0.5;
    Vec3 w;
    Mat3 v_inv;
    if (theta < kSmallAngle) {
        w = half_vee;
        const Mat3 w_hat = skew(w);
        v_inv = Mat3::identity() - w_hat * 0.5 + (w_hat * w_hat) * (1.0 / 12.0);
    } else {
        w = half_vee * (theta / std::sin(theta));
        const Mat3 w_hat = skew(w);
        const double coef =
            1.0 / (theta * theta) - (1.0 + cos_theta) / (2.0 * theta * std::sin(theta));
        v_inv = Mat3::identity() - w_hat * 0.5 + (w_hat * w_hat) * coef;
    }
    return Twist{v_inv * p.t, w};
}

Pose compose(const Pose& a, const Pose& b) {
    return Pose{Rotation{a.r.m * b.r.m}, a.r.m * b.t + a.t};
}

Pose inverse(const Pose& p) {
    const Mat3 rt = p.r.m.transposed();
    return Pose{Rotation{rt}, -(rt * p.t)};
}

Pose relative_pose(const Pose& pi, const Pose& pj) {
    const Mat3 r_ij = pj.r.m * pi.r.m.transposed();
    return Pose{Rotation{r_ij}, pj.t - r_ij * pi.t};
}

double geodesic_angle(const Rotation& a, const Rotation& b) {
    const double c = 0.5 * ((a.m.transposed() * b.m).trace() - 1.0);
    return std::acos(std::clamp(c, -1.0, 1.0));
}

}  // namespace raypose
