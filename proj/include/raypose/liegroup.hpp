#pragma once

#include "raypose/geometry.hpp"

namespace raypose {

// World-to-camera rotation. Columns/rows orthonormal, det +1.
struct Rotation {
    Mat3 m = Mat3::identity();

    bool is_valid(double eps = 1e-9) const;
};

// Rigid transform x_cam = r * x_world + t (world-to-camera).
struct Pose {
    Rotation r;
    Vec3 t;

    // Camera position in world coordinates.
    Vec3 center() const { return -(r.m.transposed() * t); }
};

// Element of the tangent space: translation part first, then axis-angle.
struct Twist {
    Vec3 t;
    Vec3 w;
};

// Exponential map se(3) -> SE(3). theta = |w|; theta = 0 permitted.
Pose exp_map(const Twist& x);

// Principal-branch logarithm. Throws RotationNearPi for theta >= pi - 1e-6.
Twist log_map(const Pose& p);

// Group product a * b (apply b first, then a).
Pose compose(const Pose& a, const Pose& b);

Pose inverse(const Pose& p);

// Relative transform taking camera-i coordinates to camera-j coordinates:
// R_ij = R_j R_i^T, T_ij = T_j - R_ij T_i.
Pose relative_pose(const Pose& pi, const Pose& pj);

// Angle of the rotation a^T b, in [0, pi].
double geodesic_angle(const Rotation& a, const Rotation& b);

}  // namespace raypose
