#pragma once

#include <array>
#include <cmath>

namespace raypose {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    double& operator[](int i) { return (&x)[i]; }
    double operator[](int i) const { return (&x)[i]; }

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }
inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }
inline Vec3 normalized(const Vec3& v) { return v / norm(v); }

// 3x3 row-major matrix.
struct Mat3 {
    std::array<double, 9> m{};

    double& operator()(int r, int c) { return m[3 * r + c]; }
    double operator()(int r, int c) const { return m[3 * r + c]; }

    static Mat3 identity() {
        Mat3 out;
        out.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        return out;
    }
    static Mat3 zero() { return Mat3{}; }

    static Mat3 from_rows(const Vec3& r0, const Vec3& r1, const Vec3& r2) {
        Mat3 out;
        out.m = {r0.x, r0.y, r0.z, r1.x, r1.y, r1.z, r2.x, r2.y, r2.z};
        return out;
    }
    static Mat3 from_cols(const Vec3& c0, const Vec3& c1, const Vec3& c2) {
        Mat3 out;
        out.m = {c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z};
        return out;
    }

    Vec3 row(int r) const { return {m[3 * r], m[3 * r + 1], m[3 * r + 2]}; }
    Vec3 col(int c) const { return {m[c], m[3 + c], m[6 + c]}; }

    Mat3 operator+(const Mat3& o) const {
        Mat3 out;
        for (int i = 0; i < 9; ++i) out.m[i] = m[i] + o.m[i];
        return out;
    }
    Mat3 operator-(const Mat3& o) const {
        Mat3 out;
        for (int i = 0; i < 9; ++i) out.m[i] = m[i] - o.m[i];
        return out;
    }
    Mat3 operator*(double s) const {
        Mat3 out;
        for (int i = 0; i < 9; ++i) out.m[i] = m[i] * s;
        return out;
    }
    Mat3 operator*(const Mat3& o) const {
        Mat3 out;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
                out(r, c) = (*this)(r, 0) * o(0, c) + (*this)(r, 1) * o(1, c) + (*this)(r, 2) * o(2, c);
        return out;
    }
    Vec3 operator*(const Vec3& v) const {
        return {dot(row(0), v), dot(row(1), v), dot(row(2), v)};
    }

    Mat3 transposed() const {
        Mat3 out;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) out(r, c) = (*this)(c, r);
        return out;
    }

    double trace() const { return m[0] + m[4] + m[8]; }

    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }
};

inline Mat3 operator*(double s, const Mat3& a) { return a * s; }

inline Mat3 skew(const Vec3& w) {
    Mat3 out;
    out.m = {0, -w.z, w.y, w.z, 0, -w.x, -w.y, w.x, 0};
    return out;
}

inline Vec3 vee(const Mat3& a) { return {a(2, 1), a(0, 2), a(1, 0)}; }

inline Mat3 outer(const Vec3& a, const Vec3& b) {
    Mat3 out;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) out(r, c) = a[r] * b[c];
    return out;
}

inline double frobenius_norm(const Mat3& a) {
    double s = 0.0;
    for (double v : a.m) s += v * v;
    return std::sqrt(s);
}

inline double max_abs_diff(const Mat3& a, const Mat3& b) {
    double d = 0.0;
    for (int i = 0; i < 9; ++i) d = std::max(d, std::abs(a.m[i] - b.m[i]));
    return d;
}

}  // namespace raypose
