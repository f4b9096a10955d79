#pragma once

// Rigid poses, pinhole projection and the frustum coverage ratio that
// drives anchor registration.

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace ovkv {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }

    [[nodiscard]] double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    [[nodiscard]] Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    [[nodiscard]] double norm() const { return std::sqrt(dot(*this)); }
    [[nodiscard]] Vec3 normalized() const {
        const double n = norm();
        if (n == 0.0) throw std::domain_error("Vec3::normalized: zero vector");
        return {x / n, y / n, z / n};
    }
};

/// Row-major 3x3 matrix.
struct Mat3 {
    std::array<double, 9> m{};

    static Mat3 identity() {
        Mat3 r;
        r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        return r;
    }

    double& at(std::size_t r, std::size_t c) { return m[r * 3 + c]; }
    [[nodiscard]] double at(std::size_t r, std::size_t c) const { return m[r * 3 + c]; }

    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 3; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < 3; ++k) s += at(i, k) * o.at(k, j);
                r.at(i, j) = s;
            }
        }
        return r;
    }

    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }

    [[nodiscard]] Mat3 transposed() const {
        Mat3 r;
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) r.at(i, j) = at(j, i);
        return r;
    }

    [[nodiscard]] double determinant() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) -
               m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }
};

/// Camera-to-world rigid transform: world = R * p_cam + t.
struct Pose {
    Mat3 rotation = Mat3::identity();
    Vec3 translation;

    static Pose identity() { return {}; }

    /// Verifies R is a proper rotation within `tol` (orthonormal, det +1).
    void validate(double tol = 1e-9) const {
        const Mat3 rtr = rotation.transposed() * rotation;
        const Mat3 id = Mat3::identity();
        for (std::size_t i = 0; i < 9; ++i) {
            if (std::abs(rtr.m[i] - id.m[i]) > tol) {
                throw std::invalid_argument("Pose: rotation is not orthonormal");
            }
        }
        if (std::abs(rotation.determinant() - 1.0) > tol) {
            throw std::invalid_argument("Pose: rotation determinant is not +1");
        }
    }

    [[nodiscard]] Pose inverse() const {
        const Mat3 rt = rotation.transposed();
        return {rt, -(rt * translation)};
    }

    [[nodiscard]] Pose compose(const Pose& o) const {
        return {rotation * o.rotation, rotation * o.translation + translation};
    }

    [[nodiscard]] Vec3 transform(const Vec3& p) const { return rotation * p + translation; }
};

/// Relative transform taking coordinates of `anchor`'s camera frame into
/// `current`'s camera frame. Both poses are validated.
inline Pose compose_relative(const Pose& current, const Pose& anchor) {
    current.validate();
    anchor.validate();
    return current.inverse().compose(anchor);
}

struct Intrinsics {
    double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
    std::size_t width = 0, height = 0;

    void validate() const {
        if (!(fx > 0.0) || !(fy > 0.0) || width == 0 || height == 0) {
            throw std::invalid_argument("Intrinsics: focal lengths and image size must be positive");
        }
    }
};

/// Per-frame 3D points, one per patch token, expressed in the owning
/// frame's camera coordinates, with a confidence value per point.
struct PointMap {
    std::vector<Vec3> points;
    std::vector<double> confidence;

    [[nodiscard]] std::size_t size() const { return points.size(); }

    void validate() const {
        if (points.size() != confidence.size()) {
            throw std::invalid_argument("PointMap: points/confidence size mismatch");
        }
    }
};

/// Fraction of anchor points that land inside the current camera's image
/// when carried through the relative pose and the pinhole model. A point is
/// covered iff its depth exceeds z_min and its pixel falls in
/// [0, width) x [0, height). Empty point maps are rejected.
inline double coverage_ratio(const PointMap& anchor_points, const Pose& anchor_pose,
                             const Pose& current_pose, const Intrinsics& cam,
                             double z_min = 1e-6) {
    anchor_points.validate();
    cam.validate();
    if (anchor_points.points.empty()) {
        throw std::invalid_argument("coverage_ratio: empty point map");
    }
    const Pose rel = compose_relative(current_pose, anchor_pose);
    std::size_t covered = 0;
    for (const Vec3& p : anchor_points.points) {
        const Vec3 q = rel.transform(p);
        if (!(q.z > z_min)) continue;
        const double u = cam.fx * q.x / q.z + cam.cx;
        const double v = cam.fy * q.y / q.z + cam.cy;
        if (u >= 0.0 && u < static_cast<double>(cam.width) &&
            v >= 0.0 && v < static_cast<double>(cam.height)) {
            ++covered;
        }
    }
    return static_cast<double>(covered) / static_cast<double>(anchor_points.points.size());
}

}  // namespace ovkv
