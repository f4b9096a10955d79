#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "oracles.hpp"
#include "ovkv/geometry.hpp"

using namespace ovkv;

namespace {

Mat3 rotation_from_quaternion(double w, double x, double y, double z) {
    const double n = std::sqrt(w * w + x * x + y * y + z * z);
    w /= n;
    x /= n;
    y /= n;
    z /= n;
    Mat3 r;
    r.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
           2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
           2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
    return r;
}

Pose random_pose(std::mt19937_64& rng, double translation_scale = 2.0) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Pose p;
    p.rotation = rotation_from_quaternion(normal(rng), normal(rng), normal(rng), normal(rng));
    p.translation = {normal(rng) * translation_scale, normal(rng) * translation_scale,
                     normal(rng) * translation_scale};
    return p;
}

// Points whose covered/uncovered verdict is stable under last-ulp drift:
// anything too close to the image border, the depth cutoff, or the frustum
// planes is resampled.
PointMap stable_points(std::mt19937_64& rng, const Pose& anchor, const Pose& current,
                       const Intrinsics& cam, std::size_t count) {
    const Pose rel = compose_relative(current, anchor);
    std::normal_distribution<double> normal(0.0, 3.0);
    PointMap pm;
    while (pm.points.size() < count) {
        const Vec3 p{normal(rng), normal(rng), normal(rng)};
        const Vec3 q = rel.transform(p);
        if (std::abs(q.z - 1e-6) < 1e-6) continue;
        if (q.z > 1e-6) {
            const double u = cam.fx * q.x / q.z + cam.cx;
            const double v = cam.fy * q.y / q.z + cam.cy;
            const double margin = 1e-5;
            if (std::abs(u) < margin || std::abs(u - static_cast<double>(cam.width)) < margin ||
                std::abs(v) < margin || std::abs(v - static_cast<double>(cam.height)) < margin) {
                continue;
            }
        }
        pm.points.push_back(p);
        pm.confidence.push_back(1.0);
    }
    return pm;
}

}  // namespace

TEST_CASE("vector and matrix primitives", "[geometry]") {
    const Vec3 x{1, 0, 0}, y{0, 1, 0};
    CHECK(x.cross(y).z == 1.0);
    CHECK(x.dot(y) == 0.0);
    CHECK(Vec3{3, 4, 0}.norm() == Catch::Approx(5.0));
    CHECK_THROWS_AS(Vec3{}.normalized(), std::domain_error);

    Mat3 r = rotation_from_quaternion(0.3, 0.5, -0.2, 0.8);
    CHECK(r.determinant() == Catch::Approx(1.0).epsilon(1e-12));
    const Mat3 rtr = r.transposed() * r;
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(rtr.m[i] == Catch::Approx(Mat3::identity().m[i]).margin(1e-12));
    }
}

TEST_CASE("pose validation catches improper rotations", "[geometry]") {
    Pose p;
    REQUIRE_NOTHROW(p.validate());

    p.rotation.m = {1, 0, 0, 0, 1, 0, 0, 0, -1};  // mirror
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);

    p.rotation.m = {1, 0.001, 0, 0, 1, 0, 0, 0, 1};  // shear
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("pose inverse and composition round-trip", "[geometry]") {
    std::mt19937_64 rng(81);
    for (int rep = 0; rep < 20; ++rep) {
        const Pose p = random_pose(rng);
        const Pose round = p.compose(p.inverse());
        for (std::size_t i = 0; i < 9; ++i) {
            CHECK(round.rotation.m[i] == Catch::Approx(Mat3::identity().m[i]).margin(1e-12));
        }
        CHECK(round.translation.norm() < 1e-12);

        const Vec3 sample{0.3, -1.2, 2.0};
        const Vec3 back = p.inverse().transform(p.transform(sample));
        CHECK((back - sample).norm() < 1e-12);
    }
}

TEST_CASE("identical poses see every frustum point", "[geometry]") {
    const Intrinsics cam{64, 64, 32, 32, 64, 64};
    PointMap pm;
    for (double x = -0.8; x <= 0.8; x += 0.4) {
        for (double y = -0.8; y <= 0.8; y += 0.4) {
            pm.points.push_back({x, y, 2.0});
            pm.confidence.push_back(1.0);
        }
    }
    const Pose a = Pose::identity();
    CHECK(coverage_ratio(pm, a, a, cam) == 1.0);

    SECTION("a half-turn leaves every point behind the camera") {
        Pose turned;
        turned.rotation.m = {-1, 0, 0, 0, 1, 0, 0, 0, -1};
        CHECK(coverage_ratio(pm, a, turned, cam) == 0.0);
    }
    SECTION("points at or behind the depth cutoff never count") {
        PointMap shallow;
        shallow.points = {{0.0, 0.0, 1e-7}, {0.0, 0.0, -3.0}};
        shallow.confidence = {1.0, 1.0};
        CHECK(coverage_ratio(shallow, a, a, cam) == 0.0);
    }
    SECTION("empty point maps are rejected") {
        CHECK_THROWS_AS(coverage_ratio(PointMap{}, a, a, cam), std::invalid_argument);
    }
    SECTION("mismatched confidence is rejected") {
        PointMap bad = pm;
        bad.confidence.pop_back();
        CHECK_THROWS_AS(coverage_ratio(bad, a, a, cam), std::invalid_argument);
    }
}

TEST_CASE("pose-algebra coverage equals the homogeneous-matrix path", "[geometry]") {
    std::mt19937_64 rng(4096);
    const Intrinsics cam{48, 52, 30, 34, 60, 68};
    for (int rep = 0; rep < 100; ++rep) {
        const Pose anchor = random_pose(rng);
        const Pose current = random_pose(rng);
        const PointMap pm = stable_points(rng, anchor, current, cam, 37);
        const double got = coverage_ratio(pm, anchor, current, cam);
        const double want = oracle::coverage_homogeneous(pm, anchor, current, cam);
        CAPTURE(rep);
        CHECK(got == want);
    }
}

TEST_CASE("coverage is invariant under a rigid change of world frame", "[geometry]") {
    std::mt19937_64 rng(515);
    const Intrinsics cam{64, 64, 32, 32, 64, 64};
    for (int rep = 0; rep < 50; ++rep) {
        const Pose anchor = random_pose(rng);
        const Pose current = random_pose(rng);
        const Pose world_change = random_pose(rng, 5.0);
        const PointMap pm = stable_points(rng, anchor, current, cam, 29);

        const double base = coverage_ratio(pm, anchor, current, cam);
        const double moved = coverage_ratio(pm, world_change.compose(anchor),
                                            world_change.compose(current), cam);
        CAPTURE(rep);
        CHECK(base == moved);
    }
}
