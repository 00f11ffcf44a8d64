#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "nearcol/errors.hpp"
#include "nearcol/geometry.hpp"

using namespace nearcol;

namespace {

const Mat3 kIdentity = {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};

CameraModel identity_cam() { return CameraModel({100, 100, 32, 32, 0, 64, 64}, kIdentity, {0, 0, 0}); }

// Rotation matrix of a unit quaternion drawn uniformly.
Mat3 random_rotation(std::mt19937_64 &rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    double q[4] = {n(rng), n(rng), n(rng), n(rng)};
    const double s = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    for (double &v : q) {
        v /= s;
    }
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    return {{{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
             {2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
             {2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}}};
}

// Eq. 1 evaluated as an explicit 3x4 projection matrix K [R | -R^T t].
std::array<double, 3> oracle_uvw(const CameraIntrinsics &k, const Mat3 &r, const Vec3 &t, const Point3 &p) {
    const double K[3][3] = {{k.fx, k.skew, k.cx}, {0, k.fy, k.cy}, {0, 0, 1}};
    double ext[3][4];
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            ext[i][j] = r[i][j];
        }
        ext[i][3] = -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2]);
    }
    const double hp[4] = {p.x, p.y, p.z, 1.0};
    std::array<double, 3> out{};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 4; ++j) {
            double kp = 0.0;
            for (int m = 0; m < 3; ++m) {
                kp += K[i][m] * ext[m][j];
            }
            out[i] += kp * hp[j];
        }
    }
    return out;
}

}  // namespace

TEST(ProjectPoint, IdentityExtrinsicsExample) {
    const auto r = project_point(identity_cam(), {0.1, 0.2, 2.0});
    ASSERT_TRUE(r.has_value());
    EXPECT_NEAR(r->u, 37.0, 1e-12);
    EXPECT_NEAR(r->v, 42.0, 1e-12);
    EXPECT_DOUBLE_EQ(r->w, 2.0);
    EXPECT_NEAR(r->range, std::sqrt(4.05), 1e-12);
}

TEST(ProjectPoint, BehindCameraIsNone) {
    EXPECT_FALSE(project_point(identity_cam(), {0, 0, -1}).has_value());
    EXPECT_FALSE(project_point(identity_cam(), {1, 1, 0}).has_value());
    EXPECT_FALSE(project_point(identity_cam(), {0, 0, 1e-10}).has_value());
}

TEST(ProjectPoint, MatchesExplicitMatrixOracleForRandomExtrinsics) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int trial = 0; trial < 200; ++trial) {
        const Mat3 r = random_rotation(rng);
        const Vec3 t = {u(rng), u(rng), u(rng)};
        const CameraIntrinsics k{80 + 10 * u(rng), 80 + 10 * u(rng), 32 + u(rng), 30 + u(rng), 0.1 * u(rng), 64, 64};
        const CameraModel cam(k, r, t);
        const Point3 p{u(rng), u(rng), u(rng)};
        const auto expect = oracle_uvw(k, r, t, p);
        const auto got = project_point(cam, p);
        if (expect[2] <= 1e-9) {
            EXPECT_FALSE(got.has_value());
            continue;
        }
        ASSERT_TRUE(got.has_value());
        EXPECT_NEAR(got->w, expect[2], 1e-9);
        EXPECT_NEAR(got->u, expect[0] / expect[2], 1e-7 * std::max(1.0, std::abs(got->u)));
        EXPECT_NEAR(got->v, expect[1] / expect[2], 1e-7 * std::max(1.0, std::abs(got->v)));
        EXPECT_NEAR(got->range, std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z), 1e-12);
    }
}

TEST(ProjectPoint, OpticalAxisPointLandsOnPrincipalPoint) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int trial = 0; trial < 100; ++trial) {
        const CameraModel cam({90, 110, 30.5, 33.25, 0.0, 64, 64}, random_rotation(rng), {u(rng), u(rng), u(rng)});
        const Point3 p = cam.from_camera({0, 0, 3});
        const auto r = project_point(cam, p);
        ASSERT_TRUE(r.has_value());
        EXPECT_NEAR(r->u, 30.5, 1e-9);
        EXPECT_NEAR(r->v, 33.25, 1e-9);
        EXPECT_NEAR(r->w, 3.0, 1e-9);
    }
}

TEST(ProjectPoint, RoundTripThroughUnproject) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1.5, 1.5);
    std::uniform_real_distribution<double> depth(0.1, 20.0);
    for (int trial = 0; trial < 500; ++trial) {
        const CameraModel cam({70 + 5 * u(rng), 75 + 5 * u(rng), 32 + u(rng), 32 + u(rng), 0.3 * u(rng), 64, 64},
                              random_rotation(rng), {u(rng), u(rng), u(rng)});
        const Vec3 c = {u(rng), u(rng), depth(rng)};
        const Point3 p = cam.from_camera(c);
        const auto r = project_point(cam, p);
        ASSERT_TRUE(r.has_value());
        const Point3 back = cam.unproject(r->u, r->v, r->w);
        EXPECT_NEAR(back.x, p.x, 1e-9);
        EXPECT_NEAR(back.y, p.y, 1e-9);
        EXPECT_NEAR(back.z, p.z, 1e-9);
    }
}

TEST(ProjectPoint, UIncreasesWithXUnderIdentityExtrinsics) {
    const auto cam = identity_cam();
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::uniform_real_distribution<double> z(0.2, 10.0);
    for (int trial = 0; trial < 200; ++trial) {
        const double y = u(rng);
        const double depth = z(rng);
        const double x0 = u(rng);
        const double x1 = x0 + 0.001 + std::abs(u(rng));
        EXPECT_LT(project_point(cam, {x0, y, depth})->u, project_point(cam, {x1, y, depth})->u);
    }
}

TEST(CameraModel, RejectsInvalidParameters) {
    EXPECT_THROW(CameraModel({0, 100, 32, 32, 0, 64, 64}, kIdentity, {0, 0, 0}), ConfigError);
    EXPECT_THROW(CameraModel({100, -1, 32, 32, 0, 64, 64}, kIdentity, {0, 0, 0}), ConfigError);
    EXPECT_THROW(CameraModel({100, 100, 32, 32, 0, 0, 64}, kIdentity, {0, 0, 0}), ConfigError);
    Mat3 scaled = kIdentity;
    scaled[0][0] = 1.0 + 1e-6;
    EXPECT_THROW(CameraModel({100, 100, 32, 32, 0, 64, 64}, scaled, {0, 0, 0}), ConfigError);
    Mat3 reflection = kIdentity;
    reflection[2][2] = -1.0;
    EXPECT_THROW(CameraModel({100, 100, 32, 32, 0, 64, 64}, reflection, {0, 0, 0}), ConfigError);
}

TEST(CameraModel, JsonRoundTripAndRejection) {
    std::mt19937_64 rng(1);
    const CameraModel cam({91, 92, 31, 33, 0.5, 64, 48}, random_rotation(rng), {0.1, -0.2, 0.3});
    nlohmann::json j = cam;
    EXPECT_EQ(camera_from_json(j), cam);
    for (const char *key : {"fx", "fy", "cx", "cy", "skew", "R", "t", "width", "height"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    j["R"] = {1, 0, 0, 0, 1, 0, 0, 0, 2};
    EXPECT_THROW((void)camera_from_json(j), ConfigError);

    const auto path = std::filesystem::temp_directory_path() / "nearcol_cam_test.json";
    save_camera(cam, path.string());
    EXPECT_EQ(load_camera(path.string()), cam);
    std::filesystem::remove(path);
}

TEST(ProjectCloud, KeepsOnlyInImagePointsInOrder) {
    const auto cam = identity_cam();
    const std::vector<Point3> cloud = {{0.1, 0.2, 2.0}, {0, 0, -1}};
    const auto out = project_cloud(cam, cloud);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].index, 0u);
    EXPECT_TRUE(project_cloud(cam, std::vector<Point3>{}).empty());
}

TEST(ProjectCloud, FrustumSamplesAreAllRetained) {
    std::mt19937_64 rng(21);
    const CameraModel cam({40, 40, 32, 32, 0, 64, 64}, random_rotation(rng), {0.3, 0.1, -0.2});
    std::uniform_real_distribution<double> pix(0.0, 64.0);
    std::uniform_real_distribution<double> depth(0.5, 30.0);
    std::vector<Point3> cloud;
    for (int i = 0; i < 1000; ++i) {
        // Keep clear of the right/bottom edges, which are excluded.
        cloud.push_back(cam.unproject(std::min(pix(rng), 63.999), std::min(pix(rng), 63.999), depth(rng)));
    }
    EXPECT_EQ(project_cloud(cam, cloud).size(), 1000u);
}

TEST(ProjectCloud, EqualsBruteForceFilterOfProjectPoint) {
    std::mt19937_64 rng(4);
    const auto cam = identity_cam();
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    std::vector<Point3> cloud;
    for (int i = 0; i < 1000; ++i) {
        cloud.push_back({u(rng), u(rng), u(rng)});
    }
    std::vector<std::size_t> expected;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto r = project_point(cam, cloud[i]);
        if (r && r->u >= 0 && r->u < 64 && r->v >= 0 && r->v < 64) {
            expected.push_back(i);
        }
    }
    const auto out = project_cloud(cam, cloud);
    ASSERT_EQ(out.size(), expected.size());
    for (std::size_t k = 0; k < out.size(); ++k) {
        EXPECT_EQ(out[k].index, expected[k]);
        const auto r = project_point(cam, cloud[out[k].index]);
        EXPECT_EQ(out[k].pixel.u, r->u);
        EXPECT_EQ(out[k].pixel.range, r->range);
    }
}

namespace {

std::vector<ProjectedPoint> at_pixel(const std::vector<double> &ranges, double u = 10, double v = 10) {
    std::vector<ProjectedPoint> out;
    for (std::size_t i = 0; i < ranges.size(); ++i) {
        out.push_back({i, {u, v, ranges[i], ranges[i]}});
    }
    return out;
}

}  // namespace

TEST(BboxMedianRange, OddEvenAndEmpty) {
    const BBox box{5, 5, 15, 15};
    EXPECT_DOUBLE_EQ(*bbox_median_range(at_pixel({2.0, 2.1, 5.0}), box), 2.1);
    EXPECT_DOUBLE_EQ(*bbox_median_range(at_pixel({2.0, 4.0}), box), 3.0);
    EXPECT_FALSE(bbox_median_range(at_pixel({2.0}, 30, 30), box).has_value());
    EXPECT_FALSE(bbox_median_range({}, box).has_value());
}

TEST(BboxMedianRange, BoundaryIsInclusive) {
    const BBox box{5, 5, 15, 15};
    std::vector<ProjectedPoint> pts = {{0, {5, 5, 1, 1.0}}, {1, {15, 15, 1, 3.0}}, {2, {15.0001, 10, 1, 100.0}}};
    EXPECT_DOUBLE_EQ(*bbox_median_range(pts, box), 2.0);
}

TEST(BboxMedianRange, PermutationInvariant) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> r(0.5, 9.0);
    std::uniform_real_distribution<double> px(0.0, 20.0);
    const BBox box{4, 4, 16, 16};
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<ProjectedPoint> pts;
        for (std::size_t i = 0; i < 37; ++i) {
            pts.push_back({i, {px(rng), px(rng), 1.0, r(rng)}});
        }
        const auto base = bbox_median_range(pts, box);
        std::shuffle(pts.begin(), pts.end(), rng);
        EXPECT_EQ(bbox_median_range(pts, box), base);
    }
}
