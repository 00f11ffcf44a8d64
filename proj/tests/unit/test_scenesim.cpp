#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "nearcol/errors.hpp"
#include "nearcol/geometry.hpp"
#include "nearcol/scenesim.hpp"

using namespace nearcol;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch_dir(const std::string &name) {
    auto dir = fs::temp_directory_path() / ("nearcol_test_scenesim_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void expect_same_scene(const SceneLog &a, const SceneLog &b) {
    ASSERT_EQ(a.frames.size(), b.frames.size());
    EXPECT_EQ(a.camera, b.camera);
    for (std::size_t k = 0; k < a.frames.size(); ++k) {
        const auto &fa = a.frames[k];
        const auto &fb = b.frames[k];
        EXPECT_EQ(fa.index, fb.index);
        EXPECT_EQ(fa.timestamp, fb.timestamp);
        EXPECT_EQ(fa.pedestrians, fb.pedestrians);
        EXPECT_EQ(fa.cloud, fb.cloud);
        EXPECT_EQ(fa.image, fb.image);
        EXPECT_EQ(fa.boxes, fb.boxes);
    }
}

SimConfig small_config(std::uint64_t seed) {
    SimConfig cfg;
    cfg.seed = seed;
    cfg.duration_s = 8.0;
    return cfg;
}

}  // namespace

TEST(SimConfig, FrameCountFollowsDuration) {
    SimConfig cfg;
    cfg.duration_s = 12.0;
    EXPECT_EQ(cfg.frame_count(), 120);
    cfg.duration_s = 7.0;
    EXPECT_EQ(cfg.frame_count(), 70);
}

TEST(SimConfig, ValidationNamesTheField) {
    auto expect_error = [](SimConfig cfg, const std::string &needle) {
        try {
            cfg.validate();
            ADD_FAILURE() << "no error for " << needle;
        } catch (const ConfigError &e) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    SimConfig c;
    EXPECT_NO_THROW(c.validate());
    c.n_pedestrians = 0;
    expect_error(c, "n_pedestrians");
    c = {};
    c.n_pedestrians = 9;
    expect_error(c, "n_pedestrians");
    c = {};
    c.platform_speed = 2.0;
    expect_error(c, "platform_speed");
    c = {};
    c.duration_s = 6.0;
    expect_error(c, "duration_s");
    c = {};
    c.image_width = 4;
    expect_error(c, "image size");
    c = {};
    c.frame_rate = 30;
    expect_error(c, "frame_rate");
    EXPECT_THROW((void)simulate_scene(c), ConfigError);
}

TEST(MotionModel, StringRoundTrip) {
    for (auto m : {MotionModel::constant_velocity, MotionModel::piecewise_turn}) {
        EXPECT_EQ(motion_model_from_string(to_string(m)), m);
    }
    EXPECT_THROW((void)motion_model_from_string("brownian"), ConfigError);
}

TEST(Simulate, DeterministicForSeed) {
    auto cfg = small_config(7);
    cfg.motion_model = MotionModel::piecewise_turn;
    const auto a = simulate_scene(cfg);
    const auto b = simulate_scene(cfg);
    expect_same_scene(a, b);

    auto da = scratch_dir("det_a");
    auto db = scratch_dir("det_b");
    const auto pa = write_scene(a, da);
    const auto pb = write_scene(b, db);
    EXPECT_EQ(slurp(pa / "meta.json"), slurp(pb / "meta.json"));
    EXPECT_EQ(slurp(pa / "frames.bin"), slurp(pb / "frames.bin"));

    cfg.seed = 8;
    const auto c = simulate_scene(cfg);
    EXPECT_NE(a.frames[0].pedestrians, c.frames[0].pedestrians);
}

TEST(Simulate, FrameCountAndTimestamps) {
    const auto scene = simulate_scene(small_config(3));
    ASSERT_EQ(static_cast<int>(scene.frames.size()), 80);
    for (std::size_t k = 0; k < scene.frames.size(); ++k) {
        EXPECT_EQ(scene.frames[k].index, static_cast<int>(k));
        EXPECT_DOUBLE_EQ(scene.frames[k].timestamp, k / 10.0);
        EXPECT_EQ(scene.frames[k].image.height, 64);
        EXPECT_EQ(scene.frames[k].image.width, 64);
        EXPECT_EQ(static_cast<int>(scene.frames[k].pedestrians.size()), 3);
    }
}

TEST(Simulate, StraightApproachReachesOneMetreAtFrameForty) {
    // Platform-relative (0, 5) closing at 1 m/s: distance hits 1 m at t = 4 s.
    SimConfig cfg = small_config(1);
    cfg.n_pedestrians = 1;
    PedestrianState p;
    p.position = {0.0, 5.0};
    p.velocity = {0.0, -1.0};
    const auto scene = simulate_from_states(cfg, {p});
    int first = -1;
    for (const auto &f : scene.frames) {
        if (f.pedestrians[0].position.norm() <= 1.0 + 1e-9) {
            first = f.index;
            break;
        }
    }
    EXPECT_EQ(first, 40);
    EXPECT_NEAR(scene.frames[40].pedestrians[0].position.y, 1.0, 1e-12);
    EXPECT_EQ(scene.frames[40].pedestrians[0].velocity, (Vec2{0.0, -1.0}));
}

TEST(Simulate, EverySceneHasAnEncounter) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto cfg = small_config(seed);
        cfg.lidar_points_per_pedestrian = 0;
        cfg.image_width = 8;
        cfg.image_height = 8;
        const auto scene = simulate_scene(cfg);
        double closest = 1e9;
        for (const auto &f : scene.frames) {
            for (const auto &p : f.pedestrians) {
                closest = std::min(closest, p.position.norm());
            }
        }
        EXPECT_LE(closest, 1.0) << "seed " << seed;
    }
}

TEST(Simulate, LidarDensityDoesNotShiftTrajectories) {
    auto cfg = small_config(11);
    cfg.motion_model = MotionModel::piecewise_turn;
    const auto a = simulate_scene(cfg);
    cfg.lidar_points_per_pedestrian = 5;
    const auto b = simulate_scene(cfg);
    for (std::size_t k = 0; k < a.frames.size(); ++k) {
        EXPECT_EQ(a.frames[k].pedestrians, b.frames[k].pedestrians);
        EXPECT_EQ(b.frames[k].cloud.size(), 15u);
    }
}

TEST(Simulate, BatchMatchesSerialAcrossJobs) {
    auto configs = scene_configs(small_config(0), 4, 99);
    for (const auto &c : configs) {
        EXPECT_GE(c.platform_speed, 0.2);
        EXPECT_LE(c.platform_speed, 1.5);
    }
    EXPECT_NE(configs[0].seed, configs[1].seed);
    const auto serial = simulate_batch(configs, 1);
    const auto parallel = simulate_batch(configs, 3);
    ASSERT_EQ(serial.size(), parallel.size());
    for (std::size_t i = 0; i < serial.size(); ++i) {
        expect_same_scene(*serial[i], *parallel[i]);
    }
}

TEST(Lidar, EmptyWithoutPedestrians) {
    Rng rng(1);
    EXPECT_TRUE(sample_lidar({}, SimConfig{}, rng).empty());
}

TEST(Lidar, PointsLieOnFacingHalfCylinder) {
    SimConfig cfg;
    cfg.lidar_range_noise_std = 0.0;
    cfg.lidar_points_per_pedestrian = 500;
    PedestrianState p;
    p.position = {0.0, 3.0};
    Rng rng(5);
    const auto cloud = sample_lidar({p}, cfg, rng);
    ASSERT_EQ(cloud.size(), 500u);
    for (const auto &q : cloud) {
        const double ground = std::hypot(q.x, q.y);
        EXPECT_GE(ground, 2.75 - 1e-12);
        EXPECT_LE(ground, std::hypot(3.0, 0.25) + 1e-12);
        EXPECT_NEAR(std::hypot(q.x - 0.0, q.y - 3.0), 0.25, 1e-12);
        EXPECT_GE(q.z, -0.85 - 1e-12);
        EXPECT_LE(q.z, 1.7 - 0.85 + 1e-12);
    }
}

TEST(Lidar, RadialNoiseHasConfiguredSpread) {
    SimConfig cfg;
    cfg.lidar_range_noise_std = 0.01;
    cfg.lidar_points_per_pedestrian = 10000;
    PedestrianState p;
    p.position = {1.0, 4.0};
    Rng rng(17);
    const auto cloud = sample_lidar({p}, cfg, rng);
    std::vector<double> dev;
    for (const auto &q : cloud) {
        dev.push_back(std::hypot(q.x - 1.0, q.y - 4.0) - 0.25);
    }
    const double mean = std::accumulate(dev.begin(), dev.end(), 0.0) / dev.size();
    double var = 0.0;
    for (double d : dev) {
        var += (d - mean) * (d - mean);
    }
    const double sd = std::sqrt(var / dev.size());
    EXPECT_NEAR(mean, 0.0, 0.0005);
    EXPECT_NEAR(sd, 0.01, 0.001);
}

TEST(Render, EmptySceneIsBlack) {
    const auto cam = default_camera(64, 64);
    const auto r = render_frame({}, cam, SimConfig{});
    EXPECT_TRUE(r.boxes.empty());
    for (float v : r.image.pixels) {
        EXPECT_EQ(v, 0.0f);
    }
}

TEST(Render, DeadAheadBoxMatchesProjection) {
    const SimConfig cfg;
    const auto cam = default_camera(64, 64);
    PedestrianState p;
    p.position = {0.0, 2.0};
    const auto r = render_frame({p}, cam, cfg);
    ASSERT_EQ(r.boxes.size(), 1u);
    const auto &box = r.boxes[0].box;

    // Oracle: edges of the cylinder silhouette projected with the pinhole model.
    const auto left = project_point(cam, {-0.25, 2.0, 0.0});
    const auto right = project_point(cam, {0.25, 2.0, 0.0});
    const auto head = project_point(cam, {0.0, 2.0, 0.85});
    const auto foot = project_point(cam, {0.0, 2.0, -0.85});
    ASSERT_TRUE(left && right && head && foot);
    EXPECT_DOUBLE_EQ(box.u_min, std::floor(left->u));
    EXPECT_DOUBLE_EQ(box.u_max, std::ceil(right->u));
    EXPECT_DOUBLE_EQ(box.v_min, std::floor(head->v));
    EXPECT_DOUBLE_EQ(box.v_max, std::ceil(foot->v));
    EXPECT_DOUBLE_EQ(0.5 * (box.u_min + box.u_max), 32.0);

    // fx = 40: half-width 0.25 m at 2 m spans 5 px; 0.85 m spans 17 px.
    EXPECT_DOUBLE_EQ(box.u_min, 27.0);
    EXPECT_DOUBLE_EQ(box.u_max, 37.0);
    EXPECT_DOUBLE_EQ(box.v_min, 15.0);
    EXPECT_DOUBLE_EQ(box.v_max, 49.0);

    EXPECT_FLOAT_EQ(r.image.at(32, 32), 0.5f);
    EXPECT_FLOAT_EQ(r.image.at(15, 27), 0.5f);
    EXPECT_EQ(r.image.at(14, 32), 0.0f);
    EXPECT_EQ(r.image.at(32, 37), 0.0f);
}

TEST(Render, FartherPedestrianIsSmallerAndDimmer) {
    const SimConfig cfg;
    const auto cam = default_camera(64, 64);
    PedestrianState near_p;
    near_p.position = {0.0, 2.0};
    PedestrianState far_p;
    far_p.position = {0.0, 4.0};
    const auto rn = render_frame({near_p}, cam, cfg);
    const auto rf = render_frame({far_p}, cam, cfg);
    ASSERT_EQ(rf.boxes.size(), 1u);
    const auto &bn = rn.boxes[0].box;
    const auto &bf = rf.boxes[0].box;
    EXPECT_GT(bf.v_min, bn.v_min);
    EXPECT_LT(bf.v_max, bn.v_max);
    EXPECT_GT(bf.u_min, bn.u_min);
    EXPECT_LT(bf.u_max, bn.u_max);
    EXPECT_FLOAT_EQ(rf.image.at(32, 32), 0.25f);
}

TEST(Render, NearerPedestrianOccludesFarther) {
    const SimConfig cfg;
    const auto cam = default_camera(64, 64);
    PedestrianState a;
    a.id = 0;
    a.position = {0.0, 4.0};
    PedestrianState b;
    b.id = 1;
    b.position = {0.0, 2.0};
    for (const auto &states : {std::vector{a, b}, std::vector{b, a}}) {
        const auto r = render_frame(states, cam, cfg);
        ASSERT_EQ(r.boxes.size(), 2u);
        EXPECT_EQ(r.boxes[0].id, 0);
        EXPECT_EQ(r.boxes[1].id, 1);
        EXPECT_FLOAT_EQ(r.image.at(32, 32), 0.5f);
    }
}

TEST(Render, BehindCameraIsInvisible) {
    PedestrianState p;
    p.position = {0.0, -3.0};
    const auto r = render_frame({p}, default_camera(64, 64), SimConfig{});
    EXPECT_TRUE(r.boxes.empty());
}

TEST(Render, PixelsStayInUnitRange) {
    const auto scene = simulate_scene(small_config(21));
    for (const auto &f : scene.frames) {
        for (float v : f.image.pixels) {
            ASSERT_GE(v, 0.0f);
            ASSERT_LE(v, 1.0f);
        }
        for (const auto &b : f.boxes) {
            EXPECT_TRUE(b.box.valid_for(64, 64));
        }
    }
}

TEST(Render, FootRowDescendsDuringApproach) {
    SimConfig cfg = small_config(1);
    cfg.n_pedestrians = 1;
    PedestrianState p;
    p.position = {0.0, 6.0};
    p.velocity = {0.0, -1.0};
    const auto scene = simulate_from_states(cfg, {p});
    double prev = -1.0;
    int seen = 0;
    for (const auto &f : scene.frames) {
        if (f.pedestrians[0].position.y <= 0.0 || f.boxes.empty()) {
            continue;
        }
        EXPECT_GE(f.boxes[0].box.v_max, prev);
        prev = f.boxes[0].box.v_max;
        ++seen;
    }
    EXPECT_GT(seen, 40);
}

TEST(Render, BoxMedianRangeTracksTrueRange) {
    // Single pedestrian: the LIDAR returns inside the box sit on its near surface.
    int checked = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto cfg = small_config(seed);
        cfg.n_pedestrians = 1;
        const auto scene = simulate_scene(cfg);
        for (const auto &f : scene.frames) {
            if (f.boxes.empty()) {
                continue;
            }
            const auto projected = project_cloud(scene.camera, f.cloud);
            const auto med = bbox_median_range(projected, f.boxes[0].box);
            if (!med) {
                continue;
            }
            const double truth = f.pedestrians[0].position.norm();
            EXPECT_LE(std::abs(*med - truth), 3.0 * cfg.lidar_range_noise_std + cfg.pedestrian_radius)
                << "seed " << seed << " frame " << f.index;
            ++checked;
        }
    }
    EXPECT_GT(checked, 100);
}

TEST(SceneIo, RoundTripAndCorruption) {
    const auto scene = simulate_scene(small_config(4));
    const auto dir = write_scene(scene, scratch_dir("io"));
    EXPECT_TRUE(fs::exists(dir / "meta.json"));
    const auto back = read_scene(dir);
    expect_same_scene(scene, back);
    EXPECT_EQ(back.config.seed, scene.config.seed);
    EXPECT_EQ(back.id(), scene.id());

    {
        std::fstream f(dir / "frames.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(100);
        f.put('\x7f');
    }
    EXPECT_THROW((void)read_scene(dir), IoError);
    EXPECT_THROW((void)read_scene(dir / "missing"), IoError);
}
