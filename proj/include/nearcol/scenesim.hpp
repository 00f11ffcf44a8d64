#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "nearcol/geometry.hpp"
#include "nearcol/random.hpp"

namespace nearcol {

enum class MotionModel { constant_velocity, piecewise_turn };

[[nodiscard]] std::string to_string(MotionModel m);
[[nodiscard]] MotionModel motion_model_from_string(const std::string &s);

inline constexpr int kFrameRate = 10;

struct SimConfig {
    std::uint64_t seed = 42;
    int n_pedestrians = 3;
    double duration_s = 12.0;
    int frame_rate = kFrameRate;
    double platform_speed = 0.8;
    double pedestrian_speed_min = 0.2;
    double pedestrian_speed_max = 1.5;
    int image_width = 64;
    int image_height = 64;
    int lidar_points_per_pedestrian = 40;
    double lidar_range_noise_std = 0.01;
    MotionModel motion_model = MotionModel::constant_velocity;
    double pedestrian_height = 1.7;
    double pedestrian_radius = 0.25;
    /// Height of the co-located camera and LIDAR above the ground plane.
    double sensor_height = 0.85;

    /// Throws ConfigError naming the first violated bound.
    void validate() const;
    [[nodiscard]] int frame_count() const;
};

struct Vec2 {
    double x = 0.0;  // lateral, + to the right of the platform
    double y = 0.0;  // forward, along the camera axis

    [[nodiscard]] double norm() const;
    friend bool operator==(const Vec2 &, const Vec2 &) = default;
};

/// Pedestrian in platform-centric ground coordinates; velocity is relative to the platform.
struct PedestrianState {
    int id = 0;
    Vec2 position;
    Vec2 velocity;
    double height = 1.7;

    friend bool operator==(const PedestrianState &, const PedestrianState &) = default;
};

/// Grayscale image, row-major, values in [0, 1].
struct Raster {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    Raster() = default;
    Raster(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0.0f) {}

    [[nodiscard]] float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
    float &at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
    friend bool operator==(const Raster &, const Raster &) = default;
};

struct LabeledBox {
    int id = 0;
    BBox box;
    friend bool operator==(const LabeledBox &, const LabeledBox &) = default;
};

struct Frame {
    int index = 0;
    double timestamp = 0.0;
    std::vector<PedestrianState> pedestrians;
    std::vector<Point3> cloud;
    Raster image;
    std::vector<LabeledBox> boxes;
};

struct SceneLog {
    SimConfig config;
    CameraModel camera;
    std::vector<Frame> frames;

    [[nodiscard]] std::string id() const;
};

/// Camera of the synthetic platform: co-located with the LIDAR, looking along +y, focal length
/// 0.625 * width pixels, principal point at the image center.
[[nodiscard]] CameraModel default_camera(int width, int height);

/// Generates a full scene from the seed. One pedestrian is always placed on an encounter course
/// (passes within 0.6 m of the platform before the log ends).
[[nodiscard]] SceneLog simulate_scene(const SimConfig &cfg);

/// Propagates the given initial states (relative positions and velocities) under cfg's motion model.
[[nodiscard]] SceneLog simulate_from_states(const SimConfig &cfg, const std::vector<PedestrianState> &initial);

/// LIDAR returns on the sensor-facing half of each pedestrian's cylinder, radially perturbed.
[[nodiscard]] std::vector<Point3> sample_lidar(const std::vector<PedestrianState> &states, const SimConfig &cfg,
                                               Rng &rng);

struct RenderResult {
    Raster image;
    std::vector<LabeledBox> boxes;
};

/// Rasterizes each visible pedestrian as a filled rectangle shaded by 1/range, far to near.
[[nodiscard]] RenderResult render_frame(const std::vector<PedestrianState> &states, const CameraModel &cam,
                                        const SimConfig &cfg);

/// Per-scene configs derived from a base config: scene i gets its own seed and a platform speed
/// drawn from [0.2, 1.5] m/s.
[[nodiscard]] std::vector<SimConfig> scene_configs(const SimConfig &base, int count, std::uint64_t seed);

/// Simulates many scenes, optionally on `jobs` worker threads. Output order follows `configs`.
[[nodiscard]] std::vector<std::shared_ptr<const SceneLog>> simulate_batch(const std::vector<SimConfig> &configs,
                                                                          int jobs = 1);

/// Writes `<parent>/scene_<seed>/meta.json` and `frames.bin`; returns the scene directory.
std::filesystem::path write_scene(const SceneLog &scene, const std::filesystem::path &parent);
/// Reads a scene directory, verifying the frames.bin checksum recorded in meta.json.
[[nodiscard]] SceneLog read_scene(const std::filesystem::path &dir);

}  // namespace nearcol
