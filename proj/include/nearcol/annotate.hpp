#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nearcol/random.hpp"
#include "nearcol/scenesim.hpp"

namespace nearcol {

inline constexpr double kNearCollisionRadius = 1.0;
inline constexpr int kHorizonFrames = 60;
inline constexpr int kMinWindowFrames = 1;
inline constexpr int kMaxWindowFrames = 9;
inline constexpr int kNumTimeBins = 4;

struct FrameLabels {
    std::vector<std::uint8_t> near_collision;
    std::vector<double> nearest_range;

    [[nodiscard]] std::size_t size() const { return near_collision.size(); }
};

/// Per frame: nearest pedestrian ground range (inf when empty) and whether it is within `radius` (inclusive).
[[nodiscard]] FrameLabels label_frames(const SceneLog &scene, double radius = kNearCollisionRadius);

/// T/10 seconds where T (1-based) is the first positive label among frames n+1 .. n+horizon.
/// Scans only the frames that exist; nullopt when none of them is positive.
[[nodiscard]] std::optional<double> time_to_near_collision(const FrameLabels &labels, std::size_t n,
                                                           int horizon = kHorizonFrames);

/// One-hot membership of the bins (0,1], (1,2], (2,3], (3,inf). No collision in the horizon maps to the last bin.
[[nodiscard]] std::array<std::uint8_t, kNumTimeBins> time_bins(std::optional<double> t);

struct ClassTargets {
    std::uint8_t binary = 0;  // near-collision within 1 s
    std::array<std::uint8_t, kNumTimeBins> multilabel{};
    friend bool operator==(const ClassTargets &, const ClassTargets &) = default;
};

struct WindowSource {
    std::string scene_id;
    int end_frame = 0;
    bool flipped = false;
};

/// N consecutive frames of a scene ending at `end_frame`. Pixels are read from the shared scene,
/// mirrored on access when `flipped` is set.
struct WindowSample {
    std::shared_ptr<const SceneLog> scene;
    int end_frame = 0;
    int n_frames = 1;
    bool flipped = false;
    std::optional<double> t_true;
    std::optional<ClassTargets> targets;

    [[nodiscard]] int height() const { return scene->config.image_height; }
    [[nodiscard]] int width() const { return scene->config.image_width; }
    /// Frame i of the window, oldest first.
    [[nodiscard]] Raster frame(int i) const;
    /// Writes frame i (oldest first) into `out` (height * width values).
    void write_frame(int i, std::span<double> out) const;
    [[nodiscard]] WindowSource source() const;
};

struct ExtractionStats {
    int regression = 0;
    int classification = 0;
    int skipped_in_collision = 0;  // end frame already within the radius
    int skipped_no_collision = 0;  // no near-collision within the horizon
};

/// Windows for every end index n >= N-1. A regression target is attached when a near-collision
/// occurs within the horizon and frame n is not itself a near-collision; classification targets
/// when the full 60-frame lookahead exists. Windows with neither are not emitted.
[[nodiscard]] std::vector<WindowSample> extract_windows(const std::shared_ptr<const SceneLog> &scene,
                                                        const FrameLabels &labels, int n_frames,
                                                        ExtractionStats *stats = nullptr);

/// Mirrors about the vertical axis: (r, c) -> (r, W-1-c).
[[nodiscard]] Raster flip_horizontal(const Raster &image);

/// Appends a mirrored copy of every sample; targets are unchanged.
[[nodiscard]] std::vector<WindowSample> flip_augment(std::vector<WindowSample> samples);

/// With-replacement sampler where each sample is drawn with probability proportional to its
/// class weight.
class WeightedSampler {
  public:
    WeightedSampler(std::span<const std::uint8_t> binary_targets, double positive_weight, double negative_weight,
                    std::uint64_t seed);

    std::size_t next();

  private:
    Rng rng_;
    std::discrete_distribution<std::size_t> dist_;
};

[[nodiscard]] WeightedSampler make_weighted_sampler(std::span<const WindowSample> samples, std::uint64_t seed,
                                                    double positive_weight = 0.6, double negative_weight = 0.4);

enum class Split { train, test };

[[nodiscard]] std::string to_string(Split s);

struct Dataset {
    std::vector<std::shared_ptr<const SceneLog>> scenes;
    std::vector<std::string> scene_dirs;  // optional, parallel to scenes when read from disk
    std::map<std::string, Split> split;
    int n_frames = 1;
    bool augmented = false;
    std::vector<WindowSample> samples;
    ExtractionStats stats;

    [[nodiscard]] Split split_of(const WindowSample &s) const;
    [[nodiscard]] std::vector<WindowSample> regression(Split which) const;
    [[nodiscard]] std::vector<WindowSample> classification(Split which) const;
};

/// Deterministic split: a seeded shuffle of the ids, the first round(test_fraction * n) go to test.
[[nodiscard]] std::map<std::string, Split> split_scenes(const std::vector<std::string> &scene_ids,
                                                        double test_fraction, std::uint64_t seed);

/// Labels every scene, extracts N-frame windows and, when `augment` is set, flip-augments the
/// training split only. Throws ConfigError if a scene id is missing from `split`.
[[nodiscard]] Dataset build_dataset(const std::vector<std::shared_ptr<const SceneLog>> &scenes,
                                    const std::map<std::string, Split> &split, int n_frames, bool augment,
                                    double radius = kNearCollisionRadius);

/// Manifest JSON: scene directories, split, N, augmentation flag and one record per sample.
void write_manifest(const Dataset &dataset, const std::filesystem::path &path);
/// Reloads the referenced scenes and rebuilds the sample list from the manifest records.
[[nodiscard]] Dataset read_manifest(const std::filesystem::path &path);

}  // namespace nearcol
