#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "nearcol/annotate.hpp"
#include "nearcol/random.hpp"
#include "nearcol/scenesim.hpp"

namespace nearcol {

inline constexpr double kForecastHorizon = 6.0;

/// Predicts the training-set mean time to near-collision for every input.
class ConstantBaseline {
  public:
    /// Throws FitError on an empty target list.
    static ConstantBaseline fit(std::span<const double> train_targets);

    [[nodiscard]] double predict() const { return mean_; }

  private:
    explicit ConstantBaseline(double mean) : mean_(mean) {}
    double mean_;
};

struct TrackPoint {
    double t = 0.0;
    Vec2 position;
};

/// Recent positions of one pedestrian, oldest first.
using Track = std::vector<TrackPoint>;
/// Tracks keyed by pedestrian id.
using TrackHistory = std::map<int, Track>;

struct VelocityFit {
    Vec2 position;  // fitted position at the latest timestamp
    Vec2 velocity;
};

/// Per-axis ordinary least squares of position against time. Throws InsufficientHistoryError below 2 points.
[[nodiscard]] VelocityFit fit_velocity(const Track &track);

/// Smallest t in (0, horizon] with |p0 + v t| = radius, 0 when already inside, nullopt otherwise.
[[nodiscard]] std::optional<double> time_to_radius(const Vec2 &p0, const Vec2 &v, double radius = kNearCollisionRadius,
                                                   double horizon = kForecastHorizon);

/// Earliest predicted radius crossing over all tracks with at least 2 points; nullopt means no
/// collision predicted. Throws InsufficientHistoryError when no track is usable.
[[nodiscard]] std::optional<double> cv_predict(const TrackHistory &tracks, double radius = kNearCollisionRadius,
                                               double horizon = kForecastHorizon);

/// Tracks for the `history_frames` frames ending at `end_frame` from the simulator's states,
/// each position corrupted by N(0, noise_std^2) per axis. Frames before 0 are skipped.
[[nodiscard]] TrackHistory tracks_from_scene(const SceneLog &scene, int end_frame, int history_frames,
                                             double noise_std, Rng &rng);

inline constexpr std::array<double, 3> kNaiveBandFractions = {0.625, 0.560, 0.520};

/// Positive when some box's foot row v_max lies below fraction * image_height.
[[nodiscard]] bool naive_vertical_classify(std::span<const BBox> boxes, double image_height, double fraction = 0.625);

/// Ordered bands: class 0 if some foot exceeds 0.625Y, else class 1 above 0.560Y, else class 2
/// above 0.520Y, else class 3. Returns the one-hot bin vector.
[[nodiscard]] std::array<std::uint8_t, kNumTimeBins> naive_vertical_multilabel(std::span<const BBox> boxes,
                                                                              double image_height);

}  // namespace nearcol
