#include "nearcol/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "nearcol/errors.hpp"

namespace nearcol {

ConstantBaseline ConstantBaseline::fit(std::span<const double> train_targets) {
    if (train_targets.empty()) {
        throw FitError("constant baseline: empty training set");
    }
    double sum = 0.0;
    for (double t : train_targets) {
        sum += t;
    }
    return ConstantBaseline(sum / static_cast<double>(train_targets.size()));
}

VelocityFit fit_velocity(const Track &track) {
    if (track.size() < 2) {
        throw InsufficientHistoryError(fmt::format("velocity fit needs at least 2 points (got {})", track.size()));
    }
    const double n = static_cast<double>(track.size());
    double t_mean = 0.0;
    double x_mean = 0.0;
    double y_mean = 0.0;
    for (const auto &p : track) {
        t_mean += p.t;
        x_mean += p.position.x;
        y_mean += p.position.y;
    }
    t_mean /= n;
    x_mean /= n;
    y_mean /= n;
    double stt = 0.0;
    double stx = 0.0;
    double sty = 0.0;
    for (const auto &p : track) {
        const double dt = p.t - t_mean;
        stt += dt * dt;
        stx += dt * (p.position.x - x_mean);
        sty += dt * (p.position.y - y_mean);
    }
    if (!(stt > 0.0)) {
        throw InsufficientHistoryError("velocity fit needs distinct timestamps");
    }
    const Vec2 v{stx / stt, sty / stt};
    const double t_last = track.back().t - t_mean;
    return {{x_mean + v.x * t_last, y_mean + v.y * t_last}, v};
}

std::optional<double> time_to_radius(const Vec2 &p0, const Vec2 &v, double radius, double horizon) {
    const double c = p0.x * p0.x + p0.y * p0.y - radius * radius;
    if (c <= 0.0) {
        return 0.0;
    }
    const double a = v.x * v.x + v.y * v.y;
    if (a == 0.0) {
        return std::nullopt;
    }
    const double b = 2.0 * (p0.x * v.x + p0.y * v.y);
    const double disc = b * b - 4.0 * a * c;
    if (disc < 0.0) {
        return std::nullopt;
    }
    // c > 0 so both roots share a sign; the smaller one is the entry time when b < 0.
    if (b >= 0.0) {
        return std::nullopt;
    }
    // Cancellation-free form of (-b - sqrt(disc)) / (2a).
    const double q = -0.5 * (b - std::sqrt(disc));
    const double t = c / q;
    if (t > 0.0 && t <= horizon) {
        return t;
    }
    return std::nullopt;
}

std::optional<double> cv_predict(const TrackHistory &tracks, double radius, double horizon) {
    std::optional<double> best;
    bool usable = false;
    for (const auto &[id, track] : tracks) {
        if (track.size() < 2) {
            continue;
        }
        usable = true;
        const auto fit = fit_velocity(track);
        const auto t = time_to_radius(fit.position, fit.velocity, radius, horizon);
        if (t && (!best || *t < *best)) {
            best = t;
        }
    }
    if (!usable) {
        throw InsufficientHistoryError("constant-velocity baseline: no track with at least 2 points");
    }
    return best;
}

TrackHistory tracks_from_scene(const SceneLog &scene, int end_frame, int history_frames, double noise_std, Rng &rng) {
    std::normal_distribution<double> noise(0.0, 1.0);
    TrackHistory tracks;
    const int first = std::max(0, end_frame - history_frames + 1);
    for (int k = first; k <= end_frame; ++k) {
        const auto &f = scene.frames[k];
        for (const auto &p : f.pedestrians) {
            Vec2 pos = p.position;
            if (noise_std > 0.0) {
                pos.x += noise_std * noise(rng);
                pos.y += noise_std * noise(rng);
            }
            tracks[p.id].push_back({f.timestamp, pos});
        }
    }
    return tracks;
}

bool naive_vertical_classify(std::span<const BBox> boxes, double image_height, double fraction) {
    const double threshold = fraction * image_height;
    return std::any_of(boxes.begin(), boxes.end(), [&](const BBox &b) { return b.v_max > threshold; });
}

std::array<std::uint8_t, kNumTimeBins> naive_vertical_multilabel(std::span<const BBox> boxes, double image_height) {
    std::array<std::uint8_t, kNumTimeBins> out{};
    for (std::size_t k = 0; k < kNaiveBandFractions.size(); ++k) {
        if (naive_vertical_classify(boxes, image_height, kNaiveBandFractions[k])) {
            out[k] = 1;
            return out;
        }
    }
    out[kNumTimeBins - 1] = 1;
    return out;
}

}  // namespace nearcol
