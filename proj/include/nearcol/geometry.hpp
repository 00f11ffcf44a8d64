#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace nearcol {

using Mat3 = std::array<std::array<double, 3>, 3>;
using Vec3 = std::array<double, 3>;

struct Point3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    [[nodiscard]] double norm() const;
    friend bool operator==(const Point3 &, const Point3 &) = default;
};

/// Continuous image coordinates of a projected point, its homogeneous depth and its sensor range.
struct PixelRange {
    double u = 0.0;  // U = u / w
    double v = 0.0;  // V = v / w
    double w = 0.0;
    double range = 0.0;
};

struct BBox {
    double u_min = 0.0;
    double v_min = 0.0;
    double u_max = 0.0;
    double v_max = 0.0;

    [[nodiscard]] bool contains(double u, double v) const {
        return u_min <= u && u <= u_max && v_min <= v && v <= v_max;
    }
    [[nodiscard]] bool valid_for(int width, int height) const;
    friend bool operator==(const BBox &, const BBox &) = default;
};

struct CameraIntrinsics {
    double fx = 0.0;
    double fy = 0.0;
    double cx = 0.0;
    double cy = 0.0;
    double skew = 0.0;
    int width = 0;
    int height = 0;
    friend bool operator==(const CameraIntrinsics &, const CameraIntrinsics &) = default;
};

/// Pinhole camera with LIDAR-to-camera extrinsics.
///
/// A sensor-frame point p maps to homogeneous pixel coordinates
///     [u v w]^T = K [R | -R^T t] [p; 1]
/// i.e. camera-frame point R p - R^T t. The translation enters through R^T exactly as the
/// calibration model is written; synthetic data is generated with the same convention.
class CameraModel {
  public:
    /// Validates focal lengths, image size and orthonormality of R; throws ConfigError.
    CameraModel(const CameraIntrinsics &intrinsics, const Mat3 &rotation, const Vec3 &translation);

    [[nodiscard]] const CameraIntrinsics &intrinsics() const { return intrinsics_; }
    [[nodiscard]] const Mat3 &rotation() const { return rotation_; }
    [[nodiscard]] const Vec3 &translation() const { return translation_; }
    [[nodiscard]] int width() const { return intrinsics_.width; }
    [[nodiscard]] int height() const { return intrinsics_.height; }

    /// Camera-frame coordinates R p - R^T t.
    [[nodiscard]] Vec3 to_camera(const Point3 &p) const;
    /// Inverse of to_camera.
    [[nodiscard]] Point3 from_camera(const Vec3 &c) const;

    /// Sensor-frame point whose projection is (u, v) at homogeneous depth w.
    [[nodiscard]] Point3 unproject(double u, double v, double w) const;

    friend bool operator==(const CameraModel &, const CameraModel &) = default;

  private:
    CameraIntrinsics intrinsics_;
    Mat3 rotation_;
    Vec3 translation_;
    Vec3 rt_t_;  // R^T t, cached
};

inline constexpr double kMinProjectionDepth = 1e-9;

/// Projects a sensor-frame point; nullopt when w <= 1e-9 (on or behind the image plane).
[[nodiscard]] std::optional<PixelRange> project_point(const CameraModel &cam, const Point3 &p);

struct ProjectedPoint {
    std::size_t index = 0;
    PixelRange pixel;
};

/// Projects every point and keeps those with w > 1e-9 that land inside the image, in input order.
[[nodiscard]] std::vector<ProjectedPoint> project_cloud(const CameraModel &cam, std::span<const Point3> cloud);

/// Median range of the projected points that fall inside the box (closed bounds).
/// Even counts average the two central values. nullopt when the box holds no point.
[[nodiscard]] std::optional<double> bbox_median_range(std::span<const ProjectedPoint> projected, const BBox &box);

/// Camera looking along the sensor +y axis with z up, co-located with the LIDAR.
/// Maps sensor (x, y, z) to camera (x, -z, y).
[[nodiscard]] Mat3 forward_looking_rotation();

/// Calibration file: {fx, fy, cx, cy, skew, R (row-major 9), t (3), width, height}.
void to_json(nlohmann::json &j, const CameraModel &cam);
[[nodiscard]] CameraModel camera_from_json(const nlohmann::json &j);
[[nodiscard]] CameraModel load_camera(const std::string &path);
void save_camera(const CameraModel &cam, const std::string &path);

}  // namespace nearcol
