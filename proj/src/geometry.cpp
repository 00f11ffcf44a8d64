#include "nearcol/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "nearcol/errors.hpp"

namespace nearcol {

namespace {

constexpr double kOrthonormalTol = 1e-9;

Vec3 mul(const Mat3 &m, const Vec3 &v) {
    return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

Vec3 mul_transposed(const Mat3 &m, const Vec3 &v) {
    return {m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2]};
}

double determinant(const Mat3 &m) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
           m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

}  // namespace

double Point3::norm() const { return std::sqrt(x * x + y * y + z * z); }

bool BBox::valid_for(int width, int height) const {
    return 0.0 <= u_min && u_min < u_max && u_max <= width && 0.0 <= v_min && v_min < v_max && v_max <= height;
}

CameraModel::CameraModel(const CameraIntrinsics &intrinsics, const Mat3 &rotation, const Vec3 &translation)
    : intrinsics_(intrinsics), rotation_(rotation), translation_(translation) {
    const auto &k = intrinsics_;
    if (!(k.fx > 0.0) || !(k.fy > 0.0)) {
        throw ConfigError(fmt::format("camera: focal lengths must be positive (fx={}, fy={})", k.fx, k.fy));
    }
    if (k.width <= 0 || k.height <= 0) {
        throw ConfigError(fmt::format("camera: image size must be positive ({}x{})", k.width, k.height));
    }
    for (double value : {k.cx, k.cy, k.skew, translation[0], translation[1], translation[2]}) {
        if (!std::isfinite(value)) {
            throw ConfigError("camera: non-finite intrinsic or translation value");
        }
    }
    double max_dev = 0.0;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double dot = 0.0;
            for (int c = 0; c < 3; ++c) {
                dot += rotation[i][c] * rotation[j][c];
            }
            max_dev = std::max(max_dev, std::abs(dot - (i == j ? 1.0 : 0.0)));
        }
    }
    const double det = determinant(rotation);
    if (!(max_dev < kOrthonormalTol) || !(std::abs(det - 1.0) <= kOrthonormalTol)) {
        throw ConfigError(fmt::format(
            "camera: rotation is not orthonormal (max |R R^T - I| = {:.3e}, det(R) = {:.12f}, tolerance {:.0e})",
            max_dev, det, kOrthonormalTol));
    }
    rt_t_ = mul_transposed(rotation_, translation_);
}

Vec3 CameraModel::to_camera(const Point3 &p) const {
    const Vec3 rp = mul(rotation_, {p.x, p.y, p.z});
    return {rp[0] - rt_t_[0], rp[1] - rt_t_[1], rp[2] - rt_t_[2]};
}

Point3 CameraModel::from_camera(const Vec3 &c) const {
    const Vec3 p = mul_transposed(rotation_, {c[0] + rt_t_[0], c[1] + rt_t_[1], c[2] + rt_t_[2]});
    return {p[0], p[1], p[2]};
}

Point3 CameraModel::unproject(double u, double v, double w) const {
    const auto &k = intrinsics_;
    const double cam_y = (v - k.cy) * w / k.fy;
    const double cam_x = ((u - k.cx) * w - k.skew * cam_y) / k.fx;
    return from_camera({cam_x, cam_y, w});
}

std::optional<PixelRange> project_point(const CameraModel &cam, const Point3 &p) {
    const Vec3 c = cam.to_camera(p);
    const auto &k = cam.intrinsics();
    const double u = k.fx * c[0] + k.skew * c[1] + k.cx * c[2];
    const double v = k.fy * c[1] + k.cy * c[2];
    const double w = c[2];
    if (w <= kMinProjectionDepth) {
        return std::nullopt;
    }
    return PixelRange{u / w, v / w, w, p.norm()};
}

std::vector<ProjectedPoint> project_cloud(const CameraModel &cam, std::span<const Point3> cloud) {
    std::vector<ProjectedPoint> out;
    const double width = cam.width();
    const double height = cam.height();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        auto pr = project_point(cam, cloud[i]);
        if (pr && pr->u >= 0.0 && pr->u < width && pr->v >= 0.0 && pr->v < height) {
            out.push_back({i, *pr});
        }
    }
    return out;
}

std::optional<double> bbox_median_range(std::span<const ProjectedPoint> projected, const BBox &box) {
    std::vector<double> ranges;
    for (const auto &pp : projected) {
        if (box.contains(pp.pixel.u, pp.pixel.v)) {
            ranges.push_back(pp.pixel.range);
        }
    }
    if (ranges.empty()) {
        return std::nullopt;
    }
    std::sort(ranges.begin(), ranges.end());
    const std::size_t n = ranges.size();
    if (n % 2 == 1) {
        return ranges[n / 2];
    }
    return 0.5 * (ranges[n / 2 - 1] + ranges[n / 2]);
}

Mat3 forward_looking_rotation() {
    return Mat3{{{1.0, 0.0, 0.0}, {0.0, 0.0, -1.0}, {0.0, 1.0, 0.0}}};
}

void to_json(nlohmann::json &j, const CameraModel &cam) {
    const auto &k = cam.intrinsics();
    std::vector<double> r;
    for (const auto &row : cam.rotation()) {
        r.insert(r.end(), row.begin(), row.end());
    }
    j = nlohmann::json{{"fx", k.fx},
                       {"fy", k.fy},
                       {"cx", k.cx},
                       {"cy", k.cy},
                       {"skew", k.skew},
                       {"R", r},
                       {"t", std::vector<double>(cam.translation().begin(), cam.translation().end())},
                       {"width", k.width},
                       {"height", k.height}};
}

CameraModel camera_from_json(const nlohmann::json &j) {
    try {
        CameraIntrinsics k;
        k.fx = j.at("fx").get<double>();
        k.fy = j.at("fy").get<double>();
        k.cx = j.at("cx").get<double>();
        k.cy = j.at("cy").get<double>();
        k.skew = j.value("skew", 0.0);
        k.width = j.at("width").get<int>();
        k.height = j.at("height").get<int>();
        const auto r = j.at("R").get<std::vector<double>>();
        const auto t = j.at("t").get<std::vector<double>>();
        if (r.size() != 9 || t.size() != 3) {
            throw ConfigError(fmt::format("camera: R needs 9 values and t needs 3 (got {} and {})", r.size(), t.size()));
        }
        Mat3 rot{};
        for (int i = 0; i < 9; ++i) {
            rot[i / 3][i % 3] = r[i];
        }
        return CameraModel(k, rot, {t[0], t[1], t[2]});
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(fmt::format("camera: malformed calibration: {}", e.what()));
    }
}

CameraModel load_camera(const std::string &path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(fmt::format("cannot open camera file '{}'", path));
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(fmt::format("camera file '{}': {}", path, e.what()));
    }
    return camera_from_json(j);
}

void save_camera(const CameraModel &cam, const std::string &path) {
    std::ofstream out(path);
    if (!out) {
        throw IoError(fmt::format("cannot write camera file '{}'", path));
    }
    nlohmann::json j = cam;
    out << j.dump(2) << '\n';
}

}  // namespace nearcol
