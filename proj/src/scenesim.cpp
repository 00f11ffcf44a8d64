#include "nearcol/scenesim.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <zlib.h>

#include "nearcol/errors.hpp"

namespace nearcol {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kEncounterAimRadius = 0.6;
constexpr double kSpawnMin = 3.0;
constexpr double kSpawnMax = 8.0;
constexpr double kSpawnHalfAngle = 30.0 * kPi / 180.0;
constexpr double kTurnProbabilityPerFrame = 0.05;
constexpr double kMaxTurn = kPi / 4.0;
constexpr double kPlatformSpeedMin = 0.2;
constexpr double kPlatformSpeedMax = 1.5;

struct Trajectories {
    // states[frame][pedestrian]
    std::vector<std::vector<PedestrianState>> states;
};

// `turn_lock[i]`: pedestrian i keeps its heading until this time.
Trajectories propagate(const SimConfig &cfg, const std::vector<PedestrianState> &initial,
                       const std::vector<double> &turn_lock, Rng &rng) {
    const int n_frames = cfg.frame_count();
    const Vec2 platform{0.0, cfg.platform_speed};

    struct Segment {
        double start_time;
        Vec2 start_pos;
        Vec2 rel_velocity;
    };
    std::vector<Segment> segments;
    for (const auto &p : initial) {
        segments.push_back({0.0, p.position, p.velocity});
    }

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> turn(-kMaxTurn, kMaxTurn);

    Trajectories out;
    out.states.resize(n_frames);
    for (int k = 0; k < n_frames; ++k) {
        const double t = k / static_cast<double>(cfg.frame_rate);
        auto &frame = out.states[k];
        for (std::size_t i = 0; i < initial.size(); ++i) {
            auto &seg = segments[i];
            if (cfg.motion_model == MotionModel::piecewise_turn && k > 0) {
                // Draws happen for every pedestrian every frame so the stream stays aligned.
                const double u = unit(rng);
                const double angle = turn(rng);
                if (u < kTurnProbabilityPerFrame && t > turn_lock[i]) {
                    const Vec2 pos{seg.start_pos.x + seg.rel_velocity.x * (t - seg.start_time),
                                   seg.start_pos.y + seg.rel_velocity.y * (t - seg.start_time)};
                    const Vec2 abs_v{seg.rel_velocity.x + platform.x, seg.rel_velocity.y + platform.y};
                    const double c = std::cos(angle);
                    const double s = std::sin(angle);
                    const Vec2 turned{c * abs_v.x - s * abs_v.y, s * abs_v.x + c * abs_v.y};
                    seg = {t, pos, {turned.x - platform.x, turned.y - platform.y}};
                }
            }
            const double elapsed = t - seg.start_time;
            PedestrianState st = initial[i];
            st.position = {seg.start_pos.x + seg.rel_velocity.x * elapsed, seg.start_pos.y + seg.rel_velocity.y * elapsed};
            st.velocity = seg.rel_velocity;
            frame.push_back(st);
        }
    }
    return out;
}

Vec2 spawn_position(Rng &rng) {
    std::uniform_real_distribution<double> dist(kSpawnMin, kSpawnMax);
    std::uniform_real_distribution<double> bearing(-kSpawnHalfAngle, kSpawnHalfAngle);
    const double d = dist(rng);
    const double b = bearing(rng);
    return {d * std::sin(b), d * std::cos(b)};
}

// Places pedestrian 0 so its relative straight-line path crosses a point within 0.6 m of the
// origin before the log ends. Returns the state and the time of that crossing.
std::pair<PedestrianState, double> spawn_encounter(const SimConfig &cfg, Rng &rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> speed(cfg.pedestrian_speed_min, cfg.pedestrian_speed_max);
    const double last_time = (cfg.frame_count() - 1) / static_cast<double>(cfg.frame_rate);
    const Vec2 platform{0.0, cfg.platform_speed};
    for (int attempt = 0; attempt < 100000; ++attempt) {
        const Vec2 p = spawn_position(rng);
        const double aim_r = kEncounterAimRadius * std::sqrt(unit(rng));
        const double aim_a = 2.0 * kPi * unit(rng);
        const double s = speed(rng);
        const Vec2 aim{aim_r * std::cos(aim_a), aim_r * std::sin(aim_a)};
        const Vec2 diff{aim.x - p.x, aim.y - p.y};
        const double len = diff.norm();
        const Vec2 dir{diff.x / len, diff.y / len};
        // |platform + lambda * dir| = s, lambda > 0 is the closing speed along dir.
        const double b = platform.x * dir.x + platform.y * dir.y;
        const double disc = b * b - (cfg.platform_speed * cfg.platform_speed - s * s);
        if (disc < 0.0) {
            continue;
        }
        const double lambda = -b + std::sqrt(disc);
        if (lambda <= 0.1) {
            continue;
        }
        const double arrival = len / lambda;
        if (arrival > last_time - 0.5) {
            continue;
        }
        PedestrianState st;
        st.id = 0;
        st.position = p;
        st.velocity = {lambda * dir.x, lambda * dir.y};
        st.height = cfg.pedestrian_height;
        return {st, arrival};
    }
    throw RuntimeError(fmt::format("scene {}: could not place an encounter pedestrian", cfg.seed));
}

PedestrianState spawn_wanderer(const SimConfig &cfg, int id, Rng &rng) {
    std::uniform_real_distribution<double> heading(0.0, 2.0 * kPi);
    std::uniform_real_distribution<double> speed(cfg.pedestrian_speed_min, cfg.pedestrian_speed_max);
    PedestrianState st;
    st.id = id;
    st.position = spawn_position(rng);
    const double h = heading(rng);
    const double s = speed(rng);
    st.velocity = {s * std::cos(h), s * std::sin(h) - cfg.platform_speed};
    st.height = cfg.pedestrian_height;
    return st;
}

SceneLog assemble(const SimConfig &cfg, const Trajectories &traj) {
    SceneLog scene{cfg, default_camera(cfg.image_width, cfg.image_height), {}};
    Rng lidar_rng = make_stream(cfg.seed, "lidar");
    const int n_frames = cfg.frame_count();
    scene.frames.reserve(n_frames);
    for (int k = 0; k < n_frames; ++k) {
        Frame f;
        f.index = k;
        f.timestamp = k / static_cast<double>(cfg.frame_rate);
        f.pedestrians = traj.states[k];
        f.cloud = sample_lidar(f.pedestrians, cfg, lidar_rng);
        auto rendered = render_frame(f.pedestrians, scene.camera, cfg);
        f.image = std::move(rendered.image);
        f.boxes = std::move(rendered.boxes);
        scene.frames.push_back(std::move(f));
    }
    return scene;
}

double clamp_to(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

}  // namespace

std::string to_string(MotionModel m) {
    return m == MotionModel::constant_velocity ? "constant_velocity" : "piecewise_turn";
}

MotionModel motion_model_from_string(const std::string &s) {
    if (s == "constant_velocity") {
        return MotionModel::constant_velocity;
    }
    if (s == "piecewise_turn") {
        return MotionModel::piecewise_turn;
    }
    throw ConfigError(fmt::format("unknown motion model '{}' (expected constant_velocity or piecewise_turn)", s));
}

void SimConfig::validate() const {
    auto fail = [](const std::string &msg) { throw ConfigError("sim config: " + msg); };
    if (frame_rate != kFrameRate) {
        fail(fmt::format("frame_rate must be {} Hz (got {})", kFrameRate, frame_rate));
    }
    if (n_pedestrians < 1 || n_pedestrians > 8) {
        fail(fmt::format("n_pedestrians must be in [1, 8] (got {})", n_pedestrians));
    }
    if (!(duration_s >= 7.0) || !std::isfinite(duration_s)) {
        fail(fmt::format("duration_s must be >= 7 (got {})", duration_s));
    }
    if (!(platform_speed >= kPlatformSpeedMin && platform_speed <= kPlatformSpeedMax)) {
        fail(fmt::format("platform_speed must be in [0.2, 1.5] m/s (got {})", platform_speed));
    }
    if (!(pedestrian_speed_min >= 0.2 && pedestrian_speed_max <= 1.5 && pedestrian_speed_min <= pedestrian_speed_max)) {
        fail(fmt::format("pedestrian speed range must lie within [0.2, 1.5] m/s (got [{}, {}])", pedestrian_speed_min,
                         pedestrian_speed_max));
    }
    if (image_width < 8 || image_height < 8) {
        fail(fmt::format("image size must be at least 8x8 (got {}x{})", image_width, image_height));
    }
    if (lidar_points_per_pedestrian < 0) {
        fail("lidar_points_per_pedestrian must be >= 0");
    }
    if (!(lidar_range_noise_std >= 0.0)) {
        fail("lidar_range_noise_std must be >= 0");
    }
    if (!(pedestrian_height > 0.0) || !(pedestrian_radius > 0.0) || !(sensor_height > 0.0)) {
        fail("pedestrian height, radius and sensor height must be positive");
    }
}

int SimConfig::frame_count() const { return static_cast<int>(std::lround(duration_s * frame_rate)); }

double Vec2::norm() const { return std::hypot(x, y); }

std::string SceneLog::id() const { return fmt::format("scene_{}", config.seed); }

CameraModel default_camera(int width, int height) {
    CameraIntrinsics k;
    k.fx = 0.625 * width;
    k.fy = 0.625 * width;
    k.cx = 0.5 * width;
    k.cy = 0.5 * height;
    k.width = width;
    k.height = height;
    return CameraModel(k, forward_looking_rotation(), {0.0, 0.0, 0.0});
}

SceneLog simulate_scene(const SimConfig &cfg) {
    cfg.validate();
    Rng traj_rng = make_stream(cfg.seed, "trajectories");
    std::vector<PedestrianState> initial;
    std::vector<double> turn_lock;
    auto [encounter, arrival] = spawn_encounter(cfg, traj_rng);
    initial.push_back(encounter);
    turn_lock.push_back(arrival + 0.5);
    for (int i = 1; i < cfg.n_pedestrians; ++i) {
        initial.push_back(spawn_wanderer(cfg, i, traj_rng));
        turn_lock.push_back(0.0);
    }
    Rng motion_rng = make_stream(cfg.seed, "motion");
    return assemble(cfg, propagate(cfg, initial, turn_lock, motion_rng));
}

SceneLog simulate_from_states(const SimConfig &cfg, const std::vector<PedestrianState> &initial) {
    cfg.validate();
    Rng motion_rng = make_stream(cfg.seed, "motion");
    return assemble(cfg, propagate(cfg, initial, std::vector<double>(initial.size(), 0.0), motion_rng));
}

std::vector<Point3> sample_lidar(const std::vector<PedestrianState> &states, const SimConfig &cfg, Rng &rng) {
    std::vector<Point3> cloud;
    cloud.reserve(states.size() * cfg.lidar_points_per_pedestrian);
    std::uniform_real_distribution<double> arc(-0.5 * kPi, 0.5 * kPi);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (const auto &p : states) {
        const double dist = p.position.norm();
        // Direction from the cylinder axis toward the sensor.
        const double facing = dist > 1e-12 ? std::atan2(-p.position.y, -p.position.x) : 0.0;
        std::uniform_real_distribution<double> height(-cfg.sensor_height, p.height - cfg.sensor_height);
        for (int k = 0; k < cfg.lidar_points_per_pedestrian; ++k) {
            const double phi = facing + arc(rng);
            const double z = height(rng);
            const double r = cfg.pedestrian_radius + cfg.lidar_range_noise_std * noise(rng);
            cloud.push_back({p.position.x + r * std::cos(phi), p.position.y + r * std::sin(phi), z});
        }
    }
    return cloud;
}

RenderResult render_frame(const std::vector<PedestrianState> &states, const CameraModel &cam, const SimConfig &cfg) {
    RenderResult out{Raster(cam.height(), cam.width()), {}};
    std::vector<std::size_t> order(states.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    // Far to near so nearer pedestrians overwrite farther ones.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return states[a].position.norm() > states[b].position.norm();
    });
    const double width = cam.width();
    const double height = cam.height();
    for (std::size_t i : order) {
        const auto &p = states[i];
        const double dist = p.position.norm();
        if (dist < 1e-12) {
            continue;
        }
        // Unit vector perpendicular to the line of sight, in the ground plane.
        const Vec2 side{p.position.y / dist, -p.position.x / dist};
        const double r = cfg.pedestrian_radius;
        const auto left = project_point(cam, {p.position.x - r * side.x, p.position.y - r * side.y, 0.0});
        const auto right = project_point(cam, {p.position.x + r * side.x, p.position.y + r * side.y, 0.0});
        const auto head = project_point(cam, {p.position.x, p.position.y, p.height - cfg.sensor_height});
        const auto foot = project_point(cam, {p.position.x, p.position.y, -cfg.sensor_height});
        if (!left || !right || !head || !foot) {
            continue;
        }
        const double c0 = clamp_to(std::floor(std::min(left->u, right->u)), 0.0, width);
        const double c1 = clamp_to(std::ceil(std::max(left->u, right->u)), 0.0, width);
        const double r0 = clamp_to(std::floor(std::min(head->v, foot->v)), 0.0, height);
        const double r1 = clamp_to(std::ceil(std::max(head->v, foot->v)), 0.0, height);
        if (!(c0 < c1) || !(r0 < r1)) {
            continue;
        }
        const float intensity = static_cast<float>(clamp_to(1.0 / dist, 0.0, 1.0));
        for (int row = static_cast<int>(r0); row < static_cast<int>(r1); ++row) {
            for (int col = static_cast<int>(c0); col < static_cast<int>(c1); ++col) {
                out.image.at(row, col) = intensity;
            }
        }
        out.boxes.push_back({p.id, BBox{c0, r0, c1, r1}});
    }
    std::sort(out.boxes.begin(), out.boxes.end(), [](const LabeledBox &a, const LabeledBox &b) { return a.id < b.id; });
    return out;
}

std::vector<SimConfig> scene_configs(const SimConfig &base, int count, std::uint64_t seed) {
    std::vector<SimConfig> configs;
    configs.reserve(count);
    for (int i = 0; i < count; ++i) {
        SimConfig cfg = base;
        cfg.seed = derive_seed(seed, "scene", static_cast<std::uint64_t>(i));
        Rng rng = make_stream(cfg.seed, "platform");
        cfg.platform_speed = std::uniform_real_distribution<double>(kPlatformSpeedMin, kPlatformSpeedMax)(rng);
        configs.push_back(cfg);
    }
    return configs;
}

std::vector<std::shared_ptr<const SceneLog>> simulate_batch(const std::vector<SimConfig> &configs, int jobs) {
    std::vector<std::shared_ptr<const SceneLog>> scenes(configs.size());
    const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(configs.size())));
    if (workers == 1) {
        for (std::size_t i = 0; i < configs.size(); ++i) {
            scenes[i] = std::make_shared<const SceneLog>(simulate_scene(configs[i]));
        }
        return scenes;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = next++; i < configs.size(); i = next++) {
                    scenes[i] = std::make_shared<const SceneLog>(simulate_scene(configs[i]));
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto &t : pool) {
        t.join();
    }
    for (auto &e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return scenes;
}

// ---------------------------------------------------------------------------------------------
// Serialization

namespace {

void write_f32_le(std::vector<unsigned char> &buf, float v) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) {
        buf.push_back(static_cast<unsigned char>(bits >> (8 * i)));
    }
}

float read_f32_le(const unsigned char *p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) {
        bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    }
    return std::bit_cast<float>(bits);
}

nlohmann::json config_to_json(const SimConfig &c) {
    return {{"seed", c.seed},
            {"n_pedestrians", c.n_pedestrians},
            {"duration_s", c.duration_s},
            {"frame_rate", c.frame_rate},
            {"platform_speed", c.platform_speed},
            {"pedestrian_speed_range", {c.pedestrian_speed_min, c.pedestrian_speed_max}},
            {"image_size", {c.image_width, c.image_height}},
            {"lidar_points_per_pedestrian", c.lidar_points_per_pedestrian},
            {"lidar_range_noise_std", c.lidar_range_noise_std},
            {"motion_model", to_string(c.motion_model)},
            {"pedestrian_height", c.pedestrian_height},
            {"pedestrian_radius", c.pedestrian_radius},
            {"sensor_height", c.sensor_height}};
}

SimConfig config_from_json(const nlohmann::json &j) {
    SimConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.n_pedestrians = j.at("n_pedestrians").get<int>();
    c.duration_s = j.at("duration_s").get<double>();
    c.frame_rate = j.at("frame_rate").get<int>();
    c.platform_speed = j.at("platform_speed").get<double>();
    c.pedestrian_speed_min = j.at("pedestrian_speed_range").at(0).get<double>();
    c.pedestrian_speed_max = j.at("pedestrian_speed_range").at(1).get<double>();
    c.image_width = j.at("image_size").at(0).get<int>();
    c.image_height = j.at("image_size").at(1).get<int>();
    c.lidar_points_per_pedestrian = j.at("lidar_points_per_pedestrian").get<int>();
    c.lidar_range_noise_std = j.at("lidar_range_noise_std").get<double>();
    c.motion_model = motion_model_from_string(j.at("motion_model").get<std::string>());
    c.pedestrian_height = j.at("pedestrian_height").get<double>();
    c.pedestrian_radius = j.at("pedestrian_radius").get<double>();
    c.sensor_height = j.at("sensor_height").get<double>();
    return c;
}

std::string crc_hex(const std::vector<unsigned char> &bytes) {
    const uLong crc = crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size()));
    return fmt::format("crc32:{:08x}", static_cast<std::uint32_t>(crc));
}

}  // namespace

std::filesystem::path write_scene(const SceneLog &scene, const std::filesystem::path &parent) {
    namespace fs = std::filesystem;
    const fs::path dir = parent / scene.id();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError(fmt::format("cannot create scene directory '{}': {}", dir.string(), ec.message()));
    }

    std::vector<unsigned char> bin;
    const auto &cfg = scene.config;
    bin.reserve(scene.frames.size() * cfg.image_width * cfg.image_height * 4);
    for (const auto &f : scene.frames) {
        for (float v : f.image.pixels) {
            write_f32_le(bin, v);
        }
    }

    nlohmann::json frames = nlohmann::json::array();
    for (const auto &f : scene.frames) {
        nlohmann::json peds = nlohmann::json::array();
        for (const auto &p : f.pedestrians) {
            peds.push_back({{"id", p.id},
                            {"position", {p.position.x, p.position.y}},
                            {"velocity", {p.velocity.x, p.velocity.y}},
                            {"height", p.height}});
        }
        nlohmann::json boxes = nlohmann::json::array();
        for (const auto &b : f.boxes) {
            boxes.push_back({{"id", b.id},
                             {"box",
                              {static_cast<int>(b.box.u_min), static_cast<int>(b.box.v_min),
                               static_cast<int>(b.box.u_max), static_cast<int>(b.box.v_max)}}});
        }
        std::vector<double> cloud;
        cloud.reserve(f.cloud.size() * 3);
        for (const auto &p : f.cloud) {
            cloud.insert(cloud.end(), {p.x, p.y, p.z});
        }
        frames.push_back(
            {{"index", f.index}, {"timestamp", f.timestamp}, {"pedestrians", peds}, {"boxes", boxes}, {"cloud", cloud}});
    }

    nlohmann::json meta = {{"format_version", 1},
                           {"id", scene.id()},
                           {"config", config_to_json(cfg)},
                           {"camera", scene.camera},
                           {"frames_bin",
                            {{"file", "frames.bin"},
                             {"dtype", "float32-le"},
                             {"n_frames", scene.frames.size()},
                             {"height", cfg.image_height},
                             {"width", cfg.image_width},
                             {"hash", crc_hex(bin)}}},
                           {"frames", frames}};

    {
        std::ofstream out(dir / "frames.bin", std::ios::binary);
        out.write(reinterpret_cast<const char *>(bin.data()), static_cast<std::streamsize>(bin.size()));
        if (!out) {
            throw IoError(fmt::format("cannot write '{}'", (dir / "frames.bin").string()));
        }
    }
    {
        std::ofstream out(dir / "meta.json");
        out << meta.dump() << '\n';
        if (!out) {
            throw IoError(fmt::format("cannot write '{}'", (dir / "meta.json").string()));
        }
    }
    return dir;
}

SceneLog read_scene(const std::filesystem::path &dir) {
    std::ifstream meta_in(dir / "meta.json");
    if (!meta_in) {
        throw IoError(fmt::format("cannot open '{}'", (dir / "meta.json").string()));
    }
    nlohmann::json meta;
    try {
        meta_in >> meta;
    } catch (const nlohmann::json::exception &e) {
        throw IoError(fmt::format("'{}': {}", (dir / "meta.json").string(), e.what()));
    }

    std::ifstream bin_in(dir / "frames.bin", std::ios::binary);
    if (!bin_in) {
        throw IoError(fmt::format("cannot open '{}'", (dir / "frames.bin").string()));
    }
    std::vector<unsigned char> bin((std::istreambuf_iterator<char>(bin_in)), std::istreambuf_iterator<char>());

    try {
        const auto &fb = meta.at("frames_bin");
        if (crc_hex(bin) != fb.at("hash").get<std::string>()) {
            throw IoError(fmt::format("'{}': frames.bin content hash mismatch", dir.string()));
        }
        const int h = fb.at("height").get<int>();
        const int w = fb.at("width").get<int>();
        const std::size_t n = fb.at("n_frames").get<std::size_t>();
        if (bin.size() != n * h * w * 4) {
            throw IoError(fmt::format("'{}': frames.bin has {} bytes, expected {}", dir.string(), bin.size(), n * h * w * 4));
        }
        SceneLog scene{config_from_json(meta.at("config")), camera_from_json(meta.at("camera")), {}};
        const auto &frames = meta.at("frames");
        if (frames.size() != n) {
            throw IoError(fmt::format("'{}': meta.json lists {} frames, frames.bin holds {}", dir.string(), frames.size(), n));
        }
        std::size_t offset = 0;
        for (const auto &jf : frames) {
            Frame f;
            f.index = jf.at("index").get<int>();
            f.timestamp = jf.at("timestamp").get<double>();
            for (const auto &jp : jf.at("pedestrians")) {
                PedestrianState p;
                p.id = jp.at("id").get<int>();
                p.position = {jp.at("position").at(0).get<double>(), jp.at("position").at(1).get<double>()};
                p.velocity = {jp.at("velocity").at(0).get<double>(), jp.at("velocity").at(1).get<double>()};
                p.height = jp.at("height").get<double>();
                f.pedestrians.push_back(p);
            }
            for (const auto &jb : jf.at("boxes")) {
                const auto &b = jb.at("box");
                f.boxes.push_back({jb.at("id").get<int>(),
                                   BBox{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                                        b.at(3).get<double>()}});
            }
            const auto cloud = jf.at("cloud").get<std::vector<double>>();
            for (std::size_t i = 0; i + 2 < cloud.size(); i += 3) {
                f.cloud.push_back({cloud[i], cloud[i + 1], cloud[i + 2]});
            }
            f.image = Raster(h, w);
            for (auto &px : f.image.pixels) {
                px = read_f32_le(bin.data() + offset);
                offset += 4;
            }
            scene.frames.push_back(std::move(f));
        }
        return scene;
    } catch (const nlohmann::json::exception &e) {
        throw IoError(fmt::format("'{}': malformed meta.json: {}", dir.string(), e.what()));
    }
}

}  // namespace nearcol
