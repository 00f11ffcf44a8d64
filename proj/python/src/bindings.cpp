#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <memory>

#include "nearcol/annotate.hpp"
#include "nearcol/baselines.hpp"
#include "nearcol/errors.hpp"
#include "nearcol/eval.hpp"
#include "nearcol/neural.hpp"
#include "nearcol/scenesim.hpp"

namespace py = pybind11;
using namespace nearcol;

namespace {

using ScenePtr = std::shared_ptr<const SceneLog>;

// Scenes are immutable once simulated; Python holds them through this wrapper.
struct Scene {
    ScenePtr log;
};

std::vector<ScenePtr> unwrap(const std::vector<Scene> &scenes) {
    std::vector<ScenePtr> out;
    out.reserve(scenes.size());
    for (const auto &s : scenes) {
        out.push_back(s.log);
    }
    return out;
}

py::array_t<float> scene_images(const SceneLog &s) {
    const auto t = static_cast<py::ssize_t>(s.frames.size());
    const py::ssize_t h = s.config.image_height;
    const py::ssize_t w = s.config.image_width;
    py::array_t<float> out({t, h, w});
    auto *dst = out.mutable_data();
    for (const auto &f : s.frames) {
        dst = std::copy(f.image.pixels.begin(), f.image.pixels.end(), dst);
    }
    return out;
}

// (frames, pedestrians, 4): x, y, vx, vy relative to the platform.
py::array_t<double> scene_states(const SceneLog &s) {
    const auto t = static_cast<py::ssize_t>(s.frames.size());
    const auto p = static_cast<py::ssize_t>(s.frames.empty() ? 0 : s.frames.front().pedestrians.size());
    py::array_t<double> out({t, p, py::ssize_t{4}});
    auto r = out.mutable_unchecked<3>();
    for (py::ssize_t i = 0; i < t; ++i) {
        for (py::ssize_t j = 0; j < p; ++j) {
            const auto &ped = s.frames[i].pedestrians[j];
            r(i, j, 0) = ped.position.x;
            r(i, j, 1) = ped.position.y;
            r(i, j, 2) = ped.velocity.x;
            r(i, j, 3) = ped.velocity.y;
        }
    }
    return out;
}

py::array_t<double> frame_cloud(const SceneLog &s, int index) {
    if (index < 0 || index >= static_cast<int>(s.frames.size())) {
        throw py::index_error("frame index out of range");
    }
    const auto &cloud = s.frames[index].cloud;
    py::array_t<double> out({static_cast<py::ssize_t>(cloud.size()), py::ssize_t{3}});
    auto r = out.mutable_unchecked<2>();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        r(i, 0) = cloud[i].x;
        r(i, 1) = cloud[i].y;
        r(i, 2) = cloud[i].z;
    }
    return out;
}

std::vector<std::tuple<int, double, double, double, double>> frame_boxes(const SceneLog &s, int index) {
    if (index < 0 || index >= static_cast<int>(s.frames.size())) {
        throw py::index_error("frame index out of range");
    }
    std::vector<std::tuple<int, double, double, double, double>> out;
    for (const auto &b : s.frames[index].boxes) {
        out.emplace_back(b.id, b.box.u_min, b.box.v_min, b.box.u_max, b.box.v_max);
    }
    return out;
}

Split split_from_string(const std::string &s) {
    if (s == "train") {
        return Split::train;
    }
    if (s == "test") {
        return Split::test;
    }
    throw ConfigError("split must be train or test, got " + s);
}

std::vector<WindowSample> samples_of(const Dataset &d, const std::string &split, Head head) {
    return head == Head::regression ? d.regression(split_from_string(split))
                                    : d.classification(split_from_string(split));
}

// (windows, N, H, W) pixel stack, oldest frame first.
py::array_t<double> window_stack(std::span<const WindowSample> samples) {
    if (samples.empty()) {
        return py::array_t<double>(std::vector<py::ssize_t>{0, 0, 0, 0});
    }
    const auto &first = samples.front();
    const py::ssize_t n = first.n_frames;
    const py::ssize_t h = first.height();
    const py::ssize_t w = first.width();
    py::array_t<double> out({static_cast<py::ssize_t>(samples.size()), n, h, w});
    double *dst = out.mutable_data();
    const auto frame = static_cast<std::size_t>(h * w);
    for (const auto &s : samples) {
        for (int i = 0; i < s.n_frames; ++i) {
            s.write_frame(i, std::span<double>(dst, frame));
            dst += frame;
        }
    }
    return out;
}

NetworkConfig make_config(int n_frames, const std::string &head, int image_size, int hidden_units) {
    NetworkConfig cfg;
    cfg.n_frames = n_frames;
    cfg.head = head_from_string(head);
    cfg.input_height = image_size;
    cfg.input_width = image_size;
    cfg.hidden_units = hidden_units;
    cfg.validate();
    return cfg;
}

py::dict metrics_dict(const RegressionMetrics &m) {
    py::dict d;
    d["mae"] = m.mae;
    d["std"] = m.std_abs_err;
    d["n"] = m.n;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Synthetic near-collision data, baselines and multi-stream time-to-collision regressor";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<RuntimeError>(m, "NearcolError", PyExc_RuntimeError);

    m.attr("NEAR_COLLISION_RADIUS") = kNearCollisionRadius;
    m.attr("HORIZON_FRAMES") = kHorizonFrames;
    m.attr("FRAME_RATE") = kFrameRate;

    py::enum_<MotionModel>(m, "MotionModel")
        .value("constant_velocity", MotionModel::constant_velocity)
        .value("piecewise_turn", MotionModel::piecewise_turn);

    py::class_<SimConfig>(m, "SimConfig")
        .def(py::init<>())
        .def_readwrite("seed", &SimConfig::seed)
        .def_readwrite("n_pedestrians", &SimConfig::n_pedestrians)
        .def_readwrite("duration_s", &SimConfig::duration_s)
        .def_readwrite("frame_rate", &SimConfig::frame_rate)
        .def_readwrite("platform_speed", &SimConfig::platform_speed)
        .def_readwrite("pedestrian_speed_min", &SimConfig::pedestrian_speed_min)
        .def_readwrite("pedestrian_speed_max", &SimConfig::pedestrian_speed_max)
        .def_readwrite("image_width", &SimConfig::image_width)
        .def_readwrite("image_height", &SimConfig::image_height)
        .def_readwrite("lidar_points_per_pedestrian", &SimConfig::lidar_points_per_pedestrian)
        .def_readwrite("lidar_range_noise_std", &SimConfig::lidar_range_noise_std)
        .def_readwrite("motion_model", &SimConfig::motion_model)
        .def("validate", &SimConfig::validate)
        .def("frame_count", &SimConfig::frame_count);

    py::class_<Scene>(m, "Scene")
        .def_property_readonly("id", [](const Scene &s) { return s.log->id(); })
        .def_property_readonly("config", [](const Scene &s) { return s.log->config; })
        .def("__len__", [](const Scene &s) { return s.log->frames.size(); })
        .def("images", [](const Scene &s) { return scene_images(*s.log); }, "Frames as a (T, H, W) float32 array")
        .def("states", [](const Scene &s) { return scene_states(*s.log); },
             "Pedestrian (x, y, vx, vy) per frame, shape (T, P, 4)")
        .def("cloud", [](const Scene &s, int i) { return frame_cloud(*s.log, i); }, py::arg("frame"))
        .def("boxes", [](const Scene &s, int i) { return frame_boxes(*s.log, i); }, py::arg("frame"),
             "(id, u_min, v_min, u_max, v_max) per visible pedestrian")
        .def("write", [](const Scene &s, const std::filesystem::path &parent) { return write_scene(*s.log, parent); },
             py::arg("parent"));

    m.def("simulate_scene", [](const SimConfig &cfg) { return Scene{std::make_shared<const SceneLog>(simulate_scene(cfg))}; },
          py::arg("config"), py::call_guard<py::gil_scoped_release>());
    m.def(
        "simulate_batch",
        [](const SimConfig &base, int count, std::uint64_t seed, int jobs) {
            std::vector<Scene> out;
            for (auto &s : simulate_batch(scene_configs(base, count, seed), jobs)) {
                out.push_back({std::move(s)});
            }
            return out;
        },
        py::arg("base"), py::arg("count"), py::arg("seed"), py::arg("jobs") = 1,
        py::call_guard<py::gil_scoped_release>());
    m.def("read_scene", [](const std::filesystem::path &dir) { return Scene{std::make_shared<const SceneLog>(read_scene(dir))}; },
          py::arg("dir"));

    m.def(
        "label_frames",
        [](const Scene &s, double radius) {
            const auto labels = label_frames(*s.log, radius);
            const auto n = static_cast<py::ssize_t>(labels.size());
            py::array_t<bool> near(std::vector<py::ssize_t>{n});
            py::array_t<double> range(std::vector<py::ssize_t>{n});
            std::copy(labels.near_collision.begin(), labels.near_collision.end(), near.mutable_data());
            std::copy(labels.nearest_range.begin(), labels.nearest_range.end(), range.mutable_data());
            return py::make_tuple(near, range);
        },
        py::arg("scene"), py::arg("radius") = kNearCollisionRadius,
        "Per-frame near-collision flags and nearest pedestrian range");
    m.def(
        "time_to_near_collision",
        [](const std::vector<bool> &near, std::size_t n, int horizon) {
            FrameLabels labels;
            labels.near_collision.assign(near.begin(), near.end());
            labels.nearest_range.assign(near.size(), 0.0);
            return time_to_near_collision(labels, n, horizon);
        },
        py::arg("near_collision"), py::arg("frame"), py::arg("horizon") = kHorizonFrames);
    m.def("time_bins", [](std::optional<double> t) { return time_bins(t); }, py::arg("t"));

    m.def(
        "time_to_radius",
        [](std::pair<double, double> p, std::pair<double, double> v, double radius, double horizon) {
            return time_to_radius({p.first, p.second}, {v.first, v.second}, radius, horizon);
        },
        py::arg("position"), py::arg("velocity"), py::arg("radius") = kNearCollisionRadius,
        py::arg("horizon") = kForecastHorizon);
    m.def(
        "fit_velocity",
        [](const std::vector<double> &t, const std::vector<std::pair<double, double>> &xy) {
            if (t.size() != xy.size()) {
                throw ConfigError("times and positions differ in length");
            }
            Track track;
            for (std::size_t i = 0; i < t.size(); ++i) {
                track.push_back({t[i], {xy[i].first, xy[i].second}});
            }
            const auto fit = fit_velocity(track);
            return py::make_tuple(py::make_tuple(fit.position.x, fit.position.y),
                                  py::make_tuple(fit.velocity.x, fit.velocity.y));
        },
        py::arg("times"), py::arg("positions"), "Least-squares (position at last time, velocity)");

    m.def(
        "regression_metrics",
        [](const std::vector<double> &preds, const std::vector<double> &truths) {
            return metrics_dict(regression_metrics(preds, truths));
        },
        py::arg("preds"), py::arg("truths"));
    m.def(
        "interval_report",
        [](const std::vector<double> &preds, const std::vector<double> &truths) {
            py::list out;
            for (const auto &b : interval_report(preds, truths).bins) {
                py::dict d;
                d["interval"] = b.label();
                d["count"] = b.count;
                d["mae"] = b.mae;
                out.append(d);
            }
            return out;
        },
        py::arg("preds"), py::arg("truths"));
    m.def(
        "f1_score",
        [](std::uint64_t tp, std::uint64_t fn, std::uint64_t fp, std::uint64_t tn) {
            return classification_metrics(ConfusionMatrix{tp, fn, fp, tn}).f1;
        },
        py::arg("tp"), py::arg("fn"), py::arg("fp"), py::arg("tn"));

    py::class_<Dataset>(m, "Dataset")
        .def_readonly("n_frames", &Dataset::n_frames)
        .def_readonly("augmented", &Dataset::augmented)
        .def("__len__", [](const Dataset &d) { return d.samples.size(); })
        .def(
            "windows",
            [](const Dataset &d, const std::string &split, const std::string &head) {
                return window_stack(samples_of(d, split, head_from_string(head)));
            },
            py::arg("split"), py::arg("head") = "regression", "Pixel windows, shape (count, N, H, W)")
        .def(
            "times",
            [](const Dataset &d, const std::string &split) {
                std::vector<double> out;
                for (const auto &s : d.regression(split_from_string(split))) {
                    out.push_back(*s.t_true);
                }
                return out;
            },
            py::arg("split"), "Ground-truth time to near-collision of the regression windows")
        .def("write_manifest", [](const Dataset &d, const std::filesystem::path &p) { write_manifest(d, p); },
             py::arg("path"));

    m.def(
        "build_dataset",
        [](const std::vector<Scene> &scenes, double test_fraction, std::uint64_t seed, int n_frames, bool augment) {
            auto logs = unwrap(scenes);
            std::vector<std::string> ids;
            for (const auto &s : logs) {
                ids.push_back(s->id());
            }
            return build_dataset(logs, split_scenes(ids, test_fraction, seed), n_frames, augment);
        },
        py::arg("scenes"), py::arg("test_fraction"), py::arg("seed"), py::arg("n_frames"), py::arg("augment") = true,
        "Seeded scene split, windowing and training-split flip augmentation");
    m.def("read_manifest", &read_manifest, py::arg("path"));

    py::class_<Network>(m, "Network")
        .def_static(
            "build",
            [](int n_frames, const std::string &head, int image_size, int hidden_units, std::uint64_t seed) {
                return Network::build(make_config(n_frames, head, image_size, hidden_units), seed);
            },
            py::arg("n_frames") = 6, py::arg("head") = "regression", py::arg("image_size") = 64,
            py::arg("hidden_units") = 128, py::arg("seed") = 42)
        .def_static("load", &load_checkpoint, py::arg("path"))
        .def("save", [](const Network &n, const std::filesystem::path &p) { save_checkpoint(n, p); }, py::arg("path"))
        .def_property_readonly("n_frames", [](const Network &n) { return n.config().n_frames; })
        .def_property_readonly("head", [](const Network &n) { return to_string(n.config().head); })
        .def("parameter_count", &Network::parameter_count)
        .def(
            "forward",
            [](const Network &n, py::array_t<double, py::array::c_style | py::array::forcecast> window) {
                const auto expected = n.config().frame_input_size() * n.config().n_frames;
                if (static_cast<std::size_t>(window.size()) != expected) {
                    throw ConfigError("window must hold N x H x W values");
                }
                return n.forward(std::span<const double>(window.data(), expected));
            },
            py::arg("window"), "Head activation for one (N, H, W) window")
        .def(
            "train",
            [](Network &n, const Dataset &d, int epochs, double lr, int batch, std::uint64_t seed) {
                Hyperparams h;
                h.epochs = epochs;
                h.learning_rate = lr;
                h.batch_size = batch;
                h.seed = seed;
                const auto samples = samples_of(d, "train", n.config().head);
                py::gil_scoped_release release;
                return train(n, samples, h).epoch_loss;
            },
            py::arg("dataset"), py::arg("epochs") = 30, py::arg("lr") = 0.001, py::arg("batch") = 24,
            py::arg("seed") = 42, "Mini-batch SGD on the training split; returns the per-epoch loss")
        .def(
            "predict",
            [](const Network &n, const Dataset &d, const std::string &split) {
                const auto samples = samples_of(d, split, n.config().head);
                py::gil_scoped_release release;
                return predict(n, samples);
            },
            py::arg("dataset"), py::arg("split") = "test");

    m.def(
        "grad_check",
        [](int n_frames, const std::string &head, int image_size, int hidden_units) {
            const auto report = grad_check(make_config(n_frames, head, image_size, hidden_units));
            py::dict out;
            for (const auto &l : report.layers) {
                out[py::str(l.layer)] = l.max_rel_error;
            }
            return out;
        },
        py::arg("n_frames") = 2, py::arg("head") = "regression", py::arg("image_size") = 16,
        py::arg("hidden_units") = 16, "Maximum relative gradient error per layer");
}
