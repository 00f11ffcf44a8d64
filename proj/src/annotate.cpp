#include "nearcol/annotate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "nearcol/errors.hpp"

namespace nearcol {

FrameLabels label_frames(const SceneLog &scene, double radius) {
    FrameLabels labels;
    labels.near_collision.reserve(scene.frames.size());
    labels.nearest_range.reserve(scene.frames.size());
    for (const auto &f : scene.frames) {
        double nearest = std::numeric_limits<double>::infinity();
        for (const auto &p : f.pedestrians) {
            nearest = std::min(nearest, p.position.norm());
        }
        labels.nearest_range.push_back(nearest);
        labels.near_collision.push_back(nearest <= radius ? 1 : 0);
    }
    return labels;
}

std::optional<double> time_to_near_collision(const FrameLabels &labels, std::size_t n, int horizon) {
    const std::size_t last = std::min(labels.size() - 1, n + static_cast<std::size_t>(horizon));
    for (std::size_t k = n + 1; k <= last; ++k) {
        if (labels.near_collision[k]) {
            return static_cast<double>(k - n) / kFrameRate;
        }
    }
    return std::nullopt;
}

std::array<std::uint8_t, kNumTimeBins> time_bins(std::optional<double> t) {
    std::array<std::uint8_t, kNumTimeBins> bins{};
    if (!t || *t > 3.0) {
        bins[3] = 1;
    } else if (*t > 2.0) {
        bins[2] = 1;
    } else if (*t > 1.0) {
        bins[1] = 1;
    } else {
        bins[0] = 1;
    }
    return bins;
}

Raster WindowSample::frame(int i) const {
    const Raster &src = scene->frames[end_frame - n_frames + 1 + i].image;
    return flipped ? flip_horizontal(src) : src;
}

void WindowSample::write_frame(int i, std::span<double> out) const {
    const Raster &src = scene->frames[end_frame - n_frames + 1 + i].image;
    const int w = src.width;
    for (int r = 0; r < src.height; ++r) {
        const float *row = src.pixels.data() + static_cast<std::size_t>(r) * w;
        double *dst = out.data() + static_cast<std::size_t>(r) * w;
        if (flipped) {
            for (int c = 0; c < w; ++c) {
                dst[c] = row[w - 1 - c];
            }
        } else {
            for (int c = 0; c < w; ++c) {
                dst[c] = row[c];
            }
        }
    }
}

WindowSource WindowSample::source() const { return {scene->id(), end_frame, flipped}; }

std::vector<WindowSample> extract_windows(const std::shared_ptr<const SceneLog> &scene, const FrameLabels &labels,
                                          int n_frames, ExtractionStats *stats) {
    if (n_frames < kMinWindowFrames || n_frames > kMaxWindowFrames) {
        throw ConfigError(fmt::format("window length N must be in [{}, {}] (got {})", kMinWindowFrames,
                                      kMaxWindowFrames, n_frames));
    }
    const int total = static_cast<int>(scene->frames.size());
    if (static_cast<int>(labels.size()) != total) {
        throw ConfigError("labels do not match the scene frame count");
    }
    if (total < n_frames) {
        throw ConfigError(fmt::format("scene {} has {} frames, fewer than N = {}", scene->id(), total, n_frames));
    }
    ExtractionStats local;
    std::vector<WindowSample> out;
    for (int n = n_frames - 1; n < total; ++n) {
        const auto t = time_to_near_collision(labels, n);
        WindowSample s;
        s.scene = scene;
        s.end_frame = n;
        s.n_frames = n_frames;
        if (labels.near_collision[n]) {
            ++local.skipped_in_collision;
        } else if (!t) {
            ++local.skipped_no_collision;
        } else {
            s.t_true = t;
            ++local.regression;
        }
        if (n + kHorizonFrames < total) {
            ClassTargets ct;
            ct.binary = (t && *t <= 1.0) ? 1 : 0;
            ct.multilabel = time_bins(t);
            s.targets = ct;
            ++local.classification;
        }
        if (s.t_true || s.targets) {
            out.push_back(std::move(s));
        }
    }
    if (stats) {
        stats->regression += local.regression;
        stats->classification += local.classification;
        stats->skipped_in_collision += local.skipped_in_collision;
        stats->skipped_no_collision += local.skipped_no_collision;
    }
    return out;
}

Raster flip_horizontal(const Raster &image) {
    Raster out(image.height, image.width);
    for (int r = 0; r < image.height; ++r) {
        for (int c = 0; c < image.width; ++c) {
            out.at(r, image.width - 1 - c) = image.at(r, c);
        }
    }
    return out;
}

std::vector<WindowSample> flip_augment(std::vector<WindowSample> samples) {
    const std::size_t n = samples.size();
    samples.reserve(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        WindowSample copy = samples[i];
        copy.flipped = !copy.flipped;
        samples.push_back(std::move(copy));
    }
    return samples;
}

WeightedSampler::WeightedSampler(std::span<const std::uint8_t> binary_targets, double positive_weight,
                                 double negative_weight, std::uint64_t seed)
    : rng_(make_stream(seed, "weighted_sampler")) {
    if (!(positive_weight > 0.0) || !(negative_weight > 0.0)) {
        throw ConfigError("weighted sampler: class weights must be positive");
    }
    if (binary_targets.empty()) {
        throw ConfigError("weighted sampler: no samples");
    }
    std::vector<double> weights;
    weights.reserve(binary_targets.size());
    for (auto b : binary_targets) {
        weights.push_back(b ? positive_weight : negative_weight);
    }
    dist_ = std::discrete_distribution<std::size_t>(weights.begin(), weights.end());
}

std::size_t WeightedSampler::next() { return dist_(rng_); }

WeightedSampler make_weighted_sampler(std::span<const WindowSample> samples, std::uint64_t seed,
                                      double positive_weight, double negative_weight) {
    std::vector<std::uint8_t> targets;
    targets.reserve(samples.size());
    for (const auto &s : samples) {
        if (!s.targets) {
            throw ConfigError("weighted sampler: sample without classification targets");
        }
        targets.push_back(s.targets->binary);
    }
    return WeightedSampler(targets, positive_weight, negative_weight, seed);
}

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

Split Dataset::split_of(const WindowSample &s) const { return split.at(s.scene->id()); }

std::vector<WindowSample> Dataset::regression(Split which) const {
    std::vector<WindowSample> out;
    for (const auto &s : samples) {
        if (s.t_true && split_of(s) == which) {
            out.push_back(s);
        }
    }
    return out;
}

std::vector<WindowSample> Dataset::classification(Split which) const {
    std::vector<WindowSample> out;
    for (const auto &s : samples) {
        if (s.targets && split_of(s) == which) {
            out.push_back(s);
        }
    }
    return out;
}

std::map<std::string, Split> split_scenes(const std::vector<std::string> &scene_ids, double test_fraction,
                                          std::uint64_t seed) {
    if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) {
        throw ConfigError(fmt::format("test fraction must be in [0, 1] (got {})", test_fraction));
    }
    std::vector<std::string> ids = scene_ids;
    std::sort(ids.begin(), ids.end());
    Rng rng = make_stream(seed, "split");
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(ids.size())));
    std::map<std::string, Split> split;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        split[ids[i]] = i < n_test ? Split::test : Split::train;
    }
    return split;
}

Dataset build_dataset(const std::vector<std::shared_ptr<const SceneLog>> &scenes,
                      const std::map<std::string, Split> &split, int n_frames, bool augment, double radius) {
    Dataset ds;
    ds.scenes = scenes;
    ds.split = split;
    ds.n_frames = n_frames;
    ds.augmented = augment;
    for (const auto &scene : scenes) {
        const auto it = split.find(scene->id());
        if (it == split.end()) {
            throw ConfigError(fmt::format("scene {} has no split assignment", scene->id()));
        }
        const auto labels = label_frames(*scene, radius);
        auto windows = extract_windows(scene, labels, n_frames, &ds.stats);
        if (augment && it->second == Split::train) {
            windows = flip_augment(std::move(windows));
        }
        ds.samples.insert(ds.samples.end(), std::make_move_iterator(windows.begin()),
                          std::make_move_iterator(windows.end()));
    }
    return ds;
}

void write_manifest(const Dataset &dataset, const std::filesystem::path &path) {
    namespace fs = std::filesystem;
    nlohmann::json split = nlohmann::json::object();
    for (const auto &[id, s] : dataset.split) {
        split[id] = to_string(s);
    }
    nlohmann::json records = nlohmann::json::array();
    for (const auto &s : dataset.samples) {
        nlohmann::json r = {{"scene", s.scene->id()}, {"end_frame", s.end_frame}, {"flipped", s.flipped}};
        r["t_true"] = s.t_true ? nlohmann::json(*s.t_true) : nlohmann::json(nullptr);
        if (s.targets) {
            r["binary"] = s.targets->binary;
            r["multilabel"] = s.targets->multilabel;
        } else {
            r["binary"] = nullptr;
            r["multilabel"] = nullptr;
        }
        records.push_back(std::move(r));
    }
    // Scene directories are stored relative to the manifest so the dataset can be moved as a whole.
    const fs::path base = fs::absolute(path).parent_path();
    std::vector<std::string> dirs;
    for (const auto &d : dataset.scene_dirs) {
        const auto rel = fs::absolute(d).lexically_normal().lexically_relative(base.lexically_normal());
        dirs.push_back(rel.empty() ? d : rel.generic_string());
    }
    nlohmann::json j = {{"format_version", 1},
                        {"scene_dirs", dirs},
                        {"split", split},
                        {"n_frames", dataset.n_frames},
                        {"augmented", dataset.augmented},
                        {"stats",
                         {{"regression", dataset.stats.regression},
                          {"classification", dataset.stats.classification},
                          {"skipped_in_collision", dataset.stats.skipped_in_collision},
                          {"skipped_no_collision", dataset.stats.skipped_no_collision}}},
                        {"samples", records}};
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    out << j.dump() << '\n';
    if (!out) {
        throw IoError(fmt::format("cannot write manifest '{}'", path.string()));
    }
}

Dataset read_manifest(const std::filesystem::path &path) {
    namespace fs = std::filesystem;
    std::ifstream in(path);
    if (!in) {
        throw IoError(fmt::format("cannot open manifest '{}'", path.string()));
    }
    nlohmann::json j;
    try {
        in >> j;
        Dataset ds;
        ds.n_frames = j.at("n_frames").get<int>();
        ds.augmented = j.at("augmented").get<bool>();
        ds.scene_dirs = j.at("scene_dirs").get<std::vector<std::string>>();
        for (const auto &[id, s] : j.at("split").items()) {
            ds.split[id] = s.get<std::string>() == "test" ? Split::test : Split::train;
        }
        const auto &st = j.at("stats");
        ds.stats = {st.at("regression").get<int>(), st.at("classification").get<int>(),
                    st.at("skipped_in_collision").get<int>(), st.at("skipped_no_collision").get<int>()};
        std::map<std::string, std::shared_ptr<const SceneLog>> by_id;
        for (const auto &dir : ds.scene_dirs) {
            fs::path p = dir;
            if (p.is_relative()) {
                p = path.parent_path() / p;
            }
            auto scene = std::make_shared<const SceneLog>(read_scene(p));
            by_id[scene->id()] = scene;
            ds.scenes.push_back(scene);
        }
        for (const auto &r : j.at("samples")) {
            const auto id = r.at("scene").get<std::string>();
            const auto it = by_id.find(id);
            if (it == by_id.end()) {
                throw IoError(fmt::format("manifest '{}' references unknown scene {}", path.string(), id));
            }
            WindowSample s;
            s.scene = it->second;
            s.end_frame = r.at("end_frame").get<int>();
            s.n_frames = ds.n_frames;
            s.flipped = r.at("flipped").get<bool>();
            if (!r.at("t_true").is_null()) {
                s.t_true = r.at("t_true").get<double>();
            }
            if (!r.at("binary").is_null()) {
                ClassTargets ct;
                ct.binary = r.at("binary").get<std::uint8_t>();
                ct.multilabel = r.at("multilabel").get<std::array<std::uint8_t, kNumTimeBins>>();
                s.targets = ct;
            }
            if (s.end_frame < s.n_frames - 1 || s.end_frame >= static_cast<int>(s.scene->frames.size())) {
                throw IoError(fmt::format("manifest '{}': end frame {} out of range for {}", path.string(),
                                          s.end_frame, id));
            }
            ds.samples.push_back(std::move(s));
        }
        return ds;
    } catch (const nlohmann::json::exception &e) {
        throw IoError(fmt::format("manifest '{}': {}", path.string(), e.what()));
    }
}

}  // namespace nearcol
