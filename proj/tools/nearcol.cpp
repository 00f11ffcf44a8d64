// Command-line entry point: simulate -> annotate -> baseline/train -> predict/eval/sweep.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "nearcol/annotate.hpp"
#include "nearcol/baselines.hpp"
#include "nearcol/errors.hpp"
#include "nearcol/eval.hpp"
#include "nearcol/neural.hpp"
#include "nearcol/scenesim.hpp"

namespace fs = std::filesystem;
using namespace nearcol;

namespace {

struct Options {
    std::uint64_t seed = 42;
    std::string out = "./out";
    int scenes = 50;
    int pedestrians = 3;
    int frames = 6;
    std::string frame_range = "1:9";
    int batch = 24;
    double lr = 0.001;
    int epochs = 30;
    double radius = 1.0;
    double horizon = 6.0;
    double noise_std = 0.0;
    int jobs = 1;
    std::string format = "csv";

    std::string data;      // scene parent directory
    std::string manifest;  // dataset manifest
    std::string model;     // checkpoint
    std::string motion = "constant_velocity";
    std::string kind = "constant";
    std::string head = "regression";
    std::string split = "test";
    double test_fraction = 0.2;
    bool no_augment = false;
    int history = 5;
    int window_stride = 1;
    bool record_timing = false;
    int input_size = 16;
    int image_size = 64;
    double duration = 12.0;
    double epsilon = 1e-5;
    double tolerance = 1e-4;
};

void log(const std::string &msg) { std::cerr << msg << '\n'; }

fs::path out_dir(const Options &o) {
    fs::create_directories(o.out);
    return o.out;
}

fs::path manifest_path(const Options &o) {
    return o.manifest.empty() ? fs::path(o.out) / "manifest.json" : fs::path(o.manifest);
}

std::string report_ext(const Options &o) { return o.format == "json" ? ".json" : ".csv"; }

void write_text(const fs::path &path, const std::string &text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    out.close();
    if (!out) {
        throw IoError(fmt::format("cannot write '{}'", path.string()));
    }
}

std::vector<int> parse_range(const std::string &text) {
    const auto colon = text.find(':');
    try {
        if (colon == std::string::npos) {
            return {std::stoi(text)};
        }
        const int lo = std::stoi(text.substr(0, colon));
        const int hi = std::stoi(text.substr(colon + 1));
        if (lo > hi) {
            throw ConfigError(fmt::format("frame range '{}' is empty", text));
        }
        std::vector<int> out;
        for (int n = lo; n <= hi; ++n) {
            out.push_back(n);
        }
        return out;
    } catch (const std::logic_error &) {
        throw ConfigError(fmt::format("bad frame range '{}' (expected N or LO:HI)", text));
    }
}

Split split_from_string(const std::string &s) {
    if (s == "train") {
        return Split::train;
    }
    if (s == "test") {
        return Split::test;
    }
    throw ConfigError(fmt::format("unknown split '{}' (expected train or test)", s));
}

Hyperparams hyperparams(const Options &o) {
    Hyperparams h;
    h.batch_size = o.batch;
    h.learning_rate = o.lr;
    h.epochs = o.epochs;
    h.seed = o.seed;
    h.validate();
    return h;
}

std::string opt_num(const std::optional<double> &v) { return v ? fmt::format("{:.6f}", *v) : std::string("NA"); }

// Loads the manifest and rebuilds the windows when a different N is requested.
Dataset load_dataset(const Options &o, int n_frames) {
    Dataset ds = read_manifest(manifest_path(o));
    if (ds.n_frames != n_frames) {
        log(fmt::format("rebuilding windows for N={} (manifest has N={})", n_frames, ds.n_frames));
        auto rebuilt = build_dataset(ds.scenes, ds.split, n_frames, ds.augmented, o.radius);
        rebuilt.scene_dirs = ds.scene_dirs;
        return rebuilt;
    }
    return ds;
}

// ---------------------------------------------------------------------------------------------

int cmd_simulate(const Options &o) {
    SimConfig base;
    base.n_pedestrians = o.pedestrians;
    base.motion_model = motion_model_from_string(o.motion);
    base.image_width = o.image_size;
    base.image_height = o.image_size;
    base.duration_s = o.duration;
    base.validate();
    if (o.scenes < 1) {
        throw ConfigError("--scenes must be >= 1");
    }
    const auto configs = scene_configs(base, o.scenes, o.seed);
    log(fmt::format("simulating {} scenes (seed {}, {} jobs)", o.scenes, o.seed, o.jobs));
    const auto scenes = simulate_batch(configs, o.jobs);
    const auto dir = out_dir(o);
    for (const auto &s : scenes) {
        write_scene(*s, dir);
    }
    log(fmt::format("wrote {} scene directories to {}", scenes.size(), dir.string()));
    return 0;
}

int cmd_annotate(const Options &o) {
    const fs::path data = o.data.empty() ? fs::path(o.out) : fs::path(o.data);
    if (!fs::is_directory(data)) {
        throw ConfigError(fmt::format("--data '{}' is not a directory", data.string()));
    }
    std::vector<fs::path> dirs;
    for (const auto &e : fs::directory_iterator(data)) {
        if (e.is_directory() && fs::exists(e.path() / "meta.json")) {
            dirs.push_back(e.path());
        }
    }
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) {
        throw ConfigError(fmt::format("no scene directories under '{}'", data.string()));
    }
    std::vector<std::shared_ptr<const SceneLog>> scenes;
    std::vector<std::string> ids;
    for (const auto &d : dirs) {
        scenes.push_back(std::make_shared<const SceneLog>(read_scene(d)));
        ids.push_back(scenes.back()->id());
    }
    const auto split = split_scenes(ids, o.test_fraction, o.seed);
    Dataset ds = build_dataset(scenes, split, o.frames, !o.no_augment, o.radius);
    for (const auto &d : dirs) {
        ds.scene_dirs.push_back(fs::absolute(d).lexically_normal().string());
    }
    const auto path = manifest_path(o);
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    write_manifest(ds, path);
    log(fmt::format("{} scenes, {} windows ({} regression, {} classification; {} dropped without a collision in the "
                    "horizon, {} starting inside the radius) -> {}",
                    scenes.size(), ds.samples.size(), ds.stats.regression, ds.stats.classification,
                    ds.stats.skipped_no_collision, ds.stats.skipped_in_collision, path.string()));
    return 0;
}

int cmd_baseline(const Options &o) {
    const Dataset ds = load_dataset(o, o.frames);
    const Split which = split_from_string(o.split);
    const auto dir = out_dir(o);
    std::string records = "scene,end_frame,flipped,prediction,truth\n";
    auto record = [&](const WindowSample &s, const std::string &pred, const std::string &truth) {
        records += fmt::format("{},{},{},{},{}\n", s.scene->id(), s.end_frame, s.flipped ? 1 : 0, pred, truth);
    };
    Report metrics;
    if (o.kind == "constant" || o.kind == "cv") {
        const auto samples = ds.regression(which);
        if (samples.empty()) {
            throw ConfigError(fmt::format("no regression windows in the {} split", o.split));
        }
        std::vector<double> truths;
        for (const auto &s : samples) {
            truths.push_back(*s.t_true);
        }
        std::vector<double> preds;
        std::size_t substituted = 0;
        if (o.kind == "constant") {
            std::vector<double> train_targets;
            for (const auto &s : ds.regression(Split::train)) {
                train_targets.push_back(*s.t_true);
            }
            const auto fit = ConstantBaseline::fit(train_targets);
            preds.assign(samples.size(), fit.predict());
            for (std::size_t i = 0; i < samples.size(); ++i) {
                record(samples[i], fmt::format("{:.6f}", preds[i]), fmt::format("{:.6f}", truths[i]));
            }
        } else {
            CompareOptions co;
            co.history_frames = o.history;
            co.noise_std = o.noise_std;
            co.seed = o.seed;
            co.radius = o.radius;
            co.horizon = o.horizon;
            Rng rng = make_stream(o.seed, "cv_noise");
            for (const auto &s : samples) {
                const auto tracks = tracks_from_scene(*s.scene, s.end_frame, co.history_frames, co.noise_std, rng);
                const auto t = cv_predict(tracks, co.radius, co.horizon);
                substituted += t ? 0 : 1;
                preds.push_back(t.value_or(co.horizon));
                record(s, t ? fmt::format("{:.6f}", *t) : std::string("none"), fmt::format("{:.6f}", *s.t_true));
            }
        }
        const auto m = regression_metrics(preds, truths);
        metrics = {"baseline_" + o.kind, {"method", "mae_s", "std_s", "n", "substituted"}, {}};
        metrics.rows.push_back({o.kind, m.mae, m.std_abs_err, static_cast<std::int64_t>(m.n),
                                static_cast<std::int64_t>(substituted)});
        log(fmt::format("{}: MAE {:.3f} +- {:.3f} s over {} windows", o.kind, m.mae, m.std_abs_err, m.n));
    } else if (o.kind == "naive") {
        const auto samples = ds.classification(which);
        if (samples.empty()) {
            throw ConfigError(fmt::format("no classification windows in the {} split", o.split));
        }
        ConfusionMatrix cm;
        for (const auto &s : samples) {
            std::vector<BBox> boxes;
            const auto &frame = s.scene->frames[s.end_frame];
            for (const auto &b : frame.boxes) {
                boxes.push_back(b.box);
            }
            const bool positive = naive_vertical_classify(boxes, frame.image.height);
            cm.add(positive, s.targets->binary != 0);
            record(s, positive ? "1" : "0", std::to_string(s.targets->binary));
        }
        const auto m = classification_metrics(cm);
        metrics = {"baseline_naive", {"method", "precision", "recall", "f1", "tp", "fn", "fp", "tn"}, {}};
        auto cell = [](const std::optional<double> &v) { return v ? Cell{*v} : Cell{std::monostate{}}; };
        metrics.rows.push_back({std::string("naive"), cell(m.precision), cell(m.recall), cell(m.f1),
                                static_cast<std::int64_t>(cm.tp), static_cast<std::int64_t>(cm.fn),
                                static_cast<std::int64_t>(cm.fp), static_cast<std::int64_t>(cm.tn)});
        log(fmt::format("naive: F1 {} over {} windows", opt_num(m.f1), samples.size()));
    } else {
        throw ConfigError(fmt::format("unknown baseline '{}' (expected constant, cv or naive)", o.kind));
    }
    write_text(dir / fmt::format("baseline_{}_predictions.csv", o.kind), records);
    emit_report(metrics, dir / (fmt::format("baseline_{}_metrics", o.kind) + report_ext(o)),
                report_format_from_string(o.format));
    return 0;
}

int cmd_train(const Options &o) {
    const Hyperparams hyper = hyperparams(o);
    const Head head = head_from_string(o.head);
    const Dataset ds = load_dataset(o, o.frames);
    const auto samples = head == Head::regression ? ds.regression(Split::train) : ds.classification(Split::train);
    if (samples.empty()) {
        throw ConfigError("no training windows for this head");
    }
    NetworkConfig cfg;
    cfg.n_frames = o.frames;
    cfg.head = head;
    cfg.input_height = samples.front().height();
    cfg.input_width = samples.front().width();
    Network net = Network::build(cfg, o.seed);
    log(fmt::format("training {} head, N={}, {} windows, {} epochs, batch {}, lr {}", o.head, o.frames,
                    samples.size(), hyper.epochs, hyper.batch_size, hyper.learning_rate));
    const auto result = train(net, samples, hyper,
                              [](int epoch, double loss) { log(fmt::format("epoch {} loss {:.6f}", epoch, loss)); });
    const auto dir = out_dir(o);
    const fs::path model = o.model.empty() ? dir / "model.ncck" : fs::path(o.model);
    save_checkpoint(net, model);
    std::string curve = "epoch,loss\n";
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
        curve += fmt::format("{},{:.6f}\n", e, result.epoch_loss[e]);
    }
    write_text(dir / "train_loss.csv", curve);
    log(fmt::format("saved {}", model.string()));
    return 0;
}

int cmd_predict(const Options &o) {
    const fs::path model = o.model.empty() ? fs::path(o.out) / "model.ncck" : fs::path(o.model);
    const Network net = load_checkpoint(model);
    const auto &cfg = net.config();
    const Dataset ds = load_dataset(o, cfg.n_frames);
    const Split which = split_from_string(o.split);
    const auto samples = cfg.head == Head::regression ? ds.regression(which) : ds.classification(which);
    const auto preds = predict(net, samples);
    const auto units = static_cast<std::size_t>(head_units(cfg.head));
    std::string text = "scene,end_frame,flipped";
    for (std::size_t k = 0; k < units; ++k) {
        text += units == 1 ? ",prediction" : fmt::format(",output_{}", k);
    }
    text += "\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto &s = samples[i];
        text += fmt::format("{},{},{}", s.scene->id(), s.end_frame, s.flipped ? 1 : 0);
        for (std::size_t k = 0; k < units; ++k) {
            text += fmt::format(",{:.6f}", preds[i * units + k]);
        }
        text += "\n";
    }
    const auto dir = out_dir(o);
    write_text(dir / "predictions.csv", text);
    log(fmt::format("{} predictions -> {}", samples.size(), (dir / "predictions.csv").string()));
    return 0;
}

int cmd_eval(const Options &o) {
    std::optional<Network> net;
    int n_frames = o.frames;
    if (!o.model.empty()) {
        net.emplace(load_checkpoint(o.model));
        if (net->config().head != Head::regression) {
            throw ConfigError("eval: the model must have a regression head");
        }
        n_frames = net->config().n_frames;
    }
    const Dataset ds = load_dataset(o, n_frames);
    CompareOptions co;
    co.history_frames = o.history;
    co.noise_std = o.noise_std;
    co.seed = o.seed;
    co.radius = o.radius;
    co.horizon = o.horizon;
    const auto rows = compare_methods(ds, net ? &*net : nullptr, co);
    const auto format = report_format_from_string(o.format);
    const auto dir = out_dir(o);
    emit_report(comparison_report(rows), dir / ("comparison" + report_ext(o)), format);

    const auto test = ds.regression(Split::test);
    if (!test.empty()) {
        std::vector<double> truths;
        for (const auto &s : test) {
            truths.push_back(*s.t_true);
        }
        const auto preds = net ? predict(*net, test) : cv_predictions(test, co);
        const auto bins = interval_report(preds, truths, 1.0, o.horizon);
        emit_report(interval_table(bins, net ? "multistream_error_by_interval" : "cv_error_by_interval"),
                    dir / ("intervals" + report_ext(o)), format);
    }
    for (const auto &r : rows) {
        if (r.regression) {
            log(fmt::format("{:18} MAE {:.3f} +- {:.3f} s (n={}, substituted={})", r.method, r.regression->mae,
                            r.regression->std_abs_err, r.n, r.substituted));
        } else if (r.classification) {
            log(fmt::format("{:18} F1 {} (n={})", r.method, opt_num(r.classification->f1), r.n));
        }
    }
    return 0;
}

int cmd_sweep(const Options &o) {
    const auto n_values = parse_range(o.frame_range);
    const Dataset ds = read_manifest(manifest_path(o));
    SweepOptions so;
    so.hyper = hyperparams(o);
    so.augment = ds.augmented;
    so.window_stride = o.window_stride;
    so.jobs = o.jobs;
    so.record_timing = o.record_timing;
    so.radius = o.radius;
    log(fmt::format("sweeping N in {} over {} scenes ({} jobs)", o.frame_range, ds.scenes.size(), o.jobs));
    const auto result = sweep_temporal_windows(ds.scenes, ds.split, n_values, so);
    const auto dir = out_dir(o);
    emit_report(sweep_report(result), dir / ("sweep" + report_ext(o)), report_format_from_string(o.format));
    for (const auto &r : result.rows) {
        log(fmt::format("N={} MAE {:.3f} +- {:.3f} s (n_test={})", r.n_frames, r.metrics.mae, r.metrics.std_abs_err,
                        r.metrics.n));
    }
    log(fmt::format("best N = {}", result.best_n));
    return 0;
}

int cmd_gradcheck(const Options &o) {
    NetworkConfig cfg;
    cfg.n_frames = o.frames;
    cfg.input_height = o.input_size;
    cfg.input_width = o.input_size;
    cfg.head = head_from_string(o.head);
    GradCheckOptions go;
    go.epsilon = o.epsilon;
    go.tolerance = o.tolerance;
    go.seed = o.seed;
    const auto report = grad_check(cfg, go);
    Report table{"gradcheck", {"layer", "max_rel_error", "checked", "skipped", "passed"}, {}};
    for (const auto &l : report.layers) {
        const bool ok = l.checked > 0 && l.max_rel_error < report.tolerance;
        table.rows.push_back({l.layer, l.max_rel_error, static_cast<std::int64_t>(l.checked),
                              static_cast<std::int64_t>(l.skipped), std::string(ok ? "yes" : "no")});
        log(fmt::format("{:8} max rel error {:.3e} ({} checked, {} skipped)", l.layer, l.max_rel_error, l.checked,
                        l.skipped));
    }
    emit_report(table, out_dir(o) / ("gradcheck" + report_ext(o)), report_format_from_string(o.format));
    if (!report.passed()) {
        log(fmt::format("gradient check FAILED (tolerance {:g})", report.tolerance));
        return 2;
    }
    log("gradient check passed");
    return 0;
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"Monocular time-to-near-collision forecasting: simulation, labels, baselines, training, evaluation"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    Options o;

    auto common = [&](CLI::App *sub) {
        sub->add_option("--seed", o.seed, "Master random seed");
        sub->add_option("--out", o.out, "Output directory");
    };
    auto reports = [&](CLI::App *sub) {
        sub->add_option("--format", o.format, "Report format")->check(CLI::IsMember({"csv", "json"}));
    };
    auto dataset = [&](CLI::App *sub) {
        sub->add_option("--manifest", o.manifest, "Dataset manifest (default <out>/manifest.json)");
        sub->add_option("--radius", o.radius, "Near-collision radius (m)");
    };
    auto training = [&](CLI::App *sub) {
        sub->add_option("--batch", o.batch, "Mini-batch size");
        sub->add_option("--lr", o.lr, "SGD learning rate");
        sub->add_option("--epochs", o.epochs, "Training epochs");
    };

    auto *simulate = app.add_subcommand("simulate", "Generate seeded synthetic scenes");
    common(simulate);
    simulate->add_option("--scenes", o.scenes, "Number of scenes");
    simulate->add_option("--pedestrians", o.pedestrians, "Pedestrians per scene (1-8)");
    simulate->add_option("--motion", o.motion, "Pedestrian motion model")
        ->check(CLI::IsMember({"constant_velocity", "piecewise_turn"}));
    simulate->add_option("--jobs", o.jobs, "Worker threads");
    simulate->add_option("--image-size", o.image_size, "Square image side in pixels");
    simulate->add_option("--duration", o.duration, "Scene length in seconds (>= 7)");

    auto *annotate = app.add_subcommand("annotate", "Label scenes and write a windowed dataset manifest");
    common(annotate);
    annotate->add_option("--data", o.data, "Directory holding scene_* directories (default <out>)");
    annotate->add_option("--manifest", o.manifest, "Manifest path (default <out>/manifest.json)");
    annotate->add_option("--frames", o.frames, "Temporal window N (1-9)");
    annotate->add_option("--radius", o.radius, "Near-collision radius (m)");
    annotate->add_option("--test-fraction", o.test_fraction, "Fraction of scenes held out for testing");
    annotate->add_flag("--no-augment", o.no_augment, "Disable horizontal-flip augmentation of the training split");

    auto *baseline = app.add_subcommand("baseline", "Run a non-learned baseline");
    common(baseline);
    dataset(baseline);
    reports(baseline);
    baseline->add_option("--kind", o.kind, "Baseline")->check(CLI::IsMember({"constant", "cv", "naive"}));
    baseline->add_option("--frames", o.frames, "Temporal window N used to select windows");
    baseline->add_option("--noise-std", o.noise_std, "Track position noise std (m) for cv");
    baseline->add_option("--history", o.history, "Track history length in frames for cv");
    baseline->add_option("--horizon", o.horizon, "Forecast horizon (s) for cv");
    baseline->add_option("--split", o.split, "Split to predict")->check(CLI::IsMember({"train", "test"}));

    auto *train_cmd = app.add_subcommand("train", "Train a multi-stream network");
    common(train_cmd);
    dataset(train_cmd);
    training(train_cmd);
    train_cmd->add_option("--frames", o.frames, "Temporal window N (1-9)");
    train_cmd->add_option("--head", o.head, "Output head")
        ->check(CLI::IsMember({"regression", "binary", "multilabel"}));
    train_cmd->add_option("--model", o.model, "Checkpoint path (default <out>/model.ncck)");

    auto *predict_cmd = app.add_subcommand("predict", "Run a trained network over a split");
    common(predict_cmd);
    dataset(predict_cmd);
    predict_cmd->add_option("--model", o.model, "Checkpoint path (default <out>/model.ncck)");
    predict_cmd->add_option("--split", o.split, "Split to predict")->check(CLI::IsMember({"train", "test"}));

    auto *eval_cmd = app.add_subcommand("eval", "Compare methods on the test split");
    common(eval_cmd);
    dataset(eval_cmd);
    reports(eval_cmd);
    eval_cmd->add_option("--model", o.model, "Regression checkpoint to include");
    eval_cmd->add_option("--frames", o.frames, "Temporal window N when no model is given");
    eval_cmd->add_option("--noise-std", o.noise_std, "Track position noise std (m) for cv");
    eval_cmd->add_option("--history", o.history, "Track history length in frames for cv");
    eval_cmd->add_option("--horizon", o.horizon, "Forecast horizon (s)");

    auto *sweep = app.add_subcommand("sweep", "Temporal-window sweep over N");
    common(sweep);
    dataset(sweep);
    reports(sweep);
    training(sweep);
    sweep->add_option("--frames", o.frame_range, "Window sizes, N or LO:HI");
    sweep->add_option("--jobs", o.jobs, "Networks trained concurrently");
    sweep->add_option("--window-stride", o.window_stride, "Train on every k-th end frame only");
    sweep->add_flag("--record-timing", o.record_timing, "Fill train_seconds (makes the report non-reproducible)");

    auto *gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check of the network");
    common(gradcheck);
    reports(gradcheck);
    gradcheck->add_option("--frames", o.frames, "Temporal window N (1-9)");
    gradcheck->add_option("--input-size", o.input_size, "Square input side in pixels (multiple of 4)");
    gradcheck->add_option("--head", o.head, "Output head")
        ->check(CLI::IsMember({"regression", "binary", "multilabel"}));
    gradcheck->add_option("--epsilon", o.epsilon, "Finite-difference step");
    gradcheck->add_option("--tolerance", o.tolerance, "Maximum relative error");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*simulate) {
            return cmd_simulate(o);
        }
        if (*annotate) {
            return cmd_annotate(o);
        }
        if (*baseline) {
            return cmd_baseline(o);
        }
        if (*train_cmd) {
            return cmd_train(o);
        }
        if (*predict_cmd) {
            return cmd_predict(o);
        }
        if (*eval_cmd) {
            return cmd_eval(o);
        }
        if (*sweep) {
            return cmd_sweep(o);
        }
        if (*gradcheck) {
            return cmd_gradcheck(o);
        }
    } catch (const ConfigError &e) {
        log(fmt::format("error: {}", e.what()));
        return 1;
    } catch (const std::exception &e) {
        log(fmt::format("error: {}", e.what()));
        return 2;
    }
    return 1;
}
