#include "nearcol/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "nearcol/baselines.hpp"
#include "nearcol/errors.hpp"

namespace nearcol {

RegressionMetrics regression_metrics(std::span<const double> preds, std::span<const double> truths) {
    if (preds.size() != truths.size()) {
        throw ConfigError(fmt::format("regression_metrics: {} predictions but {} truths", preds.size(), truths.size()));
    }
    if (preds.empty()) {
        throw ConfigError("regression_metrics: no samples");
    }
    const auto n = static_cast<double>(preds.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        sum += std::abs(preds[i] - truths[i]);
    }
    const double mae = sum / n;
    double ss = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double d = std::abs(preds[i] - truths[i]) - mae;
        ss += d * d;
    }
    return {mae, std::sqrt(ss / n), preds.size()};
}

std::string IntervalBin::label() const { return fmt::format("{:g}-{:g}", lo, hi); }

double IntervalReport::weighted_mae() const {
    double sum = 0.0;
    for (const auto &b : bins) {
        if (b.mae) {
            sum += *b.mae * static_cast<double>(b.count);
        }
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

IntervalReport interval_report(std::span<const double> preds, std::span<const double> truths, double bin_width,
                               double max_time) {
    if (preds.size() != truths.size()) {
        throw ConfigError(fmt::format("interval_report: {} predictions but {} truths", preds.size(), truths.size()));
    }
    if (!(bin_width > 0.0) || !(max_time > 0.0)) {
        throw ConfigError("interval_report: bin width and range must be positive");
    }
    const auto n_bins = static_cast<std::size_t>(std::ceil(max_time / bin_width - 1e-12));
    IntervalReport r;
    r.n = preds.size();
    r.bins.resize(n_bins);
    std::vector<double> sums(n_bins, 0.0);
    for (std::size_t k = 0; k < n_bins; ++k) {
        r.bins[k].lo = static_cast<double>(k) * bin_width;
        r.bins[k].hi = std::min(max_time, static_cast<double>(k + 1) * bin_width);
    }
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double t = truths[i];
        if (!(t >= 0.0 && t <= max_time)) {
            throw ConfigError(fmt::format("interval_report: truth {} outside [0, {}]", t, max_time));
        }
        const auto k = std::min(n_bins - 1, static_cast<std::size_t>(t / bin_width));
        ++r.bins[k].count;
        sums[k] += std::abs(preds[i] - t);
    }
    for (std::size_t k = 0; k < n_bins; ++k) {
        if (r.bins[k].count > 0) {
            r.bins[k].mae = sums[k] / static_cast<double>(r.bins[k].count);
        }
    }
    return r;
}

void ConfusionMatrix::add(bool predicted, bool actual) {
    if (predicted) {
        ++(actual ? tp : fp);
    } else {
        ++(actual ? fn : tn);
    }
}

ClassificationMetrics classification_metrics(const ConfusionMatrix &cm) {
    ClassificationMetrics m;
    const auto tp = static_cast<double>(cm.tp);
    if (cm.tp + cm.fp > 0) {
        m.precision = tp / static_cast<double>(cm.tp + cm.fp);
    }
    if (cm.tp + cm.fn > 0) {
        m.recall = tp / static_cast<double>(cm.tp + cm.fn);
    }
    // Same value as 2pr / (p + r) whenever both are defined, and 0 when tp = 0.
    const std::uint64_t denom = 2 * cm.tp + cm.fp + cm.fn;
    if (denom > 0) {
        m.f1 = 2.0 * tp / static_cast<double>(denom);
    }
    return m;
}

// ---------------------------------------------------------------------------------------------
// Reports

ReportFormat report_format_from_string(const std::string &s) {
    if (s == "csv") {
        return ReportFormat::csv;
    }
    if (s == "json") {
        return ReportFormat::json;
    }
    throw ConfigError(fmt::format("unknown report format '{}' (expected csv or json)", s));
}

namespace {

std::string csv_field(const std::string &s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    return out + "\"";
}

std::string csv_cell(const Cell &c) {
    return std::visit(
        [](const auto &v) -> std::string {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, std::monostate>) {
                return "NA";
            } else if constexpr (std::is_same_v<T, std::int64_t>) {
                return fmt::format("{}", v);
            } else if constexpr (std::is_same_v<T, double>) {
                return std::isfinite(v) ? fmt::format("{:.6f}", v) : std::string("NA");
            } else {
                return csv_field(v);
            }
        },
        c);
}

nlohmann::json json_cell(const Cell &c) {
    return std::visit(
        [](const auto &v) -> nlohmann::json {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, std::monostate>) {
                return nullptr;
            } else if constexpr (std::is_same_v<T, double>) {
                return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
            } else {
                return v;
            }
        },
        c);
}

Cell cell_from_json(const nlohmann::json &j) {
    if (j.is_null()) {
        return std::monostate{};
    }
    if (j.is_number_float()) {
        return j.get<double>();
    }
    if (j.is_number_integer()) {
        return j.get<std::int64_t>();
    }
    if (j.is_string()) {
        return j.get<std::string>();
    }
    throw ConfigError(fmt::format("report: unsupported cell {}", j.dump()));
}

Cell opt_cell(const std::optional<double> &v) { return v ? Cell{*v} : Cell{std::monostate{}}; }

Cell count_cell(std::size_t v) { return static_cast<std::int64_t>(v); }

}  // namespace

std::string render_report(const Report &report, ReportFormat format) {
    if (format == ReportFormat::json) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto &row : report.rows) {
            nlohmann::json r = nlohmann::json::array();
            for (const auto &c : row) {
                r.push_back(json_cell(c));
            }
            rows.push_back(std::move(r));
        }
        nlohmann::json j = {
            {"schema_version", 1}, {"title", report.title}, {"columns", report.columns}, {"rows", rows}};
        return j.dump(2) + "\n";
    }
    std::string out;
    for (std::size_t i = 0; i < report.columns.size(); ++i) {
        out += (i ? "," : "") + csv_field(report.columns[i]);
    }
    out += "\n";
    for (const auto &row : report.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            out += (i ? "," : "") + csv_cell(row[i]);
        }
        out += "\n";
    }
    return out;
}

void emit_report(const Report &report, const std::filesystem::path &path, ReportFormat format) {
    for (const auto &row : report.rows) {
        if (row.size() != report.columns.size()) {
            throw ConfigError(fmt::format("report '{}': row has {} cells for {} columns", report.title, row.size(),
                                          report.columns.size()));
        }
    }
    const std::string text = render_report(report, format);
    std::error_code ec;
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary);
    out << text;
    out.close();
    if (!out) {
        throw IoError(fmt::format("cannot write report '{}'", path.string()));
    }
}

Report parse_report_json(const std::string &text) {
    try {
        const auto j = nlohmann::json::parse(text);
        if (j.at("schema_version").get<int>() != 1) {
            throw ConfigError("report: unsupported schema_version");
        }
        Report r;
        r.title = j.at("title").get<std::string>();
        r.columns = j.at("columns").get<std::vector<std::string>>();
        for (const auto &row : j.at("rows")) {
            std::vector<Cell> cells;
            for (const auto &c : row) {
                cells.push_back(cell_from_json(c));
            }
            r.rows.push_back(std::move(cells));
        }
        return r;
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(fmt::format("report: {}", e.what()));
    }
}

Report interval_table(const IntervalReport &report, const std::string &title) {
    Report r{title, {"interval", "n", "mae_s"}, {}};
    for (const auto &b : report.bins) {
        r.rows.push_back({b.label(), count_cell(b.count), opt_cell(b.mae)});
    }
    return r;
}

// ---------------------------------------------------------------------------------------------
// Experiments

RegressionMetrics evaluate_regressor(const Network &net, std::span<const WindowSample> samples) {
    std::vector<double> truths;
    truths.reserve(samples.size());
    for (const auto &s : samples) {
        if (!s.t_true) {
            throw ConfigError("evaluate_regressor: sample without a time target");
        }
        truths.push_back(*s.t_true);
    }
    const auto preds = predict(net, samples);
    return regression_metrics(preds, truths);
}

namespace {

SweepRow run_sweep_cell(const std::vector<std::shared_ptr<const SceneLog>> &scenes,
                        const std::map<std::string, Split> &split, int n, const SweepOptions &options) {
    const auto dataset = build_dataset(scenes, split, n, options.augment, options.radius);
    std::vector<WindowSample> train_set;
    for (auto &s : dataset.regression(Split::train)) {
        if (s.end_frame % options.window_stride == 0) {
            train_set.push_back(std::move(s));
        }
    }
    const auto test_set = dataset.regression(Split::test);
    if (train_set.empty() || test_set.empty()) {
        throw ConfigError(fmt::format("n_frames={}: empty train or test split ({} / {} windows)", n, train_set.size(),
                                      test_set.size()));
    }
    NetworkConfig cfg = options.network;
    cfg.n_frames = n;
    cfg.head = Head::regression;
    cfg.input_height = scenes.front()->config.image_height;
    cfg.input_width = scenes.front()->config.image_width;
    Network net = Network::build(cfg, options.hyper.seed);
    const auto start = std::chrono::steady_clock::now();
    try {
        (void)train(net, train_set, options.hyper);
    } catch (const TrainingError &e) {
        throw TrainingError(fmt::format("n_frames={}: {}", n, e.what()));
    }
    SweepRow row;
    row.n_frames = n;
    row.n_train = train_set.size();
    if (options.record_timing) {
        row.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    const auto preds = predict(net, test_set);
    std::vector<double> truths;
    truths.reserve(test_set.size());
    for (const auto &s : test_set) {
        truths.push_back(*s.t_true);
    }
    row.metrics = regression_metrics(preds, truths);
    row.intervals = interval_report(preds, truths);
    return row;
}

}  // namespace

SweepResult sweep_temporal_windows(const std::vector<std::shared_ptr<const SceneLog>> &scenes,
                                   const std::map<std::string, Split> &split, const std::vector<int> &n_values,
                                   const SweepOptions &options) {
    if (scenes.empty()) {
        throw ConfigError("sweep: no scenes");
    }
    if (n_values.empty()) {
        throw ConfigError("sweep: empty frame range");
    }
    if (options.window_stride < 1) {
        throw ConfigError("sweep: window_stride must be >= 1");
    }
    for (int n : n_values) {
        if (n < kMinWindowFrames || n > kMaxWindowFrames) {
            throw ConfigError(fmt::format("sweep: n_frames must be in [1, 9] (got {})", n));
        }
    }
    options.hyper.validate();

    SweepResult result;
    result.rows.resize(n_values.size());
    const int jobs = std::max(1, std::min<int>(options.jobs, static_cast<int>(n_values.size())));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < n_values.size(); i = next++) {
            try {
                result.rows[i] = run_sweep_cell(scenes, split, n_values[i], options);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) {
                    failure = std::current_exception();
                }
                next = n_values.size();
            }
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) {
            pool.emplace_back(worker);
        }
        for (auto &t : pool) {
            t.join();
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
    const auto best = std::min_element(result.rows.begin(), result.rows.end(),
                                       [](const SweepRow &a, const SweepRow &b) { return a.metrics.mae < b.metrics.mae; });
    result.best_n = best->n_frames;
    return result;
}

Report sweep_report(const SweepResult &result) {
    Report r{"temporal_window_sweep", {"n_frames", "mae_s", "std_s", "n_test", "train_seconds"}, {}};
    for (const auto &row : result.rows) {
        r.rows.push_back({static_cast<std::int64_t>(row.n_frames), row.metrics.mae, row.metrics.std_abs_err,
                          count_cell(row.metrics.n), row.train_seconds});
    }
    return r;
}

std::vector<double> cv_predictions(std::span<const WindowSample> samples, const CompareOptions &options,
                                   std::size_t *substituted) {
    Rng rng = make_stream(options.seed, "cv_noise");
    std::vector<double> preds;
    preds.reserve(samples.size());
    std::size_t missing = 0;
    for (const auto &s : samples) {
        const auto tracks = tracks_from_scene(*s.scene, s.end_frame, options.history_frames, options.noise_std, rng);
        const auto t = cv_predict(tracks, options.radius, options.horizon);
        if (!t) {
            ++missing;
        }
        preds.push_back(t.value_or(options.horizon));
    }
    if (substituted) {
        *substituted = missing;
    }
    return preds;
}

std::vector<MethodRow> compare_methods(const Dataset &dataset, const Network *net, const CompareOptions &options) {
    const auto train_reg = dataset.regression(Split::train);
    const auto test_reg = dataset.regression(Split::test);
    const auto test_cls = dataset.classification(Split::test);
    std::vector<double> truths;
    for (const auto &s : test_reg) {
        truths.push_back(*s.t_true);
    }
    std::vector<MethodRow> rows;

    std::vector<double> train_targets;
    for (const auto &s : train_reg) {
        train_targets.push_back(*s.t_true);
    }
    if (!truths.empty() && !train_targets.empty()) {
        const auto constant = ConstantBaseline::fit(train_targets);
        const std::vector<double> preds(truths.size(), constant.predict());
        rows.push_back({"constant", "regression", regression_metrics(preds, truths), {}, {}, truths.size(), 0});

        MethodRow cv{"constant_velocity", "regression", {}, {}, {}, truths.size(), 0};
        cv.regression = regression_metrics(cv_predictions(test_reg, options, &cv.substituted), truths);
        rows.push_back(cv);

        if (net) {
            rows.push_back({"multistream", "regression", evaluate_regressor(*net, test_reg), {}, {}, truths.size(), 0});
        }
    }
    if (!test_cls.empty()) {
        ConfusionMatrix cm;
        for (const auto &s : test_cls) {
            std::vector<BBox> boxes;
            const auto &frame = s.scene->frames[s.end_frame];
            for (const auto &b : frame.boxes) {
                boxes.push_back(b.box);
            }
            const bool predicted = naive_vertical_classify(boxes, frame.image.height);
            cm.add(predicted, s.targets->binary != 0);
        }
        rows.push_back({"naive_vertical", "classification", {}, classification_metrics(cm), cm, test_cls.size(), 0});
    }
    return rows;
}

Report comparison_report(const std::vector<MethodRow> &rows) {
    Report r{"method_comparison",
             {"method", "kind", "mae_s", "std_s", "precision", "recall", "f1", "n", "substituted"},
             {}};
    for (const auto &m : rows) {
        std::vector<Cell> row{m.method, m.kind};
        if (m.regression) {
            row.emplace_back(m.regression->mae);
            row.emplace_back(m.regression->std_abs_err);
        } else {
            row.emplace_back(std::monostate{});
            row.emplace_back(std::monostate{});
        }
        if (m.classification) {
            row.push_back(opt_cell(m.classification->precision));
            row.push_back(opt_cell(m.classification->recall));
            row.push_back(opt_cell(m.classification->f1));
        } else {
            row.insert(row.end(), 3, std::monostate{});
        }
        row.push_back(count_cell(m.n));
        row.push_back(count_cell(m.substituted));
        r.rows.push_back(std::move(row));
    }
    return r;
}

}  // namespace nearcol
