#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "nearcol/annotate.hpp"
#include "nearcol/neural.hpp"

namespace nearcol {

struct RegressionMetrics {
    double mae = 0.0;
    double std_abs_err = 0.0;  // population standard deviation of the absolute errors
    std::size_t n = 0;
};

/// Throws ConfigError on empty input or a length mismatch.
[[nodiscard]] RegressionMetrics regression_metrics(std::span<const double> preds, std::span<const double> truths);

struct IntervalBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    std::optional<double> mae;  // undefined for an empty bin

    [[nodiscard]] std::string label() const;
};

struct IntervalReport {
    std::vector<IntervalBin> bins;
    std::size_t n = 0;

    /// Count-weighted mean of the per-bin MAEs (equals the overall MAE).
    [[nodiscard]] double weighted_mae() const;
};

/// Bins pairs by truth into [k, k+1) for k = 0..5, with 6.0 joining the last bin.
/// Throws ConfigError on a length mismatch or a truth outside [0, 6].
[[nodiscard]] IntervalReport interval_report(std::span<const double> preds, std::span<const double> truths,
                                             double bin_width = 1.0, double max_time = 6.0);

struct ConfusionMatrix {
    std::uint64_t tp = 0;
    std::uint64_t fn = 0;
    std::uint64_t fp = 0;
    std::uint64_t tn = 0;

    void add(bool predicted, bool actual);
    [[nodiscard]] std::uint64_t total() const { return tp + fn + fp + tn; }
    friend bool operator==(const ConfusionMatrix &, const ConfusionMatrix &) = default;
};

struct ClassificationMetrics {
    std::optional<double> precision;  // undefined when tp + fp = 0
    std::optional<double> recall;     // undefined when tp + fn = 0
    std::optional<double> f1;         // 2tp / (2tp + fp + fn); undefined when that denominator is 0
};

[[nodiscard]] ClassificationMetrics classification_metrics(const ConfusionMatrix &cm);

// ---------------------------------------------------------------------------------------------
// Reports

/// Report cell: undefined, integer, real or text.
using Cell = std::variant<std::monostate, std::int64_t, double, std::string>;

struct Report {
    std::string title;
    std::vector<std::string> columns;
    std::vector<std::vector<Cell>> rows;

    friend bool operator==(const Report &, const Report &) = default;
};

enum class ReportFormat { csv, json };

[[nodiscard]] ReportFormat report_format_from_string(const std::string &s);

/// CSV: header then one line per row, reals with 6 decimals, undefined cells as "NA".
/// JSON: {"schema_version": 1, "title", "columns", "rows"} with undefined cells as null.
[[nodiscard]] std::string render_report(const Report &report, ReportFormat format);
/// Writes the rendered report; IoError names the path on failure.
void emit_report(const Report &report, const std::filesystem::path &path, ReportFormat format);
/// Inverse of the JSON rendering.
[[nodiscard]] Report parse_report_json(const std::string &text);

[[nodiscard]] Report interval_table(const IntervalReport &report, const std::string &title = "error_by_interval");

// ---------------------------------------------------------------------------------------------
// Experiments

/// Regression test MAE of a trained network over windows with a time target.
[[nodiscard]] RegressionMetrics evaluate_regressor(const Network &net, std::span<const WindowSample> samples);

struct SweepOptions {
    NetworkConfig network;  // n_frames and head are overridden per row
    Hyperparams hyper;
    bool augment = true;
    /// Train on windows whose end frame is a multiple of this stride (1 = all windows).
    int window_stride = 1;
    int jobs = 1;
    /// Measure wall-clock training time; off by default so reports stay byte-identical.
    bool record_timing = false;
    double radius = kNearCollisionRadius;
};

struct SweepRow {
    int n_frames = 0;
    RegressionMetrics metrics;
    IntervalReport intervals;  // test error by ground-truth time
    double train_seconds = 0.0;
    std::size_t n_train = 0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    int best_n = 0;  // argmin of the test MAE, first on ties
};

/// For each N: rebuilds the dataset on the fixed split, trains a fresh seeded regressor and
/// evaluates it on the held-out scenes. Training failures are rethrown naming the N.
[[nodiscard]] SweepResult sweep_temporal_windows(const std::vector<std::shared_ptr<const SceneLog>> &scenes,
                                                 const std::map<std::string, Split> &split,
                                                 const std::vector<int> &n_values, const SweepOptions &options);

/// Columns n_frames, mae_s, std_s, n_test, train_seconds.
[[nodiscard]] Report sweep_report(const SweepResult &result);

struct CompareOptions {
    int history_frames = 5;  // constant-velocity track length
    double noise_std = 0.0;  // Gaussian position noise on the tracks
    std::uint64_t seed = 42;
    double radius = kNearCollisionRadius;
    double horizon = 6.0;
};

struct MethodRow {
    std::string method;
    std::string kind;  // "regression" or "classification"
    std::optional<RegressionMetrics> regression;
    std::optional<ClassificationMetrics> classification;
    std::optional<ConfusionMatrix> confusion;
    std::size_t n = 0;
    std::size_t substituted = 0;  // CV windows with no predicted collision, scored as the horizon
};

/// Constant and constant-velocity regression rows and the naive vertical F1 row on the test
/// split of `dataset`, plus a multi-stream row when `net` is given.
[[nodiscard]] std::vector<MethodRow> compare_methods(const Dataset &dataset, const Network *net,
                                                     const CompareOptions &options = {});

/// CV baseline predictions for windows with a time target; no-collision outputs become the horizon.
/// `substituted` receives the number of such windows.
[[nodiscard]] std::vector<double> cv_predictions(std::span<const WindowSample> samples, const CompareOptions &options,
                                                 std::size_t *substituted = nullptr);

/// Columns method, kind, mae_s, std_s, precision, recall, f1, n, substituted.
[[nodiscard]] Report comparison_report(const std::vector<MethodRow> &rows);

}  // namespace nearcol
