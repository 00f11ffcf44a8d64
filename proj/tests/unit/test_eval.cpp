#include <gtest/gtest.h>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "nearcol/errors.hpp"
#include "nearcol/eval.hpp"

using namespace nearcol;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_line(const std::string &line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) {
        out.push_back(f);
    }
    return out;
}

std::vector<std::shared_ptr<const SceneLog>> tiny_scenes(int count, std::uint64_t seed) {
    SimConfig base;
    base.duration_s = 8.0;
    base.image_width = 16;
    base.image_height = 16;
    base.lidar_points_per_pedestrian = 0;
    return simulate_batch(scene_configs(base, count, seed), 1);
}

std::map<std::string, Split> split_of(const std::vector<std::shared_ptr<const SceneLog>> &scenes) {
    std::vector<std::string> ids;
    for (const auto &s : scenes) {
        ids.push_back(s->id());
    }
    return split_scenes(ids, 0.25, 1);
}

NetworkConfig tiny_network() {
    NetworkConfig cfg;
    cfg.input_height = 16;
    cfg.input_width = 16;
    cfg.hidden_units = 8;
    return cfg;
}

}  // namespace

TEST(RegressionMetrics, Examples) {
    const std::vector<double> p{1.0, 2.0};
    const std::vector<double> t{1.5, 2.5};
    const auto m = regression_metrics(p, t);
    EXPECT_DOUBLE_EQ(m.mae, 0.5);
    EXPECT_DOUBLE_EQ(m.std_abs_err, 0.0);
    EXPECT_EQ(m.n, 2u);
    const auto z = regression_metrics(t, t);
    EXPECT_EQ(z.mae, 0.0);
    EXPECT_EQ(z.std_abs_err, 0.0);
    // Population std: errors {0, 2} -> 1.
    EXPECT_DOUBLE_EQ(regression_metrics(std::vector<double>{0.0, 2.0}, std::vector<double>{0.0, 0.0}).std_abs_err,
                     1.0);
    EXPECT_THROW((void)regression_metrics(p, std::vector<double>{1.0}), ConfigError);
    EXPECT_THROW((void)regression_metrics(std::vector<double>{}, std::vector<double>{}), ConfigError);
}

TEST(RegressionMetrics, MatchesTwoPassOracle) {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0.0, 6.0);
    std::vector<double> p(10000);
    std::vector<double> t(10000);
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = u(rng);
        t[i] = u(rng);
    }
    long double sum = 0.0L;
    for (std::size_t i = 0; i < p.size(); ++i) {
        sum += std::fabs(p[i] - t[i]);
    }
    const double mean = static_cast<double>(sum / p.size());
    long double ss = 0.0L;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const long double d = std::fabs(p[i] - t[i]) - mean;
        ss += d * d;
    }
    const double sd = std::sqrt(static_cast<double>(ss / p.size()));
    const auto m = regression_metrics(p, t);
    EXPECT_NEAR(m.mae, mean, 1e-12);
    EXPECT_NEAR(m.std_abs_err, sd, 1e-12);
}

TEST(IntervalReport, BinAssignment) {
    const std::vector<double> t{2.5, 6.0, 0.0, 1.0};
    const std::vector<double> p{2.0, 5.0, 0.5, 1.0};
    const auto r = interval_report(p, t);
    ASSERT_EQ(r.bins.size(), 6u);
    EXPECT_EQ(r.bins[2].label(), "2-3");
    EXPECT_EQ(r.bins[2].count, 1u);
    EXPECT_DOUBLE_EQ(*r.bins[2].mae, 0.5);
    EXPECT_EQ(r.bins[5].label(), "5-6");
    EXPECT_EQ(r.bins[5].count, 1u);
    EXPECT_DOUBLE_EQ(*r.bins[5].mae, 1.0);
    EXPECT_EQ(r.bins[0].count, 1u);
    EXPECT_EQ(r.bins[1].count, 1u);
    EXPECT_FALSE(r.bins[3].mae.has_value());
    EXPECT_EQ(r.bins[3].count, 0u);
    EXPECT_THROW((void)interval_report(std::vector<double>{1.0}, std::vector<double>{6.5}), ConfigError);
}

TEST(IntervalReport, SingleBinLeavesOthersUndefined) {
    const std::vector<double> t{3.1, 3.5, 3.9};
    const auto r = interval_report(t, t);
    for (std::size_t k = 0; k < r.bins.size(); ++k) {
        EXPECT_EQ(r.bins[k].count, k == 3 ? 3u : 0u);
        EXPECT_EQ(r.bins[k].mae.has_value(), k == 3);
    }
    const auto table = render_report(interval_table(r), ReportFormat::csv);
    EXPECT_NE(table.find("0-1,0,NA"), std::string::npos) << table;
}

TEST(IntervalReport, WeightedBinsReconstructOverallMae) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 6.0);
    std::vector<double> p(10000);
    std::vector<double> t(10000);
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = u(rng);
        t[i] = std::round(u(rng) * 10.0) / 10.0;
    }
    const auto r = interval_report(p, t);
    std::size_t total = 0;
    for (const auto &b : r.bins) {
        total += b.count;
    }
    EXPECT_EQ(total, p.size());
    EXPECT_NEAR(r.weighted_mae(), regression_metrics(p, t).mae, 1e-9);
}

TEST(Classification, PaperConfusionMatrix) {
    ConfusionMatrix cm{634, 36, 53, 2840};
    const auto m = classification_metrics(cm);
    ASSERT_TRUE(m.f1.has_value());
    EXPECT_NEAR(*m.f1, 0.9344, 1e-4);
    EXPECT_NEAR(*m.precision, 634.0 / 687.0, 1e-15);
    EXPECT_NEAR(*m.recall, 634.0 / 670.0, 1e-15);
    EXPECT_NEAR(*m.f1, 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall), 1e-15);
}

TEST(Classification, EdgeCases) {
    ConfusionMatrix perfect;
    for (int i = 0; i < 5; ++i) {
        perfect.add(true, true);
        perfect.add(false, false);
    }
    EXPECT_EQ(perfect.tp, 5u);
    EXPECT_EQ(perfect.tn, 5u);
    EXPECT_EQ(perfect.total(), 10u);
    const auto p = classification_metrics(perfect);
    EXPECT_EQ(*p.precision, 1.0);
    EXPECT_EQ(*p.recall, 1.0);
    EXPECT_EQ(*p.f1, 1.0);

    const auto wrong = classification_metrics(ConfusionMatrix{0, 3, 2, 1});
    EXPECT_EQ(*wrong.precision, 0.0);
    EXPECT_EQ(*wrong.f1, 0.0);

    const auto none = classification_metrics(ConfusionMatrix{0, 0, 0, 4});
    EXPECT_FALSE(none.precision.has_value());
    EXPECT_FALSE(none.recall.has_value());
    EXPECT_FALSE(none.f1.has_value());
}

TEST(Report, EmptyCsvIsHeaderOnly) {
    const Report r{"empty", {"a", "b"}, {}};
    EXPECT_EQ(render_report(r, ReportFormat::csv), "a,b\n");
}

TEST(Report, CellRendering) {
    const Report r{"t", {"name", "n", "x", "missing"}, {{std::string("cv, noisy"), std::int64_t{3}, 0.1234567, {}}}};
    EXPECT_EQ(render_report(r, ReportFormat::csv), "name,n,x,missing\n\"cv, noisy\",3,0.123457,NA\n");
    const auto j = render_report(r, ReportFormat::json);
    EXPECT_NE(j.find("\"schema_version\": 1"), std::string::npos);
    EXPECT_NE(j.find("null"), std::string::npos);
    EXPECT_EQ(report_format_from_string("json"), ReportFormat::json);
    EXPECT_THROW((void)report_format_from_string("xml"), ConfigError);
}

TEST(Report, JsonRoundTripAndCsvFuzz) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1e3, 1e3);
    Report r{"fuzz", {"id", "count", "value", "opt"}, {}};
    for (int i = 0; i < 100; ++i) {
        Cell opt = (i % 7 == 0) ? Cell{} : Cell{u(rng)};
        r.rows.push_back({std::string("row") + std::to_string(i), std::int64_t{i * 13}, u(rng), opt});
    }
    EXPECT_EQ(parse_report_json(render_report(r, ReportFormat::json)), r);

    const auto csv = render_report(r, ReportFormat::csv);
    std::stringstream ss(csv);
    std::string line;
    std::getline(ss, line);
    EXPECT_EQ(line, "id,count,value,opt");
    int rows = 0;
    while (std::getline(ss, line)) {
        const auto f = split_line(line);
        ASSERT_EQ(f.size(), 4u);
        for (std::size_t k = 1; k < 4; ++k) {
            if (f[k] == "NA") {
                continue;
            }
            double v = 0.0;
            const auto res = std::from_chars(f[k].data(), f[k].data() + f[k].size(), v);
            EXPECT_EQ(res.ec, std::errc()) << f[k];
            EXPECT_EQ(res.ptr, f[k].data() + f[k].size()) << f[k];
            EXPECT_TRUE(std::isfinite(v));
        }
        ++rows;
    }
    EXPECT_EQ(rows, 100);
}

TEST(Report, EmitWritesAndReportsPath) {
    const auto dir = fs::temp_directory_path() / "nearcol_test_report";
    fs::remove_all(dir);
    const Report r{"t", {"a"}, {{std::int64_t{1}}}};
    emit_report(r, dir / "sub" / "r.csv", ReportFormat::csv);
    std::ifstream in(dir / "sub" / "r.csv");
    std::string text((std::istreambuf_iterator<char>(in)), {});
    EXPECT_EQ(text, "a\n1\n");
    fs::create_directories(dir / "blocker");
    try {
        emit_report(r, dir / "blocker", ReportFormat::csv);
        FAIL();
    } catch (const IoError &e) {
        EXPECT_NE(std::string(e.what()).find("blocker"), std::string::npos);
    }
}

TEST(Sweep, SingleRowAndDeterministic) {
    const auto scenes = tiny_scenes(4, 3);
    const auto split = split_of(scenes);
    SweepOptions opt;
    opt.network = tiny_network();
    opt.hyper.epochs = 1;
    opt.hyper.learning_rate = 0.01;
    opt.window_stride = 2;
    const auto one = sweep_temporal_windows(scenes, split, {1}, opt);
    ASSERT_EQ(one.rows.size(), 1u);
    EXPECT_EQ(one.best_n, 1);

    const auto a = sweep_temporal_windows(scenes, split, {1, 2, 3}, opt);
    opt.jobs = 3;
    const auto b = sweep_temporal_windows(scenes, split, {1, 2, 3}, opt);
    const auto ra = render_report(sweep_report(a), ReportFormat::csv);
    EXPECT_EQ(ra, render_report(sweep_report(b), ReportFormat::csv));
    EXPECT_EQ(ra.substr(0, ra.find('\n')), "n_frames,mae_s,std_s,n_test,train_seconds");
    ASSERT_EQ(a.rows.size(), 3u);
    double best = 1e9;
    int best_n = 0;
    for (const auto &row : a.rows) {
        EXPECT_GT(row.metrics.n, 0u);
        EXPECT_EQ(row.train_seconds, 0.0);
        if (row.metrics.mae < best) {
            best = row.metrics.mae;
            best_n = row.n_frames;
        }
    }
    EXPECT_EQ(a.best_n, best_n);
}

TEST(Sweep, TrainingFailureNamesN) {
    const auto scenes = tiny_scenes(4, 3);
    SweepOptions opt;
    opt.network = tiny_network();
    opt.hyper.epochs = 3;
    opt.hyper.learning_rate = 1e4;
    try {
        (void)sweep_temporal_windows(scenes, split_of(scenes), {2}, opt);
        FAIL();
    } catch (const TrainingError &e) {
        EXPECT_NE(std::string(e.what()).find("n_frames=2"), std::string::npos) << e.what();
    }
}

TEST(Compare, ConstantAndNoiselessCv) {
    const auto scenes = tiny_scenes(8, 11);
    const auto ds = build_dataset(scenes, split_of(scenes), 6, false);
    const auto rows = compare_methods(ds, nullptr);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].method, "constant");
    EXPECT_EQ(rows[1].method, "constant_velocity");
    EXPECT_EQ(rows[2].kind, "classification");

    std::vector<double> targets;
    for (const auto &s : ds.regression(Split::test)) {
        targets.push_back(*s.t_true);
    }
    double mean = 0.0;
    for (double t : targets) {
        mean += t;
    }
    mean /= targets.size();
    double var = 0.0;
    for (double t : targets) {
        var += (t - mean) * (t - mean);
    }
    EXPECT_LE(rows[0].regression->std_abs_err, std::sqrt(var / targets.size()) + 1e-12);
    EXPECT_LT(rows[1].regression->mae, rows[0].regression->mae);
    EXPECT_LT(rows[1].regression->mae, 0.1);
    EXPECT_EQ(rows[1].n, targets.size());

    const auto report = comparison_report(rows);
    EXPECT_EQ(report.columns.size(), 9u);
    EXPECT_EQ(report.rows.size(), 3u);
}

TEST(Compare, NoiseDegradesCv) {
    const auto scenes = tiny_scenes(8, 11);
    const auto ds = build_dataset(scenes, split_of(scenes), 6, false);
    const auto test = ds.regression(Split::test);
    CompareOptions clean;
    CompareOptions noisy;
    noisy.noise_std = 0.1;
    std::vector<double> truths;
    for (const auto &s : test) {
        truths.push_back(*s.t_true);
    }
    std::size_t subst = 0;
    const auto pc = cv_predictions(test, clean);
    const auto pn = cv_predictions(test, noisy, &subst);
    EXPECT_GE(regression_metrics(pn, truths).mae, 3.0 * regression_metrics(pc, truths).mae);
    for (double v : pn) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 6.0);
    }
}
