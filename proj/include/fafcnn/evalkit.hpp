#pragma once

// Binary classification metrics with class 1 as the positive class, seed
// aggregation, and a one-tailed Welch t-test.

#include <nlohmann/json_fwd.hpp>

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fafcnn::eval {

struct ConfusionMatrix {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t tn = 0;
    std::size_t fn = 0;

    std::size_t total() const { return tp + fp + tn + fn; }
    /// The same counts seen with class 0 as the positive class.
    ConfusionMatrix swapped() const { return {tn, fn, tp, fp}; }
    bool operator==(const ConfusionMatrix&) const = default;
};

/// Throws std::invalid_argument on empty input, length mismatch or a
/// value outside {0, 1}.
ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels);
ConfusionMatrix confusion(const Eigen::VectorXi& predictions, const Eigen::VectorXi& labels);

/// nullopt marks a 0/0 metric.
using Metric = std::optional<double>;

inline constexpr std::size_t kMetricCount = 4;
/// Fixed column order of every table.
inline constexpr std::array<std::string_view, kMetricCount> kMetricNames = {"accuracy", "sensitivity",
                                                                            "specificity", "precision"};

struct MetricReport {
    ConfusionMatrix cm;
    Metric accuracy;
    Metric sensitivity;
    Metric specificity;
    Metric precision;

    /// Metric by column index in kMetricNames order.
    Metric at(std::size_t k) const;
};

MetricReport metrics(const ConfusionMatrix& cm);

struct MetricSummary {
    std::optional<double> mean;
    std::optional<double> stddev;  // n - 1 denominator; undefined for a single value
    std::size_t count = 0;         // runs where the metric was defined
};

struct RunAggregate {
    std::vector<MetricReport> runs;
    std::array<MetricSummary, kMetricCount> summary;
    std::size_t n_runs = 0;
};

/// Throws std::invalid_argument for an empty list or a metric undefined in every run.
RunAggregate aggregate(std::span<const MetricReport> reports);

struct WelchResult {
    double t = 0.0;
    double dof = 0.0;
    double p = 0.0;  // P(T >= t): evidence that mean(a) > mean(b)
};

/// Throws std::invalid_argument if either sample has fewer than two values or
/// both variances are zero.
WelchResult welch_t_one_tailed(std::span<const double> a, std::span<const double> b);

nlohmann::json to_json(const ConfusionMatrix& cm);
nlohmann::json to_json(const MetricReport& report);
/// Per-run entries are labelled with the given ids (seeds); ids may be empty.
nlohmann::json to_json(const RunAggregate& agg, std::span<const std::string> run_ids = {});

/// Header "run,accuracy,...,tp,fp,tn,fn", one row per run, then "mean" and
/// "std" rows. Undefined values are written as empty cells.
void write_table(const RunAggregate& agg, std::span<const std::string> run_ids, const std::filesystem::path& path);

/// "0.9712 ± 0.0123" style cell used in printed summaries.
std::string format_mean_std(const MetricSummary& s, int digits = 4);

}  // namespace fafcnn::eval
