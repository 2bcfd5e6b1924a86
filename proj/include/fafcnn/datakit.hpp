#pragma once

// Tabular ingestion and the preprocessing protocol: median imputation,
// row perturbation, 8:1:1 splitting and train-statistics standardization.

#include "fafcnn/common.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace fafcnn::data {

struct RawTable {
    std::vector<std::string> column_names;  // feature columns only
    std::string label_column;
    std::vector<std::vector<std::optional<double>>> cells;  // N rows x d
    std::vector<int> labels;                                // decoded to {0,1}
    std::string positive_label;  // raw label text that decoded to 1

    std::size_t rows() const { return cells.size(); }
    std::size_t cols() const { return column_names.size(); }
};

struct Standardization {
    Vector mean;
    Vector stddev;  // population convention; 0 marks a center-only column
};

struct Dataset {
    std::vector<std::string> column_names;
    Matrix features;       // N x d
    Eigen::VectorXi labels;
    Vector column_medians; // medians of the originally non-missing values
    std::optional<Standardization> standardization;
    IndexList source_rows; // row i came from raw row source_rows[i]

    std::size_t rows() const { return static_cast<std::size_t>(features.rows()); }
    std::size_t cols() const { return static_cast<std::size_t>(features.cols()); }
};

struct PerturbationSpec {
    double delta = 0.0;
    std::uint64_t seed = 0;
};

struct PerturbedCell {
    std::size_t row;  // row index in the shuffled output
    std::size_t column;
    double previous;
};

struct PerturbResult {
    Dataset data;
    std::vector<PerturbedCell> cells;  // one entry per perturbed row
};

struct SplitBundle {
    IndexList train;
    IndexList validation;
    IndexList test;
};

struct LoadOptions {
    /// Raw label text decoded to 1; defaults to the lexicographically larger of two labels.
    std::optional<std::string> positive_label;
};

/// Parses a comma-separated table with a header row. "?", blank and other
/// non-numeric cells become missing.
RawTable load_table(const std::filesystem::path& path, const std::string& label_column,
                    const LoadOptions& options = {});
RawTable parse_table(const std::string& text, const std::string& label_column,
                     const LoadOptions& options = {});

/// Median with the mean-of-middle-two rule for even counts; values are copied.
double median(std::vector<double> values);

Dataset impute_median(const RawTable& raw);
RawTable to_raw(const Dataset& data, const std::string& label_column = "class");

/// Number of rows perturbed for a given delta: round-half-up of delta * n.
std::size_t perturbed_row_count(double delta, std::size_t n);

PerturbResult perturb_logged(const Dataset& data, const PerturbationSpec& spec);
Dataset perturb(const Dataset& data, const PerturbationSpec& spec);

SplitBundle split_8_1_1(std::size_t n, std::uint64_t seed);
inline SplitBundle split_8_1_1(const Dataset& data, std::uint64_t seed) {
    return split_8_1_1(data.rows(), seed);
}

Dataset standardize(const Dataset& data, const SplitBundle& split);

Matrix select_rows(const Matrix& m, const IndexList& rows);
Eigen::VectorXi select_rows(const Eigen::VectorXi& v, const IndexList& rows);

/// Writes features + label column in the input CSV dialect (full round-trip precision).
void write_csv(const Dataset& data, const std::filesystem::path& path,
               const std::string& label_column = "class");

nlohmann::json split_to_json(const SplitBundle& split);
SplitBundle split_from_json(const nlohmann::json& j);

}  // namespace fafcnn::data
