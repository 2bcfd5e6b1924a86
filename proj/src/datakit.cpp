#include "fafcnn/datakit.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

namespace fafcnn::data {
namespace {

std::string trim(std::string_view s) {
    auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string_view::npos) {
        return {};
    }
    auto end = s.find_last_not_of(" \t\r\n");
    s = s.substr(begin, end - begin + 1);
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') {
        s = s.substr(1, s.size() - 2);
    }
    return std::string(s);
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (char c : line) {
        if (c == '"') {
            quoted = !quoted;
            field.push_back(c);
        } else if (c == ',' && !quoted) {
            out.push_back(trim(field));
            field.clear();
        } else {
            field.push_back(c);
        }
    }
    out.push_back(trim(field));
    return out;
}

std::optional<double> parse_number(const std::string& s) {
    if (s.empty() || s == "?") {
        return std::nullopt;
    }
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
        return std::nullopt;
    }
    return v;
}

// Numeric labels must already be 0/1; textual labels are mapped with the
// larger (or configured) value as the positive class.
std::vector<int> decode_labels(const std::vector<std::string>& raw, const LoadOptions& options,
                               std::string& positive) {
    std::set<std::string> distinct(raw.begin(), raw.end());
    if (distinct.count("") || distinct.count("?")) {
        throw DataError("label column contains missing values");
    }
    if (distinct.size() > 2) {
        throw DataError("label column is not binary (" + std::to_string(distinct.size()) +
                        " distinct values)");
    }
    const bool all_numeric = std::all_of(distinct.begin(), distinct.end(),
                                         [](const std::string& s) { return parse_number(s).has_value(); });
    std::vector<int> out;
    out.reserve(raw.size());
    if (all_numeric && !options.positive_label) {
        for (const auto& s : raw) {
            const double v = *parse_number(s);
            if (v != 0.0 && v != 1.0) {
                throw DataError("numeric label '" + s + "' is not in {0,1}");
            }
            out.push_back(static_cast<int>(v));
        }
        positive = "1";
        return out;
    }
    if (options.positive_label) {
        positive = *options.positive_label;
        if (!distinct.count(positive)) {
            throw DataError("positive label '" + positive + "' does not occur in the label column");
        }
    } else {
        positive = *distinct.rbegin();
    }
    for (const auto& s : raw) {
        out.push_back(s == positive ? 1 : 0);
    }
    return out;
}

}  // namespace

RawTable parse_table(const std::string& text, const std::string& label_column,
                     const LoadOptions& options) {
    std::istringstream in(text);
    std::string line;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        if (!trim(line).empty()) {
            header = split_fields(line);
            break;
        }
    }
    if (header.empty()) {
        throw DataError("empty table");
    }
    const auto label_it = std::find(header.begin(), header.end(), label_column);
    if (label_it == header.end()) {
        throw DataError("label column '" + label_column + "' not found");
    }
    const auto label_pos = static_cast<std::size_t>(label_it - header.begin());

    RawTable table;
    table.label_column = label_column;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (c != label_pos) {
            table.column_names.push_back(header[c]);
        }
    }
    std::vector<std::string> raw_labels;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        auto fields = split_fields(line);
        if (fields.size() != header.size()) {
            throw DataError("line " + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " fields, got " +
                            std::to_string(fields.size()));
        }
        std::vector<std::optional<double>> row;
        row.reserve(header.size() - 1);
        for (std::size_t c = 0; c < fields.size(); ++c) {
            if (c == label_pos) {
                raw_labels.push_back(fields[c]);
            } else {
                row.push_back(parse_number(fields[c]));
            }
        }
        table.cells.push_back(std::move(row));
    }
    if (table.cells.empty()) {
        throw DataError("empty table");
    }
    table.labels = decode_labels(raw_labels, options, table.positive_label);
    return table;
}

RawTable load_table(const std::filesystem::path& path, const std::string& label_column,
                    const LoadOptions& options) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_table(buffer.str(), label_column, options);
}

double median(std::vector<double> values) {
    if (values.empty()) {
        throw DataError("median of an empty set");
    }
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) {
        return values[n / 2];
    }
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

Dataset impute_median(const RawTable& raw) {
    const std::size_t n = raw.rows();
    const std::size_t d = raw.cols();
    Dataset out;
    out.column_names = raw.column_names;
    out.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    out.labels.resize(static_cast<Eigen::Index>(n));
    out.column_medians.resize(static_cast<Eigen::Index>(d));
    for (std::size_t j = 0; j < d; ++j) {
        std::vector<double> present;
        for (std::size_t i = 0; i < n; ++i) {
            if (raw.cells[i][j]) {
                present.push_back(*raw.cells[i][j]);
            }
        }
        if (present.empty()) {
            throw DataError("column '" + raw.column_names[j] + "' has no observed values");
        }
        const double med = median(std::move(present));
        out.column_medians(static_cast<Eigen::Index>(j)) = med;
        for (std::size_t i = 0; i < n; ++i) {
            out.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                raw.cells[i][j].value_or(med);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        out.labels(static_cast<Eigen::Index>(i)) = raw.labels[i];
    }
    out.source_rows.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.source_rows[i] = i;
    }
    return out;
}

RawTable to_raw(const Dataset& data, const std::string& label_column) {
    RawTable raw;
    raw.column_names = data.column_names;
    raw.label_column = label_column;
    raw.positive_label = "1";
    for (Eigen::Index i = 0; i < data.features.rows(); ++i) {
        std::vector<std::optional<double>> row;
        for (Eigen::Index j = 0; j < data.features.cols(); ++j) {
            row.emplace_back(data.features(i, j));
        }
        raw.cells.push_back(std::move(row));
        raw.labels.push_back(data.labels(i));
    }
    return raw;
}

std::size_t perturbed_row_count(double delta, std::size_t n) {
    if (!(delta >= 0.0 && delta <= 1.0)) {
        throw ConfigError("perturbation delta must lie in [0, 1]");
    }
    const auto count = static_cast<std::size_t>(std::floor(delta * static_cast<double>(n) + 0.5));
    return std::min(count, n);
}

PerturbResult perturb_logged(const Dataset& data, const PerturbationSpec& spec) {
    const std::size_t n = data.rows();
    const std::size_t d = data.cols();
    const std::size_t count = perturbed_row_count(spec.delta, n);

    Rng rng(spec.seed);
    IndexList order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    rng.shuffle(order);

    PerturbResult result;
    Dataset& out = result.data;
    out.column_names = data.column_names;
    out.column_medians = data.column_medians;
    out.features.resize(data.features.rows(), data.features.cols());
    out.labels.resize(data.labels.size());
    out.source_rows.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto src = static_cast<Eigen::Index>(order[i]);
        out.features.row(static_cast<Eigen::Index>(i)) = data.features.row(src);
        out.labels(static_cast<Eigen::Index>(i)) = data.labels(src);
        out.source_rows[i] = data.source_rows.empty() ? order[i] : data.source_rows[order[i]];
    }
    if (d == 0) {
        return result;
    }
    for (std::size_t i = 0; i < count; ++i) {
        const auto col = static_cast<Eigen::Index>(rng.below(d));
        const auto row = static_cast<Eigen::Index>(i);
        result.cells.push_back({i, static_cast<std::size_t>(col), out.features(row, col)});
        out.features(row, col) = data.column_medians(col);
    }
    return result;
}

Dataset perturb(const Dataset& data, const PerturbationSpec& spec) {
    return perturb_logged(data, spec).data;
}

SplitBundle split_8_1_1(std::size_t n, std::uint64_t seed) {
    if (n < 10) {
        throw DataError("split_8_1_1 needs at least 10 rows, got " + std::to_string(n));
    }
    const IndexList order = shuffled_indices(n, seed);
    const std::size_t n_train = (8 * n) / 10;
    const std::size_t n_val = n / 10;
    SplitBundle split;
    split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                            order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    split.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    return split;
}

Dataset standardize(const Dataset& data, const SplitBundle& split) {
    if (split.train.empty()) {
        throw DataError("standardize: empty training split");
    }
    const Matrix train = select_rows(data.features, split.train);
    Standardization stats;
    stats.mean = train.colwise().mean().transpose();
    stats.stddev = ((train.rowwise() - stats.mean.transpose()).array().square().colwise().mean())
                       .sqrt()
                       .transpose();
    Dataset out = data;
    for (Eigen::Index j = 0; j < out.features.cols(); ++j) {
        out.features.col(j).array() -= stats.mean(j);
        if (stats.stddev(j) > 0.0) {
            out.features.col(j) /= stats.stddev(j);
        }
    }
    out.standardization = std::move(stats);
    return out;
}

Matrix select_rows(const Matrix& m, const IndexList& rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
    }
    return out;
}

Eigen::VectorXi select_rows(const Eigen::VectorXi& v, const IndexList& rows) {
    Eigen::VectorXi out(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out(static_cast<Eigen::Index>(i)) = v(static_cast<Eigen::Index>(rows[i]));
    }
    return out;
}

void write_csv(const Dataset& data, const std::filesystem::path& path,
               const std::string& label_column) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const auto& name : data.column_names) {
        out << name << ',';
    }
    out << label_column << '\n';
    for (Eigen::Index i = 0; i < data.features.rows(); ++i) {
        for (Eigen::Index j = 0; j < data.features.cols(); ++j) {
            out << data.features(i, j) << ',';
        }
        out << data.labels(i) << '\n';
    }
}

nlohmann::json split_to_json(const SplitBundle& split) {
    return {{"train", split.train}, {"validation", split.validation}, {"test", split.test}};
}

SplitBundle split_from_json(const nlohmann::json& j) {
    SplitBundle s;
    j.at("train").get_to(s.train);
    j.at("validation").get_to(s.validation);
    j.at("test").get_to(s.test);
    return s;
}

}  // namespace fafcnn::data
