#include "fafcnn/evalkit.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace fafcnn::eval {

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) {
        throw std::invalid_argument("confusion: predictions and labels differ in length");
    }
    if (predictions.empty()) {
        throw std::invalid_argument("confusion: no samples");
    }
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int p = predictions[i];
        const int y = labels[i];
        if ((p != 0 && p != 1) || (y != 0 && y != 1)) {
            throw std::invalid_argument("confusion: values must be 0 or 1");
        }
        if (y == 1) {
            ++(p == 1 ? cm.tp : cm.fn);
        } else {
            ++(p == 1 ? cm.fp : cm.tn);
        }
    }
    return cm;
}

ConfusionMatrix confusion(const Eigen::VectorXi& predictions, const Eigen::VectorXi& labels) {
    return confusion(std::span<const int>(predictions.data(), static_cast<std::size_t>(predictions.size())),
                     std::span<const int>(labels.data(), static_cast<std::size_t>(labels.size())));
}

Metric MetricReport::at(std::size_t k) const {
    switch (k) {
        case 0: return accuracy;
        case 1: return sensitivity;
        case 2: return specificity;
        case 3: return precision;
        default: break;
    }
    throw std::out_of_range("MetricReport::at");
}

namespace {

Metric ratio(std::size_t num, std::size_t den) {
    if (den == 0) {
        return std::nullopt;
    }
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricReport metrics(const ConfusionMatrix& cm) {
    MetricReport r;
    r.cm = cm;
    r.accuracy = ratio(cm.tp + cm.tn, cm.total());
    r.sensitivity = ratio(cm.tp, cm.tp + cm.fn);
    r.specificity = ratio(cm.tn, cm.tn + cm.fp);
    r.precision = ratio(cm.tp, cm.tp + cm.fp);
    return r;
}

RunAggregate aggregate(std::span<const MetricReport> reports) {
    if (reports.empty()) {
        throw std::invalid_argument("aggregate: no reports");
    }
    RunAggregate agg;
    agg.runs.assign(reports.begin(), reports.end());
    agg.n_runs = reports.size();
    for (std::size_t k = 0; k < kMetricCount; ++k) {
        std::vector<double> values;
        for (const auto& r : reports) {
            if (auto v = r.at(k)) {
                values.push_back(*v);
            }
        }
        if (values.empty()) {
            throw std::invalid_argument("aggregate: " + std::string(kMetricNames[k]) + " undefined in every run");
        }
        auto& s = agg.summary[k];
        s.count = values.size();
        double sum = 0.0;
        for (double v : values) {
            sum += v;
        }
        const double mean = sum / static_cast<double>(values.size());
        s.mean = mean;
        if (values.size() > 1) {
            double ss = 0.0;
            for (double v : values) {
                ss += (v - mean) * (v - mean);
            }
            s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
        }
    }
    return agg;
}

WelchResult welch_t_one_tailed(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) {
        throw std::invalid_argument("welch_t_one_tailed: each sample needs at least two values");
    }
    auto moments = [](std::span<const double> s) {
        double mean = 0.0;
        for (double v : s) {
            mean += v;
        }
        mean /= static_cast<double>(s.size());
        double ss = 0.0;
        for (double v : s) {
            ss += (v - mean) * (v - mean);
        }
        return std::pair{mean, ss / static_cast<double>(s.size() - 1)};
    };
    const auto [mean_a, var_a] = moments(a);
    const auto [mean_b, var_b] = moments(b);
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    const double va = var_a / na;
    const double vb = var_b / nb;
    if (!(va + vb > 0.0)) {
        throw std::invalid_argument("welch_t_one_tailed: both samples have zero variance");
    }
    WelchResult r;
    r.t = (mean_a - mean_b) / std::sqrt(va + vb);
    r.dof = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    const boost::math::students_t dist(r.dof);
    r.p = boost::math::cdf(boost::math::complement(dist, r.t));
    return r;
}

nlohmann::json to_json(const ConfusionMatrix& cm) {
    return {{"tp", cm.tp}, {"fp", cm.fp}, {"tn", cm.tn}, {"fn", cm.fn}};
}

namespace {

nlohmann::json metric_json(const Metric& m) { return m ? nlohmann::json(*m) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json to_json(const MetricReport& report) {
    nlohmann::json j = {{"confusion", to_json(report.cm)}};
    for (std::size_t k = 0; k < kMetricCount; ++k) {
        j[std::string(kMetricNames[k])] = metric_json(report.at(k));
    }
    return j;
}

nlohmann::json to_json(const RunAggregate& agg, std::span<const std::string> run_ids) {
    nlohmann::json runs = nlohmann::json::array();
    for (std::size_t i = 0; i < agg.runs.size(); ++i) {
        auto entry = to_json(agg.runs[i]);
        if (i < run_ids.size()) {
            entry["run"] = run_ids[i];
        }
        runs.push_back(std::move(entry));
    }
    nlohmann::json summary = nlohmann::json::object();
    for (std::size_t k = 0; k < kMetricCount; ++k) {
        const auto& s = agg.summary[k];
        summary[std::string(kMetricNames[k])] = {
            {"mean", metric_json(s.mean)}, {"std", metric_json(s.stddev)}, {"count", s.count}};
    }
    return {{"n_runs", agg.n_runs}, {"runs", std::move(runs)}, {"summary", std::move(summary)}};
}

void write_table(const RunAggregate& agg, std::span<const std::string> run_ids, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << std::setprecision(17);
    auto cell = [&](const Metric& m) {
        out << ',';
        if (m) {
            out << *m;
        }
    };
    out << "run";
    for (auto name : kMetricNames) {
        out << ',' << name;
    }
    out << ",tp,fp,tn,fn\n";
    for (std::size_t i = 0; i < agg.runs.size(); ++i) {
        const auto& r = agg.runs[i];
        out << (i < run_ids.size() ? run_ids[i] : std::to_string(i));
        for (std::size_t k = 0; k < kMetricCount; ++k) {
            cell(r.at(k));
        }
        out << ',' << r.cm.tp << ',' << r.cm.fp << ',' << r.cm.tn << ',' << r.cm.fn << '\n';
    }
    out << "mean";
    for (const auto& s : agg.summary) {
        cell(s.mean);
    }
    out << ",,,,\nstd";
    for (const auto& s : agg.summary) {
        cell(s.stddev);
    }
    out << ",,,,\n";
}

std::string format_mean_std(const MetricSummary& s, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits);
    if (s.mean) {
        os << *s.mean;
    } else {
        os << "n/a";
    }
    os << " +/- ";
    if (s.stddev) {
        os << *s.stddev;
    } else {
        os << "n/a";
    }
    return os.str();
}

}  // namespace fafcnn::eval
