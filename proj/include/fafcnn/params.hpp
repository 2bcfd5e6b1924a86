#pragma once

// Helpers shared by every parameter bundle. A bundle exposes its tensors as
// spans through `tensors()`; optimizers, hashing, checkpointing and the
// gradient audit all work on the flattened view.

#include "fafcnn/common.hpp"

#include <nlohmann/json.hpp>

#include <concepts>

namespace fafcnn {

template <class P>
concept ParameterBundle = requires(P& p, const P& cp) {
    { p.tensors() } -> std::same_as<std::vector<std::span<double>>>;
    { cp.tensors() } -> std::same_as<std::vector<std::span<const double>>>;
};

inline std::span<double> span_of(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<const double> span_of(const Matrix& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
}
inline std::span<double> span_of(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
inline std::span<const double> span_of(const Vector& v) {
    return {v.data(), static_cast<std::size_t>(v.size())};
}

template <ParameterBundle P>
std::size_t parameter_count(const P& p) {
    std::size_t n = 0;
    for (auto t : p.tensors()) {
        n += t.size();
    }
    return n;
}

template <ParameterBundle P>
Vector flatten(const P& p) {
    Vector out(static_cast<Eigen::Index>(parameter_count(p)));
    Eigen::Index k = 0;
    for (auto t : p.tensors()) {
        for (double v : t) {
            out(k++) = v;
        }
    }
    return out;
}

template <ParameterBundle P>
void unflatten(P& p, const Vector& flat) {
    if (static_cast<std::size_t>(flat.size()) != parameter_count(p)) {
        throw std::invalid_argument("unflatten: size mismatch");
    }
    Eigen::Index k = 0;
    for (auto t : p.tensors()) {
        for (double& v : t) {
            v = flat(k++);
        }
    }
}

template <ParameterBundle P>
std::uint64_t parameter_hash(const P& p) {
    std::uint64_t h = 14695981039346656037ull;
    for (auto t : p.tensors()) {
        h = hash_doubles(t, h);
    }
    return h;
}

template <ParameterBundle P>
bool all_finite(const P& p) {
    for (auto t : p.tensors()) {
        for (double v : t) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
    }
    return true;
}

/// Row-major nested arrays; nlohmann writes doubles in shortest round-trip form.
inline nlohmann::json matrix_to_json(const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            row[static_cast<std::size_t>(j)] = m(i, j);
        }
        rows.push_back(std::move(row));
    }
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(rows)}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    Matrix m(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
    const auto& data = j.at("data");
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            m(i, c) = data.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(c)).get<double>();
        }
    }
    return m;
}

inline nlohmann::json vector_to_json(const Vector& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

inline Vector vector_from_json(const nlohmann::json& j) {
    const auto values = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

}  // namespace fafcnn
