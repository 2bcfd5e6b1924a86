#include "fafcnn/faim.hpp"

#include "fafcnn/params.hpp"

#include <algorithm>
#include <cmath>

namespace fafcnn::faim {

FaimParams FaimParams::init(std::size_t total_dim, std::size_t p, Rng& rng) {
    constexpr double kStd = 0.1;
    auto gaussian = [&](Eigen::Index rows, Eigen::Index cols) {
        Matrix m(rows, cols);
        // Fill column by column so the draw order is fixed by the storage order.
        for (Eigen::Index c = 0; c < cols; ++c) {
            for (Eigen::Index r = 0; r < rows; ++r) {
                m(r, c) = kStd * rng.normal();
            }
        }
        return m;
    };
    const auto d = static_cast<Eigen::Index>(total_dim);
    const auto k = static_cast<Eigen::Index>(p);
    FaimParams params;
    params.embeddings = gaussian(d, k);
    params.linear = gaussian(d, k);
    params.attn_weight = gaussian(k, k);
    params.attn_bias = Vector::Zero(k);
    params.attn_query = gaussian(k, 1).col(0);
    return params;
}

FaimParams FaimParams::zeros(std::size_t total_dim, std::size_t p) {
    const auto d = static_cast<Eigen::Index>(total_dim);
    const auto k = static_cast<Eigen::Index>(p);
    return {Matrix::Zero(d, k), Matrix::Zero(d, k), Matrix::Zero(k, k), Vector::Zero(k), Vector::Zero(k)};
}

std::vector<std::span<double>> FaimParams::tensors() {
    return {span_of(embeddings), span_of(linear), span_of(attn_weight), span_of(attn_bias),
            span_of(attn_query)};
}

std::vector<std::span<const double>> FaimParams::tensors() const {
    return {span_of(embeddings), span_of(linear), span_of(attn_weight), span_of(attn_bias),
            span_of(attn_query)};
}

SparseMode parse_sparse_mode(std::string_view name) {
    if (name == "literal") {
        return SparseMode::literal;
    }
    if (name == "logit_l1") {
        return SparseMode::logit_l1;
    }
    throw ConfigError("unknown sparse mode '" + std::string(name) + "'");
}

std::string_view to_string(SparseMode mode) {
    return mode == SparseMode::literal ? "literal" : "logit_l1";
}

InteractionSet active_pairs(ConstVectorRef x_aug) {
    InteractionSet set;
    for (Eigen::Index i = 0; i < x_aug.size(); ++i) {
        if (x_aug(i) != 0.0) {
            set.active.push_back(static_cast<std::size_t>(i));
        }
    }
    for (std::size_t a = 0; a < set.active.size(); ++a) {
        for (std::size_t b = a + 1; b < set.active.size(); ++b) {
            const auto i = set.active[a];
            const auto j = set.active[b];
            set.pairs.emplace_back(i, j);
            set.scale.push_back(x_aug(static_cast<Eigen::Index>(i)) * x_aug(static_cast<Eigen::Index>(j)));
        }
    }
    return set;
}

namespace {

void softmax_into(AttentionWeights& att) {
    const double top = *std::max_element(att.logits.begin(), att.logits.end());
    att.weights.resize(att.logits.size());
    double total = 0.0;
    for (std::size_t k = 0; k < att.logits.size(); ++k) {
        att.weights[k] = std::exp(att.logits[k] - top);
        total += att.weights[k];
    }
    for (auto& w : att.weights) {
        w /= total;
    }
}

SampleTrace trace_sample(const FaimParams& params, ConstVectorRef x_aug,
                         Eigen::Ref<RowVector, 0, Eigen::InnerStride<>> h_aug) {
    SampleTrace trace;
    trace.set = active_pairs(x_aug);
    h_aug.setZero();
    for (auto i : trace.set.active) {
        h_aug += x_aug(static_cast<Eigen::Index>(i)) * params.linear.row(static_cast<Eigen::Index>(i));
    }
    const auto n_pairs = static_cast<Eigen::Index>(trace.set.pairs.size());
    if (n_pairs == 0) {
        return trace;
    }
    const auto p = static_cast<Eigen::Index>(params.dim());
    trace.products.resize(n_pairs, p);
    trace.hidden.resize(n_pairs, p);
    trace.attention.logits.resize(trace.set.pairs.size());
    for (Eigen::Index k = 0; k < n_pairs; ++k) {
        const auto [i, j] = trace.set.pairs[static_cast<std::size_t>(k)];
        trace.products.row(k) = params.embeddings.row(static_cast<Eigen::Index>(i)).cwiseProduct(
            params.embeddings.row(static_cast<Eigen::Index>(j)));
        const double s = trace.set.scale[static_cast<std::size_t>(k)];
        trace.hidden.row(k) = (params.attn_weight * (s * trace.products.row(k).transpose()) + params.attn_bias)
                                  .transpose();
        trace.attention.logits[static_cast<std::size_t>(k)] =
            params.attn_query.dot(trace.hidden.row(k).cwiseMax(0.0).transpose());
    }
    softmax_into(trace.attention);
    for (Eigen::Index k = 0; k < n_pairs; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        h_aug += trace.attention.weights[kk] * trace.set.scale[kk] * trace.products.row(k);
    }
    return trace;
}

}  // namespace

AttentionWeights attention_forward(const FaimParams& params, const InteractionSet& set) {
    if (set.pairs.empty()) {
        throw std::invalid_argument("attention_forward: no active pairs");
    }
    AttentionWeights att;
    for (std::size_t k = 0; k < set.pairs.size(); ++k) {
        const auto [i, j] = set.pairs[k];
        const Vector z = set.scale[k] * params.embeddings.row(static_cast<Eigen::Index>(i))
                                            .cwiseProduct(params.embeddings.row(static_cast<Eigen::Index>(j)))
                                            .transpose();
        const Vector hidden = params.attn_weight * z + params.attn_bias;
        att.logits.push_back(params.attn_query.dot(hidden.cwiseMax(0.0)));
    }
    softmax_into(att);
    return att;
}

Vector faim_forward(const FaimParams& params, ConstVectorRef x_aug) {
    RowVector h(static_cast<Eigen::Index>(params.dim()));
    trace_sample(params, x_aug, h);
    return h.transpose();
}

double sparse_penalty(const AttentionWeights& weights, SparseMode mode) {
    if (mode == SparseMode::literal) {
        // Softmax outputs are non-negative and sum to one, so the L1 norm is
        // exactly 1 for any sample with a pair; summing would only add rounding.
        return weights.weights.empty() ? 0.0 : 1.0;
    }
    double total = 0.0;
    for (double v : weights.logits) {
        total += std::abs(v);
    }
    return total;
}

double sparse_penalty(std::span<const AttentionWeights> batch, SparseMode mode) {
    double total = 0.0;
    for (const auto& w : batch) {
        total += sparse_penalty(w, mode);
    }
    return total;
}

BatchForward faim_forward_batch(const FaimParams& params, const Matrix& x_aug) {
    if (static_cast<std::size_t>(x_aug.cols()) != params.input_dim()) {
        throw std::invalid_argument("faim_forward_batch: input width does not match embedding table");
    }
    BatchForward out;
    out.h_aug.resize(x_aug.rows(), static_cast<Eigen::Index>(params.dim()));
    out.samples.reserve(static_cast<std::size_t>(x_aug.rows()));
    for (Eigen::Index n = 0; n < x_aug.rows(); ++n) {
        out.samples.push_back(trace_sample(params, x_aug.row(n).transpose(), out.h_aug.row(n)));
    }
    return out;
}

double sparse_penalty(const BatchForward& forward, SparseMode mode) {
    double total = 0.0;
    for (const auto& s : forward.samples) {
        total += sparse_penalty(s.attention, mode);
    }
    return total;
}

FaimParams faim_gradients(const FaimParams& params, const Matrix& x_aug, const BatchForward& forward,
                          const Matrix& upstream, double penalty_weight, SparseMode mode) {
    FaimParams grad = FaimParams::zeros(params.input_dim(), params.dim());
    const auto p = static_cast<Eigen::Index>(params.dim());
    std::vector<double> d_weight;
    std::vector<double> d_logit;
    for (Eigen::Index n = 0; n < x_aug.rows(); ++n) {
        const auto& trace = forward.samples[static_cast<std::size_t>(n)];
        const RowVector g = upstream.row(n);
        for (auto i : trace.set.active) {
            const auto ii = static_cast<Eigen::Index>(i);
            grad.linear.row(ii) += x_aug(n, ii) * g;
        }
        const std::size_t n_pairs = trace.set.pairs.size();
        if (n_pairs == 0) {
            continue;
        }
        const auto& a = trace.attention.weights;
        const auto& logits = trace.attention.logits;
        d_weight.assign(n_pairs, 0.0);
        for (std::size_t k = 0; k < n_pairs; ++k) {
            d_weight[k] = trace.set.scale[k] * trace.products.row(static_cast<Eigen::Index>(k)).dot(g);
        }
        // The literal penalty is constant (see sparse_penalty), so it adds nothing here.
        d_logit.assign(n_pairs, 0.0);
        for (std::size_t k = 0; k < n_pairs; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n_pairs; ++j) {
                acc += a[j] * (d_weight[k] - d_weight[j]);
            }
            d_logit[k] = a[k] * acc;
            if (mode == SparseMode::logit_l1) {
                d_logit[k] += penalty_weight * l1_sign(logits[k]);
            }
        }
        for (std::size_t k = 0; k < n_pairs; ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            const auto [i, j] = trace.set.pairs[k];
            const auto ii = static_cast<Eigen::Index>(i);
            const auto jj = static_cast<Eigen::Index>(j);
            const double s = trace.set.scale[k];
            const Vector hidden = trace.hidden.row(kk).transpose();
            Vector d_hidden(p);
            for (Eigen::Index c = 0; c < p; ++c) {
                d_hidden(c) = hidden(c) > 0.0 ? d_logit[k] * params.attn_query(c) : 0.0;
            }
            grad.attn_query += d_logit[k] * hidden.cwiseMax(0.0);
            grad.attn_weight += d_hidden * (s * trace.products.row(kk));
            grad.attn_bias += d_hidden;
            const RowVector d_product =
                s * (params.attn_weight.transpose() * d_hidden).transpose() + a[k] * s * g;
            grad.embeddings.row(ii) += d_product.cwiseProduct(params.embeddings.row(jj));
            grad.embeddings.row(jj) += d_product.cwiseProduct(params.embeddings.row(ii));
        }
    }
    return grad;
}

nlohmann::json to_json(const FaimParams& params) {
    return {{"embeddings", matrix_to_json(params.embeddings)},
            {"linear", matrix_to_json(params.linear)},
            {"attn_weight", matrix_to_json(params.attn_weight)},
            {"attn_bias", vector_to_json(params.attn_bias)},
            {"attn_query", vector_to_json(params.attn_query)}};
}

FaimParams faim_from_json(const nlohmann::json& j) {
    return {matrix_from_json(j.at("embeddings")), matrix_from_json(j.at("linear")),
            matrix_from_json(j.at("attn_weight")), vector_from_json(j.at("attn_bias")),
            vector_from_json(j.at("attn_query"))};
}

}  // namespace fafcnn::faim
