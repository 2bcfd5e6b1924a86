#pragma once

// Feature-aware interaction module: every augmented dimension i owns an
// embedding h_i and a linear weight w_i (both p-vectors). A sample's
// representation is
//
//   h_aug = sum_i w_i x_i + sum_{i<j} a_ij (h_i * h_j) x_i x_j
//
// where a_ij is a softmax over the active pairs of
//   a'_ij = q . ReLU(W (h_i * h_j) x_i x_j + b).

#include "fafcnn/common.hpp"

#include <nlohmann/json_fwd.hpp>

#include <string_view>
#include <utility>

namespace fafcnn::faim {

struct FaimParams {
    Matrix embeddings;   // total_dim x p, row i = h_i
    Matrix linear;       // total_dim x p, row i = w_i
    Matrix attn_weight;  // p x p
    Vector attn_bias;    // p
    Vector attn_query;   // p

    std::size_t input_dim() const { return static_cast<std::size_t>(embeddings.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(embeddings.cols()); }

    /// Gaussian(0, 0.1) for embeddings, linear weights, W and q; zero bias.
    static FaimParams init(std::size_t total_dim, std::size_t p, Rng& rng);
    static FaimParams zeros(std::size_t total_dim, std::size_t p);

    std::vector<std::span<double>> tensors();
    std::vector<std::span<const double>> tensors() const;
};

struct InteractionSet {
    IndexList active;                                  // ascending
    std::vector<std::pair<std::size_t, std::size_t>>  pairs;  // (i, j), i < j, lexicographic
    std::vector<double> scale;                         // x_i * x_j per pair
};

struct AttentionWeights {
    std::vector<double> logits;   // a'_ij
    std::vector<double> weights;  // a_ij
};

enum class SparseMode { literal, logit_l1 };

SparseMode parse_sparse_mode(std::string_view name);
std::string_view to_string(SparseMode mode);

InteractionSet active_pairs(ConstVectorRef x_aug);

/// Throws std::invalid_argument when the set has no pairs.
AttentionWeights attention_forward(const FaimParams& params, const InteractionSet& set);

Vector faim_forward(const FaimParams& params, ConstVectorRef x_aug);

/// literal: L1 norm of the softmax weights (1 whenever a pair exists); logit_l1: L1 norm of a'.
double sparse_penalty(const AttentionWeights& weights, SparseMode mode);
double sparse_penalty(std::span<const AttentionWeights> batch, SparseMode mode);

/// Forward intermediates for one sample, reused by the backward pass.
struct SampleTrace {
    InteractionSet set;
    AttentionWeights attention;
    Matrix products;  // pairs x p, row k = h_i * h_j
    Matrix hidden;    // pairs x p, pre-ReLU attention activations
};

struct BatchForward {
    std::vector<SampleTrace> samples;
    Matrix h_aug;  // N x p
};

BatchForward faim_forward_batch(const FaimParams& params, const Matrix& x_aug);

/// Sum of the per-sample penalties of a cached forward pass.
double sparse_penalty(const BatchForward& forward, SparseMode mode);

/// Gradient of  sum_n upstream_n . h_aug_n + penalty_weight * sparse_penalty
/// with respect to every FaIM tensor. ReLU'(0) = 0 and |0|' = 0.
FaimParams faim_gradients(const FaimParams& params, const Matrix& x_aug, const BatchForward& forward,
                          const Matrix& upstream, double penalty_weight = 0.0,
                          SparseMode mode = SparseMode::logit_l1);

nlohmann::json to_json(const FaimParams& params);
FaimParams faim_from_json(const nlohmann::json& j);

}  // namespace fafcnn::faim
