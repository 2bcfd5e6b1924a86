#pragma once

// CART trees, logistic gradient boosting, leaf-path one-hot encoding and a
// bootstrap random forest whose per-tree leaf frequencies serve as
// alternative correlation features.

#include "fafcnn/common.hpp"

#include <filesystem>
#include <limits>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace fafcnn::forest {

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    int leaf_id = -1;
    double value = 0.0;
    std::size_t samples = 0;

    bool is_leaf() const { return feature < 0; }
};

/// Flat binary tree; node 0 is the root. x[feature] <= threshold goes left.
struct Tree {
    std::vector<TreeNode> nodes;
    int leaf_count = 0;

    const TreeNode& leaf_for(ConstVectorRef x) const;
    int leaf_index(ConstVectorRef x) const { return leaf_for(x).leaf_id; }
    double predict(ConstVectorRef x) const { return leaf_for(x).value; }
    int depth() const;
};

struct TreeConfig {
    int max_depth = 8;
    std::size_t min_samples_leaf = 2;
    /// Features examined per split; 0 examines all of them.
    std::size_t features_per_split = 0;
};

/// Grows a CART tree on `rows` minimizing squared error of `target`.
/// For a 0/1 target the squared-error reduction is half the Gini reduction,
/// so the same routine grows classification trees.
/// `leaf_value` maps the rows landing in a leaf to the stored value.
template <class LeafValue>
Tree grow_tree(const Matrix& x, const Vector& target, const IndexList& rows, const TreeConfig& config,
               LeafValue&& leaf_value, Rng* feature_rng = nullptr);

struct GbdtConfig {
    int n_trees = 0;
    int max_depth = 8;
    std::size_t min_samples_leaf = 2;
    double shrinkage = 0.1;

    /// floor(d/2) trees, depth 8, two samples per leaf.
    static GbdtConfig defaults_for(std::size_t n_features);
};

struct GbdtModel {
    GbdtConfig config;
    std::size_t n_features = 0;
    double base_score = 0.0;
    std::vector<Tree> trees;
    /// Mean training log-loss before the first tree and after each tree.
    std::vector<double> training_loss;

    std::vector<int> leaf_counts() const;
};

struct LeafEncoding {
    std::vector<std::size_t> block_offsets;  // size T + 1
    std::size_t total_dim = 0;

    static LeafEncoding of(const GbdtModel& model);
};

GbdtModel fit_gbdt(const Matrix& x, const Eigen::VectorXi& y, const GbdtConfig& config);

double gbdt_logit(const GbdtModel& model, ConstVectorRef x);
double gbdt_predict_proba(const GbdtModel& model, ConstVectorRef x);

Vector leaf_one_hot(const GbdtModel& model, ConstVectorRef x);
/// One encoded row per input row.
Matrix leaf_one_hot(const GbdtModel& model, const Matrix& x);

/// [x_aug || x]; throws std::invalid_argument if x_aug is not expected_aug_dim long.
Vector concat_augmented(ConstVectorRef x, ConstVectorRef x_aug, std::size_t expected_aug_dim);
/// Inverse of concat_augmented: returns {x, x_aug}.
std::pair<Vector, Vector> split_augmented(ConstVectorRef joined, std::size_t aug_dim);

struct RfConfig {
    int n_trees = 100;
    int max_depth = 8;
    std::size_t min_samples_leaf = 2;
    std::uint64_t seed = 0;
};

struct RfModel {
    RfConfig config;
    std::size_t n_features = 0;
    std::vector<Tree> trees;  // leaf value = class-1 frequency
};

RfModel fit_rf(const Matrix& x, const Eigen::VectorXi& y, const RfConfig& config);
double rf_predict_proba(const RfModel& model, ConstVectorRef x);
Vector rf_correlation_features(const RfModel& model, ConstVectorRef x);
Matrix rf_correlation_features(const RfModel& model, const Matrix& x);

nlohmann::json to_json(const GbdtModel& model);
GbdtModel gbdt_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RfModel& model);
RfModel rf_from_json(const nlohmann::json& j);

/// One row per sample: sample index followed by the total_dim bits.
void write_encoding_csv(const GbdtModel& model, const Matrix& x, const std::filesystem::path& path);

}  // namespace fafcnn::forest

#include "fafcnn/detail/grow_tree.inl"
