#pragma once

#include <algorithm>
#include <numeric>

namespace fafcnn::forest {
namespace detail {

struct SplitChoice {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
};

inline constexpr double kMinGain = 1e-12;

inline SplitChoice best_split(const Matrix& x, const Vector& target, const IndexList& rows,
                              const std::vector<int>& features, std::size_t min_leaf) {
    SplitChoice best;
    const std::size_t n = rows.size();
    double total = 0.0;
    for (auto r : rows) {
        total += target(static_cast<Eigen::Index>(r));
    }
    const double parent = total * total / static_cast<double>(n);

    std::vector<std::pair<double, double>> column(n);
    for (int f : features) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto r = static_cast<Eigen::Index>(rows[i]);
            column[i] = {x(r, f), target(r)};
        }
        std::sort(column.begin(), column.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        double left_sum = 0.0;
        for (std::size_t k = 1; k < n; ++k) {
            left_sum += column[k - 1].second;
            if (k < min_leaf || n - k < min_leaf) {
                continue;
            }
            const double lo = column[k - 1].first;
            const double hi = column[k].first;
            if (!(lo < hi)) {
                continue;
            }
            const double right_sum = total - left_sum;
            const double gain = left_sum * left_sum / static_cast<double>(k) +
                                right_sum * right_sum / static_cast<double>(n - k) - parent;
            if (gain > kMinGain && gain > best.gain) {
                double threshold = lo + 0.5 * (hi - lo);
                if (!(threshold < hi)) {
                    threshold = lo;
                }
                best = {f, threshold, gain};
            }
        }
    }
    return best;
}

template <class LeafValue>
struct TreeGrower {
    const Matrix& x;
    const Vector& target;
    const TreeConfig& config;
    LeafValue& leaf_value;
    Rng* rng;
    Tree tree;

    std::vector<int> candidate_features() {
        std::vector<int> all(static_cast<std::size_t>(x.cols()));
        std::iota(all.begin(), all.end(), 0);
        if (rng == nullptr || config.features_per_split == 0 || config.features_per_split >= all.size()) {
            return all;
        }
        // Partial Fisher-Yates draw of features_per_split distinct columns.
        for (std::size_t i = 0; i < config.features_per_split; ++i) {
            const auto j = i + static_cast<std::size_t>(rng->below(all.size() - i));
            std::swap(all[i], all[j]);
        }
        all.resize(config.features_per_split);
        std::sort(all.begin(), all.end());
        return all;
    }

    bool is_pure(const IndexList& rows) const {
        const double first = target(static_cast<Eigen::Index>(rows.front()));
        return std::all_of(rows.begin(), rows.end(),
                           [&](std::size_t r) { return target(static_cast<Eigen::Index>(r)) == first; });
    }

    int grow(const IndexList& rows, int depth) {
        const int id = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        tree.nodes[static_cast<std::size_t>(id)].samples = rows.size();

        SplitChoice split;
        if (depth < config.max_depth && rows.size() >= 2 * config.min_samples_leaf && !is_pure(rows)) {
            split = best_split(x, target, rows, candidate_features(), config.min_samples_leaf);
        }
        if (split.feature < 0) {
            auto& leaf = tree.nodes[static_cast<std::size_t>(id)];
            leaf.leaf_id = tree.leaf_count++;
            leaf.value = leaf_value(rows);
            return id;
        }
        IndexList left_rows;
        IndexList right_rows;
        for (auto r : rows) {
            (x(static_cast<Eigen::Index>(r), split.feature) <= split.threshold ? left_rows : right_rows)
                .push_back(r);
        }
        const int left = grow(left_rows, depth + 1);
        const int right = grow(right_rows, depth + 1);
        auto& node = tree.nodes[static_cast<std::size_t>(id)];
        node.feature = split.feature;
        node.threshold = split.threshold;
        node.left = left;
        node.right = right;
        return id;
    }
};

}  // namespace detail

template <class LeafValue>
Tree grow_tree(const Matrix& x, const Vector& target, const IndexList& rows, const TreeConfig& config,
               LeafValue&& leaf_value, Rng* feature_rng) {
    if (rows.empty()) {
        throw std::invalid_argument("grow_tree: no rows");
    }
    detail::TreeGrower<std::remove_reference_t<LeafValue>> grower{x, target, config, leaf_value, feature_rng, {}};
    grower.grow(rows, 0);
    return std::move(grower.tree);
}

}  // namespace fafcnn::forest
