#include "fafcnn/forest.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace fafcnn::forest {
namespace {

constexpr int kModelVersion = 1;
constexpr double kHessianFloor = 1e-12;
constexpr double kPriorClamp = 1e-6;

double mean_log_loss(const Vector& logits, const Eigen::VectorXi& y) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        const double z = logits(i);
        // log(1 + exp(-z)) for y = 1, log(1 + exp(z)) for y = 0, evaluated stably.
        const double m = y(i) == 1 ? -z : z;
        total += m > 0 ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m));
    }
    return total / static_cast<double>(logits.size());
}

void check_binary(const Eigen::VectorXi& y) {
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (y(i) != 0 && y(i) != 1) {
            throw DataError("labels must be binary");
        }
    }
}

nlohmann::json tree_to_json(const Tree& tree) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : tree.nodes) {
        nodes.push_back({{"feature", n.feature},
                         {"threshold", n.threshold},
                         {"left", n.left},
                         {"right", n.right},
                         {"leaf_id", n.leaf_id},
                         {"value", n.value},
                         {"samples", n.samples}});
    }
    return {{"leaf_count", tree.leaf_count}, {"nodes", std::move(nodes)}};
}

Tree tree_from_json(const nlohmann::json& j) {
    Tree tree;
    tree.leaf_count = j.at("leaf_count").get<int>();
    for (const auto& n : j.at("nodes")) {
        TreeNode node;
        node.feature = n.at("feature").get<int>();
        node.threshold = n.at("threshold").get<double>();
        node.left = n.at("left").get<int>();
        node.right = n.at("right").get<int>();
        node.leaf_id = n.at("leaf_id").get<int>();
        node.value = n.at("value").get<double>();
        node.samples = n.at("samples").get<std::size_t>();
        tree.nodes.push_back(node);
    }
    return tree;
}

void check_version(const nlohmann::json& j, const char* kind) {
    if (j.at("kind").get<std::string>() != kind || j.at("version").get<int>() != kModelVersion) {
        throw DataError(std::string("unsupported ") + kind + " document");
    }
}

}  // namespace

const TreeNode& Tree::leaf_for(ConstVectorRef x) const {
    const TreeNode* node = &nodes.front();
    while (!node->is_leaf()) {
        node = &nodes[static_cast<std::size_t>(x(node->feature) <= node->threshold ? node->left : node->right)];
    }
    return *node;
}

int Tree::depth() const {
    std::vector<std::pair<int, int>> stack{{0, 0}};
    int deepest = 0;
    while (!stack.empty()) {
        auto [id, d] = stack.back();
        stack.pop_back();
        deepest = std::max(deepest, d);
        const auto& n = nodes[static_cast<std::size_t>(id)];
        if (!n.is_leaf()) {
            stack.emplace_back(n.left, d + 1);
            stack.emplace_back(n.right, d + 1);
        }
    }
    return deepest;
}

GbdtConfig GbdtConfig::defaults_for(std::size_t n_features) {
    GbdtConfig c;
    c.n_trees = static_cast<int>(n_features / 2);
    return c;
}

std::vector<int> GbdtModel::leaf_counts() const {
    std::vector<int> counts;
    counts.reserve(trees.size());
    for (const auto& t : trees) {
        counts.push_back(t.leaf_count);
    }
    return counts;
}

LeafEncoding LeafEncoding::of(const GbdtModel& model) {
    LeafEncoding enc;
    enc.block_offsets.push_back(0);
    for (const auto& t : model.trees) {
        enc.block_offsets.push_back(enc.block_offsets.back() + static_cast<std::size_t>(t.leaf_count));
    }
    enc.total_dim = enc.block_offsets.back();
    return enc;
}

GbdtModel fit_gbdt(const Matrix& x, const Eigen::VectorXi& y, const GbdtConfig& config) {
    check_binary(y);
    if (x.rows() != y.size()) {
        throw DataError("fit_gbdt: feature/label row mismatch");
    }
    if (static_cast<std::size_t>(x.rows()) < 2 * config.min_samples_leaf) {
        throw DataError("fit_gbdt: too few training rows");
    }
    GbdtModel model;
    model.config = config;
    model.n_features = static_cast<std::size_t>(x.cols());

    const double prior = std::clamp(y.cast<double>().mean(), kPriorClamp, 1.0 - kPriorClamp);
    model.base_score = std::log(prior / (1.0 - prior));

    const auto n = static_cast<std::size_t>(x.rows());
    Vector logits = Vector::Constant(x.rows(), model.base_score);
    Vector residual(x.rows());
    Vector hessian(x.rows());
    IndexList all_rows(n);
    std::iota(all_rows.begin(), all_rows.end(), std::size_t{0});

    TreeConfig tree_config;
    tree_config.max_depth = config.max_depth;
    tree_config.min_samples_leaf = config.min_samples_leaf;

    model.training_loss.push_back(mean_log_loss(logits, y));
    for (int t = 0; t < config.n_trees; ++t) {
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const double p = sigmoid(logits(i));
            residual(i) = static_cast<double>(y(i)) - p;
            hessian(i) = p * (1.0 - p);
        }
        auto newton_step = [&](const IndexList& rows) {
            double g = 0.0;
            double h = 0.0;
            for (auto r : rows) {
                g += residual(static_cast<Eigen::Index>(r));
                h += hessian(static_cast<Eigen::Index>(r));
            }
            return g / std::max(h, kHessianFloor);
        };
        Tree tree = grow_tree(x, residual, all_rows, tree_config, newton_step);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            logits(i) += config.shrinkage * tree.predict(x.row(i).transpose());
        }
        model.trees.push_back(std::move(tree));
        model.training_loss.push_back(mean_log_loss(logits, y));
    }
    return model;
}

double gbdt_logit(const GbdtModel& model, ConstVectorRef x) {
    double sum = 0.0;
    for (const auto& t : model.trees) {
        sum += t.predict(x);
    }
    return model.base_score + model.config.shrinkage * sum;
}

double gbdt_predict_proba(const GbdtModel& model, ConstVectorRef x) {
    return sigmoid(gbdt_logit(model, x));
}

Vector leaf_one_hot(const GbdtModel& model, ConstVectorRef x) {
    const auto enc = LeafEncoding::of(model);
    Vector out = Vector::Zero(static_cast<Eigen::Index>(enc.total_dim));
    for (std::size_t t = 0; t < model.trees.size(); ++t) {
        out(static_cast<Eigen::Index>(enc.block_offsets[t]) + model.trees[t].leaf_index(x)) = 1.0;
    }
    return out;
}

Matrix leaf_one_hot(const GbdtModel& model, const Matrix& x) {
    const auto enc = LeafEncoding::of(model);
    Matrix out = Matrix::Zero(x.rows(), static_cast<Eigen::Index>(enc.total_dim));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (std::size_t t = 0; t < model.trees.size(); ++t) {
            out(i, static_cast<Eigen::Index>(enc.block_offsets[t]) +
                       model.trees[t].leaf_index(x.row(i).transpose())) = 1.0;
        }
    }
    return out;
}

Vector concat_augmented(ConstVectorRef x, ConstVectorRef x_aug, std::size_t expected_aug_dim) {
    if (static_cast<std::size_t>(x_aug.size()) != expected_aug_dim) {
        throw std::invalid_argument("concat_augmented: x_aug has " + std::to_string(x_aug.size()) +
                                    " entries, expected " + std::to_string(expected_aug_dim));
    }
    Vector out(x_aug.size() + x.size());
    out << x_aug, x;
    return out;
}

std::pair<Vector, Vector> split_augmented(ConstVectorRef joined, std::size_t aug_dim) {
    const auto k = static_cast<Eigen::Index>(aug_dim);
    if (k > joined.size()) {
        throw std::invalid_argument("split_augmented: aug_dim exceeds vector length");
    }
    return {joined.tail(joined.size() - k), joined.head(k)};
}

RfModel fit_rf(const Matrix& x, const Eigen::VectorXi& y, const RfConfig& config) {
    check_binary(y);
    if (x.rows() != y.size() || x.rows() == 0) {
        throw DataError("fit_rf: bad training data shape");
    }
    RfModel model;
    model.config = config;
    model.n_features = static_cast<std::size_t>(x.cols());

    TreeConfig tree_config;
    tree_config.max_depth = config.max_depth;
    tree_config.min_samples_leaf = config.min_samples_leaf;
    tree_config.features_per_split =
        static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(x.cols()))));

    const Vector target = y.cast<double>();
    const auto n = static_cast<std::size_t>(x.rows());
    Rng rng(config.seed);
    auto frequency = [&](const IndexList& rows) {
        double positives = 0.0;
        for (auto r : rows) {
            positives += target(static_cast<Eigen::Index>(r));
        }
        return positives / static_cast<double>(rows.size());
    };
    for (int t = 0; t < config.n_trees; ++t) {
        IndexList bootstrap(n);
        for (auto& r : bootstrap) {
            r = static_cast<std::size_t>(rng.below(n));
        }
        model.trees.push_back(grow_tree(x, target, bootstrap, tree_config, frequency, &rng));
    }
    return model;
}

double rf_predict_proba(const RfModel& model, ConstVectorRef x) {
    if (model.trees.empty()) {
        return 0.5;
    }
    return rf_correlation_features(model, x).mean();
}

Vector rf_correlation_features(const RfModel& model, ConstVectorRef x) {
    Vector out(static_cast<Eigen::Index>(model.trees.size()));
    for (std::size_t t = 0; t < model.trees.size(); ++t) {
        out(static_cast<Eigen::Index>(t)) = model.trees[t].predict(x);
    }
    return out;
}

Matrix rf_correlation_features(const RfModel& model, const Matrix& x) {
    Matrix out(x.rows(), static_cast<Eigen::Index>(model.trees.size()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        out.row(i) = rf_correlation_features(model, ConstVectorRef(x.row(i).transpose())).transpose();
    }
    return out;
}

nlohmann::json to_json(const GbdtModel& model) {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : model.trees) {
        trees.push_back(tree_to_json(t));
    }
    return {{"kind", "gbdt"},
            {"version", kModelVersion},
            {"config",
             {{"n_trees", model.config.n_trees},
              {"max_depth", model.config.max_depth},
              {"min_samples_leaf", model.config.min_samples_leaf},
              {"shrinkage", model.config.shrinkage}}},
            {"n_features", model.n_features},
            {"base_score", model.base_score},
            {"training_loss", model.training_loss},
            {"trees", std::move(trees)}};
}

GbdtModel gbdt_from_json(const nlohmann::json& j) {
    check_version(j, "gbdt");
    GbdtModel model;
    const auto& c = j.at("config");
    model.config.n_trees = c.at("n_trees").get<int>();
    model.config.max_depth = c.at("max_depth").get<int>();
    model.config.min_samples_leaf = c.at("min_samples_leaf").get<std::size_t>();
    model.config.shrinkage = c.at("shrinkage").get<double>();
    model.n_features = j.at("n_features").get<std::size_t>();
    model.base_score = j.at("base_score").get<double>();
    j.at("training_loss").get_to(model.training_loss);
    for (const auto& t : j.at("trees")) {
        model.trees.push_back(tree_from_json(t));
    }
    return model;
}

nlohmann::json to_json(const RfModel& model) {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : model.trees) {
        trees.push_back(tree_to_json(t));
    }
    return {{"kind", "random_forest"},
            {"version", kModelVersion},
            {"config",
             {{"n_trees", model.config.n_trees},
              {"max_depth", model.config.max_depth},
              {"min_samples_leaf", model.config.min_samples_leaf},
              {"seed", model.config.seed}}},
            {"n_features", model.n_features},
            {"trees", std::move(trees)}};
}

RfModel rf_from_json(const nlohmann::json& j) {
    check_version(j, "random_forest");
    RfModel model;
    const auto& c = j.at("config");
    model.config.n_trees = c.at("n_trees").get<int>();
    model.config.max_depth = c.at("max_depth").get<int>();
    model.config.min_samples_leaf = c.at("min_samples_leaf").get<std::size_t>();
    model.config.seed = c.at("seed").get<std::uint64_t>();
    model.n_features = j.at("n_features").get<std::size_t>();
    for (const auto& t : j.at("trees")) {
        model.trees.push_back(tree_from_json(t));
    }
    return model;
}

void write_encoding_csv(const GbdtModel& model, const Matrix& x, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    const Matrix enc = leaf_one_hot(model, x);
    out << "sample";
    for (Eigen::Index k = 0; k < enc.cols(); ++k) {
        out << ",b" << k;
    }
    out << '\n';
    for (Eigen::Index i = 0; i < enc.rows(); ++i) {
        out << i;
        for (Eigen::Index k = 0; k < enc.cols(); ++k) {
            out << ',' << static_cast<int>(enc(i, k));
        }
        out << '\n';
    }
}

}  // namespace fafcnn::forest
