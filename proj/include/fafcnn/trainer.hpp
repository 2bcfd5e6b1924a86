#pragma once

// Two-stage optimization. Stage one fits the augmented branch (FaIM, or a
// plain two-layer mapper for the ablation) and the classifier with Adam on
// L_1 = L_y + alpha * L_sparse. Stage two freezes both and alternates one
// SGD step on the discriminator (L_D) with one SGD step on the generator
// (L_2 = L_aux + beta * L_G).

#include "fafcnn/faim.hpp"
#include "fafcnn/fam.hpp"
#include "fafcnn/forest.hpp"
#include "fafcnn/params.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <limits>
#include <optional>
#include <string_view>
#include <tuple>
#include <utility>

namespace fafcnn::train {

enum class Variant { base, rf_no_fam, no_faim, full };
enum class FusionMode { aug_only, gen_only, mean_fusion };

Variant parse_variant(std::string_view name);
std::string_view to_string(Variant v);
FusionMode parse_fusion(std::string_view name);
std::string_view to_string(FusionMode m);

struct StageOneConfig {
    int epochs = 2000;
    double learning_rate = 0.005;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double alpha = 0.05;
    faim::SparseMode sparse_mode = faim::SparseMode::logit_l1;
};

struct StageTwoConfig {
    int epochs = 2000;
    double learning_rate = 0.005;
    double beta = 0.5;
    int d_steps_per_epoch = 1;
    int g_steps_per_epoch = 1;
    double clip_norm = 5.0;  // global L2 norm cap per step; <= 0 disables
};

struct ModelConfig {
    std::size_t embedding_dim = 8;        // p
    std::size_t generator_hidden = 16;    // H1
    std::size_t discriminator_hidden = 16;
    std::size_t mapper_hidden = 16;       // hidden width of the ablation mappers
    /// Linear by default so h shares the signed space of h_aug; relu gives the two-ReLU variant.
    fam::Activation generator_output = fam::Activation::identity;
};

struct TrainingConfig {
    Variant variant = Variant::full;
    ModelConfig model;
    StageOneConfig stage1;
    StageTwoConfig stage2;
    forest::GbdtConfig gbdt;              // n_trees < 0 means floor(d/2)
    forest::RfConfig rf;
    FusionMode head = FusionMode::mean_fusion;
    std::uint64_t seed = 0;

    TrainingConfig() { gbdt.n_trees = -1; }

    /// Paper-scale epochs (10000 per stage).
    static TrainingConfig fidelity();
};

/// One row of the per-epoch log. Entries a stage does not compute are NaN.
struct EpochRecord {
    int stage = 1;
    int epoch = 0;
    double loss_y = std::numeric_limits<double>::quiet_NaN();
    double loss_sparse = std::numeric_limits<double>::quiet_NaN();
    double loss_stage1 = std::numeric_limits<double>::quiet_NaN();
    double loss_d = std::numeric_limits<double>::quiet_NaN();
    double loss_aux = std::numeric_limits<double>::quiet_NaN();
    double loss_g = std::numeric_limits<double>::quiet_NaN();
    double loss_stage2 = std::numeric_limits<double>::quiet_NaN();
    double val_accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct StageResult {
    std::vector<EpochRecord> trace;
    int best_epoch = 0;  // parameters after `best_epoch` updates were kept
    double best_val_accuracy = 0.0;
    double initial_loss = 0.0;
    double best_loss = 0.0;  // training objective at the kept parameters
};

class Adam {
public:
    Adam(std::size_t n, const StageOneConfig& config);
    void step(Vector& params, const Vector& grad);

private:
    Vector m_;
    Vector v_;
    double beta1_;
    double beta2_;
    double epsilon_;
    double learning_rate_;
    int t_ = 0;
};

/// Scales `grad` in place so its L2 norm is at most `max_norm`.
void clip_global_norm(Vector& grad, double max_norm);

/// A bundle of references to several bundles, flattened in declaration order.
template <ParameterBundle... Ps>
struct BundleTie {
    std::tuple<Ps&...> parts;

    std::vector<std::span<double>> tensors() {
        std::vector<std::span<double>> out;
        std::apply([&](auto&... p) { (append(out, p.tensors()), ...); }, parts);
        return out;
    }
    std::vector<std::span<const double>> tensors() const {
        std::vector<std::span<const double>> out;
        std::apply([&](auto&... p) { (append(out, std::as_const(p).tensors()), ...); }, parts);
        return out;
    }

private:
    template <class S>
    static void append(std::vector<S>& out, const std::vector<S>& more) {
        out.insert(out.end(), more.begin(), more.end());
    }
};

template <ParameterBundle... Ps>
BundleTie<Ps...> tie_bundles(Ps&... ps) {
    return {std::tie(ps...)};
}

struct Stage1Objective {
    double loss_y = 0.0;
    double loss_sparse = 0.0;
    double total = 0.0;
};

/// L_1 for the FaIM branch and its gradient (written into the two outputs).
Stage1Objective stage1_objective(const faim::FaimParams& faim, const fam::ClassifierParams& psi, const Matrix& x_aug,
                                 const Eigen::VectorXi& y, double alpha, faim::SparseMode mode,
                                 faim::FaimParams* grad_faim = nullptr, fam::ClassifierParams* grad_psi = nullptr);

/// L_y for the plain-mapper branch (no attention, so no sparse term).
Stage1Objective stage1_objective(const fam::Mlp& mapper, const fam::ClassifierParams& psi, const Matrix& x_aug,
                                 const Eigen::VectorXi& y, fam::Mlp* grad_mapper = nullptr,
                                 fam::ClassifierParams* grad_psi = nullptr);

struct SplitView {
    Matrix x;        // standardized original features
    Matrix x_aug;    // augmented features (leaf one-hot or RF probabilities)
    Eigen::VectorXi y;
};

StageResult train_stage1(const SplitView& train, const SplitView& validation, faim::FaimParams& faim,
                         fam::ClassifierParams& psi, const StageOneConfig& config);
StageResult train_stage1(const SplitView& train, const SplitView& validation, fam::Mlp& mapper,
                         fam::ClassifierParams& psi, const StageOneConfig& config);

/// Single-stage supervised fit used by the base and rf_no_fam ablations:
/// Adam on the mean BCE of F(G(x)) or F(G(x) + M(x_aug)) when a mapper is given.
StageResult train_supervised(const SplitView& train, const SplitView& validation, fam::GeneratorParams& phi,
                             fam::Mlp* mapper, fam::ClassifierParams& psi, const StageOneConfig& config);

/// Stage two on precomputed (frozen) h_aug. psi is read-only.
StageResult train_stage2(const Matrix& x_train, const Matrix& h_aug_train, const Eigen::VectorXi& y_train,
                         const Matrix& x_val, const Matrix& h_aug_val, const Eigen::VectorXi& y_val,
                         fam::GeneratorParams& phi, fam::DiscriminatorParams& theta, const fam::ClassifierParams& psi,
                         const StageTwoConfig& config, FusionMode validation_head);

StageResult train_stage2(const SplitView& train, const SplitView& validation, const faim::FaimParams& faim,
                         fam::GeneratorParams& phi, fam::DiscriminatorParams& theta, const fam::ClassifierParams& psi,
                         const StageTwoConfig& config, FusionMode validation_head);

/// Everything a trained variant needs at inference time; parts a variant
/// does not use stay empty.
struct Checkpoint {
    static constexpr int kVersion = 1;

    TrainingConfig config;  // config.variant selects the inference path
    std::optional<forest::GbdtModel> gbdt;
    std::optional<forest::RfModel> rf;
    faim::FaimParams faim;
    fam::Mlp aug_mapper;
    fam::GeneratorParams generator;
    fam::DiscriminatorParams discriminator;
    fam::ClassifierParams classifier;
    int stage1_epochs_run = 0;
    int stage2_epochs_run = 0;
    int stage1_best_epoch = 0;
    int stage2_best_epoch = 0;
    double stage1_best_val_accuracy = 0.0;
    double stage2_best_val_accuracy = 0.0;

    /// Trainable parameters that make up the variant (discriminator included).
    std::size_t parameter_count() const;
};

nlohmann::json to_json(const TrainingConfig& config);
TrainingConfig training_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Augmented input for the variant: leaf one-hot, RF probabilities, or empty.
Matrix augmented_features(const Checkpoint& ckpt, const Matrix& x);
/// h_aug per row (FaIM or mapper output); empty for the base variant.
Matrix aug_representation(const Checkpoint& ckpt, const Matrix& x);

struct Prediction {
    double probability = 0.5;
    int label = 1;
};

/// Fused head for the two-branch variants; base uses F(G(x)) and rf_no_fam
/// uses F(G(x) + M(r)) whatever the requested mode.
Prediction predict(const Checkpoint& ckpt, ConstVectorRef x, FusionMode head);
Vector predict_proba(const Checkpoint& ckpt, const Matrix& x, FusionMode head);
Eigen::VectorXi predict_labels(const Checkpoint& ckpt, const Matrix& x, FusionMode head);

/// probability >= 0.5 maps to class 1.
inline int decide(double probability) { return probability >= 0.5 ? 1 : 0; }

struct AuditEntry {
    std::string loss;
    std::size_t coordinate = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double relative_error = 0.0;
};

struct AuditReport {
    std::vector<AuditEntry> probes;
    double max_relative_error = 0.0;
    std::vector<std::pair<std::string, double>> per_loss_max;  // loss name -> max error
};

/// Probes random parameter coordinates of L_1, L_D and L_2 on the given batch
/// and compares analytic gradients with central differences. The relative
/// error is |a - n| / max(1, |a|, |n|).
AuditReport finite_diff_audit(const Checkpoint& ckpt, const SplitView& batch, std::size_t n_probes,
                              std::uint64_t seed, double step = 1e-6);

void write_trace_csv(const std::vector<EpochRecord>& trace, const std::filesystem::path& path);

}  // namespace fafcnn::train
