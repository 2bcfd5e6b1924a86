#include "fafcnn/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fafcnn::train {

Variant parse_variant(std::string_view name) {
    if (name == "base") return Variant::base;
    if (name == "rf_no_fam") return Variant::rf_no_fam;
    if (name == "no_faim") return Variant::no_faim;
    if (name == "full") return Variant::full;
    throw ConfigError("unknown variant '" + std::string(name) + "'");
}

std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::base: return "base";
        case Variant::rf_no_fam: return "rf_no_fam";
        case Variant::no_faim: return "no_faim";
        case Variant::full: break;
    }
    return "full";
}

FusionMode parse_fusion(std::string_view name) {
    if (name == "aug_only") return FusionMode::aug_only;
    if (name == "gen_only") return FusionMode::gen_only;
    if (name == "mean_fusion") return FusionMode::mean_fusion;
    throw ConfigError("unknown fusion head '" + std::string(name) + "'");
}

std::string_view to_string(FusionMode m) {
    switch (m) {
        case FusionMode::aug_only: return "aug_only";
        case FusionMode::gen_only: return "gen_only";
        case FusionMode::mean_fusion: break;
    }
    return "mean_fusion";
}

TrainingConfig TrainingConfig::fidelity() {
    TrainingConfig c;
    c.stage1.epochs = 10000;
    c.stage2.epochs = 10000;
    return c;
}

Adam::Adam(std::size_t n, const StageOneConfig& config)
    : m_(Vector::Zero(static_cast<Eigen::Index>(n))),
      v_(Vector::Zero(static_cast<Eigen::Index>(n))),
      beta1_(config.adam_beta1),
      beta2_(config.adam_beta2),
      epsilon_(config.adam_epsilon),
      learning_rate_(config.learning_rate) {}

void Adam::step(Vector& params, const Vector& grad) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    params.array() -= learning_rate_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + epsilon_);
}

void clip_global_norm(Vector& grad, double max_norm) {
    if (max_norm <= 0.0) {
        return;
    }
    const double norm = grad.norm();
    if (norm > max_norm) {
        grad *= max_norm / norm;
    }
}

namespace {

double accuracy(const Vector& prob, const Eigen::VectorXi& y) {
    if (y.size() == 0) {
        return 0.0;
    }
    Eigen::Index hits = 0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        hits += decide(prob(i)) == y(i);
    }
    return static_cast<double>(hits) / static_cast<double>(y.size());
}

Vector fused_proba(const fam::ClassifierParams& psi, const Matrix& h, const Matrix& h_aug, FusionMode head) {
    switch (head) {
        case FusionMode::aug_only:
            return fam::classifier_forward(psi, h_aug);
        case FusionMode::gen_only:
            return fam::classifier_forward(psi, h);
        case FusionMode::mean_fusion:
            break;
    }
    return fam::classifier_forward(psi, Matrix(0.5 * (h + h_aug)));
}

void require_finite(double loss, int stage, int epoch) {
    if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "non-finite loss in stage " << stage << " at epoch " << epoch;
        throw TrainingAbort(msg.str());
    }
}

/// Full-batch Adam with best-validation snapshotting. `objective` fills the
/// record's loss columns, writes the gradient when asked, and returns the
/// tracked loss; `validate` returns validation accuracy of the current state.
template <class Bundle, class Objective, class Validate>
StageResult run_adam(Bundle bundle, const StageOneConfig& config, int stage, Objective&& objective,
                     Validate&& validate) {
    StageResult result;
    Vector flat = flatten(bundle);
    Vector best = flat;
    Vector grad(flat.size());
    Adam adam(static_cast<std::size_t>(flat.size()), config);
    for (int epoch = 0;; ++epoch) {
        const double val = validate();
        if (epoch == 0 || val > result.best_val_accuracy) {
            result.best_val_accuracy = val;
            result.best_epoch = epoch;
            best = flat;
        }
        if (epoch == config.epochs) {
            break;
        }
        EpochRecord rec;
        rec.stage = stage;
        rec.epoch = epoch;
        rec.val_accuracy = val;
        const double loss = objective(rec, &grad);
        require_finite(loss, stage, epoch);
        if (epoch == 0) {
            result.initial_loss = loss;
        }
        result.trace.push_back(rec);
        adam.step(flat, grad);
        unflatten(bundle, flat);
    }
    unflatten(bundle, best);
    EpochRecord scratch;
    result.best_loss = objective(scratch, nullptr);
    return result;
}

}  // namespace

Stage1Objective stage1_objective(const faim::FaimParams& faim, const fam::ClassifierParams& psi, const Matrix& x_aug,
                                 const Eigen::VectorXi& y, double alpha, faim::SparseMode mode,
                                 faim::FaimParams* grad_faim, fam::ClassifierParams* grad_psi) {
    const auto forward = faim::faim_forward_batch(faim, x_aug);
    const auto aux = fam::loss_aux_grad(psi, forward.h_aug, y);
    Stage1Objective out;
    out.loss_y = aux.loss;
    out.loss_sparse = faim::sparse_penalty(forward, mode);
    out.total = out.loss_y + alpha * out.loss_sparse;
    if (grad_faim != nullptr) {
        *grad_faim = faim::faim_gradients(faim, x_aug, forward, aux.grad.h, alpha, mode);
    }
    if (grad_psi != nullptr) {
        *grad_psi = aux.grad.psi;
    }
    return out;
}

Stage1Objective stage1_objective(const fam::Mlp& mapper, const fam::ClassifierParams& psi, const Matrix& x_aug,
                                 const Eigen::VectorXi& y, fam::Mlp* grad_mapper, fam::ClassifierParams* grad_psi) {
    fam::MlpTrace trace;
    const Matrix h_aug = fam::mlp_forward(mapper, x_aug, &trace);
    const auto aux = fam::loss_aux_grad(psi, h_aug, y);
    Stage1Objective out;
    out.loss_y = aux.loss;
    out.total = aux.loss;
    if (grad_mapper != nullptr) {
        *grad_mapper = fam::mlp_backward(mapper, trace, aux.grad.h);
    }
    if (grad_psi != nullptr) {
        *grad_psi = aux.grad.psi;
    }
    return out;
}

StageResult train_stage1(const SplitView& train, const SplitView& validation, faim::FaimParams& faim,
                         fam::ClassifierParams& psi, const StageOneConfig& config) {
    if (config.alpha < 0.0 || config.epochs < 1) {
        throw ConfigError("stage one needs alpha >= 0 and epochs >= 1");
    }
    faim::FaimParams g_faim;
    fam::ClassifierParams g_psi;
    auto objective = [&](EpochRecord& rec, Vector* grad) {
        const auto obj = stage1_objective(faim, psi, train.x_aug, train.y, config.alpha, config.sparse_mode,
                                          grad ? &g_faim : nullptr, grad ? &g_psi : nullptr);
        rec.loss_y = obj.loss_y;
        rec.loss_sparse = obj.loss_sparse;
        rec.loss_stage1 = obj.total;
        if (grad != nullptr) {
            *grad = flatten(tie_bundles(g_faim, g_psi));
        }
        return obj.loss_y;
    };
    auto validate = [&] {
        return accuracy(fam::classifier_forward(psi, faim::faim_forward_batch(faim, validation.x_aug).h_aug),
                        validation.y);
    };
    return run_adam(tie_bundles(faim, psi), config, 1, objective, validate);
}

StageResult train_stage1(const SplitView& train, const SplitView& validation, fam::Mlp& mapper,
                         fam::ClassifierParams& psi, const StageOneConfig& config) {
    if (config.epochs < 1) {
        throw ConfigError("stage one needs epochs >= 1");
    }
    fam::Mlp g_mapper;
    fam::ClassifierParams g_psi;
    auto objective = [&](EpochRecord& rec, Vector* grad) {
        const auto obj = stage1_objective(mapper, psi, train.x_aug, train.y, grad ? &g_mapper : nullptr,
                                          grad ? &g_psi : nullptr);
        rec.loss_y = obj.loss_y;
        rec.loss_sparse = 0.0;
        rec.loss_stage1 = obj.total;
        if (grad != nullptr) {
            *grad = flatten(tie_bundles(g_mapper, g_psi));
        }
        return obj.loss_y;
    };
    auto validate = [&] {
        return accuracy(fam::classifier_forward(psi, fam::mlp_forward(mapper, validation.x_aug)), validation.y);
    };
    return run_adam(tie_bundles(mapper, psi), config, 1, objective, validate);
}

StageResult train_supervised(const SplitView& train, const SplitView& validation, fam::GeneratorParams& phi,
                             fam::Mlp* mapper, fam::ClassifierParams& psi, const StageOneConfig& config) {
    if (config.epochs < 1) {
        throw ConfigError("supervised training needs epochs >= 1");
    }
    auto represent = [&](const SplitView& split, fam::MlpTrace* gen_trace, fam::MlpTrace* map_trace) {
        Matrix h = fam::mlp_forward(phi, split.x, gen_trace);
        if (mapper != nullptr) {
            h += fam::mlp_forward(*mapper, split.x_aug, map_trace);
        }
        return h;
    };
    auto objective = [&](EpochRecord& rec, Vector* grad) {
        fam::MlpTrace gen_trace;
        fam::MlpTrace map_trace;
        const Matrix h = represent(train, &gen_trace, &map_trace);
        const auto aux = fam::loss_aux_grad(psi, h, train.y);
        rec.loss_aux = aux.loss;
        if (grad != nullptr) {
            auto g_phi = fam::mlp_backward(phi, gen_trace, aux.grad.h);
            auto g_psi = aux.grad.psi;
            if (mapper != nullptr) {
                auto g_map = fam::mlp_backward(*mapper, map_trace, aux.grad.h);
                *grad = flatten(tie_bundles(g_phi, g_map, g_psi));
            } else {
                *grad = flatten(tie_bundles(g_phi, g_psi));
            }
        }
        return aux.loss;
    };
    auto validate = [&] {
        return accuracy(fam::classifier_forward(psi, represent(validation, nullptr, nullptr)), validation.y);
    };
    if (mapper != nullptr) {
        return run_adam(tie_bundles(phi, *mapper, psi), config, 1, objective, validate);
    }
    return run_adam(tie_bundles(phi, psi), config, 1, objective, validate);
}

StageResult train_stage2(const Matrix& x_train, const Matrix& h_aug_train, const Eigen::VectorXi& y_train,
                         const Matrix& x_val, const Matrix& h_aug_val, const Eigen::VectorXi& y_val,
                         fam::GeneratorParams& phi, fam::DiscriminatorParams& theta, const fam::ClassifierParams& psi,
                         const StageTwoConfig& config, FusionMode validation_head) {
    if (config.beta < 0.0 || config.epochs < 1) {
        throw ConfigError("stage two needs beta >= 0 and epochs >= 1");
    }
    StageResult result;
    fam::GeneratorParams best_phi = phi;
    fam::DiscriminatorParams best_theta = theta;
    Vector phi_flat = flatten(phi);
    Vector theta_flat = flatten(theta);

    auto validate = [&] {
        return accuracy(fused_proba(psi, fam::mlp_forward(phi, x_val), h_aug_val, validation_head), y_val);
    };
    for (int epoch = 0;; ++epoch) {
        const double val = validate();
        if (epoch == 0 || val > result.best_val_accuracy) {
            result.best_val_accuracy = val;
            result.best_epoch = epoch;
            best_phi = phi;
            best_theta = theta;
        }
        if (epoch == config.epochs) {
            break;
        }
        EpochRecord rec;
        rec.stage = 2;
        rec.epoch = epoch;
        rec.val_accuracy = val;
        // Discriminator first; the generator step then sees the updated theta.
        for (int s = 0; s < config.d_steps_per_epoch; ++s) {
            const Matrix h = fam::mlp_forward(phi, x_train);
            auto d = fam::loss_discriminator_grad(theta, h, h_aug_train);
            require_finite(d.loss, 2, epoch);
            rec.loss_d = d.loss;
            Vector g = flatten(d.grad);
            clip_global_norm(g, config.clip_norm);
            theta_flat -= config.learning_rate * g;
            unflatten(theta, theta_flat);
        }
        for (int s = 0; s < config.g_steps_per_epoch; ++s) {
            auto obj = fam::generator_objective(phi, theta, psi, x_train, y_train, config.beta);
            require_finite(obj.total, 2, epoch);
            rec.loss_aux = obj.aux;
            rec.loss_g = obj.adversarial;
            rec.loss_stage2 = obj.total;
            Vector g = flatten(obj.grad);
            clip_global_norm(g, config.clip_norm);
            phi_flat -= config.learning_rate * g;
            unflatten(phi, phi_flat);
        }
        if (epoch == 0) {
            result.initial_loss = rec.loss_stage2;
        }
        result.trace.push_back(rec);
    }
    phi = best_phi;
    theta = best_theta;
    result.best_loss = fam::generator_objective(phi, theta, psi, x_train, y_train, config.beta).total;
    return result;
}

StageResult train_stage2(const SplitView& train, const SplitView& validation, const faim::FaimParams& faim,
                         fam::GeneratorParams& phi, fam::DiscriminatorParams& theta, const fam::ClassifierParams& psi,
                         const StageTwoConfig& config, FusionMode validation_head) {
    const Matrix h_aug_train = faim::faim_forward_batch(faim, train.x_aug).h_aug;
    const Matrix h_aug_val = faim::faim_forward_batch(faim, validation.x_aug).h_aug;
    return train_stage2(train.x, h_aug_train, train.y, validation.x, h_aug_val, validation.y, phi, theta, psi,
                        config, validation_head);
}

// ---------------------------------------------------------------------------
// Checkpoints

std::size_t Checkpoint::parameter_count() const {
    std::size_t n = fafcnn::parameter_count(generator) + fafcnn::parameter_count(classifier);
    switch (config.variant) {
        case Variant::base:
            break;
        case Variant::rf_no_fam:
            n += fafcnn::parameter_count(aug_mapper);
            break;
        case Variant::no_faim:
            n += fafcnn::parameter_count(aug_mapper) + fafcnn::parameter_count(discriminator);
            break;
        case Variant::full:
            n += fafcnn::parameter_count(faim) + fafcnn::parameter_count(discriminator);
            break;
    }
    return n;
}

nlohmann::json to_json(const TrainingConfig& c) {
    return {{"variant", to_string(c.variant)},
            {"seed", c.seed},
            {"head", to_string(c.head)},
            {"model",
             {{"embedding_dim", c.model.embedding_dim},
              {"generator_hidden", c.model.generator_hidden},
              {"discriminator_hidden", c.model.discriminator_hidden},
              {"mapper_hidden", c.model.mapper_hidden},
              {"generator_output", fam::to_string(c.model.generator_output)}}},
            {"stage1",
             {{"epochs", c.stage1.epochs},
              {"learning_rate", c.stage1.learning_rate},
              {"adam_beta1", c.stage1.adam_beta1},
              {"adam_beta2", c.stage1.adam_beta2},
              {"adam_epsilon", c.stage1.adam_epsilon},
              {"alpha", c.stage1.alpha},
              {"sparse_mode", faim::to_string(c.stage1.sparse_mode)}}},
            {"stage2",
             {{"epochs", c.stage2.epochs},
              {"learning_rate", c.stage2.learning_rate},
              {"beta", c.stage2.beta},
              {"d_steps_per_epoch", c.stage2.d_steps_per_epoch},
              {"g_steps_per_epoch", c.stage2.g_steps_per_epoch},
              {"clip_norm", c.stage2.clip_norm}}},
            {"gbdt",
             {{"n_trees", c.gbdt.n_trees},
              {"max_depth", c.gbdt.max_depth},
              {"min_samples_leaf", c.gbdt.min_samples_leaf},
              {"shrinkage", c.gbdt.shrinkage}}},
            {"rf",
             {{"n_trees", c.rf.n_trees},
              {"max_depth", c.rf.max_depth},
              {"min_samples_leaf", c.rf.min_samples_leaf},
              {"seed", c.rf.seed}}}};
}

TrainingConfig training_config_from_json(const nlohmann::json& j) {
    TrainingConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    c.head = parse_fusion(j.at("head").get<std::string>());
    const auto& m = j.at("model");
    c.model.embedding_dim = m.at("embedding_dim").get<std::size_t>();
    c.model.generator_hidden = m.at("generator_hidden").get<std::size_t>();
    c.model.discriminator_hidden = m.at("discriminator_hidden").get<std::size_t>();
    c.model.mapper_hidden = m.at("mapper_hidden").get<std::size_t>();
    c.model.generator_output = fam::parse_activation(m.at("generator_output").get<std::string>());
    const auto& s1 = j.at("stage1");
    c.stage1.epochs = s1.at("epochs").get<int>();
    c.stage1.learning_rate = s1.at("learning_rate").get<double>();
    c.stage1.adam_beta1 = s1.at("adam_beta1").get<double>();
    c.stage1.adam_beta2 = s1.at("adam_beta2").get<double>();
    c.stage1.adam_epsilon = s1.at("adam_epsilon").get<double>();
    c.stage1.alpha = s1.at("alpha").get<double>();
    c.stage1.sparse_mode = faim::parse_sparse_mode(s1.at("sparse_mode").get<std::string>());
    const auto& s2 = j.at("stage2");
    c.stage2.epochs = s2.at("epochs").get<int>();
    c.stage2.learning_rate = s2.at("learning_rate").get<double>();
    c.stage2.beta = s2.at("beta").get<double>();
    c.stage2.d_steps_per_epoch = s2.at("d_steps_per_epoch").get<int>();
    c.stage2.g_steps_per_epoch = s2.at("g_steps_per_epoch").get<int>();
    c.stage2.clip_norm = s2.at("clip_norm").get<double>();
    const auto& g = j.at("gbdt");
    c.gbdt.n_trees = g.at("n_trees").get<int>();
    c.gbdt.max_depth = g.at("max_depth").get<int>();
    c.gbdt.min_samples_leaf = g.at("min_samples_leaf").get<std::size_t>();
    c.gbdt.shrinkage = g.at("shrinkage").get<double>();
    const auto& r = j.at("rf");
    c.rf.n_trees = r.at("n_trees").get<int>();
    c.rf.max_depth = r.at("max_depth").get<int>();
    c.rf.min_samples_leaf = r.at("min_samples_leaf").get<std::size_t>();
    c.rf.seed = r.at("seed").get<std::uint64_t>();
    return c;
}

nlohmann::json to_json(const Checkpoint& ckpt) {
    nlohmann::json j = {{"kind", "fafcnn_checkpoint"},
                        {"version", Checkpoint::kVersion},
                        {"config", to_json(ckpt.config)},
                        {"faim", faim::to_json(ckpt.faim)},
                        {"aug_mapper", fam::to_json(ckpt.aug_mapper)},
                        {"generator", fam::to_json(ckpt.generator)},
                        {"discriminator", fam::to_json(ckpt.discriminator)},
                        {"classifier", fam::to_json(ckpt.classifier)},
                        {"epochs",
                         {{"stage1_run", ckpt.stage1_epochs_run},
                          {"stage2_run", ckpt.stage2_epochs_run},
                          {"stage1_best", ckpt.stage1_best_epoch},
                          {"stage2_best", ckpt.stage2_best_epoch}}},
                        {"best_validation",
                         {{"stage1_accuracy", ckpt.stage1_best_val_accuracy},
                          {"stage2_accuracy", ckpt.stage2_best_val_accuracy}}}};
    j["gbdt"] = ckpt.gbdt ? forest::to_json(*ckpt.gbdt) : nlohmann::json(nullptr);
    j["rf"] = ckpt.rf ? forest::to_json(*ckpt.rf) : nlohmann::json(nullptr);
    return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    if (j.at("kind").get<std::string>() != "fafcnn_checkpoint" || j.at("version").get<int>() != Checkpoint::kVersion) {
        throw DataError("unsupported checkpoint document");
    }
    Checkpoint c;
    c.config = training_config_from_json(j.at("config"));
    c.faim = faim::faim_from_json(j.at("faim"));
    c.aug_mapper = fam::mlp_from_json(j.at("aug_mapper"));
    c.generator = fam::mlp_from_json(j.at("generator"));
    c.discriminator = fam::mlp_from_json(j.at("discriminator"));
    c.classifier = fam::classifier_from_json(j.at("classifier"));
    const auto& e = j.at("epochs");
    c.stage1_epochs_run = e.at("stage1_run").get<int>();
    c.stage2_epochs_run = e.at("stage2_run").get<int>();
    c.stage1_best_epoch = e.at("stage1_best").get<int>();
    c.stage2_best_epoch = e.at("stage2_best").get<int>();
    const auto& b = j.at("best_validation");
    c.stage1_best_val_accuracy = b.at("stage1_accuracy").get<double>();
    c.stage2_best_val_accuracy = b.at("stage2_accuracy").get<double>();
    if (!j.at("gbdt").is_null()) {
        c.gbdt = forest::gbdt_from_json(j.at("gbdt"));
    }
    if (!j.at("rf").is_null()) {
        c.rf = forest::rf_from_json(j.at("rf"));
    }
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << to_json(ckpt).dump(1) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open checkpoint " + path.string());
    }
    return checkpoint_from_json(nlohmann::json::parse(in));
}

// ---------------------------------------------------------------------------
// Inference

Matrix augmented_features(const Checkpoint& ckpt, const Matrix& x) {
    switch (ckpt.config.variant) {
        case Variant::full:
        case Variant::no_faim:
            if (!ckpt.gbdt) {
                throw DataError("checkpoint lacks the GBDT model");
            }
            return forest::leaf_one_hot(*ckpt.gbdt, x);
        case Variant::rf_no_fam:
            if (!ckpt.rf) {
                throw DataError("checkpoint lacks the random forest");
            }
            return forest::rf_correlation_features(*ckpt.rf, x);
        case Variant::base:
            break;
    }
    return Matrix(x.rows(), 0);
}

Matrix aug_representation(const Checkpoint& ckpt, const Matrix& x) {
    const Matrix x_aug = augmented_features(ckpt, x);
    switch (ckpt.config.variant) {
        case Variant::full:
            return faim::faim_forward_batch(ckpt.faim, x_aug).h_aug;
        case Variant::no_faim:
        case Variant::rf_no_fam:
            return fam::mlp_forward(ckpt.aug_mapper, x_aug);
        case Variant::base:
            break;
    }
    return Matrix(x.rows(), 0);
}

Vector predict_proba(const Checkpoint& ckpt, const Matrix& x, FusionMode head) {
    const Matrix h = fam::mlp_forward(ckpt.generator, x);
    switch (ckpt.config.variant) {
        case Variant::base:
            return fam::classifier_forward(ckpt.classifier, h);
        case Variant::rf_no_fam:
            return fam::classifier_forward(ckpt.classifier, Matrix(h + aug_representation(ckpt, x)));
        case Variant::no_faim:
        case Variant::full:
            break;
    }
    return fused_proba(ckpt.classifier, h, aug_representation(ckpt, x), head);
}

Prediction predict(const Checkpoint& ckpt, ConstVectorRef x, FusionMode head) {
    const Matrix row = x.transpose();
    const double p = predict_proba(ckpt, row, head)(0);
    return {p, decide(p)};
}

Eigen::VectorXi predict_labels(const Checkpoint& ckpt, const Matrix& x, FusionMode head) {
    const Vector p = predict_proba(ckpt, x, head);
    Eigen::VectorXi out(p.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        out(i) = decide(p(i));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient audit

namespace {

struct AuditTarget {
    std::string name;
    Vector point;
    Vector analytic;
    std::function<double(const Vector&)> loss;
};

}  // namespace

AuditReport finite_diff_audit(const Checkpoint& ckpt, const SplitView& batch, std::size_t n_probes,
                              std::uint64_t seed, double step) {
    std::vector<AuditTarget> targets;
    const auto& cfg = ckpt.config;
    const Matrix x_aug = augmented_features(ckpt, batch.x);

    if (cfg.variant == Variant::full || cfg.variant == Variant::no_faim) {
        AuditTarget l1;
        l1.name = "L1";
        if (cfg.variant == Variant::full) {
            faim::FaimParams gf;
            fam::ClassifierParams gp;
            stage1_objective(ckpt.faim, ckpt.classifier, x_aug, batch.y, cfg.stage1.alpha, cfg.stage1.sparse_mode,
                             &gf, &gp);
            auto branch = ckpt.faim;
            auto head = ckpt.classifier;
            l1.point = flatten(tie_bundles(branch, head));
            l1.analytic = flatten(tie_bundles(gf, gp));
            l1.loss = [&, base = ckpt](const Vector& v) {
                auto f = base.faim;
                auto p = base.classifier;
                auto tie = tie_bundles(f, p);
                unflatten(tie, v);
                return stage1_objective(f, p, x_aug, batch.y, cfg.stage1.alpha, cfg.stage1.sparse_mode).total;
            };
        } else {
            fam::Mlp gm;
            fam::ClassifierParams gp;
            stage1_objective(ckpt.aug_mapper, ckpt.classifier, x_aug, batch.y, &gm, &gp);
            auto branch = ckpt.aug_mapper;
            auto head = ckpt.classifier;
            l1.point = flatten(tie_bundles(branch, head));
            l1.analytic = flatten(tie_bundles(gm, gp));
            l1.loss = [&, base = ckpt](const Vector& v) {
                auto m = base.aug_mapper;
                auto p = base.classifier;
                auto tie = tie_bundles(m, p);
                unflatten(tie, v);
                return stage1_objective(m, p, x_aug, batch.y).total;
            };
        }
        targets.push_back(std::move(l1));

        const Matrix h = fam::mlp_forward(ckpt.generator, batch.x);
        const Matrix h_aug = aug_representation(ckpt, batch.x);
        AuditTarget ld;
        ld.name = "L_D";
        ld.point = flatten(ckpt.discriminator);
        ld.analytic = flatten(fam::loss_discriminator_grad(ckpt.discriminator, h, h_aug).grad);
        ld.loss = [h, h_aug, theta = ckpt.discriminator](const Vector& v) mutable {
            unflatten(theta, v);
            return fam::loss_discriminator(theta, h, h_aug);
        };
        targets.push_back(std::move(ld));

        AuditTarget l2;
        l2.name = "L2";
        l2.point = flatten(ckpt.generator);
        l2.analytic = flatten(
            fam::generator_objective(ckpt.generator, ckpt.discriminator, ckpt.classifier, batch.x, batch.y, cfg.stage2.beta)
                .grad);
        l2.loss = [&, phi = ckpt.generator](const Vector& v) mutable {
            unflatten(phi, v);
            return fam::generator_objective(phi, ckpt.discriminator, ckpt.classifier, batch.x, batch.y,
                                            cfg.stage2.beta)
                .total;
        };
        targets.push_back(std::move(l2));
    } else {
        throw ConfigError("gradient audit covers the two-stage variants (full, no_faim)");
    }

    AuditReport report;
    for (const auto& t : targets) {
        report.per_loss_max.emplace_back(t.name, 0.0);
    }
    Rng rng(seed);
    for (std::size_t k = 0; k < n_probes; ++k) {
        const std::size_t which = k % targets.size();
        auto& t = targets[which];
        const auto coord = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(t.point.size())));
        Vector probe = t.point;
        probe(coord) = t.point(coord) + step;
        const double up = t.loss(probe);
        probe(coord) = t.point(coord) - step;
        const double down = t.loss(probe);
        const double numeric = (up - down) / (2.0 * step);
        const double analytic = t.analytic(coord);
        const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
        const double rel = std::abs(analytic - numeric) / scale;
        report.probes.push_back({t.name, static_cast<std::size_t>(coord), analytic, numeric, rel});
        report.max_relative_error = std::max(report.max_relative_error, rel);
        auto& slot = report.per_loss_max[which].second;
        slot = std::max(slot, rel);
    }
    return report;
}

void write_trace_csv(const std::vector<EpochRecord>& trace, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << std::setprecision(17);
    out << "stage,epoch,L_y,L_sparse,L_1,L_D,L_aux,L_G,L_2,val_accuracy\n";
    auto cell = [&](double v) {
        if (std::isnan(v)) {
            out << ',';
        } else {
            out << ',' << v;
        }
    };
    for (const auto& r : trace) {
        out << r.stage << ',' << r.epoch;
        cell(r.loss_y);
        cell(r.loss_sparse);
        cell(r.loss_stage1);
        cell(r.loss_d);
        cell(r.loss_aux);
        cell(r.loss_g);
        cell(r.loss_stage2);
        cell(r.val_accuracy);
        out << '\n';
    }
}

}  // namespace fafcnn::train
