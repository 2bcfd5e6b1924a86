#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fafcnn/datakit.hpp"
#include "fafcnn/experiment.hpp"
#include "fafcnn/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <filesystem>
#include <set>
#include <fstream>
#include <sstream>

using namespace fafcnn;
using namespace fafcnn::train;
namespace fs = std::filesystem;

namespace {

struct Splits {
    SplitView train;
    SplitView validation;
    forest::GbdtModel gbdt;
};

Splits make_splits(const data::Dataset& raw, std::uint64_t seed) {
    const auto split = data::split_8_1_1(raw, seed);
    const auto scaled = data::standardize(raw, split);
    auto view = [&](const IndexList& rows) {
        SplitView v;
        v.x = data::select_rows(scaled.features, rows);
        v.y = data::select_rows(scaled.labels, rows);
        return v;
    };
    Splits s{view(split.train), view(split.validation), {}};
    s.gbdt = forest::fit_gbdt(s.train.x, s.train.y, forest::GbdtConfig::defaults_for(raw.cols()));
    s.train.x_aug = forest::leaf_one_hot(s.gbdt, s.train.x);
    s.validation.x_aug = forest::leaf_one_hot(s.gbdt, s.validation.x);
    return s;
}

data::Dataset synthetic(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    std::ostringstream csv;
    for (std::size_t j = 0; j < d; ++j) csv << 'f' << j << ',';
    csv << "class\n";
    for (std::size_t i = 0; i < n; ++i) {
        double score = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = rng.normal();
            score += (j % 2 ? -0.8 : 1.0) * v;
            csv << v << ',';
        }
        csv << (score + 0.5 * rng.normal() > 0.0) << '\n';
    }
    return data::impute_median(data::parse_table(csv.str(), "class"));
}

data::Dataset dataset_file(const char* name) {
    return data::impute_median(data::load_table(fs::path(FAFCNN_DATA_DIR) / name, "class"));
}

struct Stage2Setup {
    Splits s;
    Matrix h_aug_train;
    Matrix h_aug_val;
    fam::GeneratorParams phi;
    fam::DiscriminatorParams theta;
    fam::ClassifierParams psi;
};

Stage2Setup stage2_setup(std::uint64_t seed) {
    Stage2Setup t{make_splits(synthetic(150, 6, seed), seed), {}, {}, {}, {}, {}};
    Rng rng(seed);
    auto faim = faim::FaimParams::init(forest::LeafEncoding::of(t.s.gbdt).total_dim, 4, rng);
    t.psi = fam::ClassifierParams::init(4, rng);
    StageOneConfig c1;
    c1.epochs = 30;
    train_stage1(t.s.train, t.s.validation, faim, t.psi, c1);
    t.h_aug_train = faim::faim_forward_batch(faim, t.s.train.x_aug).h_aug;
    t.h_aug_val = faim::faim_forward_batch(faim, t.s.validation.x_aug).h_aug;
    t.phi = fam::make_generator(6, 8, 4, rng, fam::Activation::identity);
    t.theta = fam::make_discriminator(4, 8, rng);
    return t;
}

Vector clipped(Vector g, double cap) {
    clip_global_norm(g, cap);
    return g;
}

}  // namespace

TEST_CASE("names parse and print") {
    for (auto v : {Variant::base, Variant::rf_no_fam, Variant::no_faim, Variant::full}) {
        CHECK(parse_variant(to_string(v)) == v);
    }
    for (auto m : {FusionMode::aug_only, FusionMode::gen_only, FusionMode::mean_fusion}) {
        CHECK(parse_fusion(to_string(m)) == m);
    }
    CHECK_THROWS_AS(parse_variant("tiny"), ConfigError);
    CHECK_THROWS_AS(parse_fusion("max"), ConfigError);
    CHECK(TrainingConfig::fidelity().stage1.epochs == 10000);
    CHECK(TrainingConfig::fidelity().stage2.epochs == 10000);
    const TrainingConfig desk;
    CHECK(desk.stage1.epochs == 2000);
    CHECK(desk.stage2.epochs == 2000);
    CHECK(desk.stage1.learning_rate == 0.005);
    CHECK(desk.stage1.alpha == 0.05);
    CHECK(desk.stage2.beta == 0.5);
    CHECK(desk.head == FusionMode::mean_fusion);
}

TEST_CASE("adam first step and clipping") {
    StageOneConfig c;
    Adam adam(3, c);
    Vector params = Vector::Zero(3);
    Vector grad(3);
    grad << 0.5, -2.0, 0.0;
    adam.step(params, grad);
    for (Eigen::Index k = 0; k < 3; ++k) {
        const double expected = -c.learning_rate * grad(k) / (std::abs(grad(k)) + c.adam_epsilon);
        CHECK(params(k) == doctest::Approx(expected).epsilon(1e-14));
    }
    Vector g(2);
    g << 3.0, 4.0;
    clip_global_norm(g, 1.0);
    CHECK(g.norm() == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(g(0) == doctest::Approx(0.6).epsilon(1e-15));
    g << 3.0, 4.0;
    clip_global_norm(g, 10.0);
    CHECK(g(1) == 4.0);
    clip_global_norm(g, 0.0);
    CHECK(g(1) == 4.0);
}

TEST_CASE("stage one loss composition") {
    const auto s = make_splits(synthetic(120, 6, 3), 3);
    Rng rng(3);
    const auto faim = faim::FaimParams::init(static_cast<std::size_t>(s.train.x_aug.cols()), 4, rng);
    const auto psi = fam::ClassifierParams::init(4, rng);
    for (auto mode : {faim::SparseMode::logit_l1, faim::SparseMode::literal}) {
        const auto obj = stage1_objective(faim, psi, s.train.x_aug, s.train.y, 0.37, mode);
        const auto fwd = faim::faim_forward_batch(faim, s.train.x_aug);
        const double ly = fam::loss_aux(psi, fwd.h_aug, s.train.y);
        const double sparse = faim::sparse_penalty(fwd, mode);
        CHECK(std::abs(obj.loss_y - ly) <= 1e-12);
        CHECK(std::abs(obj.loss_sparse - sparse) <= 1e-12);
        CHECK(std::abs(obj.total - (ly + 0.37 * sparse)) <= 1e-12);
        const auto plain = stage1_objective(faim, psi, s.train.x_aug, s.train.y, 0.0, mode);
        CHECK(plain.total == plain.loss_y);
    }
}

TEST_CASE("constant labels are learned quickly") {
    auto raw = synthetic(100, 4, 4);
    raw.labels.setOnes();
    // A GBDT on one class is just the prior; stage one still has to move psi.
    auto s = make_splits(raw, 4);
    Rng rng(4);
    auto faim = faim::FaimParams::init(static_cast<std::size_t>(s.train.x_aug.cols()), 4, rng);
    auto psi = fam::ClassifierParams::init(4, rng);
    StageOneConfig c;
    c.epochs = 100;
    const auto r = train_stage1(s.train, s.validation, faim, psi, c);
    CHECK(r.trace.back().loss_y < std::log(2.0));
}

TEST_CASE("literal sparse mode adds a constant and no gradient") {
    const auto s = make_splits(synthetic(150, 6, 5), 5);
    Rng rng(5);
    const auto faim0 = faim::FaimParams::init(static_cast<std::size_t>(s.train.x_aug.cols()), 4, rng);
    const auto psi0 = fam::ClassifierParams::init(4, rng);
    std::size_t with_pairs = 0;
    for (Eigen::Index n = 0; n < s.train.x_aug.rows(); ++n) {
        with_pairs += !faim::active_pairs(s.train.x_aug.row(n).transpose()).pairs.empty();
    }
    StageOneConfig c;
    c.epochs = 25;
    c.sparse_mode = faim::SparseMode::literal;
    c.alpha = 0.0;
    auto faim_a = faim0;
    auto psi_a = psi0;
    const auto ra = train_stage1(s.train, s.validation, faim_a, psi_a, c);
    c.alpha = 1.3;
    auto faim_b = faim0;
    auto psi_b = psi0;
    const auto rb = train_stage1(s.train, s.validation, faim_b, psi_b, c);
    CHECK(parameter_hash(faim_a) == parameter_hash(faim_b));
    CHECK(parameter_hash(psi_a) == parameter_hash(psi_b));
    REQUIRE(ra.trace.size() == rb.trace.size());
    for (std::size_t e = 0; e < rb.trace.size(); ++e) {
        CHECK(rb.trace[e].loss_sparse == static_cast<double>(with_pairs));
        CHECK(rb.trace[e].loss_stage1 == rb.trace[e].loss_y + 1.3 * static_cast<double>(with_pairs));
        CHECK(rb.trace[e].loss_y == ra.trace[e].loss_y);
    }
}

TEST_CASE("stage two alternation order") {
    auto t = stage2_setup(6);
    StageTwoConfig c;
    c.epochs = 2;
    const auto phi0 = t.phi;
    const auto theta0 = t.theta;
    const auto r = train_stage2(t.s.train.x, t.h_aug_train, t.s.train.y, t.s.validation.x, t.h_aug_val,
                                t.s.validation.y, t.phi, t.theta, t.psi, c, FusionMode::mean_fusion);
    REQUIRE(r.trace.size() == 2);

    // Replay epoch 0 by hand: theta step on the current generator, then phi step against the new theta.
    const auto d0 = fam::loss_discriminator_grad(theta0, fam::mlp_forward(phi0, t.s.train.x), t.h_aug_train);
    auto theta1 = theta0;
    unflatten(theta1, Vector(flatten(theta0) - c.learning_rate * clipped(flatten(d0.grad), c.clip_norm)));
    const auto g0 = fam::generator_objective(phi0, theta1, t.psi, t.s.train.x, t.s.train.y, c.beta);
    auto phi1 = phi0;
    unflatten(phi1, Vector(flatten(phi0) - c.learning_rate * clipped(flatten(g0.grad), c.clip_norm)));

    CHECK(r.trace[0].loss_d == d0.loss);
    CHECK(r.trace[0].loss_g == g0.adversarial);
    CHECK(r.trace[0].loss_aux == g0.aux);
    CHECK(r.trace[0].loss_stage2 == g0.total);
    const auto stale = fam::generator_objective(phi0, theta0, t.psi, t.s.train.x, t.s.train.y, c.beta);
    CHECK(stale.adversarial != g0.adversarial);
    CHECK(r.trace[1].loss_d ==
          doctest::Approx(fam::loss_discriminator(theta1, fam::mlp_forward(phi1, t.s.train.x), t.h_aug_train))
              .epsilon(1e-13));
    for (const auto& rec : r.trace) {
        CHECK(std::abs(rec.loss_stage2 - (rec.loss_aux + c.beta * rec.loss_g)) <= 1e-12);
    }
}

TEST_CASE("beta zero follows the supervised loss alone") {
    auto t = stage2_setup(7);
    StageTwoConfig c;
    c.epochs = 5;
    c.beta = 0.0;
    auto phi = t.phi;
    const auto r = train_stage2(t.s.train.x, t.h_aug_train, t.s.train.y, t.s.validation.x, t.h_aug_val,
                                t.s.validation.y, t.phi, t.theta, t.psi, c, FusionMode::gen_only);
    for (int e = 0; e < c.epochs; ++e) {
        fam::MlpTrace trace;
        const Matrix h = fam::mlp_forward(phi, t.s.train.x, &trace);
        const auto aux = fam::loss_aux_grad(t.psi, h, t.s.train.y);
        CHECK(r.trace[static_cast<std::size_t>(e)].loss_stage2 == doctest::Approx(aux.loss).epsilon(1e-14));
        const Vector g = flatten(fam::mlp_backward(phi, trace, aux.grad.h));
        unflatten(phi, Vector(flatten(phi) - c.learning_rate * clipped(g, c.clip_norm)));
    }
}

TEST_CASE("zero learning rate leaves everything unchanged") {
    auto t = stage2_setup(8);
    StageTwoConfig c;
    c.epochs = 10;
    c.learning_rate = 0.0;
    const auto h_phi = parameter_hash(t.phi);
    const auto h_theta = parameter_hash(t.theta);
    train_stage2(t.s.train.x, t.h_aug_train, t.s.train.y, t.s.validation.x, t.h_aug_val, t.s.validation.y, t.phi,
                 t.theta, t.psi, c, FusionMode::mean_fusion);
    CHECK(parameter_hash(t.phi) == h_phi);
    CHECK(parameter_hash(t.theta) == h_theta);
}

TEST_CASE("stage two never touches FaIM or psi") {
    const auto s = make_splits(synthetic(150, 6, 9), 9);
    Rng rng(9);
    auto faim = faim::FaimParams::init(static_cast<std::size_t>(s.train.x_aug.cols()), 4, rng);
    auto psi = fam::ClassifierParams::init(4, rng);
    StageOneConfig c1;
    c1.epochs = 20;
    train_stage1(s.train, s.validation, faim, psi, c1);
    const auto before = std::pair{parameter_hash(faim), parameter_hash(psi)};
    auto phi = fam::make_generator(6, 8, 4, rng, fam::Activation::identity);
    auto theta = fam::make_discriminator(4, 8, rng);
    StageTwoConfig c2;
    c2.epochs = 50;
    train_stage2(s.train, s.validation, faim, phi, theta, psi, c2, FusionMode::mean_fusion);
    CHECK(parameter_hash(faim) == before.first);
    CHECK(parameter_hash(psi) == before.second);
}

TEST_CASE("stage one makes progress on the bundled datasets") {
    for (const char* name : {"wbc.csv", "pima.csv", "heart_statlog.csv"}) {
        CAPTURE(name);
        const auto s = make_splits(dataset_file(name), 1);
        Rng rng(1);
        auto faim = faim::FaimParams::init(static_cast<std::size_t>(s.train.x_aug.cols()), 8, rng);
        auto psi = fam::ClassifierParams::init(8, rng);
        StageOneConfig c;
        c.epochs = 300;
        const auto r = train_stage1(s.train, s.validation, faim, psi, c);
        CHECK(r.best_loss < r.initial_loss);
        CHECK(r.best_epoch > 0);
    }
}

TEST_CASE("non-finite losses abort training") {
    const auto s = make_splits(synthetic(100, 4, 10), 10);
    Rng rng(10);
    auto faim = faim::FaimParams::init(static_cast<std::size_t>(s.train.x_aug.cols()), 4, rng);
    faim.linear.col(0).setConstant(std::numeric_limits<double>::quiet_NaN());
    auto psi = fam::ClassifierParams::init(4, rng);
    StageOneConfig c;
    c.epochs = 5;
    CHECK_THROWS_AS(train_stage1(s.train, s.validation, faim, psi, c), TrainingAbort);
    c.epochs = 0;
    CHECK_THROWS_AS(train_stage1(s.train, s.validation, faim, psi, c), ConfigError);
}

TEST_CASE("fusion heads agree when both branches coincide") {
    // One stump gives a two-bit code with a single active bit, so h_aug is a
    // row of the linear table; a constant generator reproduces that row.
    Checkpoint ckpt;
    ckpt.config.variant = Variant::full;
    forest::GbdtModel gbdt;
    gbdt.n_features = 3;
    gbdt.config.shrinkage = 0.1;
    forest::Tree stump;
    stump.nodes = {forest::TreeNode{0, 0.0, 1, 2, -1, 0.0, 4}, forest::TreeNode{-1, 0, -1, -1, 0, -1.0, 2},
                   forest::TreeNode{-1, 0, -1, -1, 1, 1.0, 2}};
    stump.leaf_count = 2;
    gbdt.trees = {stump};
    ckpt.gbdt = gbdt;
    Rng rng(11);
    ckpt.faim = faim::FaimParams::init(2, 2, rng);
    Vector c(2);
    c << 0.8, -0.3;
    ckpt.faim.linear.row(0) = c.transpose();
    ckpt.faim.linear.row(1) = c.transpose();
    ckpt.generator = fam::make_generator(3, 4, 2, rng, fam::Activation::identity);
    ckpt.generator.w2.setZero();
    ckpt.generator.b2 = c;
    ckpt.discriminator = fam::make_discriminator(2, 3, rng);
    ckpt.classifier = fam::ClassifierParams::init(2, rng);
    Matrix x(6, 3);
    x.setRandom();
    const Vector aug = predict_proba(ckpt, x, FusionMode::aug_only);
    CHECK(predict_proba(ckpt, x, FusionMode::gen_only) == aug);
    CHECK(predict_proba(ckpt, x, FusionMode::mean_fusion) == aug);
    CHECK(aug(0) == fam::classifier_forward(ckpt.classifier, ConstVectorRef(c)));
    CHECK(decide(0.5) == 1);
    CHECK(decide(std::nextafter(0.5, 0.0)) == 0);
    ckpt.classifier.weight.setZero();
    ckpt.classifier.bias.setZero();
    CHECK(predict(ckpt, x.row(0).transpose(), FusionMode::mean_fusion).label == 1);
}

TEST_CASE("pipeline determinism, reload and audit") {
    const auto raw = synthetic(160, 6, 12);
    const auto prepared = exp::prepare(raw, 0.3, 12);
    TrainingConfig cfg;
    cfg.stage1.epochs = 40;
    cfg.stage2.epochs = 40;
    const auto a = exp::run_seed(prepared, cfg);
    const auto b = exp::run_seed(prepared, cfg);
    REQUIRE_FALSE(a.error);
    CHECK(to_json(a.checkpoint).dump() == to_json(b.checkpoint).dump());
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t e = 0; e < a.trace.size(); ++e) {
        CHECK(std::memcmp(&a.trace[e], &b.trace[e], sizeof(EpochRecord)) == 0);
    }

    const auto path = fs::temp_directory_path() / "fafcnn_trainer_ckpt.json";
    save_checkpoint(a.checkpoint, path);
    const auto back = load_checkpoint(path);
    fs::remove(path);
    const Matrix x = prepared.standardized().features;
    for (auto head : {FusionMode::aug_only, FusionMode::gen_only, FusionMode::mean_fusion}) {
        CHECK(predict_proba(back, x, head) == predict_proba(a.checkpoint, x, head));
    }
    CHECK(parameter_hash(back.faim) == parameter_hash(a.checkpoint.faim));
    CHECK(to_json(back).dump() == to_json(a.checkpoint).dump());

    SplitView batch;
    batch.x = x.topRows(48);
    batch.y = prepared.data.labels.head(48);
    batch.x_aug = augmented_features(a.checkpoint, batch.x);
    const auto report = finite_diff_audit(a.checkpoint, batch, 240, 1);
    CHECK(report.probes.size() == 240);
    CHECK(report.max_relative_error <= 1e-4);
    std::set<std::string> losses;
    for (const auto& p : report.probes) losses.insert(p.loss);
    CHECK(losses == std::set<std::string>{"L1", "L_D", "L2"});
}

TEST_CASE("audit of a linear-only FaIM") {
    const auto raw = synthetic(160, 6, 13);
    const auto prepared = exp::prepare(raw, 0.0, 13);
    TrainingConfig cfg;
    cfg.stage1.epochs = 5;
    cfg.stage2.epochs = 5;
    auto run = exp::run_seed(prepared, cfg);
    REQUIRE_FALSE(run.error);
    auto& f = run.checkpoint.faim;
    f.embeddings.setZero();
    f.attn_weight.setZero();
    f.attn_bias.setZero();
    f.attn_query.setZero();
    SplitView batch;
    batch.x = prepared.standardized().features.topRows(64);
    batch.y = prepared.data.labels.head(64);
    batch.x_aug = augmented_features(run.checkpoint, batch.x);
    const auto report = finite_diff_audit(run.checkpoint, batch, 200, 2);
    CHECK(report.max_relative_error <= 1e-6);

    run.checkpoint.config.variant = Variant::base;
    CHECK_THROWS_AS(finite_diff_audit(run.checkpoint, batch, 10, 2), ConfigError);
}

TEST_CASE("trace csv") {
    std::vector<EpochRecord> trace(2);
    trace[0].loss_y = 0.5;
    trace[1].stage = 2;
    trace[1].epoch = 7;
    trace[1].loss_d = -1.25;
    const auto path = fs::temp_directory_path() / "fafcnn_trace.csv";
    write_trace_csv(trace, path);
    std::ifstream in(path);
    std::string header;
    std::string row1;
    std::string row2;
    std::getline(in, header);
    std::getline(in, row1);
    std::getline(in, row2);
    fs::remove(path);
    CHECK(header == "stage,epoch,L_y,L_sparse,L_1,L_D,L_aux,L_G,L_2,val_accuracy");
    CHECK(row1.rfind("1,0,0.5,", 0) == 0);
    CHECK(row2.rfind("2,7,,,,-1.25,", 0) == 0);
}

TEST_CASE("config json round trip") {
    TrainingConfig c;
    c.variant = Variant::no_faim;
    c.stage1.alpha = 0.2;
    c.stage1.sparse_mode = faim::SparseMode::literal;
    c.stage2.beta = 0.9;
    c.model.generator_output = fam::Activation::relu;
    c.head = FusionMode::aug_only;
    const auto back = training_config_from_json(nlohmann::json::parse(to_json(c).dump()));
    CHECK(to_json(back) == to_json(c));
    CHECK(back.model.generator_output == fam::Activation::relu);
}
