// fafcnn: experiment runner. Exit codes: 0 success, 1 configuration error,
// 2 data error, 3 training abort (or a failed gradient audit).

#include "fafcnn/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using fafcnn::exp::ExperimentConfig;

struct Overrides {
    std::string config_path;
    std::string dataset;
    std::string label_column;
    std::string positive_label;
    std::string output_dir;
    std::string variant;
    std::string head;
    std::string sparse_mode;
    std::vector<std::uint64_t> seeds;
    std::vector<double> deltas;
    std::optional<double> delta;
    std::optional<int> stage1_epochs;
    std::optional<int> stage2_epochs;
    std::optional<double> alpha;
    std::optional<double> beta;
    std::optional<int> jobs;
    std::optional<std::size_t> probes;
    std::string checkpoint;
    std::string checkpoints;
    bool fidelity = false;
    bool compare_modes = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("-c,--config", o.config_path, "JSON experiment config");
    cmd->add_option("-d,--dataset", o.dataset, "CSV dataset with a header row");
    cmd->add_option("--label", o.label_column, "label column name");
    cmd->add_option("--positive-label", o.positive_label, "raw label value decoded as class 1");
    cmd->add_option("-o,--out", o.output_dir, "output directory");
    cmd->add_option("--delta", o.delta, "perturbation ratio");
    cmd->add_option("--seeds", o.seeds, "run seeds")->delimiter(',');
    cmd->add_option("--variant", o.variant, "base | rf_no_fam | no_faim | full");
    cmd->add_option("--head", o.head, "aug_only | gen_only | mean_fusion");
    cmd->add_option("--sparse-mode", o.sparse_mode, "literal | logit_l1");
    cmd->add_option("--stage1-epochs", o.stage1_epochs);
    cmd->add_option("--stage2-epochs", o.stage2_epochs);
    cmd->add_option("--alpha", o.alpha, "sparse penalty weight");
    cmd->add_option("--beta", o.beta, "adversarial weight");
    cmd->add_option("-j,--jobs", o.jobs, "worker threads over seeds");
    cmd->add_flag("--fidelity", o.fidelity, "full-scale epochs (10000 per stage)");
}

ExperimentConfig resolve(const Overrides& o) {
    ExperimentConfig c;
    if (!o.config_path.empty()) {
        c = fafcnn::exp::load_config(o.config_path);
    }
    auto& t = c.training;
    if (o.fidelity) {
        const auto full_scale = fafcnn::train::TrainingConfig::fidelity();
        t.stage1.epochs = full_scale.stage1.epochs;
        t.stage2.epochs = full_scale.stage2.epochs;
    }
    if (!o.dataset.empty()) c.dataset = o.dataset;
    if (!o.label_column.empty()) c.label_column = o.label_column;
    if (!o.positive_label.empty()) c.positive_label = o.positive_label;
    if (!o.output_dir.empty()) c.output_dir = o.output_dir;
    if (!o.seeds.empty()) c.seeds = o.seeds;
    if (!o.deltas.empty()) c.sweep_deltas = o.deltas;
    if (o.delta) c.delta = *o.delta;
    if (!o.variant.empty()) t.variant = fafcnn::train::parse_variant(o.variant);
    if (!o.head.empty()) t.head = fafcnn::train::parse_fusion(o.head);
    if (!o.sparse_mode.empty()) t.stage1.sparse_mode = fafcnn::faim::parse_sparse_mode(o.sparse_mode);
    if (o.stage1_epochs) t.stage1.epochs = *o.stage1_epochs;
    if (o.stage2_epochs) t.stage2.epochs = *o.stage2_epochs;
    if (o.alpha) t.stage1.alpha = *o.alpha;
    if (o.beta) t.stage2.beta = *o.beta;
    if (o.jobs) c.jobs = *o.jobs;
    if (o.probes) c.audit_probes = *o.probes;
    c.validate();
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FaFCNN experiment runner"};
    app.require_subcommand(1);
    Overrides o;

    auto* prepare = app.add_subcommand("prepare", "impute, perturb and split the dataset per seed");
    auto* train = app.add_subcommand("train", "train one variant per seed on prepared data");
    auto* evaluate = app.add_subcommand("eval", "evaluate checkpoints on the test split");
    auto* sweep = app.add_subcommand("sweep", "prepare, train and evaluate across perturbation ratios");
    auto* ablate = app.add_subcommand("ablate", "compare base, rf_no_fam, no_faim and full");
    auto* heatmap = app.add_subcommand("heatmap", "average attention weights over test samples and runs");
    auto* audit = app.add_subcommand("audit", "finite-difference gradient check");
    for (auto* cmd : {prepare, train, evaluate, sweep, ablate, heatmap, audit}) {
        add_common(cmd, o);
    }
    sweep->add_option("--deltas", o.deltas, "perturbation ratios")->delimiter(',');
    heatmap->add_option("--checkpoints", o.checkpoints, "directory holding seed_*/checkpoint.json");
    heatmap->add_flag("--compare-modes", o.compare_modes, "train with both sparse modes and emit two matrices");
    audit->add_option("--checkpoint", o.checkpoint, "checkpoint to audit");
    audit->add_option("--probes", o.probes, "number of probed coordinates");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const auto config = resolve(o);
        fafcnn::exp::CommandOptions options;
        options.head = config.training.head;
        options.compare_modes = o.compare_modes;
        if (!o.checkpoint.empty()) options.checkpoint = o.checkpoint;
        if (!o.checkpoints.empty()) options.checkpoints = o.checkpoints;
        options.log = [](const std::string& line) { std::cout << line << std::endl; };

        if (prepare->parsed()) return fafcnn::exp::cmd_prepare(config, options);
        if (train->parsed()) return fafcnn::exp::cmd_train(config, options);
        if (evaluate->parsed()) return fafcnn::exp::cmd_eval(config, options);
        if (sweep->parsed()) return fafcnn::exp::cmd_sweep(config, options);
        if (ablate->parsed()) return fafcnn::exp::cmd_ablate(config, options);
        if (heatmap->parsed()) return fafcnn::exp::cmd_heatmap(config, options);
        return fafcnn::exp::cmd_audit(config, options);
    } catch (const fafcnn::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const fafcnn::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const fafcnn::TrainingAbort& e) {
        std::cerr << "training aborted: " << e.what() << '\n';
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
