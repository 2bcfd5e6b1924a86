#include "fafcnn/experiment.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace fafcnn::exp {

using nlohmann::json;
using train::Variant;

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
    if (seeds.empty()) {
        throw ConfigError("at least one seed is required");
    }
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
        throw ConfigError("seeds must be distinct");
    }
    auto check_delta = [](double d) {
        if (!(d >= 0.0 && d <= 1.0)) {
            throw ConfigError("delta must lie in [0, 1]");
        }
    };
    check_delta(delta);
    for (double d : sweep_deltas) {
        check_delta(d);
    }
    if (jobs < 1) {
        throw ConfigError("jobs must be at least 1");
    }
    const auto& t = training;
    if (t.stage1.epochs < 1 || t.stage2.epochs < 1) {
        throw ConfigError("epoch counts must be positive");
    }
    if (t.stage1.learning_rate <= 0.0 || t.stage2.learning_rate <= 0.0) {
        throw ConfigError("learning rates must be positive");
    }
    if (t.stage1.alpha < 0.0 || t.stage2.beta < 0.0) {
        throw ConfigError("alpha and beta must be non-negative");
    }
    if (t.model.embedding_dim == 0 || t.model.generator_hidden == 0 || t.model.discriminator_hidden == 0 ||
        t.model.mapper_hidden == 0) {
        throw ConfigError("layer widths must be positive");
    }
    if (t.gbdt.max_depth < 1 || t.gbdt.min_samples_leaf < 1 || t.gbdt.shrinkage <= 0.0) {
        throw ConfigError("invalid GBDT settings");
    }
    if (t.rf.n_trees < 1 || t.rf.max_depth < 1 || t.rf.min_samples_leaf < 1) {
        throw ConfigError("invalid random forest settings");
    }
}

namespace {

template <class F>
void each_key(const json& j, std::string_view section, F&& apply) {
    if (!j.is_object()) {
        throw ConfigError("config section '" + std::string(section) + "' must be an object");
    }
    for (const auto& [key, value] : j.items()) {
        if (!apply(key, value)) {
            throw ConfigError("unknown config key '" + std::string(section) + (section.empty() ? "" : ".") + key +
                              "'");
        }
    }
}

}  // namespace

ExperimentConfig config_from_json(const json& j, ExperimentConfig c) {
    auto& t = c.training;
    try {
        bool fidelity = false;
        bool stage1_epochs_set = false;
        bool stage2_epochs_set = false;
        each_key(j, "", [&](const std::string& key, const json& v) {
            if (key == "dataset") {
                c.dataset = v.get<std::string>();
            } else if (key == "label_column") {
                c.label_column = v.get<std::string>();
            } else if (key == "positive_label") {
                c.positive_label = v.is_null() ? std::nullopt : std::optional(v.get<std::string>());
            } else if (key == "delta") {
                c.delta = v.get<double>();
            } else if (key == "seeds") {
                c.seeds = v.get<std::vector<std::uint64_t>>();
            } else if (key == "output_dir") {
                c.output_dir = v.get<std::string>();
            } else if (key == "sweep_deltas") {
                c.sweep_deltas = v.get<std::vector<double>>();
            } else if (key == "audit_probes") {
                c.audit_probes = v.get<std::size_t>();
            } else if (key == "audit_batch") {
                c.audit_batch = v.get<std::size_t>();
            } else if (key == "jobs") {
                c.jobs = v.get<int>();
            } else if (key == "variant") {
                t.variant = train::parse_variant(v.get<std::string>());
            } else if (key == "head") {
                t.head = train::parse_fusion(v.get<std::string>());
            } else if (key == "fidelity") {
                fidelity = v.get<bool>();
            } else if (key == "training") {
                // The complete block written by to_json; later keys still override it.
                t = train::training_config_from_json(v);
            } else if (key == "model") {
                each_key(v, key, [&](const std::string& k, const json& x) {
                    if (k == "embedding_dim") t.model.embedding_dim = x.get<std::size_t>();
                    else if (k == "generator_hidden") t.model.generator_hidden = x.get<std::size_t>();
                    else if (k == "discriminator_hidden") t.model.discriminator_hidden = x.get<std::size_t>();
                    else if (k == "mapper_hidden") t.model.mapper_hidden = x.get<std::size_t>();
                    else if (k == "generator_output") t.model.generator_output = fam::parse_activation(x.get<std::string>());
                    else return false;
                    return true;
                });
            } else if (key == "stage1") {
                each_key(v, key, [&](const std::string& k, const json& x) {
                    if (k == "epochs") { t.stage1.epochs = x.get<int>(); stage1_epochs_set = true; }
                    else if (k == "learning_rate") t.stage1.learning_rate = x.get<double>();
                    else if (k == "adam_beta1") t.stage1.adam_beta1 = x.get<double>();
                    else if (k == "adam_beta2") t.stage1.adam_beta2 = x.get<double>();
                    else if (k == "adam_epsilon") t.stage1.adam_epsilon = x.get<double>();
                    else if (k == "alpha") t.stage1.alpha = x.get<double>();
                    else if (k == "sparse_mode") t.stage1.sparse_mode = faim::parse_sparse_mode(x.get<std::string>());
                    else return false;
                    return true;
                });
            } else if (key == "stage2") {
                each_key(v, key, [&](const std::string& k, const json& x) {
                    if (k == "epochs") { t.stage2.epochs = x.get<int>(); stage2_epochs_set = true; }
                    else if (k == "learning_rate") t.stage2.learning_rate = x.get<double>();
                    else if (k == "beta") t.stage2.beta = x.get<double>();
                    else if (k == "d_steps_per_epoch") t.stage2.d_steps_per_epoch = x.get<int>();
                    else if (k == "g_steps_per_epoch") t.stage2.g_steps_per_epoch = x.get<int>();
                    else if (k == "clip_norm") t.stage2.clip_norm = x.get<double>();
                    else return false;
                    return true;
                });
            } else if (key == "gbdt") {
                each_key(v, key, [&](const std::string& k, const json& x) {
                    if (k == "n_trees") t.gbdt.n_trees = x.get<int>();
                    else if (k == "max_depth") t.gbdt.max_depth = x.get<int>();
                    else if (k == "min_samples_leaf") t.gbdt.min_samples_leaf = x.get<std::size_t>();
                    else if (k == "shrinkage") t.gbdt.shrinkage = x.get<double>();
                    else return false;
                    return true;
                });
            } else if (key == "rf") {
                each_key(v, key, [&](const std::string& k, const json& x) {
                    if (k == "n_trees") t.rf.n_trees = x.get<int>();
                    else if (k == "max_depth") t.rf.max_depth = x.get<int>();
                    else if (k == "min_samples_leaf") t.rf.min_samples_leaf = x.get<std::size_t>();
                    else return false;
                    return true;
                });
            } else {
                return false;
            }
            return true;
        });
        if (fidelity) {
            const auto full_scale = train::TrainingConfig::fidelity();
            if (!stage1_epochs_set) t.stage1.epochs = full_scale.stage1.epochs;
            if (!stage2_epochs_set) t.stage2.epochs = full_scale.stage2.epochs;
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    return c;
}

json to_json(const ExperimentConfig& c) {
    json j = {{"dataset", c.dataset.string()},
              {"label_column", c.label_column},
              {"positive_label", c.positive_label ? json(*c.positive_label) : json(nullptr)},
              {"delta", c.delta},
              {"seeds", c.seeds},
              {"output_dir", c.output_dir.string()},
              {"sweep_deltas", c.sweep_deltas},
              {"audit_probes", c.audit_probes},
              {"audit_batch", c.audit_batch},
              {"jobs", c.jobs}};
    j["training"] = train::to_json(c.training);
    return j;
}

ExperimentConfig load_config(const fs::path& path, ExperimentConfig base) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config " + path.string());
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j, std::move(base));
}

// ---------------------------------------------------------------------------
// Prepared data

std::uint64_t perturb_seed(std::uint64_t seed) { return mix_seed(seed, 1); }
std::uint64_t split_seed(std::uint64_t seed) { return mix_seed(seed, 2); }
std::uint64_t init_seed(std::uint64_t seed) { return mix_seed(seed, 3); }
std::uint64_t forest_seed(std::uint64_t seed) { return mix_seed(seed, 4); }

data::Dataset PreparedData::standardized() const { return data::standardize(data, split); }

data::Dataset load_imputed(const ExperimentConfig& config) {
    if (config.dataset.empty()) {
        throw ConfigError("no dataset given");
    }
    if (!fs::exists(config.dataset)) {
        throw ConfigError("dataset " + config.dataset.string() + " does not exist");
    }
    data::LoadOptions options;
    options.positive_label = config.positive_label;
    return data::impute_median(data::load_table(config.dataset, config.label_column, options));
}

PreparedData prepare(const data::Dataset& imputed, double delta, std::uint64_t seed) {
    auto perturbed = data::perturb_logged(imputed, {delta, perturb_seed(seed)});
    PreparedData out;
    out.split = data::split_8_1_1(perturbed.data, split_seed(seed));
    out.data = std::move(perturbed.data);
    out.perturbed = std::move(perturbed.cells);
    out.delta = delta;
    out.seed = seed;
    return out;
}

namespace {

constexpr const char* kPreparedLabel = "class";

void write_json(const json& j, const fs::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << j.dump(1) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

}  // namespace

std::vector<fs::path> write_prepared(const PreparedData& prepared, const fs::path& dir) {
    fs::create_directories(dir);
    const auto csv = dir / "data.csv";
    const auto meta = dir / "meta.json";
    data::write_csv(prepared.data, csv, kPreparedLabel);
    const auto scaled = prepared.standardized();
    json cells = json::array();
    for (const auto& c : prepared.perturbed) {
        cells.push_back({{"row", c.row}, {"column", c.column}, {"previous", c.previous}});
    }
    json j = {{"seed", prepared.seed},
              {"perturb_seed", perturb_seed(prepared.seed)},
              {"split_seed", split_seed(prepared.seed)},
              {"delta", prepared.delta},
              {"rows", prepared.data.rows()},
              {"columns", prepared.data.column_names},
              {"column_medians", vector_to_json(prepared.data.column_medians)},
              {"source_rows", prepared.data.source_rows},
              {"split", data::split_to_json(prepared.split)},
              {"perturbed_cells", std::move(cells)},
              {"standardization",
               {{"mean", vector_to_json(scaled.standardization->mean)},
                {"stddev", vector_to_json(scaled.standardization->stddev)}}}};
    write_json(j, meta);
    return {csv, meta};
}

PreparedData read_prepared(const fs::path& dir) {
    const auto meta_path = dir / "meta.json";
    if (!fs::exists(meta_path)) {
        throw DataError("no prepared data in " + dir.string() + " (run prepare first)");
    }
    const json meta = read_json(meta_path);
    PreparedData out;
    out.data = data::impute_median(data::load_table(dir / "data.csv", kPreparedLabel));
    out.data.column_medians = vector_from_json(meta.at("column_medians"));
    out.data.source_rows = meta.at("source_rows").get<IndexList>();
    out.split = data::split_from_json(meta.at("split"));
    for (const auto& c : meta.at("perturbed_cells")) {
        out.perturbed.push_back(
            {c.at("row").get<std::size_t>(), c.at("column").get<std::size_t>(), c.at("previous").get<double>()});
    }
    out.delta = meta.at("delta").get<double>();
    out.seed = meta.at("seed").get<std::uint64_t>();
    return out;
}

// ---------------------------------------------------------------------------
// Parameter matching

std::size_t full_parameter_count(const train::ModelConfig& m, std::size_t d, std::size_t aug_dim) {
    const std::size_t p = m.embedding_dim;
    const std::size_t faim = 2 * aug_dim * p + p * p + 2 * p;
    return faim + fam::Mlp::count(d, m.generator_hidden, p) + fam::Mlp::count(p, m.discriminator_hidden, p) + p + 1;
}

std::size_t variant_parameter_count(Variant variant, const train::ModelConfig& m, std::size_t d,
                                    std::size_t aug_dim) {
    const std::size_t p = m.embedding_dim;
    const std::size_t shared = fam::Mlp::count(d, m.generator_hidden, p) + p + 1;
    switch (variant) {
        case Variant::base:
            return shared;
        case Variant::rf_no_fam:
            return shared + fam::Mlp::count(aug_dim, m.mapper_hidden, p);
        case Variant::no_faim:
            return shared + fam::Mlp::count(aug_dim, m.mapper_hidden, p) +
                   fam::Mlp::count(p, m.discriminator_hidden, p);
        case Variant::full:
            break;
    }
    return full_parameter_count(m, d, aug_dim);
}

train::ModelConfig match_widths(Variant variant, const train::ModelConfig& base, std::size_t d, std::size_t aug_dim,
                                std::size_t reference_count) {
    if (variant == Variant::full) {
        return base;
    }
    train::ModelConfig m = base;
    std::size_t& width = variant == Variant::base ? m.generator_hidden : m.mapper_hidden;
    // The count is affine in the widened width, so solve and check the neighbours.
    width = 1;
    const double at_one = static_cast<double>(variant_parameter_count(variant, m, d, aug_dim));
    width = 2;
    const double slope = static_cast<double>(variant_parameter_count(variant, m, d, aug_dim)) - at_one;
    const double guess = 1.0 + (static_cast<double>(reference_count) - at_one) / slope;
    std::size_t best = 1;
    double best_gap = std::numeric_limits<double>::infinity();
    const auto centre = static_cast<long long>(std::llround(std::max(1.0, guess)));
    for (long long w = std::max(1LL, centre - 1); w <= centre + 1; ++w) {
        width = static_cast<std::size_t>(w);
        const double gap =
            std::abs(static_cast<double>(variant_parameter_count(variant, m, d, aug_dim)) - static_cast<double>(reference_count));
        if (gap < best_gap) {
            best_gap = gap;
            best = width;
        }
    }
    width = best;
    if (best_gap > 0.1 * static_cast<double>(reference_count)) {
        std::ostringstream msg;
        msg << "cannot match " << train::to_string(variant) << " to " << reference_count
            << " parameters within 10% (closest " << variant_parameter_count(variant, m, d, aug_dim) << ")";
        throw ConfigError(msg.str());
    }
    return m;
}

// ---------------------------------------------------------------------------
// Training

namespace {

train::SplitView view_of(const data::Dataset& scaled, const IndexList& rows) {
    train::SplitView v;
    v.x = data::select_rows(scaled.features, rows);
    v.y = data::select_rows(scaled.labels, rows);
    return v;
}

void append(std::vector<train::EpochRecord>& trace, const train::StageResult& stage) {
    trace.insert(trace.end(), stage.trace.begin(), stage.trace.end());
}

}  // namespace

SeedRun run_seed(const PreparedData& prepared, const train::TrainingConfig& config) {
    SeedRun run;
    run.seed = prepared.seed;
    const auto scaled = prepared.standardized();
    train::SplitView tr = view_of(scaled, prepared.split.train);
    train::SplitView va = view_of(scaled, prepared.split.validation);
    const std::size_t d = scaled.cols();

    train::TrainingConfig cfg = config;
    cfg.seed = prepared.seed;
    if (cfg.gbdt.n_trees < 0) {
        cfg.gbdt.n_trees = forest::GbdtConfig::defaults_for(d).n_trees;
    }
    cfg.rf.seed = forest_seed(prepared.seed);

    // The full model's size on this data is the reference for width matching,
    // so the GBDT is fitted for every variant.
    auto gbdt = forest::fit_gbdt(tr.x, tr.y, cfg.gbdt);
    const std::size_t leaf_dim = forest::LeafEncoding::of(gbdt).total_dim;
    const std::size_t reference = full_parameter_count(cfg.model, d, leaf_dim);
    const std::size_t aug_dim = cfg.variant == Variant::rf_no_fam ? static_cast<std::size_t>(cfg.rf.n_trees) : leaf_dim;
    cfg.model = match_widths(cfg.variant, cfg.model, d, aug_dim, reference);

    auto& ckpt = run.checkpoint;
    ckpt.config = cfg;
    const std::size_t p = cfg.model.embedding_dim;
    Rng rng(init_seed(prepared.seed));

    // Supervised-only variants get the same epoch budget as both stages together.
    train::StageOneConfig supervised = cfg.stage1;
    supervised.epochs = cfg.stage1.epochs + cfg.stage2.epochs;

    try {
        switch (cfg.variant) {
            case Variant::full: {
                tr.x_aug = forest::leaf_one_hot(gbdt, tr.x);
                va.x_aug = forest::leaf_one_hot(gbdt, va.x);
                ckpt.gbdt = std::move(gbdt);
                ckpt.faim = faim::FaimParams::init(leaf_dim, p, rng);
                ckpt.classifier = fam::ClassifierParams::init(p, rng);
                ckpt.generator = fam::make_generator(d, cfg.model.generator_hidden, p, rng, cfg.model.generator_output);
                ckpt.discriminator = fam::make_discriminator(p, cfg.model.discriminator_hidden, rng);
                const auto s1 = train::train_stage1(tr, va, ckpt.faim, ckpt.classifier, cfg.stage1);
                const auto s2 = train::train_stage2(tr, va, ckpt.faim, ckpt.generator, ckpt.discriminator,
                                                    ckpt.classifier, cfg.stage2, cfg.head);
                append(run.trace, s1);
                append(run.trace, s2);
                ckpt.stage1_epochs_run = cfg.stage1.epochs;
                ckpt.stage2_epochs_run = cfg.stage2.epochs;
                ckpt.stage1_best_epoch = s1.best_epoch;
                ckpt.stage2_best_epoch = s2.best_epoch;
                ckpt.stage1_best_val_accuracy = s1.best_val_accuracy;
                ckpt.stage2_best_val_accuracy = s2.best_val_accuracy;
                break;
            }
            case Variant::no_faim: {
                tr.x_aug = forest::leaf_one_hot(gbdt, tr.x);
                va.x_aug = forest::leaf_one_hot(gbdt, va.x);
                ckpt.gbdt = std::move(gbdt);
                // Linear output, like the FaIM representation it stands in for.
                ckpt.aug_mapper = fam::Mlp::init(leaf_dim, cfg.model.mapper_hidden, p, fam::Activation::identity, rng);
                ckpt.classifier = fam::ClassifierParams::init(p, rng);
                ckpt.generator = fam::make_generator(d, cfg.model.generator_hidden, p, rng, cfg.model.generator_output);
                ckpt.discriminator = fam::make_discriminator(p, cfg.model.discriminator_hidden, rng);
                const auto s1 = train::train_stage1(tr, va, ckpt.aug_mapper, ckpt.classifier, cfg.stage1);
                const Matrix h_tr = fam::mlp_forward(ckpt.aug_mapper, tr.x_aug);
                const Matrix h_va = fam::mlp_forward(ckpt.aug_mapper, va.x_aug);
                const auto s2 = train::train_stage2(tr.x, h_tr, tr.y, va.x, h_va, va.y, ckpt.generator,
                                                    ckpt.discriminator, ckpt.classifier, cfg.stage2, cfg.head);
                append(run.trace, s1);
                append(run.trace, s2);
                ckpt.stage1_epochs_run = cfg.stage1.epochs;
                ckpt.stage2_epochs_run = cfg.stage2.epochs;
                ckpt.stage1_best_epoch = s1.best_epoch;
                ckpt.stage2_best_epoch = s2.best_epoch;
                ckpt.stage1_best_val_accuracy = s1.best_val_accuracy;
                ckpt.stage2_best_val_accuracy = s2.best_val_accuracy;
                break;
            }
            case Variant::rf_no_fam: {
                auto rf = forest::fit_rf(tr.x, tr.y, cfg.rf);
                tr.x_aug = forest::rf_correlation_features(rf, tr.x);
                va.x_aug = forest::rf_correlation_features(rf, va.x);
                ckpt.rf = std::move(rf);
                // Same output activation as the generator it is summed with.
                ckpt.aug_mapper =
                    fam::Mlp::init(aug_dim, cfg.model.mapper_hidden, p, cfg.model.generator_output, rng);
                ckpt.classifier = fam::ClassifierParams::init(p, rng);
                ckpt.generator = fam::make_generator(d, cfg.model.generator_hidden, p, rng, cfg.model.generator_output);
                const auto s = train::train_supervised(tr, va, ckpt.generator, &ckpt.aug_mapper, ckpt.classifier,
                                                       supervised);
                append(run.trace, s);
                ckpt.stage1_epochs_run = supervised.epochs;
                ckpt.stage1_best_epoch = s.best_epoch;
                ckpt.stage1_best_val_accuracy = s.best_val_accuracy;
                break;
            }
            case Variant::base: {
                ckpt.classifier = fam::ClassifierParams::init(p, rng);
                ckpt.generator = fam::make_generator(d, cfg.model.generator_hidden, p, rng, cfg.model.generator_output);
                const auto s = train::train_supervised(tr, va, ckpt.generator, nullptr, ckpt.classifier, supervised);
                append(run.trace, s);
                ckpt.stage1_epochs_run = supervised.epochs;
                ckpt.stage1_best_epoch = s.best_epoch;
                ckpt.stage1_best_val_accuracy = s.best_val_accuracy;
                break;
            }
        }
    } catch (const TrainingAbort& e) {
        run.error = e.what();
        return run;
    }
    run.test = evaluate(ckpt, prepared, cfg.head);
    return run;
}

eval::MetricReport evaluate(const train::Checkpoint& ckpt, const PreparedData& prepared, train::FusionMode head) {
    const auto scaled = prepared.standardized();
    const auto test = view_of(scaled, prepared.split.test);
    return eval::metrics(eval::confusion(train::predict_labels(ckpt, test.x, head), test.y));
}

// ---------------------------------------------------------------------------
// Files

std::string file_hash(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot hash " + path.string());
    }
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return hex64(fnv1a(std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size())));
}

void write_manifest(const fs::path& root, const std::vector<fs::path>& files, const json& info) {
    std::vector<std::string> relative;
    for (const auto& f : files) {
        relative.push_back(fs::relative(f, root).generic_string());
    }
    std::sort(relative.begin(), relative.end());
    relative.erase(std::unique(relative.begin(), relative.end()), relative.end());
    json entries = json::array();
    for (const auto& r : relative) {
        const auto full = root / r;
        entries.push_back({{"path", r}, {"bytes", fs::file_size(full)}, {"fnv1a64", file_hash(full)}});
    }
    write_json({{"info", info}, {"files", std::move(entries)}}, root / "manifest.json");
}

fs::path prepared_dir(const fs::path& root, std::uint64_t seed) {
    return root / "prepared" / ("seed_" + std::to_string(seed));
}

fs::path run_dir(const fs::path& root, Variant variant, std::uint64_t seed) {
    return root / std::string(train::to_string(variant)) / ("seed_" + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// Commands

namespace {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads; the first exception is rethrown.
template <class F>
void parallel_for(std::size_t n, int jobs, F&& fn) {
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex guard;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(guard);
                    if (!failure) {
                        failure = std::current_exception();
                    }
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

void say(const CommandOptions& options, const std::string& line) {
    if (options.log) {
        options.log(line);
    }
}

std::string delta_tag(double delta) {
    std::ostringstream os;
    os << "delta_" << std::fixed << std::setprecision(2) << delta;
    return os.str();
}

std::vector<PreparedData> prepare_all(const ExperimentConfig& config, double delta, const fs::path& root,
                                      std::vector<fs::path>& written) {
    const auto imputed = load_imputed(config);
    std::vector<PreparedData> out;
    for (auto seed : config.seeds) {
        out.push_back(prepare(imputed, delta, seed));
        const auto files = write_prepared(out.back(), prepared_dir(root, seed));
        written.insert(written.end(), files.begin(), files.end());
    }
    return out;
}

/// Prepared data from disk when present, otherwise rebuilt from the raw dataset.
PreparedData prepared_for(const ExperimentConfig& config, std::uint64_t seed) {
    const auto dir = prepared_dir(config.output_dir, seed);
    if (fs::exists(dir / "meta.json")) {
        return read_prepared(dir);
    }
    return prepare(load_imputed(config), config.delta, seed);
}

std::vector<fs::path> write_seed_outputs(const SeedRun& run, const fs::path& dir) {
    fs::create_directories(dir);
    std::vector<fs::path> files;
    if (run.error) {
        write_json({{"seed", run.seed}, {"status", "aborted"}, {"error", *run.error}}, dir / "status.json");
        return {dir / "status.json"};
    }
    train::save_checkpoint(run.checkpoint, dir / "checkpoint.json");
    train::write_trace_csv(run.trace, dir / "trace.csv");
    json status = {{"seed", run.seed},
                   {"status", "ok"},
                   {"parameter_count", run.checkpoint.parameter_count()},
                   {"model", train::to_json(run.checkpoint.config)["model"]}};
    if (run.test) {
        status["test"] = eval::to_json(*run.test);
    }
    write_json(status, dir / "status.json");
    return {dir / "checkpoint.json", dir / "trace.csv", dir / "status.json"};
}

void write_report(const eval::RunAggregate& agg, const std::vector<std::string>& ids, const fs::path& stem,
                  std::vector<fs::path>& written) {
    eval::write_table(agg, ids, stem.string() + ".csv");
    write_json(eval::to_json(agg, ids), stem.string() + ".json");
    written.push_back(stem.string() + ".csv");
    written.push_back(stem.string() + ".json");
}

std::string summary_line(const std::string& label, const eval::RunAggregate& agg) {
    std::ostringstream os;
    os << label << " (" << agg.n_runs << " runs)";
    for (std::size_t k = 0; k < eval::kMetricCount; ++k) {
        os << "  " << eval::kMetricNames[k] << " " << eval::format_mean_std(agg.summary[k]);
    }
    return os.str();
}

std::string cell(const std::optional<double>& v) {
    if (!v) {
        return "";
    }
    std::ostringstream os;
    os << std::setprecision(17) << *v;
    return os.str();
}

}  // namespace

VariantSummary train_and_evaluate(const ExperimentConfig& config, const std::vector<PreparedData>& prepared,
                                  Variant variant, const fs::path& root, train::FusionMode head,
                                  std::vector<fs::path>& written, std::vector<std::string>& failures) {
    train::TrainingConfig cfg = config.training;
    cfg.variant = variant;
    cfg.head = head;
    std::vector<SeedRun> runs(prepared.size());
    parallel_for(prepared.size(), config.jobs, [&](std::size_t i) {
        runs[i] = run_seed(prepared[i], cfg);
        write_seed_outputs(runs[i], run_dir(root, variant, prepared[i].seed));
    });
    VariantSummary summary;
    summary.variant = variant;
    std::vector<eval::MetricReport> reports;
    for (const auto& run : runs) {
        const auto dir = run_dir(root, variant, run.seed);
        if (run.error) {
            written.push_back(dir / "status.json");
            failures.push_back(std::string(train::to_string(variant)) + " seed " + std::to_string(run.seed) + ": " +
                               *run.error);
            continue;
        }
        for (const char* f : {"checkpoint.json", "trace.csv", "status.json"}) {
            written.push_back(dir / f);
        }
        if (summary.parameter_count == 0) {
            summary.parameter_count = run.checkpoint.parameter_count();
        }
        reports.push_back(*run.test);
        summary.run_ids.push_back(std::to_string(run.seed));
    }
    if (reports.empty()) {
        throw TrainingAbort("every seed of " + std::string(train::to_string(variant)) + " aborted");
    }
    summary.aggregate = eval::aggregate(reports);
    write_report(summary.aggregate, summary.run_ids,
                 root / std::string(train::to_string(variant)) / ("eval_" + std::string(train::to_string(head))),
                 written);
    return summary;
}

int cmd_prepare(const ExperimentConfig& config, const CommandOptions& options) {
    config.validate();
    std::vector<fs::path> written;
    const auto prepared = prepare_all(config, config.delta, config.output_dir, written);
    for (const auto& p : prepared) {
        say(options, "seed " + std::to_string(p.seed) + ": " + std::to_string(p.perturbed.size()) +
                         " perturbed rows, split " + std::to_string(p.split.train.size()) + "/" +
                         std::to_string(p.split.validation.size()) + "/" + std::to_string(p.split.test.size()));
    }
    const auto root = config.output_dir / "prepared";
    write_manifest(root, written, {{"command", "prepare"}, {"config", to_json(config)}});
    return 0;
}

int cmd_train(const ExperimentConfig& config, const CommandOptions& options) {
    config.validate();
    const Variant variant = config.training.variant;
    std::vector<PreparedData> prepared;
    for (auto seed : config.seeds) {
        prepared.push_back(read_prepared(prepared_dir(config.output_dir, seed)));
    }
    std::vector<SeedRun> runs(prepared.size());
    parallel_for(prepared.size(), config.jobs, [&](std::size_t i) {
        runs[i] = run_seed(prepared[i], config.training);
        write_seed_outputs(runs[i], run_dir(config.output_dir, variant, prepared[i].seed));
    });
    std::vector<fs::path> written;
    json seeds = json::array();
    bool aborted = false;
    for (const auto& run : runs) {
        const auto dir = run_dir(config.output_dir, variant, run.seed);
        if (run.error) {
            aborted = true;
            say(options, "seed " + std::to_string(run.seed) + ": aborted (" + *run.error + ")");
            seeds.push_back({{"seed", run.seed}, {"status", "aborted"}, {"error", *run.error}});
            written.push_back(dir / "status.json");
            continue;
        }
        say(options, "seed " + std::to_string(run.seed) + ": " + std::to_string(run.checkpoint.parameter_count()) +
                         " parameters, test accuracy " + cell(run.test->accuracy));
        seeds.push_back({{"seed", run.seed}, {"status", "ok"}});
        for (const char* f : {"checkpoint.json", "trace.csv", "status.json"}) {
            written.push_back(dir / f);
        }
    }
    const auto root = config.output_dir / std::string(train::to_string(variant));
    write_manifest(root, written, {{"command", "train"}, {"config", to_json(config)}, {"seeds", seeds}});
    return aborted ? 3 : 0;
}

int cmd_eval(const ExperimentConfig& config, const CommandOptions& options) {
    config.validate();
    const Variant variant = config.training.variant;
    std::vector<eval::MetricReport> reports;
    std::vector<std::string> ids;
    for (auto seed : config.seeds) {
        const auto ckpt_path = run_dir(config.output_dir, variant, seed) / "checkpoint.json";
        if (!fs::exists(ckpt_path)) {
            throw DataError("missing checkpoint " + ckpt_path.string());
        }
        const auto ckpt = train::load_checkpoint(ckpt_path);
        reports.push_back(evaluate(ckpt, read_prepared(prepared_dir(config.output_dir, seed)), options.head));
        ids.push_back(std::to_string(seed));
    }
    const auto agg = eval::aggregate(reports);
    const auto dir = config.output_dir / std::string(train::to_string(variant)) /
                     ("eval_" + std::string(train::to_string(options.head)));
    fs::create_directories(dir);
    std::vector<fs::path> written;
    write_report(agg, ids, dir / "report", written);
    write_manifest(dir, written, {{"command", "eval"}, {"head", train::to_string(options.head)}, {"config", to_json(config)}});
    say(options, summary_line(std::string(train::to_string(variant)), agg));
    return 0;
}

int cmd_sweep(const ExperimentConfig& config, const CommandOptions& options) {
    config.validate();
    auto deltas = config.sweep_deltas;
    std::sort(deltas.begin(), deltas.end());
    deltas.erase(std::unique(deltas.begin(), deltas.end()), deltas.end());
    const auto root = config.output_dir / "sweep";
    fs::create_directories(root);
    std::vector<fs::path> written;
    std::ofstream table(root / "sweep.csv");
    table << "delta,n_runs";
    for (auto name : eval::kMetricNames) {
        table << ',' << name << "_mean," << name << "_std";
    }
    table << ",status\n";
    bool failed = false;
    for (double delta : deltas) {
        const auto droot = root / delta_tag(delta);
        std::ostringstream row;
        char shortest[32];
        const auto end = std::to_chars(shortest, shortest + sizeof shortest, delta).ptr;
        row << std::setprecision(17) << std::string_view(shortest, static_cast<std::size_t>(end - shortest));
        try {
            const auto prepared = prepare_all(config, delta, droot, written);
            std::vector<std::string> failures;
            const auto summary =
                train_and_evaluate(config, prepared, config.training.variant, droot, options.head, written, failures);
            row << ',' << summary.aggregate.n_runs;
            for (const auto& s : summary.aggregate.summary) {
                row << ',' << cell(s.mean) << ',' << cell(s.stddev);
            }
            row << ',' << (failures.empty() ? "ok" : std::to_string(failures.size()) + " seeds aborted") << '\n';
            failed = failed || !failures.empty();
            say(options, summary_line(delta_tag(delta), summary.aggregate));
        } catch (const std::exception& e) {
            failed = true;
            row << ",0";
            for (std::size_t k = 0; k < eval::kMetricCount; ++k) {
                row << ",,";
            }
            std::string msg = e.what();
            std::replace(msg.begin(), msg.end(), ',', ';');
            row << ",failed: " << msg << '\n';
            say(options, delta_tag(delta) + " failed: " + e.what());
        }
        table << row.str();
    }
    table.close();
    written.push_back(root / "sweep.csv");
    write_manifest(root, written, {{"command", "sweep"}, {"deltas", deltas}, {"config", to_json(config)}});
    return failed ? 3 : 0;
}

std::optional<double> relative_improvement(const eval::MetricSummary& variant, const eval::MetricSummary& base) {
    if (!variant.mean || !base.mean || *base.mean == 0.0) {
        return std::nullopt;
    }
    return (*variant.mean - *base.mean) / *base.mean;
}

int cmd_ablate(const ExperimentConfig& config, const CommandOptions& options) {
    config.validate();
    const auto root = config.output_dir / "ablation";
    std::vector<fs::path> written;
    const auto prepared = prepare_all(config, config.delta, root, written);
    const std::vector<Variant> variants = {Variant::base, Variant::rf_no_fam, Variant::no_faim, Variant::full};
    std::vector<std::optional<VariantSummary>> results;
    bool failed = false;
    for (auto v : variants) {
        std::vector<std::string> failures;
        try {
            results.push_back(train_and_evaluate(config, prepared, v, root, options.head, written, failures));
            say(options, summary_line(std::string(train::to_string(v)), results.back()->aggregate) + "  params " +
                             std::to_string(results.back()->parameter_count));
        } catch (const std::exception& e) {
            results.emplace_back();
            say(options, std::string(train::to_string(v)) + " failed: " + e.what());
        }
        failed = failed || !failures.empty() || !results.back();
    }

    std::ofstream means(root / "ablation.csv");
    means << "variant,parameter_count,n_runs";
    for (auto name : eval::kMetricNames) {
        means << ',' << name << "_mean," << name << "_std";
    }
    means << '\n';
    // Improvement columns follow the comparison's focus: accuracy, sensitivity, precision.
    const std::array<std::size_t, 3> improved = {0, 1, 3};
    std::ofstream gains(root / "improvement.csv");
    gains << "variant,accuracy,sensitivity,precision\n";
    for (std::size_t i = 0; i < variants.size(); ++i) {
        const auto name = std::string(train::to_string(variants[i]));
        const auto& r = results[i];
        means << name;
        gains << name;
        if (!r) {
            means << ",,0";
            for (std::size_t k = 0; k < eval::kMetricCount; ++k) {
                means << ",,";
            }
            gains << ",,,\n";
            means << '\n';
            continue;
        }
        means << ',' << r->parameter_count << ',' << r->aggregate.n_runs;
        for (const auto& s : r->aggregate.summary) {
            means << ',' << cell(s.mean) << ',' << cell(s.stddev);
        }
        means << '\n';
        for (auto k : improved) {
            gains << ',';
            if (results[0]) {
                gains << cell(relative_improvement(r->aggregate.summary[k], results[0]->aggregate.summary[k]));
            }
        }
        gains << '\n';
    }
    means.close();
    gains.close();
    written.push_back(root / "ablation.csv");
    written.push_back(root / "improvement.csv");
    write_manifest(root, written, {{"command", "ablate"}, {"config", to_json(config)}});
    return failed ? 3 : 0;
}

AttentionMap attention_map(const faim::FaimParams& params, const Matrix& x_aug) {
    const auto dim = x_aug.cols();
    AttentionMap map;
    map.weight_sum = Matrix::Zero(dim, dim);
    for (Eigen::Index n = 0; n < x_aug.rows(); ++n) {
        const auto set = faim::active_pairs(x_aug.row(n).transpose());
        ++map.samples;
        if (set.pairs.empty()) {
            continue;
        }
        const auto att = faim::attention_forward(params, set);
        for (std::size_t k = 0; k < set.pairs.size(); ++k) {
            const auto i = static_cast<Eigen::Index>(set.pairs[k].first);
            const auto j = static_cast<Eigen::Index>(set.pairs[k].second);
            map.weight_sum(i, j) += att.weights[k];
            map.weight_sum(j, i) += att.weights[k];
        }
    }
    return map;
}

Matrix average_maps(const std::vector<AttentionMap>& maps) {
    Eigen::Index dim = 0;
    std::size_t samples = 0;
    for (const auto& m : maps) {
        dim = std::max(dim, m.weight_sum.rows());
        samples += m.samples;
    }
    Matrix total = Matrix::Zero(dim, dim);
    for (const auto& m : maps) {
        total.topLeftCorner(m.weight_sum.rows(), m.weight_sum.cols()) += m.weight_sum;
    }
    if (samples > 0) {
        total /= static_cast<double>(samples);
    }
    return total;
}

void write_heatmap(const Matrix& w, const fs::path& matrix_csv, const fs::path& long_csv) {
    std::ofstream m(matrix_csv);
    std::ofstream l(long_csv);
    if (!m || !l) {
        throw DataError("cannot write heatmap files");
    }
    m << std::setprecision(17);
    l << std::setprecision(17) << "i,j,weight\n";
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
            m << (j ? "," : "") << w(i, j);
            l << i << ',' << j << ',' << w(i, j) << '\n';
        }
        m << '\n';
    }
}

namespace {

struct HeatmapStats {
    double blank_fraction = 0.0;  // off-diagonal cells below 1e-3
    double max_weight = 0.0;
};

HeatmapStats heatmap_stats(const Matrix& w) {
    HeatmapStats s;
    std::size_t blank = 0;
    std::size_t cells = 0;
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
            if (i == j) {
                continue;
            }
            ++cells;
            blank += w(i, j) < 1e-3;
            s.max_weight = std::max(s.max_weight, w(i, j));
        }
    }
    s.blank_fraction = cells ? static_cast<double>(blank) / static_cast<double>(cells) : 0.0;
    return s;
}

AttentionMap map_for_checkpoint(const train::Checkpoint& ckpt, const PreparedData& prepared) {
    if (ckpt.config.variant != Variant::full || !ckpt.gbdt) {
        throw DataError("heatmaps need full-variant checkpoints");
    }
    const auto scaled = prepared.standardized();
    const Matrix x_test = data::select_rows(scaled.features, prepared.split.test);
    return attention_map(ckpt.faim, forest::leaf_one_hot(*ckpt.gbdt, x_test));
}

}  // namespace

int cmd_heatmap(const ExperimentConfig& config, const CommandOptions& options) {
    config.validate();
    const auto root = config.output_dir / "heatmap";
    fs::create_directories(root);
    std::vector<fs::path> written;
    json stats = json::object();

    auto emit = [&](const std::string& label, const std::vector<AttentionMap>& maps) {
        const Matrix mean = average_maps(maps);
        const auto matrix_csv = root / ("heatmap_" + label + ".csv");
        const auto long_csv = root / ("heatmap_" + label + "_long.csv");
        write_heatmap(mean, matrix_csv, long_csv);
        written.push_back(matrix_csv);
        written.push_back(long_csv);
        const auto s = heatmap_stats(mean);
        stats[label] = {{"dim", mean.rows()}, {"blank_fraction", s.blank_fraction}, {"max_weight", s.max_weight}};
        std::ostringstream line;
        line << label << ": " << mean.rows() << "x" << mean.cols() << ", blank fraction " << s.blank_fraction;
        say(options, line.str());
    };

    if (options.compare_modes) {
        std::vector<PreparedData> prepared;
        for (auto seed : config.seeds) {
            prepared.push_back(prepared_for(config, seed));
        }
        for (auto mode : {faim::SparseMode::literal, faim::SparseMode::logit_l1}) {
            ExperimentConfig c = config;
            c.training.stage1.sparse_mode = mode;
            const auto mroot = root / std::string(faim::to_string(mode));
            std::vector<std::string> failures;
            train_and_evaluate(c, prepared, Variant::full, mroot, options.head, written, failures);
            std::vector<AttentionMap> maps;
            for (const auto& p : prepared) {
                const auto path = run_dir(mroot, Variant::full, p.seed) / "checkpoint.json";
                if (fs::exists(path)) {
                    maps.push_back(map_for_checkpoint(train::load_checkpoint(path), p));
                }
            }
            emit(std::string(faim::to_string(mode)), maps);
        }
    } else {
        const fs::path dir = options.checkpoints.value_or(config.output_dir / "full");
        std::vector<AttentionMap> maps;
        std::string label = "mixed";
        for (auto seed : config.seeds) {
            const auto path = dir / ("seed_" + std::to_string(seed)) / "checkpoint.json";
            if (!fs::exists(path)) {
                throw DataError("missing checkpoint " + path.string());
            }
            const auto ckpt = train::load_checkpoint(path);
            label = std::string(faim::to_string(ckpt.config.stage1.sparse_mode));
            maps.push_back(map_for_checkpoint(ckpt, prepared_for(config, seed)));
        }
        emit(label, maps);
    }
    write_json(stats, root / "summary.json");
    written.push_back(root / "summary.json");
    write_manifest(root, written, {{"command", "heatmap"}, {"config", to_json(config)}});
    return 0;
}

int cmd_audit(const ExperimentConfig& config, const CommandOptions& options) {
    config.validate();
    const auto seed = config.seeds.front();
    const PreparedData prepared = prepared_for(config, seed);
    train::Checkpoint ckpt;
    if (options.checkpoint) {
        ckpt = train::load_checkpoint(*options.checkpoint);
    } else {
        const auto path = run_dir(config.output_dir, config.training.variant, seed) / "checkpoint.json";
        if (fs::exists(path)) {
            ckpt = train::load_checkpoint(path);
        } else {
            // No trained model yet: audit a briefly trained one.
            train::TrainingConfig short_run = config.training;
            short_run.stage1.epochs = std::min(short_run.stage1.epochs, 20);
            short_run.stage2.epochs = std::min(short_run.stage2.epochs, 20);
            auto run = run_seed(prepared, short_run);
            if (run.error) {
                throw TrainingAbort(*run.error);
            }
            ckpt = std::move(run.checkpoint);
        }
    }
    const auto scaled = prepared.standardized();
    IndexList rows(prepared.split.train.begin(),
                   prepared.split.train.begin() +
                       static_cast<std::ptrdiff_t>(std::min(config.audit_batch, prepared.split.train.size())));
    train::SplitView batch = view_of(scaled, rows);
    const auto report = train::finite_diff_audit(ckpt, batch, config.audit_probes, mix_seed(seed, 5));
    constexpr double kTolerance = 1e-4;
    const bool passed = report.max_relative_error <= kTolerance;

    const auto root = config.output_dir / "audit";
    fs::create_directories(root);
    json probes = json::array();
    for (const auto& p : report.probes) {
        probes.push_back({{"loss", p.loss},
                          {"coordinate", p.coordinate},
                          {"analytic", p.analytic},
                          {"numeric", p.numeric},
                          {"relative_error", p.relative_error}});
    }
    json per_loss = json::object();
    for (const auto& [name, err] : report.per_loss_max) {
        per_loss[name] = err;
        std::ostringstream line;
        line << name << ": max relative error " << std::scientific << err;
        say(options, line.str());
    }
    write_json({{"max_relative_error", report.max_relative_error},
                {"tolerance", kTolerance},
                {"passed", passed},
                {"per_loss", per_loss},
                {"probes", probes}},
               root / "audit.json");
    write_manifest(root, {root / "audit.json"}, {{"command", "audit"}, {"config", to_json(config)}});
    say(options, passed ? "gradient audit passed" : "gradient audit FAILED");
    return passed ? 0 : 3;
}

}  // namespace fafcnn::exp
