#pragma once

// Experiment protocol behind the command-line tool: prepared-data artifacts,
// per-seed training of the four variants, evaluation, robustness sweeps,
// ablation tables and attention heatmaps. Every output directory carries a
// manifest.json listing each file with its content hash.

#include "fafcnn/datakit.hpp"
#include "fafcnn/evalkit.hpp"
#include "fafcnn/trainer.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace fafcnn::exp {

namespace fs = std::filesystem;

struct ExperimentConfig {
    fs::path dataset;
    std::string label_column = "class";
    std::optional<std::string> positive_label;
    double delta = 0.0;
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    train::TrainingConfig training;
    fs::path output_dir = "runs";
    std::vector<double> sweep_deltas = {0.5, 0.6, 0.7, 0.8, 0.9};
    std::size_t audit_probes = 240;
    std::size_t audit_batch = 64;
    int jobs = 1;

    /// Throws ConfigError on an invalid combination (duplicate seeds, delta out of range, ...).
    void validate() const;
};

/// Overlays the keys present in `j` onto `base`; unknown keys are a ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {});
nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const fs::path& path, ExperimentConfig base = {});

// ---------------------------------------------------------------------------
// Prepared data

/// Imputed and perturbed (unstandardized) data plus its split. Stream seeds
/// are derived from the run seed so every variant sees identical rows.
struct PreparedData {
    data::Dataset data;
    data::SplitBundle split;
    std::vector<data::PerturbedCell> perturbed;
    double delta = 0.0;
    std::uint64_t seed = 0;

    /// Train-statistics z-scored copy of `data`.
    data::Dataset standardized() const;
};

std::uint64_t perturb_seed(std::uint64_t seed);
std::uint64_t split_seed(std::uint64_t seed);
std::uint64_t init_seed(std::uint64_t seed);
std::uint64_t forest_seed(std::uint64_t seed);

data::Dataset load_imputed(const ExperimentConfig& config);
PreparedData prepare(const data::Dataset& imputed, double delta, std::uint64_t seed);

/// Writes data.csv and meta.json into `dir`; returns the written files.
std::vector<fs::path> write_prepared(const PreparedData& prepared, const fs::path& dir);
PreparedData read_prepared(const fs::path& dir);

// ---------------------------------------------------------------------------
// Training and evaluation

struct SeedRun {
    std::uint64_t seed = 0;
    train::Checkpoint checkpoint;
    std::vector<train::EpochRecord> trace;
    std::optional<eval::MetricReport> test;  // empty when training aborted
    std::optional<std::string> error;
};

/// Hidden widths giving `variant` a parameter count closest to the full
/// model's on the same data; `reference_count` is the full model's count.
train::ModelConfig match_widths(train::Variant variant, const train::ModelConfig& base, std::size_t d,
                                std::size_t aug_dim, std::size_t reference_count);
std::size_t full_parameter_count(const train::ModelConfig& model, std::size_t d, std::size_t aug_dim);
std::size_t variant_parameter_count(train::Variant variant, const train::ModelConfig& model, std::size_t d,
                                    std::size_t aug_dim);

/// Runs the variant's pipeline for one seed and evaluates it on the test split.
/// A TrainingAbort is caught and reported through `error`.
SeedRun run_seed(const PreparedData& prepared, const train::TrainingConfig& config);

eval::MetricReport evaluate(const train::Checkpoint& ckpt, const PreparedData& prepared, train::FusionMode head);

// ---------------------------------------------------------------------------
// Files

/// Writes root/manifest.json with an FNV-1a hash per listed file.
void write_manifest(const fs::path& root, const std::vector<fs::path>& files, const nlohmann::json& info);
std::string file_hash(const fs::path& path);

fs::path prepared_dir(const fs::path& root, std::uint64_t seed);
fs::path run_dir(const fs::path& root, train::Variant variant, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Commands. Each returns the process exit code and writes into config.output_dir.

struct CommandOptions {
    train::FusionMode head = train::FusionMode::mean_fusion;
    std::optional<fs::path> checkpoint;   // audit: explicit checkpoint
    std::optional<fs::path> checkpoints;  // heatmap: explicit run directory
    bool compare_modes = false;           // heatmap: train literal and logit_l1 side by side
    std::function<void(const std::string&)> log;
};

int cmd_prepare(const ExperimentConfig& config, const CommandOptions& options);
int cmd_train(const ExperimentConfig& config, const CommandOptions& options);
int cmd_eval(const ExperimentConfig& config, const CommandOptions& options);
int cmd_sweep(const ExperimentConfig& config, const CommandOptions& options);
int cmd_ablate(const ExperimentConfig& config, const CommandOptions& options);
int cmd_heatmap(const ExperimentConfig& config, const CommandOptions& options);
int cmd_audit(const ExperimentConfig& config, const CommandOptions& options);

// ---------------------------------------------------------------------------
// Reusable pieces of the commands

struct VariantSummary {
    train::Variant variant = train::Variant::full;
    eval::RunAggregate aggregate;
    std::vector<std::string> run_ids;
    std::size_t parameter_count = 0;  // of the first successful seed
};

/// Trains and evaluates one variant across all seeds under `root`, writing
/// checkpoints, traces and the evaluation table. Throws if every seed aborted.
VariantSummary train_and_evaluate(const ExperimentConfig& config, const std::vector<PreparedData>& prepared,
                                  train::Variant variant, const fs::path& root, train::FusionMode head,
                                  std::vector<fs::path>& written, std::vector<std::string>& failures);

/// Mean attention weight per unordered pair (i < j) over the given samples,
/// mirrored into a symmetric dim x dim matrix with zero diagonal.
struct AttentionMap {
    Matrix weight_sum;  // summed a_ij
    std::size_t samples = 0;
};
AttentionMap attention_map(const faim::FaimParams& params, const Matrix& x_aug);
/// Averages several maps, padding smaller ones with zeros.
Matrix average_maps(const std::vector<AttentionMap>& maps);
void write_heatmap(const Matrix& mean_weights, const fs::path& matrix_csv, const fs::path& long_csv);

/// Relative improvement (m - m_base) / m_base per metric; nullopt when undefined.
std::optional<double> relative_improvement(const eval::MetricSummary& variant, const eval::MetricSummary& base);

}  // namespace fafcnn::exp
