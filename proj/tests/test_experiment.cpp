#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fafcnn/experiment.hpp"

#include <nlohmann/json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

using namespace fafcnn;
using namespace fafcnn::exp;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("fafcnn_exp_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Two well separated classes: label = 1 iff the first feature is positive,
// with a gap of at least one unit around zero.
fs::path separable_csv(const fs::path& dir, std::size_t n = 200, std::size_t d = 4) {
    Rng rng(77);
    const auto path = dir / "separable.csv";
    std::ofstream out(path);
    for (std::size_t j = 0; j < d; ++j) out << 'f' << j << ',';
    out << "class\n";
    for (std::size_t i = 0; i < n; ++i) {
        const bool pos = i % 2 == 0;
        out << (pos ? 1.0 : -1.0) * (1.0 + rng.uniform());
        for (std::size_t j = 1; j < d; ++j) out << ',' << rng.normal();
        out << ',' << (pos ? "yes" : "no") << '\n';
    }
    return path;
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::vector<std::string>> rows;
    for (std::string line; std::getline(in, line);) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

// Every file under root (except the manifest) is listed with a matching hash, and nothing else is.
void check_manifest(const fs::path& root) {
    const auto manifest = read_json(root / "manifest.json");
    std::set<std::string> listed;
    for (const auto& f : manifest.at("files")) {
        const auto rel = f.at("path").get<std::string>();
        listed.insert(rel);
        CHECK(f.at("fnv1a64").get<std::string>() == file_hash(root / rel));
        CHECK(f.at("bytes").get<std::uintmax_t>() == fs::file_size(root / rel));
    }
    std::set<std::string> present;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file() && e.path() != root / "manifest.json") {
            present.insert(fs::relative(e.path(), root).generic_string());
        }
    }
    CHECK(listed == present);
}

ExperimentConfig small_config(const fs::path& dir, const fs::path& dataset) {
    ExperimentConfig c;
    c.dataset = dataset;
    c.output_dir = dir / "out";
    c.seeds = {1, 2, 3};
    c.training.stage1.epochs = 300;
    c.training.stage2.epochs = 300;
    return c;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(FAFCNN_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config overlay and validation") {
    ExperimentConfig base;
    CHECK(base.seeds.size() == 10);
    CHECK(base.sweep_deltas == std::vector<double>{0.5, 0.6, 0.7, 0.8, 0.9});
    const auto c = config_from_json(json::parse(R"({
        "dataset": "x.csv", "delta": 0.3, "seeds": [4, 5],
        "variant": "no_faim", "head": "gen_only",
        "model": {"embedding_dim": 6, "generator_output": "relu"},
        "stage1": {"epochs": 10, "alpha": 0.1, "sparse_mode": "literal"},
        "stage2": {"beta": 0.25}
    })"));
    CHECK(c.delta == 0.3);
    CHECK(c.seeds == std::vector<std::uint64_t>{4, 5});
    CHECK(c.training.variant == train::Variant::no_faim);
    CHECK(c.training.head == train::FusionMode::gen_only);
    CHECK(c.training.model.embedding_dim == 6);
    CHECK(c.training.model.generator_hidden == 16);
    CHECK(c.training.model.generator_output == fam::Activation::relu);
    CHECK(c.training.stage1.epochs == 10);
    CHECK(c.training.stage1.sparse_mode == faim::SparseMode::literal);
    CHECK(c.training.stage2.beta == 0.25);
    CHECK(c.training.stage2.epochs == 2000);
    const auto again = config_from_json(to_json(c));
    CHECK(to_json(again) == to_json(c));

    const auto fid = config_from_json(json::parse(R"({"fidelity": true})"));
    CHECK(fid.training.stage1.epochs == 10000);
    CHECK(fid.training.stage2.epochs == 10000);

    CHECK_THROWS_AS(config_from_json(json::parse(R"({"datset": "x"})")), ConfigError);
    CHECK_THROWS_AS(config_from_json(json::parse(R"({"model": {"width": 3}})")), ConfigError);
    CHECK_THROWS_AS(config_from_json(json::parse(R"({"variant": "huge"})")), ConfigError);
    ExperimentConfig dup;
    dup.seeds = {1, 1};
    CHECK_THROWS_AS(dup.validate(), ConfigError);
    ExperimentConfig far;
    far.delta = 1.5;
    CHECK_THROWS_AS(far.validate(), ConfigError);
    ExperimentConfig missing;
    missing.dataset = "/nonexistent/data.csv";
    CHECK_THROWS_AS(load_imputed(missing), ConfigError);
}

TEST_CASE("parameter counts match within ten percent") {
    train::ModelConfig m;
    for (std::size_t d : {8, 9, 13, 19}) {
        for (std::size_t leaf_dim : {8, 40, 120, 300}) {
            const auto reference = full_parameter_count(m, d, leaf_dim);
            for (auto v : {train::Variant::base, train::Variant::no_faim}) {
                const auto w = match_widths(v, m, d, leaf_dim, reference);
                const double count = static_cast<double>(variant_parameter_count(v, w, d, leaf_dim));
                CHECK(std::abs(count - static_cast<double>(reference)) <= 0.1 * static_cast<double>(reference));
            }
            const auto w = match_widths(train::Variant::rf_no_fam, m, d, 100, reference);
            const double count = static_cast<double>(variant_parameter_count(train::Variant::rf_no_fam, w, d, 100));
            CHECK(std::abs(count - static_cast<double>(reference)) <= 0.1 * static_cast<double>(reference));
        }
    }
}

TEST_CASE("seed streams are distinct") {
    std::set<std::uint64_t> s;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        s.insert({perturb_seed(seed), split_seed(seed), init_seed(seed), forest_seed(seed)});
    }
    CHECK(s.size() == 40);
}

TEST_CASE("prepare on WBC") {
    const auto dir = scratch("prepare");
    ExperimentConfig c;
    c.dataset = fs::path(FAFCNN_DATA_DIR) / "wbc.csv";
    c.output_dir = dir / "half";
    c.seeds = {1, 2};
    c.delta = 0.5;
    CHECK(cmd_prepare(c, {}) == 0);
    const auto meta = read_json(prepared_dir(c.output_dir, 1) / "meta.json");
    CHECK(meta.at("perturbed_cells").size() == 350);
    CHECK(meta.at("rows") == 699);
    check_manifest(c.output_dir / "prepared");
    const auto first = read_json(c.output_dir / "prepared" / "manifest.json").at("files");

    CHECK(cmd_prepare(c, {}) == 0);
    CHECK(read_json(c.output_dir / "prepared" / "manifest.json").at("files") == first);

    const auto back = read_prepared(prepared_dir(c.output_dir, 2));
    const auto fresh = prepare(load_imputed(c), 0.5, 2);
    CHECK(back.data.features == fresh.data.features);
    CHECK(back.data.labels == fresh.data.labels);
    CHECK(back.split.test == fresh.split.test);
    CHECK(back.data.column_medians == fresh.data.column_medians);

    c.delta = 0.0;
    c.output_dir = dir / "clean";
    CHECK(cmd_prepare(c, {}) == 0);
    CHECK(read_json(prepared_dir(c.output_dir, 1) / "meta.json").at("perturbed_cells").empty());
    fs::remove_all(dir);
}

TEST_CASE("train, eval and heatmap on a separable table") {
    const auto dir = scratch("separable");
    auto c = small_config(dir, separable_csv(dir));
    REQUIRE(cmd_prepare(c, {}) == 0);
    REQUIRE(cmd_train(c, {}) == 0);
    for (auto seed : c.seeds) {
        const auto rd = run_dir(c.output_dir, train::Variant::full, seed);
        CHECK(fs::exists(rd / "checkpoint.json"));
        CHECK(fs::exists(rd / "trace.csv"));
        CHECK(read_json(rd / "status.json").at("status") == "ok");
    }
    check_manifest(c.output_dir / "full");
    CHECK(read_json(c.output_dir / "full" / "manifest.json").at("files").size() == 3 * c.seeds.size());

    // The stage-one branch alone separates the classes perfectly.
    CommandOptions aug;
    aug.head = train::FusionMode::aug_only;
    REQUIRE(cmd_eval(c, aug) == 0);
    const auto aug_report = read_json(c.output_dir / "full" / "eval_aug_only" / "report.json");
    for (const auto& name : {"accuracy", "sensitivity", "specificity", "precision"}) {
        CAPTURE(name);
        CHECK(aug_report.at("summary").at(name).at("mean").get<double>() == 1.0);
    }

    REQUIRE(cmd_eval(c, {}) == 0);
    const auto eval_dir = c.output_dir / "full" / "eval_mean_fusion";
    check_manifest(eval_dir);
    const auto report = read_json(eval_dir / "report.json");
    CHECK(report.at("n_runs") == 3);
    CHECK(report.at("runs").size() == 3);
    const auto table = read_csv(eval_dir / "report.csv");
    REQUIRE(table.size() == 1 + 3 + 2);
    CHECK(table[1][0] == "1");
    CHECK(table[4][0] == "mean");
    CHECK(table[5][0] == "std");

    CommandOptions opt;
    REQUIRE(cmd_heatmap(c, opt) == 0);
    check_manifest(c.output_dir / "heatmap");
    const auto rows = read_csv(c.output_dir / "heatmap" / "heatmap_logit_l1.csv");
    const auto n = rows.size();
    REQUIRE(n > 1);
    double upper = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        REQUIRE(rows[i].size() == n);
        CHECK(std::stod(rows[i][i]) == 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            CHECK(rows[i][j] == rows[j][i]);
            if (j > i) upper += std::stod(rows[i][j]);
        }
    }
    // Two trees give every sample exactly one pair whose weight is 1.
    CHECK(upper == doctest::Approx(1.0).epsilon(1e-12));

    // A missing checkpoint is reported rather than skipped.
    auto extra = c;
    extra.seeds = {1, 99};
    CHECK_THROWS_AS(cmd_eval(extra, {}), DataError);
    fs::remove_all(dir);
}

TEST_CASE("heatmap compares both sparse modes") {
    const auto dir = scratch("modes");
    auto c = small_config(dir, separable_csv(dir, 120, 6));
    c.seeds = {1, 2};
    c.training.stage1.epochs = 60;
    c.training.stage2.epochs = 20;
    CommandOptions opt;
    opt.compare_modes = true;
    REQUIRE(cmd_heatmap(c, opt) == 0);
    CHECK(fs::exists(c.output_dir / "heatmap" / "heatmap_literal.csv"));
    CHECK(fs::exists(c.output_dir / "heatmap" / "heatmap_logit_l1.csv"));
    const auto summary = read_json(c.output_dir / "heatmap" / "summary.json");
    CHECK(summary.contains("literal"));
    CHECK(summary.contains("logit_l1"));
    check_manifest(c.output_dir / "heatmap");
    fs::remove_all(dir);
}

TEST_CASE("sweep and ablation table shapes") {
    const auto dir = scratch("shapes");
    auto c = small_config(dir, separable_csv(dir, 150, 4));
    c.seeds = {1, 2};
    c.training.stage1.epochs = 40;
    c.training.stage2.epochs = 40;
    c.sweep_deltas = {0.9, 0.5, 0.7, 0.6, 0.8};
    CHECK(cmd_sweep(c, {}) == 0);
    const auto sweep = read_csv(c.output_dir / "sweep" / "sweep.csv");
    REQUIRE(sweep.size() == 6);
    CHECK(sweep[0].size() == 2 + 4 * 2 + 1);
    CHECK(sweep[0][2] == "accuracy_mean");
    CHECK(sweep[0][3] == "accuracy_std");
    for (std::size_t r = 2; r < sweep.size(); ++r) {
        CHECK(std::stod(sweep[r][0]) > std::stod(sweep[r - 1][0]));
        CHECK(sweep[r].back() == "ok");
    }
    check_manifest(c.output_dir / "sweep");

    c.delta = 0.5;
    CHECK(cmd_ablate(c, {}) == 0);
    const auto gains = read_csv(c.output_dir / "ablation" / "improvement.csv");
    REQUIRE(gains.size() == 5);
    CHECK(gains[0] == std::vector<std::string>{"variant", "accuracy", "sensitivity", "precision"});
    CHECK(gains[1][0] == "base");
    for (std::size_t k = 1; k <= 3; ++k) CHECK(std::stod(gains[1][k]) == 0.0);
    for (const auto& row : gains) CHECK(row.size() == 4);
    const auto means = read_csv(c.output_dir / "ablation" / "ablation.csv");
    REQUIRE(means.size() == 5);
    std::vector<double> counts;
    for (std::size_t r = 1; r < means.size(); ++r) counts.push_back(std::stod(means[r][1]));
    for (double n : counts) CHECK(std::abs(n - counts.back()) <= 0.1 * counts.back());
    check_manifest(c.output_dir / "ablation");
    fs::remove_all(dir);
}

TEST_CASE("audit command") {
    const auto dir = scratch("audit");
    auto c = small_config(dir, separable_csv(dir, 120, 6));
    c.seeds = {4};
    c.audit_probes = 60;
    CHECK(cmd_audit(c, {}) == 0);
    const auto report = read_json(c.output_dir / "audit" / "audit.json");
    CHECK(report.at("passed") == true);
    CHECK(report.at("probes").size() == 60);
    check_manifest(c.output_dir / "audit");
    fs::remove_all(dir);
}

TEST_CASE("command line exit codes") {
    const auto dir = scratch("cli");
    const auto data = separable_csv(dir, 60, 4);
    const auto out = (dir / "out").string();
    CHECK(run_cli("prepare -d " + data.string() + " -o " + out + " --seeds 1,2") == 0);
    CHECK(run_cli("prepare -d " + (dir / "none.csv").string() + " -o " + out) == 1);
    CHECK(run_cli("train --variant huge -d " + data.string() + " -o " + out) == 1);
    CHECK(run_cli("train -d " + data.string() + " -o " + out + " --seeds 1,1") == 1);
    CHECK(run_cli("frobnicate") == 1);

    {
        std::ofstream bad(dir / "bad.csv");
        bad << "a,class\n1,0\n2,3\n3,1\n";
    }
    CHECK(run_cli("prepare -d " + (dir / "bad.csv").string() + " -o " + out) == 2);
    CHECK(run_cli("train -d " + data.string() + " -o " + (dir / "empty").string() + " --seeds 5") == 2);
    CHECK(run_cli("eval -d " + data.string() + " -o " + (dir / "empty").string() + " --seeds 5") == 2);

    // Values near the double limit overflow standardization and make every loss NaN.
    {
        std::ofstream huge(dir / "huge.csv");
        huge << "a,b,class\n";
        for (int i = 0; i < 40; ++i) huge << (i % 2 ? 1e308 : -1e308) << ',' << i << ',' << i % 2 << '\n';
    }
    const auto hout = (dir / "hout").string();
    CHECK(run_cli("prepare -d " + (dir / "huge.csv").string() + " -o " + hout + " --seeds 1") == 0);
    CHECK(run_cli("train --variant base -d " + (dir / "huge.csv").string() + " -o " + hout +
                  " --seeds 1 --stage1-epochs 3 --stage2-epochs 3") == 3);
    CHECK(read_json(fs::path(hout) / "base" / "seed_1" / "status.json").at("status") == "aborted");
    fs::remove_all(dir);
}
