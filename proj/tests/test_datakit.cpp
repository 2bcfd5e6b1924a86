#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fafcnn/datakit.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <set>
#include <filesystem>
#include <sstream>

using namespace fafcnn;
using namespace fafcnn::data;

namespace {

// Random table with continuous values (never equal to a median by accident)
// and a sprinkling of missing cells.
RawTable random_table(std::size_t n, std::size_t d, std::uint64_t seed, double missing_rate) {
    Rng rng(seed);
    std::ostringstream csv;
    for (std::size_t j = 0; j < d; ++j) {
        csv << 'f' << j << ',';
    }
    csv << "class\n";
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            if (i > 0 && rng.uniform() < missing_rate) {
                csv << "?,";
            } else {
                csv << rng.normal() * 3.0 + static_cast<double>(j) << ',';
            }
        }
        csv << (rng.uniform() < 0.4 ? 1 : 0) << '\n';
    }
    return parse_table(csv.str(), "class");
}

}  // namespace

TEST_CASE("load_table on the WBC file") {
    const auto raw = load_table(std::filesystem::path(FAFCNN_DATA_DIR) / "wbc.csv", "class");
    CHECK(raw.rows() == 699);
    CHECK(raw.cols() == 9);
    CHECK(raw.positive_label == "malignant");
    std::size_t missing = 0;
    for (const auto& row : raw.cells) {
        missing += static_cast<std::size_t>(std::count(row.begin(), row.end(), std::nullopt));
    }
    CHECK(missing == 16);
}

TEST_CASE("single row table") {
    const auto raw = parse_table("a,b,class\n1,2,0\n", "class");
    CHECK(raw.rows() == 1);
    CHECK(raw.cols() == 2);
    CHECK(raw.labels == std::vector<int>{0});
    CHECK(*raw.cells[0][1] == 2.0);
}

TEST_CASE("label column is validated") {
    CHECK_THROWS_AS(parse_table("a,class\n1,3\n", "class"), DataError);
    CHECK_THROWS_AS(parse_table("a,class\n1,0\n2,1\n3,2\n", "class"), DataError);
    CHECK_THROWS_AS(parse_table("a,b\n1,0\n", "class"), DataError);
    CHECK_THROWS_AS(parse_table("a,class\n", "class"), DataError);
    CHECK_THROWS_AS(parse_table("a,class\n1,\n", "class"), DataError);
}

TEST_CASE("text labels decode with the larger value as positive unless overridden") {
    const auto raw = parse_table("a,class\n1,no\n2,yes\n", "class");
    CHECK(raw.labels == std::vector<int>{0, 1});
    LoadOptions opt;
    opt.positive_label = "no";
    CHECK(parse_table("a,class\n1,no\n2,yes\n", "class", opt).labels == std::vector<int>{1, 0});
    opt.positive_label = "maybe";
    CHECK_THROWS_AS(parse_table("a,class\n1,no\n2,yes\n", "class", opt), DataError);
}

TEST_CASE("missing markers") {
    const auto raw = parse_table("a,b,class\n?,,1\n1,2,0\n", "class");
    CHECK_FALSE(raw.cells[0][0].has_value());
    CHECK_FALSE(raw.cells[0][1].has_value());
    CHECK(raw.cells[1][0].has_value());
}

TEST_CASE("median conventions") {
    CHECK(median({3, 1, 2}) == 2.0);
    CHECK(median({4, 1, 2}) == 2.0);
    CHECK(median({1, 2, 4, 3}) == 2.5);
    CHECK_THROWS_AS(median({}), DataError);
}

TEST_CASE("impute_median examples") {
    SUBCASE("odd count") {
        const auto d = impute_median(parse_table("a,class\n1,0\n?,1\n3,0\n", "class"));
        CHECK(d.features(1, 0) == 2.0);
        CHECK(d.column_medians(0) == 2.0);
    }
    SUBCASE("three observed values") {
        const auto d = impute_median(parse_table("a,class\n1,0\n2,1\n?,0\n4,1\n", "class"));
        CHECK(d.features(2, 0) == 2.0);
    }
    SUBCASE("even count averages the middle two") {
        const auto d = impute_median(parse_table("a,class\n1,0\n2,1\n?,0\n4,1\n5,0\n", "class"));
        CHECK(d.features(2, 0) == 3.0);
    }
    SUBCASE("no missing cells") {
        const auto d = impute_median(parse_table("a,b,class\n1,5,0\n2,6,1\n7,7,0\n", "class"));
        Matrix expected(3, 2);
        expected << 1, 5, 2, 6, 7, 7;
        CHECK(d.features == expected);
        CHECK(d.column_medians(0) == 2.0);
        CHECK(d.column_medians(1) == 6.0);
    }
    SUBCASE("column with no observed values") {
        CHECK_THROWS_AS(impute_median(parse_table("a,b,class\n?,1,0\n?,2,1\n", "class")), DataError);
    }
}

TEST_CASE("imputation is idempotent") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto raw = random_table(40, 5, seed, 0.2);
        const auto once = impute_median(raw);
        const auto twice = impute_median(to_raw(once));
        CHECK(once.features == twice.features);
        CHECK(once.labels == twice.labels);
        for (Eigen::Index i = 0; i < once.features.size(); ++i) {
            CHECK(std::isfinite(once.features.data()[i]));
        }
    }
}

TEST_CASE("perturbed row count rounds half up") {
    CHECK(perturbed_row_count(0.5, 10) == 5);
    CHECK(perturbed_row_count(0.5, 699) == 350);
    CHECK(perturbed_row_count(0.25, 10) == 3);
    CHECK(perturbed_row_count(0.0, 10) == 0);
    CHECK(perturbed_row_count(1.0, 10) == 10);
    CHECK_THROWS_AS(perturbed_row_count(1.5, 10), ConfigError);
}

TEST_CASE("perturb examples") {
    SUBCASE("N=10, delta=0.5") {
        const auto data = impute_median(random_table(10, 3, 5, 0.0));
        const auto res = perturb_logged(data, {0.5, 9});
        std::size_t rows_changed = 0;
        for (std::size_t r = 0; r < 10; ++r) {
            const auto src = static_cast<Eigen::Index>(res.data.source_rows[r]);
            std::size_t cells_changed = 0;
            for (Eigen::Index j = 0; j < 3; ++j) {
                const double now = res.data.features(static_cast<Eigen::Index>(r), j);
                if (now != data.features(src, j)) {
                    ++cells_changed;
                    CHECK(now == data.column_medians(j));
                }
            }
            CHECK(cells_changed <= 1);
            rows_changed += cells_changed;
        }
        CHECK(rows_changed == 5);
        CHECK(res.cells.size() == 5);
    }
    SUBCASE("delta=0 only shuffles") {
        const auto data = impute_median(random_table(30, 4, 6, 0.1));
        const auto out = perturb(data, {0.0, 3});
        for (std::size_t r = 0; r < 30; ++r) {
            const auto src = static_cast<Eigen::Index>(out.source_rows[r]);
            CHECK(out.features.row(static_cast<Eigen::Index>(r)) == data.features.row(src));
            CHECK(out.labels(static_cast<Eigen::Index>(r)) == data.labels(src));
        }
    }
    SUBCASE("delta=1, d=1") {
        const auto data = impute_median(random_table(25, 1, 7, 0.0));
        const auto out = perturb(data, {1.0, 4});
        CHECK((out.features.array() == data.column_medians(0)).all());
    }
}

TEST_CASE("perturbation conservation over random tables") {
    Rng rng(99);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 10 + rng.below(90);
        const std::size_t d = 1 + rng.below(6);
        const double delta = rng.uniform();
        const auto data = impute_median(random_table(n, d, 100 + static_cast<std::uint64_t>(trial), 0.0));
        const auto logged = perturb_logged(data, {delta, static_cast<std::uint64_t>(trial)});
        const auto& out = logged.data;
        CHECK(logged.cells.size() == perturbed_row_count(delta, n));
        std::set<std::size_t> touched;
        for (const auto& c : logged.cells) {
            touched.insert(c.row);
            CHECK(out.features(static_cast<Eigen::Index>(c.row), static_cast<Eigen::Index>(c.column)) ==
                  data.column_medians(static_cast<Eigen::Index>(c.column)));
        }
        CHECK(touched.size() == logged.cells.size());
        std::size_t differing = 0;
        for (std::size_t r = 0; r < n; ++r) {
            const auto src = static_cast<Eigen::Index>(out.source_rows[r]);
            const auto diff = (out.features.row(static_cast<Eigen::Index>(r)).array() !=
                               data.features.row(src).array()).count();
            CHECK(diff <= 1);
            if (diff == 1) CHECK(touched.count(r) == 1);
            differing += static_cast<std::size_t>(diff);
        }
        // A perturbed cell that already held the median does not change.
        CHECK(differing <= perturbed_row_count(delta, n));
    }
}

TEST_CASE("perturb and split are deterministic") {
    const auto data = impute_median(random_table(60, 4, 8, 0.1));
    const auto a = perturb(data, {0.7, 42});
    const auto b = perturb(data, {0.7, 42});
    CHECK(a.features == b.features);
    CHECK(a.labels == b.labels);
    CHECK(a.source_rows == b.source_rows);
    const auto s1 = split_8_1_1(a, 5);
    const auto s2 = split_8_1_1(a, 5);
    CHECK(s1.train == s2.train);
    CHECK(s1.validation == s2.validation);
    CHECK(s1.test == s2.test);
}

TEST_CASE("split sizes") {
    auto sizes = [](std::size_t n) {
        const auto s = split_8_1_1(n, 1);
        return std::array<std::size_t, 3>{s.train.size(), s.validation.size(), s.test.size()};
    };
    CHECK(sizes(100) == std::array<std::size_t, 3>{80, 10, 10});
    CHECK(sizes(155) == std::array<std::size_t, 3>{124, 15, 16});
    CHECK(sizes(699) == std::array<std::size_t, 3>{559, 69, 71});
    CHECK_THROWS_AS(split_8_1_1(9, 1), DataError);
}

TEST_CASE("split is a partition") {
    for (std::size_t n = 10; n < 300; n += 7) {
        const auto s = split_8_1_1(n, n);
        std::vector<int> seen(n, 0);
        for (const auto* part : {&s.train, &s.validation, &s.test}) {
            for (auto i : *part) {
                REQUIRE(i < n);
                ++seen[i];
            }
        }
        CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
    }
}

TEST_CASE("split json round trip") {
    const auto s = split_8_1_1(57, 3);
    const auto back = split_from_json(split_to_json(s));
    CHECK(back.train == s.train);
    CHECK(back.validation == s.validation);
    CHECK(back.test == s.test);
}

TEST_CASE("standardize examples") {
    Dataset data;
    data.column_names = {"a", "b"};
    data.features.resize(4, 2);
    data.features << 0, 5, 2, 5, 10, 7, -4, 1;
    data.labels = Eigen::VectorXi::Zero(4);
    SplitBundle split{{0, 1}, {2}, {3}};
    const auto out = standardize(data, split);
    CHECK(out.features(0, 0) == -1.0);
    CHECK(out.features(1, 0) == 1.0);
    CHECK(out.features(2, 0) == 9.0);
    CHECK(out.features(0, 1) == 0.0);
    CHECK(out.features(1, 1) == 0.0);
    CHECK(out.features(3, 1) == -4.0);
    CHECK(out.standardization->mean(0) == 1.0);
    CHECK(out.standardization->stddev(1) == 0.0);
}

TEST_CASE("csv round trip keeps full precision") {
    const auto data = impute_median(random_table(20, 3, 12, 0.0));
    const auto path = std::filesystem::temp_directory_path() / "fafcnn_datakit_roundtrip.csv";
    write_csv(data, path);
    const auto back = impute_median(load_table(path, "class"));
    CHECK(back.features == data.features);
    CHECK(back.labels == data.labels);
    std::filesystem::remove(path);
}
