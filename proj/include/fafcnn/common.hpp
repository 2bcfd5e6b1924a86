#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fafcnn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using IndexList = std::vector<std::size_t>;
/// Read-only view of a vector that also binds rows of column-major matrices without copying.
using ConstVectorRef = Eigen::Ref<const Vector, 0, Eigen::InnerStride<>>;

/// Bad or inconsistent configuration (CLI exit code 1).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed or unusable input data (CLI exit code 2).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss (CLI exit code 3).
struct TrainingAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// sign with sign(0) = 0, the L1 subgradient used throughout.
inline double l1_sign(double v) { return (v > 0.0) - (v < 0.0); }

/// Portable generator: the mt19937_64 output sequence is fixed by the standard,
/// and every distribution here is implemented locally so draws do not depend
/// on the standard library vendor.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    /// Uniform integer in [0, n) by rejection sampling; n > 0.
    std::uint64_t below(std::uint64_t n);
    /// Standard normal via Box-Muller (one value per call, spare cached).
    double normal();

    /// Fisher-Yates shuffle, walking i from n-1 down to 1 and swapping with below(i+1).
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// SplitMix64 finalizer; used to derive independent stream seeds from one run seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

/// Identity permutation 0..n-1 shuffled with the given seed.
IndexList shuffled_indices(std::size_t n, std::uint64_t seed);

/// FNV-1a over raw bytes.
std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t h = 14695981039346656037ull);
std::uint64_t hash_doubles(std::span<const double> values, std::uint64_t h = 14695981039346656037ull);
std::string hex64(std::uint64_t v);

}  // namespace fafcnn
