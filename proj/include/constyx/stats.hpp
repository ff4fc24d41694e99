#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "constyx/rng.hpp"
#include "constyx/tensor.hpp"

namespace constyx::stats {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct Moments {
    Vector mean;
    Matrix cov;  // population covariance (normalized by the sample count)
};

// Streaming class-conditional Gaussian statistics (count, mean, covariance).
struct ClassAccumulator {
    int class_id = 0;
    std::uint64_t count = 0;
    Vector mean;
    Matrix cov;

    ClassAccumulator() = default;
    ClassAccumulator(int id, std::size_t dim) : class_id(id), mean(Vector::Zero(dim)), cov(Matrix::Zero(dim, dim)) {}

    std::size_t dim() const noexcept { return static_cast<std::size_t>(mean.size()); }
    bool empty() const noexcept { return count == 0; }
};

// Population moments of a nonempty list of equal-length vectors.
Moments batch_moments(std::span<const Vector> samples);

// Pooled merge of running statistics with one batch of m samples:
//   mean' = (n mean + m mean_b) / (n + m)
//   cov'  = (n cov + m cov_b) / (n + m) + n m d d^T / (n + m)^2,  d = mean - mean_b
ClassAccumulator update(const ClassAccumulator& acc, const Vector& batch_mean, const Matrix& batch_cov,
                        std::uint64_t m);
ClassAccumulator merge(const ClassAccumulator& a, const ClassAccumulator& b);

class StatsBank {
public:
    StatsBank() = default;
    StatsBank(std::size_t num_classes, std::size_t dim);

    std::size_t num_classes() const noexcept { return classes_.size(); }
    std::size_t dim() const noexcept { return dim_; }

    const ClassAccumulator& operator[](std::size_t c) const { return classes_.at(c); }
    ClassAccumulator& operator[](std::size_t c) { return classes_.at(c); }
    std::span<const ClassAccumulator> classes() const noexcept { return classes_; }

    // Merges another bank class by class.
    void absorb(const StatsBank& other);

    void save(const std::filesystem::path& dir) const;
    static StatsBank load(const std::filesystem::path& dir);

private:
    std::size_t dim_ = 0;
    std::vector<ClassAccumulator> classes_;
};

// Updates each class present in `labels` once with the moments of its pixel
// feature vectors. features: [N,H,W].
StatsBank ingest_feature_map(StatsBank bank, const FeatureMap& features, const LabelMap& labels);
void ingest_feature_map_inplace(StatsBank& bank, const FeatureMap& features, const LabelMap& labels);

inline constexpr double kJitterStart = 1e-8;
inline constexpr double kJitterMax = 1e-4;

// Sampling factor for N(0, Sigma): either a lower Cholesky factor or, when the
// factorization fails even after jitter escalation, per-coordinate std devs.
struct GaussianFactor {
    enum class Kind { Disabled, Cholesky, Diagonal };
    Kind kind = Kind::Disabled;
    Matrix lower;      // Cholesky
    Vector diag_sd;    // Diagonal
    double jitter = 0; // jitter actually added (absolute)
};

// Below n >= dim + 1 samples the factor is Disabled (zero perturbation).
// Jitter is relative to the mean diagonal variance: Sigma + j * (tr(Sigma)/dim) * I,
// j = 1e-8, 1e-7, ..., 1e-4.
GaussianFactor factorize(const ClassAccumulator& acc);

// Draws alpha = sqrt(lambda) * L * eps into out (length dim).
void sample_gaussian(const GaussianFactor& factor, double lambda, CounterRng& rng, std::span<double> out);

// One intra-class perturbation vector alpha ~ N(0, lambda1 * Sigma_c).
Vector sample_intra(const ClassAccumulator& acc, double lambda1, CounterRng& rng);

// Factorizations for every class of a bank, computed once per iteration.
class IntraSampler {
public:
    IntraSampler() = default;
    explicit IntraSampler(const StatsBank& bank);

    std::size_t num_classes() const noexcept { return factors_.size(); }
    std::size_t dim() const noexcept { return dim_; }
    const GaussianFactor& factor(std::size_t c) const { return factors_.at(c); }
    bool enabled(std::size_t c) const { return factors_.at(c).kind != GaussianFactor::Kind::Disabled; }

private:
    std::size_t dim_ = 0;
    std::vector<GaussianFactor> factors_;
};

}  // namespace constyx::stats
