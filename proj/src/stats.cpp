#include "constyx/stats.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>

namespace constyx::stats {

namespace {

// Forces exact symmetry by mirroring the upper triangle.
void symmetrize(Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < m.cols(); ++j) m(j, i) = m(i, j);
    }
}

void require_dims(const ClassAccumulator& acc, const Vector& mean, const Matrix& cov) {
    const auto n = acc.mean.size();
    if (mean.size() != n || cov.rows() != n || cov.cols() != n) {
        throw std::invalid_argument("accumulator dim " + std::to_string(n) + " does not match batch dim " +
                                    std::to_string(mean.size()));
    }
}

}  // namespace

Moments batch_moments(std::span<const Vector> samples) {
    if (samples.empty()) throw std::invalid_argument("batch_moments: empty sample list");
    const auto dim = samples.front().size();
    Vector mean = Vector::Zero(dim);
    for (const auto& s : samples) {
        if (s.size() != dim) throw std::invalid_argument("batch_moments: inconsistent sample dimensions");
        mean += s;
    }
    const double m = static_cast<double>(samples.size());
    mean /= m;
    Matrix cov = Matrix::Zero(dim, dim);
    Vector d(dim);
    for (const auto& s : samples) {
        d = s - mean;
        cov.selfadjointView<Eigen::Upper>().rankUpdate(d);
    }
    cov /= m;
    symmetrize(cov);
    return {std::move(mean), std::move(cov)};
}

ClassAccumulator update(const ClassAccumulator& acc, const Vector& batch_mean, const Matrix& batch_cov,
                        std::uint64_t m) {
    if (m == 0) throw std::invalid_argument("update: batch count must be positive");
    require_dims(acc, batch_mean, batch_cov);
    ClassAccumulator out(acc.class_id, acc.dim());
    out.count = acc.count + m;
    if (acc.count == 0) {
        out.mean = batch_mean;
        out.cov = batch_cov;
        symmetrize(out.cov);
        return out;
    }
    const double n = static_cast<double>(acc.count);
    const double mb = static_cast<double>(m);
    const double total = n + mb;
    const Vector delta = acc.mean - batch_mean;
    out.mean = (n * acc.mean + mb * batch_mean) / total;
    out.cov = (n * acc.cov + mb * batch_cov) / total;
    out.cov.noalias() += (n * mb / (total * total)) * delta * delta.transpose();
    symmetrize(out.cov);
    return out;
}

ClassAccumulator merge(const ClassAccumulator& a, const ClassAccumulator& b) {
    if (a.class_id != b.class_id) {
        throw std::invalid_argument("merge: class ids differ (" + std::to_string(a.class_id) + " vs " +
                                    std::to_string(b.class_id) + ")");
    }
    if (a.dim() != b.dim()) throw std::invalid_argument("merge: dimension mismatch");
    if (b.empty()) return a;
    if (a.empty()) return b;
    return update(a, b.mean, b.cov, b.count);
}

StatsBank::StatsBank(std::size_t num_classes, std::size_t dim) : dim_(dim) {
    classes_.reserve(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) classes_.emplace_back(static_cast<int>(c), dim);
}

void StatsBank::absorb(const StatsBank& other) {
    if (other.dim_ != dim_ || other.classes_.size() != classes_.size()) {
        throw std::invalid_argument("absorb: bank layouts differ");
    }
    for (std::size_t c = 0; c < classes_.size(); ++c) classes_[c] = merge(classes_[c], other.classes_[c]);
}

void StatsBank::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& acc : classes_) {
        const auto stem = "class_" + std::to_string(acc.class_id);
        const auto d = acc.dim();
        save_tensor(dir / (stem + "_mean.csxt"),
                    Tensor(Shape{d}, std::vector<double>(acc.mean.data(), acc.mean.data() + d)));
        // Eigen is column-major; the covariance is symmetric so either order is the same bytes.
        save_tensor(dir / (stem + "_cov.csxt"),
                    Tensor(Shape{d, d}, std::vector<double>(acc.cov.data(), acc.cov.data() + d * d)));
        manifest.push_back({{"class_id", acc.class_id}, {"count", acc.count}, {"dim", d}});
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

StatsBank StatsBank::load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("missing stats manifest in " + dir.string());
    const auto manifest = nlohmann::json::parse(in);
    StatsBank bank;
    for (const auto& entry : manifest) {
        const int id = entry.at("class_id").get<int>();
        const auto d = entry.at("dim").get<std::size_t>();
        if (bank.classes_.empty()) bank.dim_ = d;
        if (d != bank.dim_) throw std::runtime_error("stats manifest mixes dimensions");
        const auto stem = "class_" + std::to_string(id);
        const Tensor mean = load_tensor(dir / (stem + "_mean.csxt"));
        const Tensor cov = load_tensor(dir / (stem + "_cov.csxt"));
        if (mean.shape() != Shape{d} || cov.shape() != Shape{d, d}) {
            throw std::runtime_error("stats tensors for class " + std::to_string(id) + " have wrong shape");
        }
        ClassAccumulator acc(id, d);
        acc.count = entry.at("count").get<std::uint64_t>();
        acc.mean = Eigen::Map<const Vector>(mean.data().data(), static_cast<Eigen::Index>(d));
        acc.cov = Eigen::Map<const Matrix>(cov.data().data(), static_cast<Eigen::Index>(d),
                                           static_cast<Eigen::Index>(d));
        bank.classes_.push_back(std::move(acc));
    }
    return bank;
}

void ingest_feature_map_inplace(StatsBank& bank, const FeatureMap& features, const LabelMap& labels) {
    require_spatial_match(features, labels, "ingest_feature_map");
    if (features.dim(0) != bank.dim()) {
        throw std::invalid_argument("ingest_feature_map: feature channels " + std::to_string(features.dim(0)) +
                                    " vs bank dim " + std::to_string(bank.dim()));
    }
    labels.check_range(static_cast<int>(bank.num_classes()));
    const std::size_t n = features.dim(0), hw = labels.size();
    std::vector<std::vector<Vector>> per_class(bank.num_classes());
    for (std::size_t j = 0; j < hw; ++j) {
        Vector v(n);
        for (std::size_t k = 0; k < n; ++k) v[static_cast<Eigen::Index>(k)] = features[k * hw + j];
        per_class[static_cast<std::size_t>(labels.values[j])].push_back(std::move(v));
    }
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        if (per_class[c].empty()) continue;
        const Moments mo = batch_moments(per_class[c]);
        bank[c] = update(bank[c], mo.mean, mo.cov, per_class[c].size());
    }
}

StatsBank ingest_feature_map(StatsBank bank, const FeatureMap& features, const LabelMap& labels) {
    ingest_feature_map_inplace(bank, features, labels);
    return bank;
}

GaussianFactor factorize(const ClassAccumulator& acc) {
    GaussianFactor f;
    const auto dim = static_cast<Eigen::Index>(acc.dim());
    if (acc.count < acc.dim() + 1) return f;
    const double scale = acc.cov.trace() / static_cast<double>(dim);
    for (double j = kJitterStart; j <= kJitterMax * 1.0000001; j *= 10.0) {
        const double jitter = j * scale;
        Matrix shifted = acc.cov;
        shifted.diagonal().array() += jitter;
        Eigen::LLT<Matrix> llt(shifted);
        if (llt.info() == Eigen::Success) {
            f.kind = GaussianFactor::Kind::Cholesky;
            f.lower = llt.matrixL();
            f.jitter = jitter;
            return f;
        }
    }
    f.kind = GaussianFactor::Kind::Diagonal;
    f.diag_sd = acc.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
    return f;
}

void sample_gaussian(const GaussianFactor& factor, double lambda, CounterRng& rng, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    if (factor.kind == GaussianFactor::Kind::Disabled || lambda == 0.0) return;
    const double s = std::sqrt(lambda);
    const std::size_t n = out.size();
    // eps is drawn in full first so the stream layout is independent of the factor kind.
    double eps[64];
    std::vector<double> big;
    double* e = eps;
    if (n > 64) {
        big.resize(n);
        e = big.data();
    }
    for (std::size_t i = 0; i < n; ++i) e[i] = rng.normal();
    if (factor.kind == GaussianFactor::Kind::Diagonal) {
        for (std::size_t i = 0; i < n; ++i) out[i] = s * factor.diag_sd[static_cast<Eigen::Index>(i)] * e[i];
        return;
    }
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k <= i; ++k) {
            acc += factor.lower(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) * e[k];
        }
        out[i] = s * acc;
    }
}

Vector sample_intra(const ClassAccumulator& acc, double lambda1, CounterRng& rng) {
    if (lambda1 < 0.0) throw std::invalid_argument("sample_intra: lambda1 must be nonnegative");
    Vector out = Vector::Zero(static_cast<Eigen::Index>(acc.dim()));
    if (lambda1 == 0.0) return out;
    sample_gaussian(factorize(acc), lambda1, rng, std::span<double>(out.data(), acc.dim()));
    return out;
}

IntraSampler::IntraSampler(const StatsBank& bank) : dim_(bank.dim()) {
    factors_.reserve(bank.num_classes());
    for (const auto& acc : bank.classes()) factors_.push_back(factorize(acc));
}

}  // namespace constyx::stats
