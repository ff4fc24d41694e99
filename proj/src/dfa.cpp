#include "constyx/dfa.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "constyx/losses.hpp"

namespace constyx::dfa {

std::string to_string(MaskMode m) {
    switch (m) {
        case MaskMode::MinK: return "min_k";
        case MaskMode::MaxK: return "max_k";
        case MaskMode::RandomK: return "random_k";
    }
    return "?";
}

std::string to_string(CrossDist d) { return d == CrossDist::Uniform ? "uniform" : "normal"; }
std::string to_string(GuidanceLoss g) { return g == GuidanceLoss::CeDice ? "ce_dice" : "ce"; }

MaskMode parse_mask_mode(const std::string& s) {
    if (s == "min_k") return MaskMode::MinK;
    if (s == "max_k") return MaskMode::MaxK;
    if (s == "random_k") return MaskMode::RandomK;
    throw std::invalid_argument("unknown mask mode '" + s + "' (expected min_k, max_k or random_k)");
}

CrossDist parse_cross_dist(const std::string& s) {
    if (s == "uniform") return CrossDist::Uniform;
    if (s == "normal") return CrossDist::Normal;
    throw std::invalid_argument("unknown cross distribution '" + s + "' (expected uniform or normal)");
}

GuidanceLoss parse_guidance(const std::string& s) {
    if (s == "ce_dice") return GuidanceLoss::CeDice;
    if (s == "ce") return GuidanceLoss::Ce;
    throw std::invalid_argument("unknown guidance loss '" + s + "' (expected ce_dice or ce)");
}

void AugConfig::validate(std::size_t channels) const {
    if (!(lambda1 >= 0.0)) throw std::invalid_argument("lambda1 must be nonnegative");
    if (!(lambda2 >= 0.0)) throw std::invalid_argument("lambda2 must be nonnegative");
    if (k > channels) {
        throw std::invalid_argument("k = " + std::to_string(k) + " exceeds feature channels " +
                                    std::to_string(channels));
    }
}

void to_json(nlohmann::json& j, const AugConfig& c) {
    j = {{"lambda1", c.lambda1},
         {"lambda2", c.lambda2},
         {"k", c.k},
         {"mask_mode", to_string(c.mask_mode)},
         {"cross_dist", to_string(c.cross_dist)},
         {"guidance", to_string(c.guidance)}};
}

void from_json(const nlohmann::json& j, AugConfig& c) {
    c.lambda1 = j.value("lambda1", c.lambda1);
    c.lambda2 = j.value("lambda2", c.lambda2);
    c.k = j.value("k", c.k);
    if (j.contains("mask_mode")) c.mask_mode = parse_mask_mode(j.at("mask_mode").get<std::string>());
    if (j.contains("cross_dist")) c.cross_dist = parse_cross_dist(j.at("cross_dist").get<std::string>());
    if (j.contains("guidance")) c.guidance = parse_guidance(j.at("guidance").get<std::string>());
}

Tensor feature_gradient(const model::SegModel& model, const FeatureMap& features, const LabelMap& labels,
                        GuidanceLoss loss) {
    require_spatial_match(features, labels, "feature_gradient");
    labels.check_range(static_cast<int>(model.config().num_classes));
    Tape tape;
    auto params = model::bind_parameters(tape, model, false);
    Var z = tape.leaf(features, true);
    Var probs = model::decode(tape, params, z, model.config());
    Var l = loss == GuidanceLoss::CeDice ? metrics::seg_loss(tape, probs, labels) : metrics::ce_loss(tape, probs, labels);
    const Var targets[] = {z};
    return tape.backward(l, targets).take(z);
}

Tensor feature_mask(const Tensor& grad, std::size_t k, MaskMode mode, const StreamKey& key) {
    require_rank(grad, 3, "feature_mask");
    const std::size_t n = grad.dim(0), hw = grad.dim(1) * grad.dim(2);
    if (k > n) {
        throw std::invalid_argument("feature_mask: k = " + std::to_string(k) + " exceeds channel count " +
                                    std::to_string(n));
    }
    Tensor mask(grad.shape(), 0.0);
    std::vector<std::size_t> order(n);
    for (std::size_t j = 0; j < hw; ++j) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        switch (mode) {
            case MaskMode::MinK:
                std::stable_sort(order.begin(), order.end(),
                                 [&](std::size_t a, std::size_t b) { return grad[a * hw + j] < grad[b * hw + j]; });
                break;
            case MaskMode::MaxK:
                std::stable_sort(order.begin(), order.end(),
                                 [&](std::size_t a, std::size_t b) { return grad[a * hw + j] > grad[b * hw + j]; });
                break;
            case MaskMode::RandomK: {
                // Partial Fisher-Yates: the first k slots are a uniform k-subset.
                CounterRng rng = key.stream(j, DrawKind::RandomMask);
                for (std::size_t i = 0; i < k; ++i) {
                    const std::size_t r = i + static_cast<std::size_t>(rng() % (n - i));
                    std::swap(order[i], order[r]);
                }
                break;
            }
        }
        for (std::size_t i = 0; i < k; ++i) mask[order[i] * hw + j] = 1.0;
    }
    return mask;
}

namespace {

void fill_cross(const Tensor& mask, std::size_t j, double lambda2, CrossDist dist, const StreamKey& key,
                Tensor& out) {
    const std::size_t n = mask.dim(0), hw = mask.dim(1) * mask.dim(2);
    CounterRng rng = key.stream(j, DrawKind::CrossDomain);
    const double sd = std::sqrt(lambda2);
    for (std::size_t c = 0; c < n; ++c) {
        if (mask[c * hw + j] == 0.0) continue;
        out[c * hw + j] += dist == CrossDist::Uniform ? lambda2 * rng.uniform() : sd * rng.normal();
    }
}

}  // namespace

Tensor sample_cross(const Tensor& mask, double lambda2, CrossDist dist, const StreamKey& key) {
    require_rank(mask, 3, "sample_cross");
    if (!(lambda2 >= 0.0)) throw std::invalid_argument("sample_cross: lambda2 must be nonnegative");
    Tensor out(mask.shape(), 0.0);
    if (lambda2 == 0.0) return out;
    const std::size_t hw = mask.dim(1) * mask.dim(2);
    for (std::size_t j = 0; j < hw; ++j) fill_cross(mask, j, lambda2, dist, key, out);
    return out;
}

Tensor augmentation_offsets(const LabelMap& labels, const stats::IntraSampler& sampler, const Tensor& grad,
                            const AugConfig& cfg, const StreamKey& key) {
    require_spatial_match(grad, labels, "augment_features");
    const std::size_t n = grad.dim(0), hw = labels.size();
    if (sampler.dim() != n) {
        throw ShapeError("augment_features: stats dim " + std::to_string(sampler.dim()) + " vs " +
                         std::to_string(n) + " feature channels");
    }
    cfg.validate(n);
    labels.check_range(static_cast<int>(sampler.num_classes()));

    Tensor offsets(grad.shape(), 0.0);
    if (cfg.lambda2 > 0.0 && cfg.k > 0) {
        offsets = sample_cross(feature_mask(grad, cfg.k, cfg.mask_mode, key), cfg.lambda2, cfg.cross_dist, key);
    }
    if (cfg.lambda1 > 0.0) {
        std::vector<double> alpha(n);
        for (std::size_t j = 0; j < hw; ++j) {
            const auto c = static_cast<std::size_t>(labels.values[j]);
            if (!sampler.enabled(c)) continue;
            CounterRng rng = key.stream(j, DrawKind::IntraClass);
            stats::sample_gaussian(sampler.factor(c), cfg.lambda1, rng, alpha);
            for (std::size_t k = 0; k < n; ++k) offsets[k * hw + j] += alpha[k];
        }
    }
    return offsets;
}

FeatureMap augment_features(const FeatureMap& features, const LabelMap& labels, const stats::IntraSampler& sampler,
                            const Tensor& grad, const AugConfig& cfg, const StreamKey& key) {
    if (features.shape() != grad.shape()) {
        throw ShapeError("augment_features: features " + shape_str(features.shape()) + " vs gradient " +
                         shape_str(grad.shape()));
    }
    const Tensor offsets = augmentation_offsets(labels, sampler, grad, cfg, key);
    FeatureMap out = features;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += offsets[i];
    return out;
}

FeatureMap augment_features(const FeatureMap& features, const LabelMap& labels, const stats::StatsBank& bank,
                            const Tensor& grad, const AugConfig& cfg, const StreamKey& key) {
    return augment_features(features, labels, stats::IntraSampler(bank), grad, cfg, key);
}

}  // namespace constyx::dfa
