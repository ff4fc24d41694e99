#pragma once

#include <cstddef>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>

#include "constyx/model.hpp"
#include "constyx/rng.hpp"
#include "constyx/stats.hpp"
#include "constyx/tensor.hpp"

// Deep feature augmentation: z_hat = z + alpha_ic + alpha_cd per pixel, with
// alpha_ic ~ N(0, lambda1 Sigma_c) and alpha_cd drawn on the k channels whose
// loss gradient is smallest.
namespace constyx::dfa {

enum class MaskMode { MinK, MaxK, RandomK };
enum class CrossDist { Uniform, Normal };
enum class GuidanceLoss { CeDice, Ce };

std::string to_string(MaskMode m);
std::string to_string(CrossDist d);
std::string to_string(GuidanceLoss g);
MaskMode parse_mask_mode(const std::string& s);
CrossDist parse_cross_dist(const std::string& s);
GuidanceLoss parse_guidance(const std::string& s);

struct AugConfig {
    double lambda1 = 1.0;
    double lambda2 = 0.5;
    std::size_t k = 5;
    MaskMode mask_mode = MaskMode::MinK;
    CrossDist cross_dist = CrossDist::Uniform;
    GuidanceLoss guidance = GuidanceLoss::CeDice;

    // Throws std::invalid_argument unless k <= channels and lambdas >= 0.
    void validate(std::size_t channels) const;
};

void to_json(nlohmann::json& j, const AugConfig& c);
void from_json(const nlohmann::json& j, AugConfig& c);

// Root of the per-pixel random streams for one image in one training step.
struct StreamKey {
    std::uint64_t seed = 0;
    std::uint64_t image = 0;

    CounterRng stream(std::size_t pixel, DrawKind kind) const {
        return CounterRng({seed, image, static_cast<std::uint64_t>(pixel), static_cast<std::uint64_t>(kind)});
    }
};

// dL_seg(H(Z), Y)/dZ with a fresh head forward. Model parameters are not
// touched.
Tensor feature_gradient(const model::SegModel& model, const FeatureMap& features, const LabelMap& labels,
                        GuidanceLoss loss = GuidanceLoss::CeDice);

// Binary [N,H,W] mask with exactly k ones per pixel. Ties go to the lower
// channel index in both min_k and max_k.
Tensor feature_mask(const Tensor& grad, std::size_t k, MaskMode mode, const StreamKey& key);

// Cross-domain perturbation on masked entries: U[0, lambda2] (uniform) or
// N(0, variance lambda2) (normal); unmasked entries are exactly zero.
Tensor sample_cross(const Tensor& mask, double lambda2, CrossDist dist, const StreamKey& key);

// alpha_ic + alpha_cd for every pixel. Classes still in warm-up contribute
// no intra-class term.
Tensor augmentation_offsets(const LabelMap& labels, const stats::IntraSampler& sampler, const Tensor& grad,
                            const AugConfig& cfg, const StreamKey& key);

FeatureMap augment_features(const FeatureMap& features, const LabelMap& labels, const stats::IntraSampler& sampler,
                            const Tensor& grad, const AugConfig& cfg, const StreamKey& key);
FeatureMap augment_features(const FeatureMap& features, const LabelMap& labels, const stats::StatsBank& bank,
                            const Tensor& grad, const AugConfig& cfg, const StreamKey& key);

}  // namespace constyx::dfa
