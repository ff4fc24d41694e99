#include "constyx/afu.hpp"

#include <algorithm>
#include <cmath>
#include <spdlog/spdlog.h>
#include <stdexcept>

namespace constyx::afu {

Tensor cosine_similarity_map(const FeatureMap& original, const FeatureMap& augmented) {
    require_rank(original, 3, "cosine_similarity_map");
    if (original.shape() != augmented.shape()) {
        throw ShapeError("cosine_similarity_map: " + shape_str(original.shape()) + " vs " +
                         shape_str(augmented.shape()));
    }
    const std::size_t n = original.dim(0), hw = original.dim(1) * original.dim(2);
    Tensor sim(Shape{original.dim(1), original.dim(2)}, 0.0);
    for (std::size_t j = 0; j < hw; ++j) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            const double a = original[k * hw + j];
            const double b = augmented[k * hw + j];
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        na = std::sqrt(na);
        nb = std::sqrt(nb);
        if (na < kNormFloor || nb < kNormFloor) continue;
        sim[j] = std::clamp(dot / (na * nb), -1.0, 1.0);
    }
    return sim;
}

Tensor entropy_map(const ProbMap& probs) {
    require_rank(probs, 3, "entropy_map");
    const std::size_t c = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
    Tensor ent(Shape{probs.dim(1), probs.dim(2)}, 0.0);
    for (std::size_t j = 0; j < hw; ++j) {
        double e = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            const double p = std::max(probs[k * hw + j], kProbClamp);
            e -= p * std::log(p);
        }
        ent[j] = e;
    }
    return ent;
}

Tensor confidence_map(const ProbMap& probs) {
    require_rank(probs, 3, "confidence_map");
    const std::size_t c = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
    for (std::size_t j = 0; j < hw; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < c; ++k) s += probs[k * hw + j];
        if (std::abs(s - 1.0) > 1e-9) {
            throw std::invalid_argument("confidence_map: probabilities at pixel " + std::to_string(j) +
                                        " sum to " + std::to_string(s));
        }
    }
    Tensor ent = entropy_map(probs);
    const auto [lo, hi] = std::minmax_element(ent.data().begin(), ent.data().end());
    const double mn = *lo, range = *hi - *lo;
    Tensor conf(ent.shape(), 1.0);
    if (range < 1e-12) return conf;
    for (std::size_t j = 0; j < hw; ++j) conf[j] = std::clamp(1.0 - (ent[j] - mn) / range, 0.0, 1.0);
    return conf;
}

Tensor weight_map(const Tensor& similarity, const Tensor& confidence, double tau) {
    if (similarity.shape() != confidence.shape()) {
        throw ShapeError("weight_map: similarity " + shape_str(similarity.shape()) + " vs confidence " +
                         shape_str(confidence.shape()));
    }
    Tensor w(similarity.shape());
    for (std::size_t j = 0; j < w.numel(); ++j) {
        w[j] = similarity[j] > tau ? 1.0 : std::expm1(confidence[j]);
    }
    return w;
}

Var weighted_seg_loss(Tape& tape, Var probs, const LabelMap& labels, const Tensor& weights) {
    double total = 0.0;
    for (double v : weights.data()) {
        if (v < 0.0) throw std::invalid_argument("weighted_seg_loss: negative weight");
        total += v;
    }
    if (total == 0.0) {
        spdlog::warn("weighted_seg_loss: all-zero weight map, loss is 0");
    }
    return add(tape, weighted_cross_entropy(tape, probs, labels, weights), weighted_dice(tape, probs, labels, weights));
}

double weighted_seg_loss(const ProbMap& probs, const LabelMap& labels, const Tensor& weights) {
    Tape tape;
    return tape.value(weighted_seg_loss(tape, tape.constant(probs), labels, weights)).item();
}

}  // namespace constyx::afu
