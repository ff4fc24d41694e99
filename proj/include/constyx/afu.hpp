#pragma once

#include "constyx/autodiff.hpp"
#include "constyx/tensor.hpp"

// Augmented-feature utilization: per-pixel loss weights from feature
// similarity and prediction confidence.
namespace constyx::afu {

inline constexpr double kNormFloor = 1e-12;
inline constexpr double kDefaultTau = 0.6;

// [H,W] cosine similarity between per-pixel channel vectors; 0 where either
// vector has norm below 1e-12.
Tensor cosine_similarity_map(const FeatureMap& original, const FeatureMap& augmented);

// Per-pixel entropy (natural log, p clamped at 1e-12).
Tensor entropy_map(const ProbMap& probs);

// 1 - minmax(entropy) over one image; 1 everywhere when the entropy range is
// below 1e-12. Rejects probabilities whose channel sums are off by > 1e-9.
Tensor confidence_map(const ProbMap& probs);

// W = 1 where S > tau, else exp(F) - 1.
Tensor weight_map(const Tensor& similarity, const Tensor& confidence, double tau = kDefaultTau);

// Weighted CE + weighted Dice; the weights are constants for differentiation.
// An all-zero weight map yields a zero loss (and a warning).
Var weighted_seg_loss(Tape& tape, Var probs, const LabelMap& labels, const Tensor& weights);
double weighted_seg_loss(const ProbMap& probs, const LabelMap& labels, const Tensor& weights);

}  // namespace constyx::afu
