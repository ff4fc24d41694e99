#pragma once

#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "constyx/autodiff.hpp"
#include "constyx/model.hpp"
#include "constyx/synth.hpp"
#include "constyx/tensor.hpp"

namespace constyx::metrics {

// Mean pixel cross-entropy plus soft Dice loss over all classes.
Var seg_loss(Tape& tape, Var probs, const LabelMap& labels);
// Cross-entropy term only (ablation switch for gradient guidance).
Var ce_loss(Tape& tape, Var probs, const LabelMap& labels);
double seg_loss(const ProbMap& probs, const LabelMap& labels);

LabelMap argmax_labels(const ProbMap& probs);

// 2|A n B| / (|A| + |B|) over pixels equal to class_id; 1 when both are empty.
double dice_score(const LabelMap& pred, const LabelMap& truth, int class_id);

struct DomainResult {
    int domain = 0;
    std::vector<double> dsc_per_class;
    double dsc_mean = 0.0;
};

struct EvalResult {
    std::string method;
    int source_domain = -1;
    std::vector<int> class_ids;
    std::vector<DomainResult> per_domain;
    // Mean of per-domain dsc_mean.
    double average = 0.0;
};

void to_json(nlohmann::json& j, const EvalResult& r);
void from_json(const nlohmann::json& j, EvalResult& r);

// Per-class DSC averaged over the images of each domain. Domains are listed
// in ascending id order. Throws on an empty sample list.
EvalResult evaluate(const model::SegModel& model, std::span<const synth::SampleRecord> samples,
                    std::span<const int> class_ids);

}  // namespace constyx::metrics
