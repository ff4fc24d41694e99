#include "constyx/losses.hpp"

#include <map>
#include <stdexcept>

#include "constyx/parallel.hpp"

namespace constyx::metrics {

Var seg_loss(Tape& tape, Var probs, const LabelMap& labels) {
    const Tensor ones = Tensor::ones(Shape{labels.height, labels.width});
    return add(tape, weighted_cross_entropy(tape, probs, labels, ones), weighted_dice(tape, probs, labels, ones));
}

Var ce_loss(Tape& tape, Var probs, const LabelMap& labels) {
    return weighted_cross_entropy(tape, probs, labels, Tensor::ones(Shape{labels.height, labels.width}));
}

double seg_loss(const ProbMap& probs, const LabelMap& labels) {
    Tape tape;
    return tape.value(seg_loss(tape, tape.constant(probs), labels)).item();
}

LabelMap argmax_labels(const ProbMap& probs) {
    require_rank(probs, 3, "argmax_labels");
    const std::size_t c = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
    LabelMap out(probs.dim(1), probs.dim(2));
    for (std::size_t j = 0; j < hw; ++j) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < c; ++k) {
            if (probs[k * hw + j] > probs[best * hw + j]) best = k;
        }
        out.values[j] = static_cast<int>(best);
    }
    return out;
}

double dice_score(const LabelMap& pred, const LabelMap& truth, int class_id) {
    if (pred.height != truth.height || pred.width != truth.width) {
        throw ShapeError("dice_score: label maps differ in size");
    }
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t j = 0; j < pred.size(); ++j) {
        const bool pa = pred.values[j] == class_id;
        const bool pb = truth.values[j] == class_id;
        a += pa;
        b += pb;
        both += pa && pb;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

void to_json(nlohmann::json& j, const EvalResult& r) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& d : r.per_domain) {
        per.push_back({{"domain", d.domain}, {"dsc_per_class", d.dsc_per_class}, {"dsc_mean", d.dsc_mean}});
    }
    j = {{"method", r.method},
         {"source_domain", r.source_domain},
         {"class_ids", r.class_ids},
         {"per_domain", per},
         {"average", r.average}};
}

void from_json(const nlohmann::json& j, EvalResult& r) {
    r.method = j.at("method").get<std::string>();
    r.source_domain = j.at("source_domain").get<int>();
    r.class_ids = j.value("class_ids", std::vector<int>{});
    r.per_domain.clear();
    for (const auto& d : j.at("per_domain")) {
        r.per_domain.push_back({d.at("domain").get<int>(), d.at("dsc_per_class").get<std::vector<double>>(),
                                d.at("dsc_mean").get<double>()});
    }
    r.average = j.at("average").get<double>();
}

EvalResult evaluate(const model::SegModel& model, std::span<const synth::SampleRecord> samples,
                    std::span<const int> class_ids) {
    if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
    if (class_ids.empty()) throw std::invalid_argument("evaluate: no classes to score");

    std::vector<std::vector<double>> scores(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        const LabelMap pred = argmax_labels(model::predict(model, samples[i].image));
        for (int c : class_ids) scores[i].push_back(dice_score(pred, samples[i].label, c));
    });

    // Ordered reduction by image index within each domain.
    std::map<int, std::pair<std::vector<double>, std::size_t>> sums;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        auto& [acc, n] = sums[samples[i].domain_id];
        if (acc.empty()) acc.assign(class_ids.size(), 0.0);
        for (std::size_t k = 0; k < class_ids.size(); ++k) acc[k] += scores[i][k];
        ++n;
    }
    EvalResult result;
    result.class_ids.assign(class_ids.begin(), class_ids.end());
    for (auto& [domain, entry] : sums) {
        DomainResult d{domain, {}, 0.0};
        for (double s : entry.first) d.dsc_per_class.push_back(s / static_cast<double>(entry.second));
        for (double s : d.dsc_per_class) d.dsc_mean += s;
        d.dsc_mean /= static_cast<double>(d.dsc_per_class.size());
        result.average += d.dsc_mean;
        result.per_domain.push_back(std::move(d));
    }
    result.average /= static_cast<double>(result.per_domain.size());
    return result;
}

}  // namespace constyx::metrics
