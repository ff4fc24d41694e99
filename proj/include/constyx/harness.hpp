#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "constyx/dfa.hpp"
#include "constyx/losses.hpp"
#include "constyx/model.hpp"
#include "constyx/stats.hpp"
#include "constyx/synth.hpp"

namespace constyx::harness {

enum class Method { Baseline, Dfa, Constyx };
enum class StatsOrder { BeforeAugment, AfterAugment };

std::string to_string(Method m);
std::string to_string(StatsOrder o);
Method parse_method(const std::string& s);
StatsOrder parse_stats_order(const std::string& s);

// Raised for bad user input (unknown keys, out-of-range values).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Raised when training produces a non-finite loss.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    Method method = Method::Constyx;
    dfa::AugConfig aug;
    model::ModelConfig model;
    std::size_t epochs = 40;
    std::size_t batch_size = 8;
    double lr0 = 0.001;
    double momentum = 0.99;
    double tau = 0.6;
    int source_domain = 0;
    std::filesystem::path data;
    std::filesystem::path out;
    std::uint64_t seed = 0;
    StatsOrder stats_order = StatsOrder::BeforeAugment;
    // Drop the original-feature loss and train on the augmented branch only.
    bool aug_only = false;
    // constyx with W forced to 1 (nesting check against dfa).
    bool force_unit_weights = false;
    bool plot = false;
    bool resume = false;
    // Stop after this many epochs in one call (0 = run to the end); the
    // resume state written so far stays valid.
    std::size_t stop_after = 0;

    void validate() const;
};

// Flat JSON object with RunConfig field names (aug/model fields inlined).
nlohmann::json to_json(const RunConfig& cfg);
// Applies overrides; unknown keys or bad values raise ConfigError.
void apply_overrides(RunConfig& cfg, const nlohmann::json& overrides);
// Parses a JSON object, or flat `key = value` lines (# comments allowed).
nlohmann::json parse_config_text(const std::string& text);
nlohmann::json read_config_file(const std::filesystem::path& path);

struct StepLosses {
    double total = 0.0;
    double original = 0.0;
    double augmented = 0.0;
    double mean_weight = 0.0;  // mean W over augmented pixels (constyx only)
};

// Mutable training state owned by one loop.
struct TrainState {
    model::SegModel model;
    model::Sgd optimizer;
    stats::StatsBank bank;
    std::size_t step = 0;
};

TrainState make_train_state(const RunConfig& cfg);

// Optional hook observing the parameter hash around the gradient-guidance
// pass (before, after).
using PurityProbe = std::function<void(std::uint64_t, std::uint64_t)>;

// One optimization step over a batch. The batch loss is the mean over images of
// L_orig + L_aug.
StepLosses train_step(TrainState& state, std::span<const synth::SampleRecord> batch, const RunConfig& cfg,
                      double lr, const PurityProbe& probe = {});

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_dsc = 0.0;
    double original_loss = 0.0;
    double augmented_loss = 0.0;
    double mean_weight = 0.0;
    double lr = 0.0;
};

struct RunLog {
    nlohmann::json config;
    std::vector<EpochRecord> epochs;
    std::vector<double> step_losses;
    std::size_t best_epoch = 0;
    double best_val_dsc = 0.0;
    metrics::EvalResult final;
    double wall_clock_s = 0.0;
    std::string input_hash;
    std::vector<std::string> deviations;
};

nlohmann::json to_json(const RunLog& log);

struct RunResult {
    model::SegModel model;
    RunLog log;
};

// Trains on the source train split, keeps the best-validation checkpoint and
// evaluates it on every other domain. Writes checkpoint/, run_log.json and
// metrics.json under cfg.out when it is non-empty.
RunResult run_training(const RunConfig& cfg);
RunResult run_training(const RunConfig& cfg, const synth::Dataset& data);

// Evaluation classes: disc and cup.
std::vector<int> eval_classes();

metrics::EvalResult evaluate_checkpoint(const std::filesystem::path& checkpoint, const synth::Dataset& data);

struct AblationCell {
    std::string name;
    nlohmann::json overrides;
};

struct CellSummary {
    std::string name;
    std::vector<std::uint64_t> seeds;
    std::vector<double> averages;  // cross-domain average DSC per seed
    std::vector<double> val_dsc;   // best in-domain validation DSC per seed
    double mean = 0.0;
    double sd = 0.0;
    std::vector<std::string> errors;
};

struct AblationReport {
    std::vector<CellSummary> cells;
};

nlohmann::json to_json(const AblationReport& r);
std::string format_table(const AblationReport& r);
std::vector<AblationCell> parse_matrix(const nlohmann::json& j);

// Runs every (cell, seed) pair on top of `base`. A failing cell is recorded
// and the remaining cells still run. `jobs` > 1 runs cells concurrently.
AblationReport run_ablation(const RunConfig& base, std::span<const AblationCell> cells,
                            std::span<const std::uint64_t> seeds, const synth::Dataset& data, std::size_t jobs = 1);

// Keeps glibc from returning large tensor buffers to the OS after every step
// (mmap/munmap churn dominated wall time). No-op elsewhere.
void tune_allocator();

// Minimal SVG line chart of per-epoch train loss and validation DSC.
std::string render_curves_svg(const RunLog& log);

}  // namespace constyx::harness
