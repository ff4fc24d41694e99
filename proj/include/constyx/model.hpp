#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "constyx/autodiff.hpp"
#include "constyx/tensor.hpp"

namespace constyx::model {

struct ModelConfig {
    std::size_t in_channels = 3;
    std::size_t feature_channels = 16;
    std::size_t num_classes = 3;
    std::size_t encoder_depth = 3;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct Parameter {
    std::string name;
    Tensor value;
};

// Encoder E: `encoder_depth` blocks of 3x3 conv + ReLU at stride 1.
// Head H: 1x1 conv to class logits followed by a channel softmax.
class SegModel {
public:
    SegModel() = default;
    // Kaiming fan-in normal kernels, zero biases, drawn from config.seed.
    explicit SegModel(ModelConfig config);
    SegModel(ModelConfig config, std::vector<Parameter> params);

    const ModelConfig& config() const noexcept { return config_; }
    std::vector<Parameter>& parameters() noexcept { return params_; }
    const std::vector<Parameter>& parameters() const noexcept { return params_; }

    std::size_t parameter_count() const;
    // FNV-1a over every parameter byte; used to assert read-only passes.
    std::uint64_t parameter_hash() const;

    // Index of the first head parameter in parameters().
    std::size_t head_offset() const noexcept { return 2 * config_.encoder_depth; }

private:
    ModelConfig config_;
    std::vector<Parameter> params_;
};

// Places every parameter on a tape as a leaf.
std::vector<Var> bind_parameters(Tape& tape, const SegModel& model, bool requires_grad);

Var encode(Tape& tape, std::span<const Var> params, Var image, const ModelConfig& config);
// Returns the probability node; logits are not exposed.
Var decode(Tape& tape, std::span<const Var> params, Var features, const ModelConfig& config);

FeatureMap forward_encoder(const SegModel& model, const Tensor& image);
ProbMap forward_head(const SegModel& model, const FeatureMap& features);
ProbMap predict(const SegModel& model, const Tensor& image);

// Heavy-ball SGD: v <- momentum * v + g; theta <- theta - lr * v.
class Sgd {
public:
    Sgd() = default;
    Sgd(const SegModel& model, double momentum);

    void step(SegModel& model, std::span<const Tensor> grads, double lr);

    double momentum() const noexcept { return momentum_; }
    std::vector<Tensor>& velocity() noexcept { return velocity_; }
    const std::vector<Tensor>& velocity() const noexcept { return velocity_; }

private:
    double momentum_ = 0.0;
    std::vector<Tensor> velocity_;
};

// lr0 * (1 - step / total)^power, clamped at zero past the end.
double poly_lr(double lr0, std::size_t step, std::size_t total, double power = 0.9);

// Nearest-neighbour label resampling to a smaller grid: src = floor(dst * H / h).
LabelMap downsample_labels(const LabelMap& labels, std::size_t height, std::size_t width);

// Checkpoint directory: <name>.csxt per parameter + manifest.json.
void save_checkpoint(const std::filesystem::path& dir, const SegModel& model, const nlohmann::json& metadata);
SegModel load_checkpoint(const std::filesystem::path& dir, nlohmann::json* metadata = nullptr);

}  // namespace constyx::model
