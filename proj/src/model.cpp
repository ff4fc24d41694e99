#include "constyx/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "constyx/rng.hpp"

namespace constyx::model {

void ModelConfig::validate() const {
    if (in_channels == 0) throw std::invalid_argument("in_channels must be positive");
    if (feature_channels == 0) throw std::invalid_argument("feature_channels must be positive");
    if (num_classes < 2) throw std::invalid_argument("num_classes must be at least 2");
    if (encoder_depth == 0) throw std::invalid_argument("encoder_depth must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"in_channels", c.in_channels},
         {"feature_channels", c.feature_channels},
         {"num_classes", c.num_classes},
         {"encoder_depth", c.encoder_depth},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.in_channels = j.value("in_channels", c.in_channels);
    c.feature_channels = j.value("feature_channels", c.feature_channels);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.encoder_depth = j.value("encoder_depth", c.encoder_depth);
    c.seed = j.value("seed", c.seed);
}

namespace {

Tensor kaiming(Shape shape, std::size_t fan_in, CounterRng& rng) {
    Tensor t(std::move(shape));
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data()) v = sd * rng.normal();
    return t;
}

std::vector<Shape> expected_shapes(const ModelConfig& c) {
    std::vector<Shape> shapes;
    std::size_t cin = c.in_channels;
    for (std::size_t b = 0; b < c.encoder_depth; ++b) {
        shapes.push_back({c.feature_channels, cin, 3, 3});
        shapes.push_back({c.feature_channels});
        cin = c.feature_channels;
    }
    shapes.push_back({c.num_classes, c.feature_channels, 1, 1});
    shapes.push_back({c.num_classes});
    return shapes;
}

}  // namespace

SegModel::SegModel(ModelConfig config) : config_(config) {
    config_.validate();
    CounterRng rng({config_.seed, 0x5eedULL});
    std::size_t cin = config_.in_channels;
    for (std::size_t b = 0; b < config_.encoder_depth; ++b) {
        const auto prefix = "enc" + std::to_string(b);
        params_.push_back({prefix + ".weight", kaiming({config_.feature_channels, cin, 3, 3}, cin * 9, rng)});
        params_.push_back({prefix + ".bias", Tensor(Shape{config_.feature_channels})});
        cin = config_.feature_channels;
    }
    params_.push_back({"head.weight", kaiming({config_.num_classes, config_.feature_channels, 1, 1},
                                              config_.feature_channels, rng)});
    params_.push_back({"head.bias", Tensor(Shape{config_.num_classes})});
}

SegModel::SegModel(ModelConfig config, std::vector<Parameter> params) : config_(config), params_(std::move(params)) {
    config_.validate();
    const auto shapes = expected_shapes(config_);
    if (shapes.size() != params_.size()) throw std::invalid_argument("parameter list does not match model config");
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (params_[i].value.shape() != shapes[i]) {
            throw ShapeError("parameter " + params_[i].name + " has shape " + shape_str(params_[i].value.shape()) +
                             ", expected " + shape_str(shapes[i]));
        }
    }
}

std::size_t SegModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
}

std::uint64_t SegModel::parameter_hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params_) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data().data());
        for (std::size_t i = 0; i < p.value.numel() * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    }
    return h;
}

std::vector<Var> bind_parameters(Tape& tape, const SegModel& model, bool requires_grad) {
    std::vector<Var> vars;
    vars.reserve(model.parameters().size());
    for (const auto& p : model.parameters()) vars.push_back(tape.leaf(p.value, requires_grad));
    return vars;
}

Var encode(Tape& tape, std::span<const Var> params, Var image, const ModelConfig& config) {
    const Tensor& x = tape.value(image);
    require_rank(x, 3, "forward_encoder");
    if (x.dim(0) != config.in_channels) {
        throw ShapeError("forward_encoder: expected " + std::to_string(config.in_channels) + " channels, got " +
                         shape_str(x.shape()));
    }
    Var h = image;
    for (std::size_t b = 0; b < config.encoder_depth; ++b) {
        h = relu(tape, conv2d(tape, h, params[2 * b], params[2 * b + 1]));
    }
    return h;
}

Var decode(Tape& tape, std::span<const Var> params, Var features, const ModelConfig& config) {
    const Tensor& z = tape.value(features);
    require_rank(z, 3, "forward_head");
    if (z.dim(0) != config.feature_channels) {
        throw ShapeError("forward_head: expected " + std::to_string(config.feature_channels) + " channels, got " +
                         shape_str(z.shape()));
    }
    const std::size_t off = 2 * config.encoder_depth;
    return softmax_channels(tape, conv1x1(tape, features, params[off], params[off + 1]));
}

FeatureMap forward_encoder(const SegModel& model, const Tensor& image) {
    Tape tape;
    auto params = bind_parameters(tape, model, false);
    return tape.value(encode(tape, params, tape.constant(image), model.config()));
}

ProbMap forward_head(const SegModel& model, const FeatureMap& features) {
    Tape tape;
    auto params = bind_parameters(tape, model, false);
    return tape.value(decode(tape, params, tape.constant(features), model.config()));
}

ProbMap predict(const SegModel& model, const Tensor& image) {
    Tape tape;
    auto params = bind_parameters(tape, model, false);
    Var z = encode(tape, params, tape.constant(image), model.config());
    return tape.value(decode(tape, params, z, model.config()));
}

Sgd::Sgd(const SegModel& model, double momentum) : momentum_(momentum) {
    for (const auto& p : model.parameters()) velocity_.emplace_back(p.value.shape());
}

void Sgd::step(SegModel& model, std::span<const Tensor> grads, double lr) {
    auto& params = model.parameters();
    if (grads.size() != params.size()) {
        throw std::invalid_argument("sgd_step: expected " + std::to_string(params.size()) + " gradients, got " +
                                    std::to_string(grads.size()));
    }
    if (velocity_.size() != params.size()) throw std::logic_error("sgd_step: optimizer bound to another model");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].shape() != params[i].value.shape()) {
            throw ShapeError("sgd_step: gradient for " + params[i].name + " has shape " +
                             shape_str(grads[i].shape()));
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& v = velocity_[i];
        auto& theta = params[i].value;
        for (std::size_t e = 0; e < theta.numel(); ++e) {
            v[e] = momentum_ * v[e] + grads[i][e];
            theta[e] -= lr * v[e];
        }
    }
}

double poly_lr(double lr0, std::size_t step, std::size_t total, double power) {
    if (total == 0 || step >= total) return 0.0;
    return lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

LabelMap downsample_labels(const LabelMap& labels, std::size_t height, std::size_t width) {
    if (height == 0 || width == 0 || height > labels.height || width > labels.width) {
        throw std::invalid_argument("downsample_labels: target " + std::to_string(height) + "x" +
                                    std::to_string(width) + " must be nonempty and no larger than source");
    }
    LabelMap out(height, width);
    for (std::size_t y = 0; y < height; ++y) {
        const std::size_t sy = y * labels.height / height;
        for (std::size_t x = 0; x < width; ++x) out(y, x) = labels(sy, x * labels.width / width);
    }
    return out;
}

void save_checkpoint(const std::filesystem::path& dir, const SegModel& model, const nlohmann::json& metadata) {
    std::filesystem::create_directories(dir);
    nlohmann::json params = nlohmann::json::object();
    for (const auto& p : model.parameters()) {
        save_tensor(dir / (p.name + ".csxt"), p.value);
        params[p.name] = p.value.shape();
    }
    nlohmann::json manifest = metadata;
    manifest["parameters"] = params;
    manifest["order"] = nlohmann::json::array();
    for (const auto& p : model.parameters()) manifest["order"].push_back(p.name);
    manifest["config"] = model.config();
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write checkpoint manifest in " + dir.string());
    out << manifest.dump(2) << '\n';
}

SegModel load_checkpoint(const std::filesystem::path& dir, nlohmann::json* metadata) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("no checkpoint manifest in " + dir.string());
    const auto manifest = nlohmann::json::parse(in);
    const auto config = manifest.at("config").get<ModelConfig>();
    std::vector<Parameter> params;
    for (const auto& name : manifest.at("order")) {
        const auto n = name.get<std::string>();
        Tensor t = load_tensor(dir / (n + ".csxt"));
        if (t.shape() != manifest.at("parameters").at(n).get<Shape>()) {
            throw std::runtime_error("checkpoint tensor " + n + " disagrees with manifest shape");
        }
        params.push_back({n, std::move(t)});
    }
    if (metadata) *metadata = manifest;
    return SegModel(config, std::move(params));
}

}  // namespace constyx::model
