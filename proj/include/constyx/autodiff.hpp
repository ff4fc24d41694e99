#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "constyx/tensor.hpp"

namespace constyx {

// Handle to a node recorded on a Tape.
struct Var {
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t id = npos;

    bool valid() const noexcept { return id != npos; }
    bool operator==(const Var&) const = default;
};

enum class OpKind : std::uint8_t {
    Leaf,
    Conv3x3,
    Conv1x1,
    Relu,
    Add,
    Scale,
    Mul,
    Softmax,
    Log,
    Sum,
    WeightedCrossEntropy,
    WeightedDice,
};

// Result of a backward sweep: one optional gradient per tape node.
class Gradients {
public:
    Gradients() = default;
    explicit Gradients(std::vector<std::optional<Tensor>> g) : grads_(std::move(g)) {}

    bool has(Var v) const { return v.id < grads_.size() && grads_[v.id].has_value(); }
    // Throws std::out_of_range when no gradient reached v.
    const Tensor& of(Var v) const;
    Tensor take(Var v);

private:
    std::vector<std::optional<Tensor>> grads_;
};

class Tape;

// Accumulates into grad_in[k] (nullptr when input k needs no gradient).
using BackwardRule = std::function<void(const Tape& tape, std::span<const std::size_t> inputs,
                                        const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

// Linear record of operations. Forward values are computed eagerly when an op
// is recorded; backward replays the record in reverse.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    Var leaf(Tensor value, bool requires_grad = false);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    Var record(OpKind kind, Tensor value, std::vector<std::size_t> inputs, BackwardRule rule);

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    // Gradients of a scalar loss w.r.t. every gradient-requiring leaf.
    Gradients backward(Var loss) const;
    // Gradients of a scalar loss w.r.t. the given nodes only (leaves or
    // intermediates). Branches that cannot reach a target are skipped.
    Gradients backward(Var loss, std::span<const Var> targets) const;

    // Hash of the sign pattern of every ReLU input; changes iff some
    // pre-activation crossed zero. Used to screen finite-difference probes.
    std::uint64_t relu_signature() const;

private:
    struct Node {
        OpKind kind = OpKind::Leaf;
        Tensor value;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        BackwardRule rule;
    };

    Gradients run_backward(Var loss, const std::vector<bool>& is_target) const;

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. All take and return nodes on the same tape.

inline constexpr double kProbClamp = 1e-12;
inline constexpr double kDiceSmooth = 1e-6;

// 3x3 cross-correlation, stride 1, zero padding 1. input [Cin,H,W],
// kernel [Cout,Cin,3,3], bias [Cout] -> [Cout,H,W].
Var conv2d(Tape& tape, Var input, Var kernel, Var bias);
// Pointwise channel mixing. weight [Cout,Cin,1,1], bias [Cout].
Var conv1x1(Tape& tape, Var input, Var weight, Var bias);
Var relu(Tape& tape, Var x);
Var add(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var x, double s);
Var mul(Tape& tape, Var a, Var b);
// Per-pixel softmax over axis 0 of a [C,H,W] tensor.
Var softmax_channels(Tape& tape, Var logits);
// Natural log with inputs clamped to >= 1e-12; zero gradient where clamped.
Var log(Tape& tape, Var x);
Var sum(Tape& tape, Var x);

// sum_j W_j * -log(p_j[y_j]) / sum_j W_j. Weights and labels are constants.
Var weighted_cross_entropy(Tape& tape, Var probs, const LabelMap& labels, const Tensor& weights);
// 1 - mean_c (2 sum_j W_j p_jc y_jc + eps) / (sum_j W_j (p_jc + y_jc) + eps).
Var weighted_dice(Tape& tape, Var probs, const LabelMap& labels, const Tensor& weights);

// Plain softmax on values, used outside of any tape.
Tensor softmax_channels(const Tensor& logits);

}  // namespace constyx
