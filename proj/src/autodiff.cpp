#include "constyx/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace constyx {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

const Tensor& Gradients::of(Var v) const {
    if (!has(v)) throw std::out_of_range("no gradient recorded for node " + std::to_string(v.id));
    return *grads_[v.id];
}

Tensor Gradients::take(Var v) {
    if (!has(v)) throw std::out_of_range("no gradient recorded for node " + std::to_string(v.id));
    Tensor t = std::move(*grads_[v.id]);
    grads_[v.id].reset();
    return t;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{OpKind::Leaf, std::move(value), {}, requires_grad, {}});
    return Var{nodes_.size() - 1};
}

Var Tape::record(OpKind kind, Tensor value, std::vector<std::size_t> inputs, BackwardRule rule) {
    bool rg = false;
    for (auto i : inputs) {
        if (i >= nodes_.size()) throw std::out_of_range("op input refers to an unknown node");
        rg = rg || nodes_[i].requires_grad;
    }
    nodes_.push_back(Node{kind, std::move(value), std::move(inputs), rg, std::move(rule)});
    return Var{nodes_.size() - 1};
}

Gradients Tape::backward(Var loss) const {
    std::vector<bool> is_target(nodes_.size(), false);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        is_target[i] = nodes_[i].kind == OpKind::Leaf && nodes_[i].requires_grad;
    }
    return run_backward(loss, is_target);
}

Gradients Tape::backward(Var loss, std::span<const Var> targets) const {
    std::vector<bool> is_target(nodes_.size(), false);
    for (auto t : targets) is_target.at(t.id) = true;
    return run_backward(loss, is_target);
}

Gradients Tape::run_backward(Var loss, const std::vector<bool>& is_target) const {
    if (loss.id >= nodes_.size()) throw std::out_of_range("loss node not on this tape");
    if (nodes_[loss.id].value.numel() != 1) {
        throw ShapeError("backward requires a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
    }
    const std::size_t n = loss.id + 1;
    // A node needs a gradient when it is a target or feeds one.
    std::vector<bool> needs(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        bool need = is_target[i];
        for (auto in : nodes_[i].inputs) need = need || needs[in];
        needs[i] = need;
    }

    std::vector<std::optional<Tensor>> grads(nodes_.size());
    grads[loss.id] = Tensor(nodes_[loss.id].value.shape(), 1.0);

    std::vector<Tensor*> gin;
    for (std::size_t i = n; i-- > 0;) {
        const Node& node = nodes_[i];
        if (node.kind == OpKind::Leaf || !grads[i] || !needs[i]) continue;
        gin.assign(node.inputs.size(), nullptr);
        bool any = false;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
            auto in = node.inputs[k];
            if (!needs[in]) continue;
            if (!grads[in]) grads[in] = Tensor(nodes_[in].value.shape(), 0.0);
            gin[k] = &*grads[in];
            any = true;
        }
        if (any) node.rule(*this, node.inputs, *grads[i], gin);
        if (!is_target[i]) grads[i].reset();
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!is_target[i]) grads[i].reset();
    }
    return Gradients(std::move(grads));
}

std::uint64_t Tape::relu_signature() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& node : nodes_) {
        if (node.kind != OpKind::Relu) continue;
        for (double v : nodes_[node.inputs[0]].value.data()) {
            h ^= v > 0.0 ? 0x9eULL : 0x31ULL;
            h *= 1099511628211ULL;
        }
    }
    return h;
}

// ---------------------------------------------------------------------------

namespace {

void require_same_tape_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

// Unfolds a zero-padded [C,H,W] input into [C*9, H*W] columns.
void im2col3x3(const double* in, std::size_t channels, std::size_t h, std::size_t w, double* cols) {
    const std::size_t hw = h * w;
    for (std::size_t c = 0; c < channels; ++c) {
        const double* plane = in + c * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                double* row = cols + ((c * 3 + ky) * 3 + kx) * hw;
                const long dy = ky - 1;
                const long dx = kx - 1;
                for (std::size_t y = 0; y < h; ++y) {
                    const long sy = static_cast<long>(y) + dy;
                    double* dst = row + y * w;
                    if (sy < 0 || sy >= static_cast<long>(h)) {
                        std::fill(dst, dst + w, 0.0);
                        continue;
                    }
                    const double* src = plane + sy * w;
                    for (std::size_t x = 0; x < w; ++x) {
                        const long sx = static_cast<long>(x) + dx;
                        dst[x] = (sx < 0 || sx >= static_cast<long>(w)) ? 0.0 : src[sx];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col3x3: scatters column gradients back onto the input.
void col2im3x3(const double* cols, std::size_t channels, std::size_t h, std::size_t w, double* out) {
    const std::size_t hw = h * w;
    for (std::size_t c = 0; c < channels; ++c) {
        double* plane = out + c * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const double* row = cols + ((c * 3 + ky) * 3 + kx) * hw;
                const long dy = ky - 1;
                const long dx = kx - 1;
                for (std::size_t y = 0; y < h; ++y) {
                    const long sy = static_cast<long>(y) + dy;
                    if (sy < 0 || sy >= static_cast<long>(h)) continue;
                    const double* src = row + y * w;
                    double* dst = plane + sy * w;
                    for (std::size_t x = 0; x < w; ++x) {
                        const long sx = static_cast<long>(x) + dx;
                        if (sx >= 0 && sx < static_cast<long>(w)) dst[sx] += src[x];
                    }
                }
            }
        }
    }
}

// Shared core of conv2d/conv1x1: out[Cout,HW] = K[Cout,Cin*taps] * cols + b.
Var conv_impl(Tape& tape, Var input, Var kernel, Var bias, std::size_t taps, OpKind kind) {
    const Tensor& x = tape.value(input);
    const Tensor& k = tape.value(kernel);
    const Tensor& b = tape.value(bias);
    const char* what = taps == 9 ? "conv2d" : "conv1x1";
    require_rank(x, 3, what);
    const std::size_t side = taps == 9 ? 3 : 1;
    if (k.rank() != 4 || k.dim(1) != x.dim(0) || k.dim(2) != side || k.dim(3) != side) {
        throw ShapeError(std::string(what) + ": kernel " + shape_str(k.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
    }
    if (b.rank() != 1 || b.dim(0) != k.dim(0)) {
        throw ShapeError(std::string(what) + ": bias " + shape_str(b.shape()) + " does not match kernel " +
                         shape_str(k.shape()));
    }
    const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2), cout = k.dim(0);
    const std::size_t hw = h * w, kdim = cin * taps;

    Tensor out(Shape{cout, h, w});
    ConstMatMap kmat(k.data().data(), cout, kdim);
    MatMap omat(out.data().data(), cout, hw);
    if (taps == 9) {
        Buffer cols(kdim * hw);
        im2col3x3(x.data().data(), cin, h, w, cols.data());
        omat.noalias() = kmat * ConstMatMap(cols.data(), kdim, hw);
    } else {
        omat.noalias() = kmat * ConstMatMap(x.data().data(), kdim, hw);
    }
    for (std::size_t o = 0; o < cout; ++o) omat.row(o).array() += b[o];

    auto rule = [taps](const Tape& t, std::span<const std::size_t> in, const Tensor& gout,
                       std::span<Tensor* const> gin) {
        const Tensor& x = t.value(in[0]);
        const Tensor& k = t.value(in[1]);
        const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2), cout = k.dim(0);
        const std::size_t hw = h * w, kdim = cin * taps;
        ConstMatMap g(gout.data().data(), cout, hw);
        ConstMatMap kmat(k.data().data(), cout, kdim);
        Buffer cols;
        const double* colp = x.data().data();
        if (taps == 9 && gin[1]) {
            cols.resize(kdim * hw);
            im2col3x3(x.data().data(), cin, h, w, cols.data());
            colp = cols.data();
        }
        if (gin[1]) {
            MatMap gk(gin[1]->data().data(), cout, kdim);
            gk.noalias() += g * ConstMatMap(colp, kdim, hw).transpose();
        }
        if (gin[2]) {
            for (std::size_t o = 0; o < cout; ++o) (*gin[2])[o] += g.row(o).sum();
        }
        if (gin[0]) {
            if (taps == 9) {
                Buffer gcols(kdim * hw);
                MatMap gc(gcols.data(), kdim, hw);
                gc.noalias() = kmat.transpose() * g;
                col2im3x3(gcols.data(), cin, h, w, gin[0]->data().data());
            } else {
                MatMap gx(gin[0]->data().data(), kdim, hw);
                gx.noalias() += kmat.transpose() * g;
            }
        }
    };
    return tape.record(kind, std::move(out), {input.id, kernel.id, bias.id}, rule);
}

}  // namespace

Var conv2d(Tape& tape, Var input, Var kernel, Var bias) {
    return conv_impl(tape, input, kernel, bias, 9, OpKind::Conv3x3);
}

Var conv1x1(Tape& tape, Var input, Var weight, Var bias) {
    return conv_impl(tape, input, weight, bias, 1, OpKind::Conv1x1);
}

Var relu(Tape& tape, Var x) {
    const Tensor& in = tape.value(x);
    Tensor out(in.shape());
    for (std::size_t i = 0; i < in.numel(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
    return tape.record(OpKind::Relu, std::move(out), {x.id},
                       [](const Tape& t, std::span<const std::size_t> in, const Tensor& g,
                          std::span<Tensor* const> gin) {
                           const Tensor& v = t.value(in[0]);
                           Tensor& dst = *gin[0];
                           for (std::size_t i = 0; i < v.numel(); ++i) {
                               if (v[i] > 0.0) dst[i] += g[i];
                           }
                       });
}

Var add(Tape& tape, Var a, Var b) {
    const Tensor& va = tape.value(a);
    const Tensor& vb = tape.value(b);
    require_same_tape_shape(va, vb, "add");
    Tensor out(va.shape());
    for (std::size_t i = 0; i < va.numel(); ++i) out[i] = va[i] + vb[i];
    return tape.record(OpKind::Add, std::move(out), {a.id, b.id},
                       [](const Tape&, std::span<const std::size_t>, const Tensor& g,
                          std::span<Tensor* const> gin) {
                           for (auto* dst : gin) {
                               if (!dst) continue;
                               for (std::size_t i = 0; i < g.numel(); ++i) (*dst)[i] += g[i];
                           }
                       });
}

Var scale(Tape& tape, Var x, double s) {
    const Tensor& in = tape.value(x);
    Tensor out(in.shape());
    for (std::size_t i = 0; i < in.numel(); ++i) out[i] = s * in[i];
    return tape.record(OpKind::Scale, std::move(out), {x.id},
                       [s](const Tape&, std::span<const std::size_t>, const Tensor& g,
                           std::span<Tensor* const> gin) {
                           for (std::size_t i = 0; i < g.numel(); ++i) (*gin[0])[i] += s * g[i];
                       });
}

Var mul(Tape& tape, Var a, Var b) {
    const Tensor& va = tape.value(a);
    const Tensor& vb = tape.value(b);
    require_same_tape_shape(va, vb, "mul");
    Tensor out(va.shape());
    for (std::size_t i = 0; i < va.numel(); ++i) out[i] = va[i] * vb[i];
    return tape.record(OpKind::Mul, std::move(out), {a.id, b.id},
                       [](const Tape& t, std::span<const std::size_t> in, const Tensor& g,
                          std::span<Tensor* const> gin) {
                           const Tensor& va = t.value(in[0]);
                           const Tensor& vb = t.value(in[1]);
                           if (gin[0]) {
                               for (std::size_t i = 0; i < g.numel(); ++i) (*gin[0])[i] += g[i] * vb[i];
                           }
                           if (gin[1]) {
                               for (std::size_t i = 0; i < g.numel(); ++i) (*gin[1])[i] += g[i] * va[i];
                           }
                       });
}

Tensor softmax_channels(const Tensor& logits) {
    require_rank(logits, 3, "softmax_channels");
    const std::size_t c = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
    if (c < 2) throw ShapeError("softmax_channels needs at least 2 channels, got " + shape_str(logits.shape()));
    Tensor out(logits.shape());
    for (std::size_t p = 0; p < hw; ++p) {
        double mx = logits[p];
        for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, logits[k * hw + p]);
        double z = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            double e = std::exp(logits[k * hw + p] - mx);
            out[k * hw + p] = e;
            z += e;
        }
        for (std::size_t k = 0; k < c; ++k) out[k * hw + p] /= z;
    }
    return out;
}

Var softmax_channels(Tape& tape, Var logits) {
    Tensor out = softmax_channels(tape.value(logits));
    const std::size_t self = tape.size();
    return tape.record(OpKind::Softmax, std::move(out), {logits.id},
                       [self](const Tape& t, std::span<const std::size_t>, const Tensor& g,
                              std::span<Tensor* const> gin) {
                           const Tensor& p = t.value(self);
                           const std::size_t c = p.dim(0), hw = p.dim(1) * p.dim(2);
                           Tensor& dst = *gin[0];
                           for (std::size_t px = 0; px < hw; ++px) {
                               double dot = 0.0;
                               for (std::size_t k = 0; k < c; ++k) dot += g[k * hw + px] * p[k * hw + px];
                               for (std::size_t k = 0; k < c; ++k) {
                                   dst[k * hw + px] += p[k * hw + px] * (g[k * hw + px] - dot);
                               }
                           }
                       });
}

Var log(Tape& tape, Var x) {
    const Tensor& in = tape.value(x);
    Tensor out(in.shape());
    for (std::size_t i = 0; i < in.numel(); ++i) out[i] = std::log(std::max(in[i], kProbClamp));
    return tape.record(OpKind::Log, std::move(out), {x.id},
                       [](const Tape& t, std::span<const std::size_t> in, const Tensor& g,
                          std::span<Tensor* const> gin) {
                           const Tensor& v = t.value(in[0]);
                           for (std::size_t i = 0; i < v.numel(); ++i) {
                               if (v[i] > kProbClamp) (*gin[0])[i] += g[i] / v[i];
                           }
                       });
}

Var sum(Tape& tape, Var x) {
    const Tensor& in = tape.value(x);
    double s = 0.0;
    for (double v : in.data()) s += v;
    return tape.record(OpKind::Sum, Tensor::scalar(s), {x.id},
                       [](const Tape&, std::span<const std::size_t>, const Tensor& g,
                          std::span<Tensor* const> gin) {
                           const double gv = g[0];
                           for (auto& v : gin[0]->data()) v += gv;
                       });
}

namespace {

void check_loss_inputs(const Tensor& probs, const LabelMap& labels, const Tensor& weights, const char* what) {
    require_spatial_match(probs, labels, what);
    labels.check_range(static_cast<int>(probs.dim(0)));
    if (weights.rank() != 2 || weights.dim(0) != labels.height || weights.dim(1) != labels.width) {
        throw ShapeError(std::string(what) + ": weight map " + shape_str(weights.shape()) +
                         " does not match labels");
    }
}

}  // namespace

Var weighted_cross_entropy(Tape& tape, Var probs, const LabelMap& labels, const Tensor& weights) {
    const Tensor& p = tape.value(probs);
    check_loss_inputs(p, labels, weights, "weighted_cross_entropy");
    const std::size_t hw = labels.size();
    double wsum = 0.0, acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) {
        const double pv = p[static_cast<std::size_t>(labels.values[j]) * hw + j];
        acc += weights[j] * -std::log(std::max(pv, kProbClamp));
        wsum += weights[j];
    }
    const double loss = wsum > 0.0 ? acc / wsum : 0.0;
    return tape.record(OpKind::WeightedCrossEntropy, Tensor::scalar(loss), {probs.id},
                       [labels, weights, wsum](const Tape& t, std::span<const std::size_t> in, const Tensor& g,
                                               std::span<Tensor* const> gin) {
                           if (wsum <= 0.0) return;
                           const Tensor& p = t.value(in[0]);
                           const std::size_t hw = labels.size();
                           Tensor& dst = *gin[0];
                           for (std::size_t j = 0; j < hw; ++j) {
                               const std::size_t idx = static_cast<std::size_t>(labels.values[j]) * hw + j;
                               if (p[idx] > kProbClamp) dst[idx] -= g[0] * weights[j] / (wsum * p[idx]);
                           }
                       });
}

Var weighted_dice(Tape& tape, Var probs, const LabelMap& labels, const Tensor& weights) {
    const Tensor& p = tape.value(probs);
    check_loss_inputs(p, labels, weights, "weighted_dice");
    const std::size_t c = p.dim(0), hw = labels.size();
    std::vector<double> inter(c, 0.0), uni(c, 0.0);
    for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t j = 0; j < hw; ++j) {
            const double y = labels.values[j] == static_cast<int>(k) ? 1.0 : 0.0;
            const double pv = p[k * hw + j];
            inter[k] += weights[j] * pv * y;
            uni[k] += weights[j] * (pv + y);
        }
    }
    double mean_term = 0.0;
    for (std::size_t k = 0; k < c; ++k) mean_term += (2.0 * inter[k] + kDiceSmooth) / (uni[k] + kDiceSmooth);
    mean_term /= static_cast<double>(c);
    return tape.record(OpKind::WeightedDice, Tensor::scalar(1.0 - mean_term), {probs.id},
                       [labels, weights, inter, uni](const Tape&, std::span<const std::size_t>, const Tensor& g,
                                                     std::span<Tensor* const> gin) {
                           const std::size_t c = inter.size(), hw = labels.size();
                           Tensor& dst = *gin[0];
                           const double coef = -g[0] / static_cast<double>(c);
                           for (std::size_t k = 0; k < c; ++k) {
                               const double num = 2.0 * inter[k] + kDiceSmooth;
                               const double den = uni[k] + kDiceSmooth;
                               for (std::size_t j = 0; j < hw; ++j) {
                                   const double y = labels.values[j] == static_cast<int>(k) ? 1.0 : 0.0;
                                   const double dterm = (2.0 * weights[j] * y * den - num * weights[j]) / (den * den);
                                   dst[k * hw + j] += coef * dterm;
                               }
                           }
                       });
}

}  // namespace constyx
