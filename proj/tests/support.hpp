#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>
#include <vector>

#include "constyx/autodiff.hpp"
#include "constyx/rng.hpp"
#include "constyx/tensor.hpp"

namespace testing {

using constyx::CounterRng;
using constyx::LabelMap;
using constyx::Shape;
using constyx::Tape;
using constyx::Tensor;
using constyx::Var;

inline Tensor random_tensor(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = lo + (hi - lo) * rng.uniform();
    return t;
}

inline Tensor normal_tensor(Shape shape, CounterRng& rng, double sd = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = sd * rng.normal();
    return t;
}

inline LabelMap random_labels(std::size_t h, std::size_t w, int classes, CounterRng& rng) {
    LabelMap l(h, w);
    for (auto& v : l.values) v = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
    return l;
}

// Random point on the probability simplex per pixel, bounded away from 0.
inline Tensor random_probs(std::size_t c, std::size_t h, std::size_t w, CounterRng& rng) {
    Tensor logits = random_tensor(Shape{c, h, w}, rng, -2.0, 2.0);
    return constyx::softmax_channels(logits);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

struct GradCheck {
    double worst = 0.0;     // max |analytic - numeric| / max(1, |numeric|)
    std::size_t probed = 0;
    std::size_t skipped = 0; // probes straddling a ReLU kink
};

// Rebuilds the graph around leaf x and returns the scalar loss node.
using GraphFn = std::function<Var(Tape&, Var x)>;

// Central differences on every entry of x (or `max_probes` evenly spaced ones).
inline GradCheck finite_difference(const GraphFn& graph, const Tensor& x, double h = 1e-5,
                                   std::size_t max_probes = 0) {
    Tape tape;
    Var xv = tape.leaf(x, true);
    Var loss = graph(tape, xv);
    const std::uint64_t sig = tape.relu_signature();
    const Var targets[] = {xv};
    const Tensor analytic = tape.backward(loss, targets).of(xv);

    auto eval = [&](const Tensor& at, std::uint64_t& s) {
        Tape t;
        Var v = t.leaf(at, true);
        const double out = t.value(graph(t, v)).item();
        s = t.relu_signature();
        return out;
    };

    GradCheck r;
    const std::size_t n = x.numel();
    const std::size_t stride = max_probes == 0 || max_probes >= n ? 1 : n / max_probes;
    for (std::size_t i = 0; i < n; i += stride) {
        Tensor plus = x, minus = x;
        plus[i] += h;
        minus[i] -= h;
        std::uint64_t sp = 0, sm = 0;
        const double fp = eval(plus, sp);
        const double fm = eval(minus, sm);
        if (sp != sig || sm != sig) {
            ++r.skipped;
            continue;
        }
        const double numeric = (fp - fm) / (2.0 * h);
        r.worst = std::max(r.worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
        ++r.probed;
    }
    return r;
}

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("constyx_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

}  // namespace testing
