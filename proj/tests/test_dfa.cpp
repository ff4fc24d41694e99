#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "constyx/dfa.hpp"
#include "constyx/losses.hpp"
#include "constyx/model.hpp"
#include "support.hpp"

using namespace constyx;
using namespace constyx::dfa;

namespace {

Tensor channel_vector(std::initializer_list<double> v) {
    return Tensor(Shape{v.size(), 1, 1}, std::vector<double>(v));
}

std::vector<double> pixel(const Tensor& t, std::size_t j) {
    const std::size_t n = t.dim(0), hw = t.dim(1) * t.dim(2);
    std::vector<double> out(n);
    for (std::size_t c = 0; c < n; ++c) out[c] = t[c * hw + j];
    return out;
}

// Reference: indices of the k smallest values, ties to the lower index, by
// counting how many entries precede each one.
std::vector<double> min_k_oracle(const std::vector<double>& g, std::size_t k) {
    std::vector<double> mask(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
        std::size_t rank = 0;
        for (std::size_t j = 0; j < g.size(); ++j) {
            if (g[j] < g[i] || (g[j] == g[i] && j < i)) ++rank;
        }
        if (rank < k) mask[i] = 1.0;
    }
    return mask;
}

// Small 2-class model with N feature channels and a hand-set head.
model::SegModel head_model(std::size_t n, std::size_t c, const Tensor& head_w, const Tensor& head_b) {
    model::ModelConfig cfg;
    cfg.in_channels = 3;
    cfg.feature_channels = n;
    cfg.num_classes = c;
    cfg.encoder_depth = 1;
    model::SegModel base(cfg);
    auto params = base.parameters();
    params[base.head_offset()].value = head_w;
    params[base.head_offset() + 1].value = head_b;
    return model::SegModel(cfg, params);
}

stats::StatsBank bank_with(std::size_t classes, std::size_t dim, std::size_t warm_class, const stats::Matrix& cov) {
    stats::StatsBank bank(classes, dim);
    bank[warm_class].count = 1000;
    bank[warm_class].cov = cov;
    return bank;
}

}  // namespace

TEST_SUITE("dfa") {

TEST_CASE("config defaults, parsing and validation") {
    const AugConfig d;
    CHECK(d.k == 5);
    CHECK(d.lambda1 == 1.0);
    CHECK(d.lambda2 == 0.5);
    CHECK(d.mask_mode == MaskMode::MinK);
    CHECK(d.cross_dist == CrossDist::Uniform);
    for (auto m : {MaskMode::MinK, MaskMode::MaxK, MaskMode::RandomK}) CHECK(parse_mask_mode(to_string(m)) == m);
    for (auto c : {CrossDist::Uniform, CrossDist::Normal}) CHECK(parse_cross_dist(to_string(c)) == c);
    for (auto g : {GuidanceLoss::CeDice, GuidanceLoss::Ce}) CHECK(parse_guidance(to_string(g)) == g);
    CHECK_THROWS(parse_mask_mode("smallest"));
    CHECK_THROWS(parse_cross_dist("laplace"));

    CHECK_NOTHROW(d.validate(16));
    CHECK_NOTHROW(d.validate(5));
    CHECK_THROWS(d.validate(4));
    AugConfig neg;
    neg.lambda1 = -0.1;
    CHECK_THROWS(neg.validate(16));
    neg = AugConfig{};
    neg.lambda2 = -1.0;
    CHECK_THROWS(neg.validate(16));

    AugConfig c;
    c.k = 3;
    c.mask_mode = MaskMode::RandomK;
    c.cross_dist = CrossDist::Normal;
    c.lambda2 = 0.25;
    const AugConfig back = nlohmann::json(c).get<AugConfig>();
    CHECK(back.k == 3);
    CHECK(back.mask_mode == MaskMode::RandomK);
    CHECK(back.cross_dist == CrossDist::Normal);
    CHECK(back.lambda2 == 0.25);
}

TEST_CASE("feature gradient vanishes on saturated correct predictions") {
    Tensor w(Shape{2, 2, 1, 1});
    w[0] = 1.0;
    w[3] = 1.0;
    const auto m = head_model(2, 2, w, Tensor(Shape{2}));
    LabelMap y(3, 3);
    Tensor z(Shape{2, 3, 3});
    for (std::size_t j = 0; j < 9; ++j) {
        y.values[j] = static_cast<int>(j % 2);
        z[static_cast<std::size_t>(y.values[j]) * 9 + j] = 60.0;
    }
    const Tensor g = feature_gradient(m, z, y);
    for (double v : g.data()) CHECK(std::abs(v) <= 1e-6);
}

TEST_CASE("feature gradient matches finite differences") {
    for (std::uint64_t s = 0; s < 6; ++s) {
        CounterRng rng({s, 0xd1});
        const std::size_t n = 4;
        const auto m = head_model(n, 2, testing::random_tensor(Shape{2, n, 1, 1}, rng),
                                  testing::random_tensor(Shape{2}, rng));
        const Tensor z = testing::random_tensor(Shape{n, 4, 4}, rng, 0.0, 2.0);
        const LabelMap y = testing::random_labels(4, 4, 2, rng);
        for (auto guidance : {GuidanceLoss::CeDice, GuidanceLoss::Ce}) {
            const Tensor g = feature_gradient(m, z, y, guidance);
            auto loss_at = [&](const Tensor& zz) {
                Tape t;
                auto params = model::bind_parameters(t, m, false);
                Var p = model::decode(t, params, t.constant(zz), m.config());
                Var l = guidance == GuidanceLoss::CeDice ? metrics::seg_loss(t, p, y) : metrics::ce_loss(t, p, y);
                return t.value(l).item();
            };
            double worst = 0.0;
            for (std::size_t i = 0; i < z.numel(); ++i) {
                Tensor a = z, b = z;
                a[i] += 1e-5;
                b[i] -= 1e-5;
                const double num = (loss_at(a) - loss_at(b)) / 2e-5;
                worst = std::max(worst, std::abs(g[i] - num) / std::max(1.0, std::abs(num)));
            }
            CHECK(worst <= 1e-5);
        }
    }
}

TEST_CASE("feature gradient is pure") {
    CounterRng rng(2);
    const model::SegModel m(model::ModelConfig{});
    const Tensor z = testing::random_tensor(Shape{16, 6, 6}, rng, 0.0, 1.0);
    const LabelMap y = testing::random_labels(6, 6, 3, rng);
    const auto before = m.parameter_hash();
    const Tensor a = feature_gradient(m, z, y);
    const Tensor b = feature_gradient(m, z, y);
    CHECK(a == b);
    CHECK(m.parameter_hash() == before);
    CHECK(a.shape() == z.shape());
    CHECK(a.all_finite());
    CHECK_THROWS(feature_gradient(m, z, LabelMap(6, 5)));
    CHECK_THROWS(feature_gradient(m, z, LabelMap(6, 6, 3)));
}

TEST_CASE("mask: hand example and boundaries") {
    const StreamKey key{1, 2};
    const Tensor g = channel_vector({0.3, -1.2, 0.0, 5.0});
    CHECK(feature_mask(g, 2, MaskMode::MinK, key) == channel_vector({0, 1, 1, 0}));
    CHECK(feature_mask(g, 2, MaskMode::MaxK, key) == channel_vector({1, 0, 0, 1}));
    CHECK(feature_mask(g, 0, MaskMode::MinK, key) == channel_vector({0, 0, 0, 0}));
    CHECK(feature_mask(g, 4, MaskMode::MaxK, key) == channel_vector({1, 1, 1, 1}));
    CHECK(feature_mask(g, 4, MaskMode::RandomK, key) == channel_vector({1, 1, 1, 1}));
    CHECK_THROWS(feature_mask(g, 5, MaskMode::MinK, key));
}

TEST_CASE("mask: ties go to the lower channel") {
    const StreamKey key{};
    const Tensor g = channel_vector({1.0, 0.5, 0.5, 0.5, 2.0});
    CHECK(feature_mask(g, 2, MaskMode::MinK, key) == channel_vector({0, 1, 1, 0, 0}));
    const Tensor h = channel_vector({1.0, 3.0, 3.0, 0.0, 3.0});
    CHECK(feature_mask(h, 2, MaskMode::MaxK, key) == channel_vector({0, 1, 1, 0, 0}));
}

TEST_CASE("property: min_k matches the counting oracle, with ties") {
    CounterRng rng(3);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng() % 16, k = rng() % (n + 1), hw = 1 + rng() % 6;
        Tensor g(Shape{n, 1, hw});
        for (auto& v : g.data()) v = static_cast<double>(static_cast<int>(rng() % 7) - 3) * 0.5;  // many ties
        const Tensor mask = feature_mask(g, k, MaskMode::MinK, StreamKey{});
        for (std::size_t j = 0; j < hw; ++j) {
            const auto gj = pixel(g, j);
            const auto mj = pixel(mask, j);
            CHECK(mj == min_k_oracle(gj, k));
            double worst_in = -INFINITY, best_out = INFINITY;
            for (std::size_t c = 0; c < n; ++c) {
                if (mj[c] == 1.0) worst_in = std::max(worst_in, gj[c]);
                else best_out = std::min(best_out, gj[c]);
            }
            CHECK(worst_in <= best_out);
        }
    }
}

TEST_CASE("property: every mode sets exactly k ones per pixel") {
    CounterRng rng(4);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 1 + rng() % 16, k = rng() % (n + 1);
        const Tensor g = testing::random_tensor(Shape{n, 3, 3}, rng);
        for (auto mode : {MaskMode::MinK, MaskMode::MaxK, MaskMode::RandomK}) {
            const Tensor mask = feature_mask(g, k, mode, StreamKey{static_cast<std::uint64_t>(trial), 0});
            for (std::size_t j = 0; j < 9; ++j) {
                const auto mj = pixel(mask, j);
                CHECK(std::accumulate(mj.begin(), mj.end(), 0.0) == static_cast<double>(k));
                for (double v : mj) CHECK((v == 0.0 || v == 1.0));
            }
        }
    }
}

TEST_CASE("random_k is uniform over channels and keyed") {
    const std::size_t n = 8, k = 3, hw = 4000;
    const Tensor g(Shape{n, 1, hw}, 0.0);
    const Tensor mask = feature_mask(g, k, MaskMode::RandomK, StreamKey{9, 1});
    for (std::size_t c = 0; c < n; ++c) {
        double hits = 0;
        for (std::size_t j = 0; j < hw; ++j) hits += mask[c * hw + j];
        CHECK(hits / hw == doctest::Approx(static_cast<double>(k) / n).epsilon(0.08));
    }
    CHECK(feature_mask(g, k, MaskMode::RandomK, StreamKey{9, 1}) == mask);
    CHECK_FALSE(feature_mask(g, k, MaskMode::RandomK, StreamKey{9, 2}) == mask);
}

TEST_CASE("cross term: zero scale, support and mean") {
    const Tensor mask(Shape{4, 1, 25000}, 1.0);
    CHECK(sample_cross(mask, 0.0, CrossDist::Uniform, StreamKey{}) == Tensor(mask.shape(), 0.0));
    const double lambda2 = 0.5;
    const Tensor u = sample_cross(mask, lambda2, CrossDist::Uniform, StreamKey{1, 0});
    double sum = 0.0;
    for (double v : u.data()) {
        CHECK((v >= 0.0 && v <= lambda2));
        sum += v;
    }
    CHECK(sum / u.numel() == doctest::Approx(lambda2 / 2).epsilon(0.02));

    const Tensor nrm = sample_cross(mask, lambda2, CrossDist::Normal, StreamKey{1, 0});
    double m1 = 0.0, m2 = 0.0;
    for (double v : nrm.data()) {
        m1 += v;
        m2 += v * v;
    }
    m1 /= nrm.numel();
    m2 /= nrm.numel();
    CHECK(std::abs(m1) <= 0.01);
    CHECK(m2 - m1 * m1 == doctest::Approx(lambda2).epsilon(0.02));
    CHECK_THROWS(sample_cross(mask, -0.1, CrossDist::Uniform, StreamKey{}));
}

TEST_CASE("cross term is exactly zero off the mask") {
    CounterRng rng(5);
    const Tensor g = testing::random_tensor(Shape{6, 4, 4}, rng);
    const Tensor mask = feature_mask(g, 2, MaskMode::MinK, StreamKey{});
    for (auto dist : {CrossDist::Uniform, CrossDist::Normal}) {
        const Tensor a = sample_cross(mask, 0.5, dist, StreamKey{3, 3});
        for (std::size_t i = 0; i < a.numel(); ++i) {
            if (mask[i] == 0.0) CHECK(a[i] == 0.0);
        }
    }
}

TEST_CASE("augment: no-op when both scales are zero") {
    CounterRng rng(6);
    const Tensor z = testing::random_tensor(Shape{6, 4, 4}, rng);
    const Tensor g = testing::random_tensor(Shape{6, 4, 4}, rng);
    const LabelMap y = testing::random_labels(4, 4, 2, rng);
    AugConfig cfg;
    cfg.k = 3;
    cfg.lambda1 = cfg.lambda2 = 0.0;
    const auto bank = bank_with(2, 6, 1, stats::Matrix::Identity(6, 6));
    CHECK(augment_features(z, y, bank, g, cfg, StreamKey{}) == z);
}

TEST_CASE("augment: zero-variance class stays within jitter scale") {
    CounterRng rng(7);
    const Tensor z = testing::random_tensor(Shape{5, 3, 3}, rng);
    stats::StatsBank bank(2, 5);
    Tensor constant(Shape{5, 3, 3}, 0.75);
    for (int i = 0; i < 3; ++i) stats::ingest_feature_map_inplace(bank, constant, LabelMap(3, 3, 0));
    AugConfig cfg;
    cfg.lambda2 = 0.0;
    const Tensor out = augment_features(z, LabelMap(3, 3, 0), bank, z, cfg, StreamKey{1, 1});
    CHECK(testing::max_abs_diff(out, z) <= 1e-6);
}

TEST_CASE("augment: mean shift equals half the cross scale on masked channels") {
    const std::size_t n = 6;
    const Tensor z = channel_vector({0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
    const Tensor g = channel_vector({3.0, -1.0, 2.0, -4.0, 0.5, 9.0});
    const Tensor v = feature_mask(g, 2, MaskMode::MinK, StreamKey{});
    const auto bank = bank_with(2, n, 0, 0.3 * stats::Matrix::Identity(n, n));
    const stats::IntraSampler sampler(bank);
    AugConfig cfg;
    cfg.k = 2;
    std::vector<double> mean(n, 0.0);
    const int reps = 100000;
    for (int r = 0; r < reps; ++r) {
        const Tensor out = augment_features(z, LabelMap(1, 1, 0), sampler, g, cfg, StreamKey{4, static_cast<std::uint64_t>(r)});
        for (std::size_t c = 0; c < n; ++c) mean[c] += (out[c] - z[c]) / reps;
    }
    for (std::size_t c = 0; c < n; ++c) {
        const double expect = cfg.lambda2 / 2 * v[c];
        // 2% of the masked mean; unmasked channels carry only the zero-mean intra term.
        CHECK(std::abs(mean[c] - expect) <= 0.02 * cfg.lambda2 / 2);
    }
}

TEST_CASE("augment: perturbations at different pixels are uncorrelated") {
    const std::size_t n = 3;
    const auto bank = bank_with(1, n, 0, stats::Matrix::Identity(n, n));
    const stats::IntraSampler sampler(bank);
    const Tensor z(Shape{n, 1, 2}, 0.0);
    const Tensor g(Shape{n, 1, 2}, 0.0);
    AugConfig cfg;
    cfg.k = 1;
    const int reps = 100000;
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    for (int r = 0; r < reps; ++r) {
        const Tensor out = augment_features(z, LabelMap(1, 2, 0), sampler, g, cfg, StreamKey{8, static_cast<std::uint64_t>(r)});
        const double a = out[0], b = out[1];
        sa += a;
        sb += b;
        saa += a * a;
        sbb += b * b;
        sab += a * b;
    }
    const double ma = sa / reps, mb = sb / reps;
    const double rho = (sab / reps - ma * mb) / std::sqrt((saa / reps - ma * ma) * (sbb / reps - mb * mb));
    CHECK(std::abs(rho) <= 0.02);
}

TEST_CASE("augment: warm-up classes receive only the cross term") {
    CounterRng rng(9);
    const std::size_t n = 4;
    const Tensor z = testing::random_tensor(Shape{n, 3, 3}, rng);
    const Tensor g = testing::random_tensor(Shape{n, 3, 3}, rng);
    const LabelMap y = testing::random_labels(3, 3, 2, rng);
    stats::StatsBank bank(2, n);
    bank[1].count = 2;  // below N + 1
    bank[1].cov = stats::Matrix::Identity(n, n);
    AugConfig cfg;
    cfg.k = 2;
    const StreamKey key{5, 6};
    const Tensor out = augment_features(z, y, bank, g, cfg, key);
    const Tensor cross = sample_cross(feature_mask(g, 2, MaskMode::MinK, key), cfg.lambda2, cfg.cross_dist, key);
    for (std::size_t i = 0; i < z.numel(); ++i) CHECK(out[i] == z[i] + cross[i]);
}

TEST_CASE("augment: shape, determinism and input checks") {
    CounterRng rng(10);
    const std::size_t n = 6;
    const Tensor z = testing::random_tensor(Shape{n, 5, 4}, rng);
    const Tensor g = testing::random_tensor(Shape{n, 5, 4}, rng);
    const LabelMap y = testing::random_labels(5, 4, 3, rng);
    const auto bank = bank_with(3, n, 2, stats::Matrix::Identity(n, n));
    const AugConfig cfg;
    const Tensor a = augment_features(z, y, bank, g, cfg, StreamKey{1, 2});
    CHECK(a.shape() == z.shape());
    CHECK(augment_features(z, y, bank, g, cfg, StreamKey{1, 2}) == a);
    CHECK_FALSE(augment_features(z, y, bank, g, cfg, StreamKey{1, 3}) == a);
    LabelMap bad = y;
    bad.values[0] = 3;
    CHECK_THROWS(augment_features(z, bad, bank, g, cfg, StreamKey{}));
    CHECK_THROWS(augment_features(z, y, bank_with(3, n + 1, 0, stats::Matrix::Identity(n + 1, n + 1)), g, cfg, StreamKey{}));
    AugConfig big;
    big.k = n + 1;
    CHECK_THROWS(augment_features(z, y, bank, g, big, StreamKey{}));
}

}  // TEST_SUITE
