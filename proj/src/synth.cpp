#include "constyx/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>

#include "constyx/rng.hpp"

namespace constyx::synth {

void DomainSpec::validate() const {
    if (!(gamma > 0.0)) throw std::invalid_argument("domain " + std::to_string(domain_id) + ": gamma must be > 0");
    for (double g : channel_gain) {
        if (!(g > 0.0)) throw std::invalid_argument("domain " + std::to_string(domain_id) + ": gains must be > 0");
    }
    if (!(noise_sd >= 0.0)) throw std::invalid_argument("domain " + std::to_string(domain_id) + ": noise_sd < 0");
    if (blur_radius < 0 || blur_radius > 2) {
        throw std::invalid_argument("domain " + std::to_string(domain_id) + ": blur_radius must be 0, 1 or 2");
    }
    if (!(texture_scale > 0.0)) {
        throw std::invalid_argument("domain " + std::to_string(domain_id) + ": texture_scale must be > 0");
    }
}

void to_json(nlohmann::json& j, const DomainSpec& s) {
    j = {{"domain_id", s.domain_id},     {"gamma", s.gamma},          {"channel_gain", s.channel_gain},
         {"additive_noise_sd", s.noise_sd}, {"blur_radius", s.blur_radius},
         {"background_texture_scale", s.texture_scale}};
}

void from_json(const nlohmann::json& j, DomainSpec& s) {
    s.domain_id = j.at("domain_id").get<int>();
    s.gamma = j.at("gamma").get<double>();
    s.channel_gain = j.at("channel_gain").get<std::array<double, 3>>();
    s.noise_sd = j.at("additive_noise_sd").get<double>();
    s.blur_radius = j.at("blur_radius").get<int>();
    s.texture_scale = j.at("background_texture_scale").get<double>();
}

std::vector<DomainSpec> default_domains() {
    return {
        {0, 1.0, {1.00, 1.00, 1.00}, 0.00, 0, 1.0},
        {1, 0.6, {0.92, 1.00, 1.08}, 0.02, 1, 1.5},
        {2, 1.6, {1.08, 1.00, 0.92}, 0.05, 0, 0.7},
        {3, 1.0, {0.85, 1.10, 1.10}, 0.05, 2, 2.0},
        {4, 1.6, {1.10, 1.05, 0.95}, 0.02, 1, 0.5},
    };
}

Geometry draw_geometry(std::uint64_t seed, std::size_t size) {
    const double s = static_cast<double>(size);
    for (std::uint64_t attempt = 0;; ++attempt) {
        CounterRng rng({seed, 0x9e0ULL, attempt});
        Geometry g;
        g.cx = s * (0.40 + 0.20 * rng.uniform());
        g.cy = s * (0.40 + 0.20 * rng.uniform());
        g.ax = s * (0.18 + 0.12 * rng.uniform());
        g.ay = s * (0.18 + 0.12 * rng.uniform());
        g.angle = std::numbers::pi * rng.uniform();
        g.cup_scale = 0.3 + 0.4 * rng.uniform();
        const LabelMap lbl = rasterize(g, size);
        std::size_t disc = 0, cup = 0;
        for (int v : lbl.values) {
            disc += v >= kDisc;
            cup += v == kCup;
        }
        const double area = s * s;
        if (disc >= 0.02 * area && cup >= 0.005 * area) return g;
    }
}

LabelMap rasterize(const Geometry& g, std::size_t size) {
    LabelMap lbl(size, size, kBackground);
    const double ca = std::cos(g.angle), sa = std::sin(g.angle);
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - g.cx;
            const double dy = static_cast<double>(y) + 0.5 - g.cy;
            const double u = (ca * dx + sa * dy) / g.ax;
            const double v = (-sa * dx + ca * dy) / g.ay;
            const double r2 = u * u + v * v;
            // Cup test uses the same normalized radius, so cup is inside disc.
            if (r2 <= g.cup_scale * g.cup_scale) {
                lbl(y, x) = kCup;
            } else if (r2 <= 1.0) {
                lbl(y, x) = kDisc;
            }
        }
    }
    return lbl;
}

namespace {

// Smoothly interpolated lattice noise in [-1, 1].
double value_noise(double x, double y, std::uint64_t seed) {
    const double fx = std::floor(x), fy = std::floor(y);
    const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
    auto lattice = [&](std::int64_t i, std::int64_t j) {
        CounterRng r({seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j)});
        return 2.0 * r.uniform() - 1.0;
    };
    auto fade = [](double t) { return t * t * (3.0 - 2.0 * t); };
    const double tx = fade(x - fx), ty = fade(y - fy);
    const double a = lattice(ix, iy), b = lattice(ix + 1, iy);
    const double c = lattice(ix, iy + 1), d = lattice(ix + 1, iy + 1);
    return (a + (b - a) * tx) + ((c + (d - c) * tx) - (a + (b - a) * tx)) * ty;
}

constexpr std::array<std::array<double, 3>, 3> kTissue = {{
    {0.40, 0.18, 0.08},  // background
    {0.70, 0.42, 0.22},  // disc rim
    {0.97, 0.88, 0.70},  // cup
}};

void box_blur(Tensor& img, int radius) {
    if (radius <= 0) return;
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    std::vector<double> tmp(h * w);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double* plane = img.data().data() + ch * h * w;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                double acc = 0.0;
                int n = 0;
                for (int d = -radius; d <= radius; ++d) {
                    const long sx = static_cast<long>(x) + d;
                    if (sx < 0 || sx >= static_cast<long>(w)) continue;
                    acc += plane[y * w + sx];
                    ++n;
                }
                tmp[y * w + x] = acc / n;
            }
        }
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                double acc = 0.0;
                int n = 0;
                for (int d = -radius; d <= radius; ++d) {
                    const long sy = static_cast<long>(y) + d;
                    if (sy < 0 || sy >= static_cast<long>(h)) continue;
                    acc += tmp[sy * w + x];
                    ++n;
                }
                plane[y * w + x] = acc / n;
            }
        }
    }
}

}  // namespace

Tensor render_base(const LabelMap& label, double texture_scale, std::uint64_t seed) {
    const std::size_t h = label.height, w = label.width;
    Tensor img(Shape{3, h, w});
    const double cell = static_cast<double>(w) / (4.0 * texture_scale);
    const std::uint64_t tex_seed = splitmix64(seed ^ 0x7e47ULL);
    const double cx = 0.5 * static_cast<double>(w), cy = 0.5 * static_cast<double>(h);
    const double rmax = std::hypot(cx, cy);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double px = static_cast<double>(x) / cell, py = static_cast<double>(y) / cell;
            const double tex = 0.65 * value_noise(px, py, tex_seed) + 0.35 * value_noise(2 * px, 2 * py, tex_seed + 1);
            const double vignette = 1.0 - 0.25 * std::hypot(x + 0.5 - cx, y + 0.5 - cy) / rmax;
            const auto cls = static_cast<std::size_t>(label(y, x));
            const double tex_amp = cls == kBackground ? 0.12 : 0.05;
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const double v = kTissue[cls][ch] * vignette + tex_amp * tex;
                img.at(ch, y, x) = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return img;
}

Tensor apply_style(const Tensor& base, const DomainSpec& spec, std::uint64_t seed) {
    spec.validate();
    Tensor img = base;
    const std::size_t hw = img.dim(1) * img.dim(2);
    if (spec.gamma != 1.0) {
        for (auto& v : img.data()) v = std::pow(v, spec.gamma);
    }
    for (std::size_t ch = 0; ch < 3; ++ch) {
        if (spec.channel_gain[ch] == 1.0) continue;
        for (std::size_t j = 0; j < hw; ++j) img[ch * hw + j] *= spec.channel_gain[ch];
    }
    box_blur(img, spec.blur_radius);
    if (spec.noise_sd > 0.0) {
        CounterRng rng({seed, 0x401cULL});
        for (auto& v : img.data()) v += spec.noise_sd * rng.normal();
    }
    for (auto& v : img.data()) v = std::clamp(v, 0.0, 1.0);
    return img;
}

SampleRecord generate_sample(const DomainSpec& spec, std::uint64_t seed, std::size_t size) {
    if (size < 32) throw std::invalid_argument("generate_sample: size must be at least 32");
    spec.validate();
    const Geometry g = draw_geometry(seed, size);
    LabelMap label = rasterize(g, size);
    Tensor img = apply_style(render_base(label, spec.texture_scale, seed), spec, seed);
    return {std::move(img), std::move(label), spec.domain_id, seed};
}

void to_json(nlohmann::json& j, const BenchmarkManifest& m) {
    nlohmann::json splits = nlohmann::json::array();
    for (const auto& [id, sp] : m.splits) splits.push_back({{"domain", id}, {"train", sp.train}, {"val", sp.val}});
    j = {{"domains", m.domains}, {"per_domain", m.per_domain}, {"size", m.size}, {"seed", m.seed}, {"splits", splits}};
}

void from_json(const nlohmann::json& j, BenchmarkManifest& m) {
    m.domains = j.at("domains").get<std::vector<DomainSpec>>();
    m.per_domain = j.at("per_domain").get<std::size_t>();
    m.size = j.at("size").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.splits.clear();
    for (const auto& s : j.at("splits")) {
        m.splits[s.at("domain").get<int>()] = {s.at("train").get<std::vector<std::size_t>>(),
                                              s.at("val").get<std::vector<std::size_t>>()};
    }
}

std::uint64_t sample_seed(std::uint64_t benchmark_seed, int domain_id, std::size_t index) {
    return CounterRng({benchmark_seed, static_cast<std::uint64_t>(domain_id), index, 0x5a3ULL})();
}

Split make_split(std::size_t per_domain, std::uint64_t seed, int domain_id) {
    std::vector<std::size_t> idx(per_domain);
    for (std::size_t i = 0; i < per_domain; ++i) idx[i] = i;
    CounterRng rng({seed, static_cast<std::uint64_t>(domain_id), 0x59117ULL});
    for (std::size_t i = per_domain; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
    const std::size_t n_train = per_domain * 9 / 10;
    Split s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    return s;
}

BenchmarkManifest generate_benchmark(const std::filesystem::path& root, std::span<const DomainSpec> specs,
                                     std::size_t per_domain, std::size_t size, std::uint64_t seed) {
    if (specs.size() < 2) throw std::invalid_argument("generate_benchmark: need at least 2 domains");
    if (per_domain < 10) throw std::invalid_argument("generate_benchmark: per_domain must be at least 10");
    if (size < 32) throw std::invalid_argument("generate_benchmark: size must be at least 32");
    for (std::size_t i = 0; i < specs.size(); ++i) {
        specs[i].validate();
        for (std::size_t k = 0; k < i; ++k) {
            if (specs[k].domain_id == specs[i].domain_id) {
                throw std::invalid_argument("generate_benchmark: duplicate domain id " +
                                            std::to_string(specs[i].domain_id));
            }
        }
    }
    BenchmarkManifest m;
    m.domains.assign(specs.begin(), specs.end());
    m.per_domain = per_domain;
    m.size = size;
    m.seed = seed;

    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    if (ec) throw std::runtime_error("cannot create dataset root " + root.string() + ": " + ec.message());
    for (const auto& spec : specs) {
        const auto dir = root / ("domain_" + std::to_string(spec.domain_id));
        std::filesystem::create_directories(dir, ec);
        if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
        for (std::size_t i = 0; i < per_domain; ++i) {
            const SampleRecord s = generate_sample(spec, sample_seed(seed, spec.domain_id, i), size);
            save_tensor(dir / ("img_" + std::to_string(i) + ".csxt"), s.image);
            save_tensor(dir / ("lbl_" + std::to_string(i) + ".csxt"), labels_to_tensor(s.label));
        }
        m.splits[spec.domain_id] = make_split(per_domain, seed, spec.domain_id);
    }
    std::ofstream out(root / "manifest.json");
    if (!out) throw std::runtime_error("cannot write " + (root / "manifest.json").string());
    out << nlohmann::json(m).dump(2) << '\n';
    return m;
}

std::vector<SampleRecord> Dataset::select(int domain, std::span<const std::size_t> indices) const {
    const auto& all = samples.at(domain);
    std::vector<SampleRecord> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(all.at(i));
    return out;
}

std::vector<SampleRecord> Dataset::held_out(int source) const {
    std::vector<SampleRecord> out;
    for (const auto& [id, list] : samples) {
        if (id == source) continue;
        out.insert(out.end(), list.begin(), list.end());
    }
    return out;
}

Dataset load_dataset(const std::filesystem::path& root) {
    const auto manifest_path = root / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("dataset manifest not found: " + manifest_path.string());
    Dataset ds;
    ds.root = root;
    ds.manifest = nlohmann::json::parse(in).get<BenchmarkManifest>();
    for (const auto& spec : ds.manifest.domains) {
        const auto dir = root / ("domain_" + std::to_string(spec.domain_id));
        auto& list = ds.samples[spec.domain_id];
        list.reserve(ds.manifest.per_domain);
        for (std::size_t i = 0; i < ds.manifest.per_domain; ++i) {
            SampleRecord s;
            s.image = load_tensor(dir / ("img_" + std::to_string(i) + ".csxt"));
            s.label = tensor_to_labels(load_tensor(dir / ("lbl_" + std::to_string(i) + ".csxt")));
            s.domain_id = spec.domain_id;
            s.seed = sample_seed(ds.manifest.seed, spec.domain_id, i);
            list.push_back(std::move(s));
        }
    }
    return ds;
}

double style_gap(const DomainSpec& a, const DomainSpec& b, std::size_t n, std::uint64_t seed, std::size_t size) {
    if (n < 10) throw std::invalid_argument("style_gap: need at least 10 samples");
    constexpr std::size_t kBins = 32;
    std::array<std::array<double, kBins>, 3> ha{}, hb{};
    auto accumulate = [](const Tensor& img, std::array<std::array<double, kBins>, 3>& hist) {
        const std::size_t hw = img.dim(1) * img.dim(2);
        for (std::size_t ch = 0; ch < 3; ++ch) {
            for (std::size_t j = 0; j < hw; ++j) {
                const auto bin = std::min(kBins - 1, static_cast<std::size_t>(img[ch * hw + j] * kBins));
                hist[ch][bin] += 1.0;
            }
        }
    };
    CounterRng rng({seed, 0x6a9ULL});
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t s = rng();
        accumulate(generate_sample(a, s, size).image, ha);
        accumulate(generate_sample(b, s, size).image, hb);
    }
    double gap = 0.0;
    for (std::size_t ch = 0; ch < 3; ++ch) {
        double ta = 0.0, tb = 0.0;
        for (std::size_t k = 0; k < kBins; ++k) {
            ta += ha[ch][k];
            tb += hb[ch][k];
        }
        for (std::size_t k = 0; k < kBins; ++k) gap += std::abs(ha[ch][k] / ta - hb[ch][k] / tb);
    }
    return gap / 3.0;
}

}  // namespace constyx::synth
