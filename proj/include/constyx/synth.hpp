#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "constyx/tensor.hpp"

// Synthetic multi-domain "fundus" benchmark: nested disc/cup ellipses over a
// textured background, restyled per domain.
namespace constyx::synth {

inline constexpr int kBackground = 0;
inline constexpr int kDisc = 1;
inline constexpr int kCup = 2;
inline constexpr std::size_t kNumClasses = 3;

struct DomainSpec {
    int domain_id = 0;
    double gamma = 1.0;
    std::array<double, 3> channel_gain{1.0, 1.0, 1.0};
    double noise_sd = 0.0;
    int blur_radius = 0;  // 0, 1 or 2
    double texture_scale = 1.0;

    void validate() const;
    bool operator==(const DomainSpec&) const = default;
};

void to_json(nlohmann::json& j, const DomainSpec& s);
void from_json(const nlohmann::json& j, DomainSpec& s);

// The five built-in domains. Domain 0 is the neutral style.
std::vector<DomainSpec> default_domains();

struct SampleRecord {
    Tensor image;     // [3,S,S], values in [0,1]
    LabelMap label;   // [S,S], values in {0,1,2}
    int domain_id = 0;
    std::uint64_t seed = 0;
};

struct Geometry {
    double cx = 0, cy = 0;          // disc center (pixels)
    double ax = 0, ay = 0;          // disc semi-axes
    double angle = 0;               // radians
    double cup_scale = 0.5;         // cup semi-axes = cup_scale * disc semi-axes
};

// Disc/cup geometry for a sample seed, retried until the disc covers >= 2% and
// the cup >= 0.5% of the image.
Geometry draw_geometry(std::uint64_t seed, std::size_t size);
LabelMap rasterize(const Geometry& g, std::size_t size);
// Un-styled render: anatomy intensities plus value-noise background texture.
Tensor render_base(const LabelMap& label, double texture_scale, std::uint64_t seed);
// gamma -> channel gain -> box blur -> additive Gaussian noise -> clamp.
Tensor apply_style(const Tensor& base, const DomainSpec& spec, std::uint64_t seed);

SampleRecord generate_sample(const DomainSpec& spec, std::uint64_t seed, std::size_t size);

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

struct BenchmarkManifest {
    std::vector<DomainSpec> domains;
    std::size_t per_domain = 0;
    std::size_t size = 0;
    std::uint64_t seed = 0;
    std::map<int, Split> splits;
};

void to_json(nlohmann::json& j, const BenchmarkManifest& m);
void from_json(const nlohmann::json& j, BenchmarkManifest& m);

std::uint64_t sample_seed(std::uint64_t benchmark_seed, int domain_id, std::size_t index);
// 9:1 train/val split of [0, per_domain), shuffled by seed.
Split make_split(std::size_t per_domain, std::uint64_t seed, int domain_id);

// Writes root/manifest.json and root/domain_<id>/{img,lbl}_<idx>.csxt.
BenchmarkManifest generate_benchmark(const std::filesystem::path& root, std::span<const DomainSpec> specs,
                                     std::size_t per_domain, std::size_t size, std::uint64_t seed);

struct Dataset {
    std::filesystem::path root;
    BenchmarkManifest manifest;
    // samples[domain_id][idx]
    std::map<int, std::vector<SampleRecord>> samples;

    bool has_domain(int id) const { return samples.count(id) != 0; }
    std::vector<SampleRecord> select(int domain, std::span<const std::size_t> indices) const;
    // Every sample of every domain except `source`, ordered by (domain, idx).
    std::vector<SampleRecord> held_out(int source) const;
};

Dataset load_dataset(const std::filesystem::path& root);

// Mean over channels of the L1 distance between 32-bin intensity histograms,
// pooled over n paired samples (same geometry seeds under both styles).
double style_gap(const DomainSpec& a, const DomainSpec& b, std::size_t n, std::uint64_t seed,
                 std::size_t size = 64);

}  // namespace constyx::synth
