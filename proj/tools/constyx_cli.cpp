// constyx command-line driver: dataset generation, training, evaluation and
// ablation sweeps.
//
// Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime failure.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <spdlog/spdlog.h>

#include "constyx/harness.hpp"
#include "constyx/synth.hpp"

namespace fs = std::filesystem;
using namespace constyx;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Content-style feature augmentation for single-domain generalization"};
    app.require_subcommand(1);
    app.fallthrough();
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Per-epoch progress logging");

    // gen
    auto* gen = app.add_subcommand("gen", "Generate the synthetic multi-domain benchmark");
    std::string gen_out;
    std::size_t gen_domains = 5, gen_per_domain = 80, gen_size = 64;
    std::uint64_t gen_seed = 7;
    gen->add_option("--out", gen_out, "Output dataset directory")->required();
    gen->add_option("--domains", gen_domains, "Number of built-in domains to use (2-5)")->capture_default_str();
    gen->add_option("--per-domain", gen_per_domain, "Samples per domain (>= 10)")->capture_default_str();
    gen->add_option("--size", gen_size, "Image side length (>= 32)")->capture_default_str();
    gen->add_option("--seed", gen_seed, "Benchmark seed")->capture_default_str();

    // train
    auto* train = app.add_subcommand("train", "Train one model on a source domain");
    std::string train_data, train_out, train_config, train_method;
    int train_source = 0;
    std::uint64_t train_seed = 0;
    bool train_plot = false, train_resume = false, train_aug_only = false;
    train->add_option("--data", train_data, "Dataset directory")->required();
    train->add_option("--out", train_out, "Run output directory")->required();
    auto* source_opt = train->add_option("--source", train_source, "Source domain id");
    auto* method_opt = train->add_option("--method", train_method, "baseline | dfa | constyx");
    train->add_option("--config", train_config, "JSON or key=value config overriding defaults");
    auto* seed_opt = train->add_option("--seed", train_seed, "Run seed");
    train->add_flag("--plot", train_plot, "Write per-epoch curves as SVG");
    train->add_flag("--resume", train_resume, "Continue from <out>/resume when present");
    train->add_flag("--aug-only", train_aug_only, "Train on the augmented branch loss only");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on every held-out domain");
    std::string eval_ckpt, eval_data, eval_out;
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
    eval->add_option("--data", eval_data, "Dataset directory")->required();
    eval->add_option("--out", eval_out, "Metrics JSON path (stdout when omitted)");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "Run a config x seed ablation matrix");
    std::string ab_data, ab_matrix, ab_out, ab_config;
    std::vector<std::uint64_t> ab_seeds;
    std::size_t ab_jobs = 1;
    ablate->add_option("--data", ab_data, "Dataset directory")->required();
    ablate->add_option("--matrix", ab_matrix, "JSON array of {name, overrides...} cells")->required();
    ablate->add_option("--seeds", ab_seeds, "Comma-separated seeds")->required()->delimiter(',');
    ablate->add_option("--out", ab_out, "Report directory")->required();
    ablate->add_option("--config", ab_config, "Base config shared by every cell");
    ablate->add_option("--jobs", ab_jobs, "Cells to run concurrently")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return kExitUsage;
    }
    spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
    harness::tune_allocator();

    try {
        if (*gen) {
            const auto all = synth::default_domains();
            if (gen_domains < 2 || gen_domains > all.size()) {
                throw harness::ConfigError("--domains must be between 2 and " + std::to_string(all.size()));
            }
            std::vector<synth::DomainSpec> specs(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(gen_domains));
            try {
                synth::generate_benchmark(gen_out, specs, gen_per_domain, gen_size, gen_seed);
            } catch (const std::invalid_argument& e) {
                throw harness::ConfigError(e.what());
            }
            spdlog::info("wrote {} domains x {} samples to {}", gen_domains, gen_per_domain, gen_out);
        } else if (*train) {
            harness::RunConfig cfg;
            if (!train_config.empty()) harness::apply_overrides(cfg, harness::read_config_file(train_config));
            if (*method_opt) cfg.method = harness::parse_method(train_method);
            if (*source_opt) cfg.source_domain = train_source;
            if (*seed_opt) cfg.seed = train_seed;
            cfg.data = train_data;
            cfg.out = train_out;
            cfg.plot = cfg.plot || train_plot;
            cfg.resume = train_resume;
            cfg.aug_only = cfg.aug_only || train_aug_only;
            cfg.validate();
            const auto result = harness::run_training(cfg);
            std::cout << nlohmann::json(result.log.final).dump(2) << '\n';
        } else if (*eval) {
            const auto data = synth::load_dataset(eval_data);
            const auto result = harness::evaluate_checkpoint(eval_ckpt, data);
            const std::string text = nlohmann::json(result).dump(2) + "\n";
            if (eval_out.empty()) {
                std::cout << text;
            } else {
                write_text(eval_out, text);
            }
        } else if (*ablate) {
            harness::RunConfig base;
            if (!ab_config.empty()) harness::apply_overrides(base, harness::read_config_file(ab_config));
            std::ifstream in(ab_matrix);
            if (!in) throw harness::ConfigError("cannot read matrix file " + ab_matrix);
            nlohmann::json matrix;
            try {
                matrix = nlohmann::json::parse(in);
            } catch (const nlohmann::json::parse_error& e) {
                throw harness::ConfigError(std::string("malformed matrix: ") + e.what());
            }
            const auto cells = harness::parse_matrix(matrix);
            base.data = ab_data;
            base.out = ab_out;
            const auto data = synth::load_dataset(ab_data);
            const auto report = harness::run_ablation(base, cells, ab_seeds, data, ab_jobs);
            const std::string table = harness::format_table(report);
            write_text(fs::path(ab_out) / "report.json", harness::to_json(report).dump(2) + "\n");
            write_text(fs::path(ab_out) / "report.txt", table);
            std::cout << table;
        }
    } catch (const harness::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return 0;
}
