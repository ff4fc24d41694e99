#include "constyx/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <spdlog/spdlog.h>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "constyx/afu.hpp"
#include "constyx/parallel.hpp"

namespace constyx::harness {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Method m) {
    switch (m) {
        case Method::Baseline: return "baseline";
        case Method::Dfa: return "dfa";
        case Method::Constyx: return "constyx";
    }
    return "?";
}

std::string to_string(StatsOrder o) { return o == StatsOrder::BeforeAugment ? "before_augment" : "after_augment"; }

Method parse_method(const std::string& s) {
    if (s == "baseline") return Method::Baseline;
    if (s == "dfa") return Method::Dfa;
    if (s == "constyx") return Method::Constyx;
    throw ConfigError("unknown method '" + s + "' (expected baseline, dfa or constyx)");
}

StatsOrder parse_stats_order(const std::string& s) {
    if (s == "before_augment") return StatsOrder::BeforeAugment;
    if (s == "after_augment") return StatsOrder::AfterAugment;
    throw ConfigError("unknown stats_update_order '" + s + "'");
}

void RunConfig::validate() const {
    try {
        model.validate();
        if (method != Method::Baseline) aug.validate(model.feature_channels);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr0 >= 0.0)) throw ConfigError("lr0 must be nonnegative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(tau >= -1.0 && tau <= 1.0)) throw ConfigError("tau must lie in [-1, 1]");
    if (model.in_channels != 3) throw ConfigError("in_channels must be 3 for the synthetic benchmark");
    if (model.num_classes != synth::kNumClasses) throw ConfigError("num_classes must be 3 for the synthetic benchmark");
}

json to_json(const RunConfig& cfg) {
    return {{"method", to_string(cfg.method)},
            {"lambda1", cfg.aug.lambda1},
            {"lambda2", cfg.aug.lambda2},
            {"k", cfg.aug.k},
            {"mask_mode", dfa::to_string(cfg.aug.mask_mode)},
            {"cross_dist", dfa::to_string(cfg.aug.cross_dist)},
            {"guidance", dfa::to_string(cfg.aug.guidance)},
            {"in_channels", cfg.model.in_channels},
            {"feature_channels", cfg.model.feature_channels},
            {"num_classes", cfg.model.num_classes},
            {"encoder_depth", cfg.model.encoder_depth},
            {"epochs", cfg.epochs},
            {"batch_size", cfg.batch_size},
            {"lr0", cfg.lr0},
            {"momentum", cfg.momentum},
            {"tau", cfg.tau},
            {"source_domain", cfg.source_domain},
            {"data", cfg.data.string()},
            {"out", cfg.out.string()},
            {"seed", cfg.seed},
            {"stats_update_order", to_string(cfg.stats_order)},
            {"aug_only", cfg.aug_only},
            {"force_unit_weights", cfg.force_unit_weights},
            {"plot", cfg.plot}};
}

namespace {

template <typename T>
T get_as(const json& v, const std::string& key) {
    try {
        return v.get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
    }
}

std::size_t get_count(const json& v, const std::string& key) {
    if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw ConfigError("config key '" + key + "' must be a nonnegative integer, got " + v.dump());
    }
    return v.get<std::size_t>();
}

}  // namespace

void apply_overrides(RunConfig& cfg, const json& overrides) {
    if (!overrides.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, v] : overrides.items()) {
        try {
            if (key == "method") cfg.method = parse_method(get_as<std::string>(v, key));
            else if (key == "lambda1") cfg.aug.lambda1 = get_as<double>(v, key);
            else if (key == "lambda2") cfg.aug.lambda2 = get_as<double>(v, key);
            else if (key == "k") cfg.aug.k = get_count(v, key);
            else if (key == "mask_mode") cfg.aug.mask_mode = dfa::parse_mask_mode(get_as<std::string>(v, key));
            else if (key == "cross_dist") cfg.aug.cross_dist = dfa::parse_cross_dist(get_as<std::string>(v, key));
            else if (key == "guidance") cfg.aug.guidance = dfa::parse_guidance(get_as<std::string>(v, key));
            else if (key == "in_channels") cfg.model.in_channels = get_count(v, key);
            else if (key == "feature_channels") cfg.model.feature_channels = get_count(v, key);
            else if (key == "num_classes") cfg.model.num_classes = get_count(v, key);
            else if (key == "encoder_depth") cfg.model.encoder_depth = get_count(v, key);
            else if (key == "epochs") cfg.epochs = get_count(v, key);
            else if (key == "batch_size") cfg.batch_size = get_count(v, key);
            else if (key == "lr0") cfg.lr0 = get_as<double>(v, key);
            else if (key == "momentum") cfg.momentum = get_as<double>(v, key);
            else if (key == "tau") cfg.tau = get_as<double>(v, key);
            else if (key == "source_domain") cfg.source_domain = get_as<int>(v, key);
            else if (key == "data") cfg.data = get_as<std::string>(v, key);
            else if (key == "out") cfg.out = get_as<std::string>(v, key);
            else if (key == "seed") cfg.seed = get_as<std::uint64_t>(v, key);
            else if (key == "stats_update_order") cfg.stats_order = parse_stats_order(get_as<std::string>(v, key));
            else if (key == "aug_only") cfg.aug_only = get_as<bool>(v, key);
            else if (key == "force_unit_weights") cfg.force_unit_weights = get_as<bool>(v, key);
            else if (key == "plot") cfg.plot = get_as<bool>(v, key);
            else if (key == "name") continue;
            else throw ConfigError("unknown config key '" + key + "'");
        } catch (const ConfigError&) {
            throw;
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
}

json parse_config_text(const std::string& text) {
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return json::object();
    if (text[first] == '{') {
        try {
            return json::parse(text);
        } catch (const json::parse_error& e) {
            throw ConfigError(std::string("malformed JSON config: ") + e.what());
        }
    }
    json out = json::object();
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        json parsed = json::parse(value, nullptr, false);
        out[key] = parsed.is_discarded() ? json(value) : parsed;
    }
    return out;
}

json read_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::vector<int> eval_classes() { return {synth::kDisc, synth::kCup}; }

TrainState make_train_state(const RunConfig& cfg) {
    model::ModelConfig mc = cfg.model;
    mc.seed = cfg.seed;
    TrainState st;
    st.model = model::SegModel(mc);
    st.optimizer = model::Sgd(st.model, cfg.momentum);
    st.bank = stats::StatsBank(mc.num_classes, mc.feature_channels);
    return st;
}

StepLosses train_step(TrainState& state, std::span<const synth::SampleRecord> batch, const RunConfig& cfg, double lr,
                      const PurityProbe& probe) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const auto& mc = state.model.config();
    const std::size_t n_img = batch.size();
    const bool augment = cfg.method != Method::Baseline;

    struct Slot {
        Tape tape;
        std::vector<Var> params;
        Var features, loss_orig, total;
        Tensor grad;
        double loss_aug = 0.0;
        double mean_weight = 0.0;
        std::vector<Tensor> grads;
    };
    std::vector<Slot> slots(n_img);

    // (1)-(3a): forward, original loss, feature gradient from the same graph.
    const std::uint64_t hash_before = probe ? state.model.parameter_hash() : 0;
    parallel_for(n_img, [&](std::size_t i) {
        Slot& s = slots[i];
        const auto& label = batch[i].label;
        s.params = model::bind_parameters(s.tape, state.model, true);
        s.features = model::encode(s.tape, s.params, s.tape.constant(batch[i].image), mc);
        Var probs = model::decode(s.tape, s.params, s.features, mc);
        s.loss_orig = metrics::seg_loss(s.tape, probs, label);
        s.total = s.loss_orig;
        if (augment) {
            Var guide = cfg.aug.guidance == dfa::GuidanceLoss::CeDice ? s.loss_orig
                                                                      : metrics::ce_loss(s.tape, probs, label);
            const Var targets[] = {s.features};
            s.grad = s.tape.backward(guide, targets).take(s.features);
        }
    });
    if (probe) probe(hash_before, state.model.parameter_hash());

    if (augment) {
        if (cfg.stats_order == StatsOrder::BeforeAugment) {
            for (std::size_t i = 0; i < n_img; ++i) {
                stats::ingest_feature_map_inplace(state.bank, slots[i].tape.value(slots[i].features), batch[i].label);
            }
        }
        const stats::IntraSampler sampler(state.bank);
        parallel_for(n_img, [&](std::size_t i) {
            Slot& s = slots[i];
            const auto& label = batch[i].label;
            const dfa::StreamKey key{cfg.seed, static_cast<std::uint64_t>(state.step * cfg.batch_size + i)};
            Tensor offsets = dfa::augmentation_offsets(label, sampler, s.grad, cfg.aug, key);
            Var zhat = add(s.tape, s.features, s.tape.constant(std::move(offsets)));
            Var phat = model::decode(s.tape, s.params, zhat, mc);
            Var laug;
            if (cfg.method == Method::Dfa) {
                laug = metrics::seg_loss(s.tape, phat, label);
            } else {
                Tensor w = Tensor::ones(Shape{label.height, label.width});
                if (!cfg.force_unit_weights) {
                    const Tensor sim = afu::cosine_similarity_map(s.tape.value(s.features), s.tape.value(zhat));
                    const Tensor conf = afu::confidence_map(s.tape.value(phat));
                    w = afu::weight_map(sim, conf, cfg.tau);
                }
                s.mean_weight = std::accumulate(w.data().begin(), w.data().end(), 0.0) / static_cast<double>(w.numel());
                laug = afu::weighted_seg_loss(s.tape, phat, label, w);
            }
            s.loss_aug = s.tape.value(laug).item();
            s.total = cfg.aug_only ? laug : add(s.tape, s.loss_orig, laug);
        });
        if (cfg.stats_order == StatsOrder::AfterAugment) {
            for (std::size_t i = 0; i < n_img; ++i) {
                stats::ingest_feature_map_inplace(state.bank, slots[i].tape.value(slots[i].features), batch[i].label);
            }
        }
    }

    StepLosses out;
    for (std::size_t i = 0; i < n_img; ++i) {
        const double t = slots[i].tape.value(slots[i].total).item();
        if (!std::isfinite(t)) {
            throw TrainingError("non-finite loss at step " + std::to_string(state.step) + ", batch slot " +
                                std::to_string(i) + ", sample seed " + std::to_string(batch[i].seed) +
                                ", run seed " + std::to_string(cfg.seed));
        }
    }

    parallel_for(n_img, [&](std::size_t i) {
        Slot& s = slots[i];
        Gradients g = s.tape.backward(s.total, s.params);
        s.grads.reserve(s.params.size());
        for (auto p : s.params) s.grads.push_back(g.take(p));
    });

    std::vector<Tensor> grads = std::move(slots[0].grads);
    for (std::size_t i = 1; i < n_img; ++i) {
        for (std::size_t p = 0; p < grads.size(); ++p) {
            auto& dst = grads[p];
            const auto& src = slots[i].grads[p];
            for (std::size_t e = 0; e < dst.numel(); ++e) dst[e] += src[e];
        }
    }
    const double inv = 1.0 / static_cast<double>(n_img);
    for (auto& g : grads) {
        for (auto& v : g.data()) v *= inv;
    }
    for (std::size_t i = 0; i < n_img; ++i) {
        out.total += slots[i].tape.value(slots[i].total).item();
        out.original += slots[i].tape.value(slots[i].loss_orig).item();
        out.augmented += slots[i].loss_aug;
        out.mean_weight += slots[i].mean_weight;
    }
    out.total *= inv;
    out.original *= inv;
    out.augmented *= inv;
    out.mean_weight *= inv;

    state.optimizer.step(state.model, grads, lr);
    ++state.step;
    return out;
}

json to_json(const RunLog& log) {
    json epochs = json::array();
    for (const auto& e : log.epochs) {
        epochs.push_back({{"epoch", e.epoch},
                          {"train_loss", e.train_loss},
                          {"val_dsc", e.val_dsc},
                          {"lr", e.lr},
                          {"original_loss", e.original_loss},
                          {"augmented_loss", e.augmented_loss},
                          {"mean_weight", e.mean_weight}});
    }
    return {{"config", log.config},
            {"epochs", epochs},
            {"step_losses", log.step_losses},
            {"best_epoch", log.best_epoch},
            {"best_val_dsc", log.best_val_dsc},
            {"final", log.final},
            {"wall_clock_s", log.wall_clock_s},
            {"input_hash", log.input_hash},
            {"deviations", log.deviations}};
}

namespace {

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
}

std::string input_hash(const RunConfig& cfg, const synth::Dataset& data) {
    std::uint64_t h = 1469598103934665603ULL;
    json c = to_json(cfg);
    c.erase("out");
    c.erase("data");
    const std::string cs = c.dump() + json(data.manifest).dump();
    fnv_bytes(h, cs.data(), cs.size());
    for (const auto& [id, list] : data.samples) {
        for (const auto& s : list) {
            fnv_bytes(h, s.image.data().data(), s.image.numel() * sizeof(double));
            fnv_bytes(h, s.label.values.data(), s.label.values.size() * sizeof(int));
        }
    }
    return hex64(h);
}

std::vector<std::string> deviations(const RunConfig& cfg, const synth::Dataset& data) {
    std::vector<std::string> d;
    d.push_back("backbone: " + std::to_string(cfg.model.encoder_depth) + "-block stride-1 conv encoder, " +
                std::to_string(cfg.model.feature_channels) + " feature channels, 1x1 head (reference: U-Net/ResNet-34)");
    if (cfg.epochs != 100) d.push_back("epochs: " + std::to_string(cfg.epochs) + " (reference: 100)");
    if (data.manifest.size != 512) {
        d.push_back("image size: " + std::to_string(data.manifest.size) + " (reference: 512)");
    }
    if (cfg.batch_size != 8) d.push_back("batch_size: " + std::to_string(cfg.batch_size) + " (reference: 8)");
    d.push_back("data: synthetic nested-ellipse domains (reference: five fundus datasets)");
    return d;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    CounterRng rng({seed, static_cast<std::uint64_t>(epoch), 0x5f1eULL});
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
    return idx;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

json epochs_json(const RunLog& log) { return to_json(log).at("epochs"); }

// Resumable state after a completed epoch.
void save_resume(const fs::path& dir, const TrainState& st, const model::SegModel& best, const RunLog& log,
                 std::size_t epochs_done) {
    const fs::path tmp = dir.string() + ".tmp";
    fs::remove_all(tmp);
    model::save_checkpoint(tmp / "model", st.model, json::object());
    model::save_checkpoint(tmp / "best", best, json::object());
    fs::create_directories(tmp / "velocity");
    for (std::size_t i = 0; i < st.optimizer.velocity().size(); ++i) {
        save_tensor(tmp / "velocity" / (std::to_string(i) + ".csxt"), st.optimizer.velocity()[i]);
    }
    st.bank.save(tmp / "bank");
    write_json(tmp / "state.json", {{"epochs_done", epochs_done},
                                    {"step", st.step},
                                    {"best_epoch", log.best_epoch},
                                    {"best_val_dsc", log.best_val_dsc},
                                    {"epochs", epochs_json(log)},
                                    {"step_losses", log.step_losses}});
    fs::remove_all(dir);
    fs::rename(tmp, dir);
}

std::size_t load_resume(const fs::path& dir, const RunConfig& cfg, TrainState& st, model::SegModel& best,
                        RunLog& log) {
    std::ifstream in(dir / "state.json");
    if (!in) return 0;
    const json state = json::parse(in);
    st.model = model::load_checkpoint(dir / "model");
    best = model::load_checkpoint(dir / "best");
    st.optimizer = model::Sgd(st.model, cfg.momentum);
    for (std::size_t i = 0; i < st.optimizer.velocity().size(); ++i) {
        st.optimizer.velocity()[i] = load_tensor(dir / "velocity" / (std::to_string(i) + ".csxt"));
    }
    st.bank = stats::StatsBank::load(dir / "bank");
    st.step = state.at("step").get<std::size_t>();
    log.best_epoch = state.at("best_epoch").get<std::size_t>();
    log.best_val_dsc = state.at("best_val_dsc").get<double>();
    log.step_losses = state.at("step_losses").get<std::vector<double>>();
    for (const auto& e : state.at("epochs")) {
        EpochRecord r;
        r.epoch = e.at("epoch").get<std::size_t>();
        r.train_loss = e.at("train_loss").get<double>();
        r.val_dsc = e.at("val_dsc").get<double>();
        r.lr = e.at("lr").get<double>();
        r.original_loss = e.at("original_loss").get<double>();
        r.augmented_loss = e.at("augmented_loss").get<double>();
        r.mean_weight = e.at("mean_weight").get<double>();
        log.epochs.push_back(r);
    }
    return state.at("epochs_done").get<std::size_t>();
}

}  // namespace

RunResult run_training(const RunConfig& cfg) {
    if (cfg.data.empty()) throw ConfigError("no dataset path given");
    return run_training(cfg, synth::load_dataset(cfg.data));
}

RunResult run_training(const RunConfig& cfg, const synth::Dataset& data) {
    cfg.validate();
    if (!data.has_domain(cfg.source_domain) || !data.manifest.splits.count(cfg.source_domain)) {
        throw ConfigError("source domain " + std::to_string(cfg.source_domain) + " not present in dataset");
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto& split = data.manifest.splits.at(cfg.source_domain);
    const auto train = data.select(cfg.source_domain, split.train);
    const auto val = data.select(cfg.source_domain, split.val);
    const auto held = data.held_out(cfg.source_domain);
    if (train.empty()) throw ConfigError("source domain has an empty training split");
    const auto classes = eval_classes();

    RunLog log;
    log.config = to_json(cfg);
    log.input_hash = input_hash(cfg, data);
    log.deviations = deviations(cfg, data);

    TrainState st = make_train_state(cfg);
    model::SegModel best = st.model;
    const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = per_epoch * cfg.epochs;

    if (!cfg.out.empty()) fs::create_directories(cfg.out);
    const fs::path resume_dir = cfg.out.empty() ? fs::path() : cfg.out / "resume";
    std::size_t start_epoch = 0;
    if (cfg.resume && !resume_dir.empty() && fs::exists(resume_dir / "state.json")) {
        start_epoch = load_resume(resume_dir, cfg, st, best, log);
        spdlog::info("resuming {} from epoch {}", to_string(cfg.method), start_epoch);
    }

    for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto order = epoch_order(train.size(), cfg.seed, epoch);
        double loss_sum = 0.0, orig_sum = 0.0, aug_sum = 0.0, weight_sum = 0.0;
        double lr = 0.0;
        std::vector<synth::SampleRecord> batch;
        for (std::size_t b = 0; b < per_epoch; ++b) {
            batch.clear();
            for (std::size_t i = b * cfg.batch_size; i < std::min(train.size(), (b + 1) * cfg.batch_size); ++i) {
                batch.push_back(train[order[i]]);
            }
            lr = model::poly_lr(cfg.lr0, st.step, total_steps);
            StepLosses losses;
            try {
                losses = train_step(st, batch, cfg, lr);
            } catch (const TrainingError& e) {
                if (!cfg.out.empty()) {
                    json seeds = json::array();
                    for (const auto& s : batch) seeds.push_back(s.seed);
                    write_json(cfg.out / "nan_dump.json", {{"error", e.what()},
                                                            {"epoch", epoch},
                                                            {"batch_index", b},
                                                            {"step", st.step},
                                                            {"seed", cfg.seed},
                                                            {"sample_seeds", seeds}});
                }
                throw;
            }
            log.step_losses.push_back(losses.total);
            loss_sum += losses.total;
            orig_sum += losses.original;
            aug_sum += losses.augmented;
            weight_sum += losses.mean_weight;
        }
        const double val_dsc = val.empty() ? 0.0 : metrics::evaluate(st.model, val, classes).average;
        const double steps = static_cast<double>(per_epoch);
        log.epochs.push_back({.epoch = epoch + 1,
                              .train_loss = loss_sum / steps,
                              .val_dsc = val_dsc,
                              .original_loss = orig_sum / steps,
                              .augmented_loss = aug_sum / steps,
                              .mean_weight = weight_sum / steps,
                              .lr = lr});
        if (log.best_epoch == 0 || val_dsc > log.best_val_dsc) {
            log.best_val_dsc = val_dsc;
            log.best_epoch = epoch + 1;
            best = st.model;
        }
        spdlog::debug("{} seed {} epoch {}: loss {:.5f} (orig {:.5f}, aug {:.5f}, W {:.3f}) val {:.4f}",
                      to_string(cfg.method), cfg.seed, epoch + 1, log.epochs.back().train_loss,
                      log.epochs.back().original_loss, log.epochs.back().augmented_loss,
                      log.epochs.back().mean_weight, val_dsc);
        if (!resume_dir.empty()) save_resume(resume_dir, st, best, log, epoch + 1);
        if (cfg.stop_after != 0 && epoch + 1 - start_epoch >= cfg.stop_after) break;
    }
    if (log.epochs.empty()) {
        log.best_val_dsc = val.empty() ? 0.0 : metrics::evaluate(best, val, classes).average;
    }

    log.final = metrics::evaluate(best, held, classes);
    log.final.method = to_string(cfg.method);
    log.final.source_domain = cfg.source_domain;
    log.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!cfg.out.empty()) {
        model::save_checkpoint(cfg.out / "checkpoint", best,
                               {{"epoch", log.best_epoch},
                                {"seed", cfg.seed},
                                {"method", to_string(cfg.method)},
                                {"source_domain", cfg.source_domain},
                                {"run_config", log.config}});
        write_json(cfg.out / "run_log.json", to_json(log));
        write_json(cfg.out / "metrics.json", log.final);
        if (cfg.plot) {
            std::ofstream(cfg.out / "curves.svg") << render_curves_svg(log);
        }
    }
    spdlog::info("{} seed {}: best val {:.4f} (epoch {}), cross-domain {:.4f}, {:.1f}s", to_string(cfg.method),
                 cfg.seed, log.best_val_dsc, log.best_epoch, log.final.average, log.wall_clock_s);
    return {std::move(best), std::move(log)};
}

metrics::EvalResult evaluate_checkpoint(const fs::path& checkpoint, const synth::Dataset& data) {
    json meta;
    const model::SegModel m = model::load_checkpoint(checkpoint, &meta);
    const int source = meta.value("source_domain", -1);
    auto samples = data.held_out(source);
    auto result = metrics::evaluate(m, samples, eval_classes());
    result.method = meta.value("method", std::string("unknown"));
    result.source_domain = source;
    return result;
}

json to_json(const AblationReport& r) {
    json cells = json::array();
    for (const auto& c : r.cells) {
        cells.push_back({{"name", c.name},
                         {"seeds", c.seeds},
                         {"averages", c.averages},
                         {"val_dsc", c.val_dsc},
                         {"mean", c.mean},
                         {"sd", c.sd},
                         {"errors", c.errors}});
    }
    return {{"cells", cells}};
}

std::string format_table(const AblationReport& r) {
    std::size_t width = 4;
    for (const auto& c : r.cells) width = std::max(width, c.name.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(width)) << "cell" << "  " << std::right << std::setw(8) << "mean"
       << "  " << std::setw(8) << "sd" << "  " << std::setw(5) << "runs" << "  per-seed\n";
    os << std::string(width + 40, '-') << '\n';
    os << std::fixed << std::setprecision(2);
    for (const auto& c : r.cells) {
        os << std::left << std::setw(static_cast<int>(width)) << c.name << "  " << std::right << std::setw(8)
           << 100.0 * c.mean << "  " << std::setw(8) << 100.0 * c.sd << "  " << std::setw(5) << c.averages.size()
           << "  ";
        for (std::size_t i = 0; i < c.averages.size(); ++i) os << (i ? " " : "") << 100.0 * c.averages[i];
        if (!c.errors.empty()) os << "  [" << c.errors.size() << " failed]";
        os << '\n';
    }
    return os.str();
}

std::vector<AblationCell> parse_matrix(const json& j) {
    const json& list = j.is_object() && j.contains("cells") ? j.at("cells") : j;
    if (!list.is_array() || list.empty()) throw ConfigError("ablation matrix must be a nonempty array of cells");
    std::vector<AblationCell> cells;
    for (std::size_t i = 0; i < list.size(); ++i) {
        const auto& c = list[i];
        if (!c.is_object()) throw ConfigError("ablation cell " + std::to_string(i) + " is not an object");
        AblationCell cell;
        cell.name = c.value("name", "cell" + std::to_string(i));
        cell.overrides = c;
        cell.overrides.erase("name");
        RunConfig probe;
        apply_overrides(probe, cell.overrides);
        cells.push_back(std::move(cell));
    }
    return cells;
}

AblationReport run_ablation(const RunConfig& base, std::span<const AblationCell> cells,
                            std::span<const std::uint64_t> seeds, const synth::Dataset& data, std::size_t jobs) {
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
    struct Task {
        std::size_t cell, seed;
    };
    std::vector<Task> tasks;
    for (std::size_t c = 0; c < cells.size(); ++c) {
        for (std::size_t s = 0; s < seeds.size(); ++s) tasks.push_back({c, s});
    }
    std::vector<std::optional<RunLog>> logs(tasks.size());
    std::vector<std::string> errors(tasks.size());
    auto run_task = [&](std::size_t t) {
        const auto& task = tasks[t];
        try {
            RunConfig cfg = base;
            apply_overrides(cfg, cells[task.cell].overrides);
            cfg.seed = seeds[task.seed];
            if (!base.out.empty()) {
                cfg.out = base.out / cells[task.cell].name / ("seed_" + std::to_string(cfg.seed));
            }
            logs[t] = run_training(cfg, data).log;
        } catch (const std::exception& e) {
            errors[t] = e.what();
            spdlog::error("cell {} seed {} failed: {}", cells[task.cell].name, seeds[task.seed], e.what());
        }
    };
    if (jobs <= 1) {
        for (std::size_t t = 0; t < tasks.size(); ++t) run_task(t);
    } else {
        std::vector<std::thread> pool;
        std::mutex mu;
        std::size_t next = 0;
        for (std::size_t w = 0; w < std::min(jobs, tasks.size()); ++w) {
            pool.emplace_back([&] {
                for (;;) {
                    std::size_t t;
                    {
                        std::lock_guard lock(mu);
                        if (next >= tasks.size()) return;
                        t = next++;
                    }
                    run_task(t);
                }
            });
        }
        for (auto& th : pool) th.join();
    }

    AblationReport report;
    for (std::size_t c = 0; c < cells.size(); ++c) {
        CellSummary s;
        s.name = cells[c].name;
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            if (tasks[t].cell != c) continue;
            if (logs[t]) {
                s.seeds.push_back(seeds[tasks[t].seed]);
                s.averages.push_back(logs[t]->final.average);
                s.val_dsc.push_back(logs[t]->best_val_dsc);
            } else {
                s.errors.push_back("seed " + std::to_string(seeds[tasks[t].seed]) + ": " + errors[t]);
            }
        }
        if (!s.averages.empty()) {
            s.mean = std::accumulate(s.averages.begin(), s.averages.end(), 0.0) / static_cast<double>(s.averages.size());
            if (s.averages.size() > 1) {
                double ss = 0.0;
                for (double a : s.averages) ss += (a - s.mean) * (a - s.mean);
                s.sd = std::sqrt(ss / static_cast<double>(s.averages.size() - 1));
            }
        }
        report.cells.push_back(std::move(s));
    }
    return report;
}

std::string render_curves_svg(const RunLog& log) {
    constexpr double kW = 640, kH = 360, kPad = 48;
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kW - kPad << "\" y2=\"" << kH - kPad
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << kPad << "\" y1=\"" << kPad << "\" x2=\"" << kPad << "\" y2=\"" << kH - kPad
       << "\" stroke=\"black\"/>\n";
    const std::size_t n = log.epochs.size();
    if (n > 0) {
        double max_loss = 1e-12;
        for (const auto& e : log.epochs) max_loss = std::max(max_loss, e.train_loss);
        auto x_of = [&](std::size_t i) {
            return n == 1 ? kW / 2 : kPad + (kW - 2 * kPad) * static_cast<double>(i) / static_cast<double>(n - 1);
        };
        auto y_of = [&](double v) { return kH - kPad - (kH - 2 * kPad) * v; };
        auto polyline = [&](auto value, const char* color) {
            os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
            for (std::size_t i = 0; i < n; ++i) os << x_of(i) << ',' << y_of(value(log.epochs[i])) << ' ';
            os << "\"/>\n";
        };
        polyline([&](const EpochRecord& e) { return e.train_loss / max_loss; }, "#c0392b");
        polyline([](const EpochRecord& e) { return e.val_dsc; }, "#2471a3");
    }
    os << "<text x=\"" << kPad << "\" y=\"" << kPad - 16 << "\" font-family=\"sans-serif\" font-size=\"13\">"
       << "train loss (red, scaled to max) / val DSC (blue)</text>\n";
    os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12 << "\" font-family=\"sans-serif\" font-size=\"12\">epoch</text>\n";
    os << "</svg>\n";
    return os.str();
}

void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace constyx::harness
