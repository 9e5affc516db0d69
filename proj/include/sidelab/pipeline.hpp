// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.
//
// Pipeline orchestration: flat key=value configuration, deterministic
// per-stage seed fan-out from one master seed, the stage implementations
// behind the CLI subcommands, and the artifact manifest.

#ifndef SIDELAB_PIPELINE_HPP
#define SIDELAB_PIPELINE_HPP

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>

#include "sidelab/classifiers.hpp"
#include "sidelab/countermeasure.hpp"
#include "sidelab/evaluation.hpp"
#include "sidelab/template_attack.hpp"

namespace sidelab::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration: flat key=value text, '#' comments, CLI overrides on top.
// ---------------------------------------------------------------------------

class Config {
  public:
    Config() = default;

    static Config from_file(const fs::path &path) {
        Config cfg;
        cfg.merge_text(read_file(path));
        return cfg;
    }

    void merge_text(const std::string &text) {
        int line_no = 0;
        for (const auto &raw : split(text, '\n')) {
            ++line_no;
            std::string line = trim(raw);
            if (line.empty() || line[0] == '#')
                continue;
            auto eq = line.find('=');
            if (eq == std::string::npos)
                throw Error("config line " + std::to_string(line_no) + " is not key=value: " + line);
            values_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
    }

    void set(const std::string &key, const std::string &value) { values_[key] = value; }
    bool has(const std::string &key) const { return values_.count(key) > 0; }

    std::string get(const std::string &key, const std::string &fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }
    double get(const std::string &key, double fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : std::stod(it->second);
    }
    int64_t get(const std::string &key, int64_t fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : std::stoll(it->second);
    }
    std::vector<std::string> get_list(const std::string &key, const std::string &fallback) const {
        std::vector<std::string> out;
        for (auto &item : split(get(key, fallback), ','))
            if (!trim(item).empty())
                out.push_back(trim(item));
        return out;
    }

    const std::map<std::string, std::string> &values() const { return values_; }

  private:
    std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Run context: output layout, master seed, manifest.
// ---------------------------------------------------------------------------

struct Context {
    Config config;
    fs::path out;
    uint64_t master_seed = 1;

    uint64_t stage_seed(const std::string &stage, uint64_t index = 0) const {
        return derive_seed(master_seed, stage, index);
    }

    fs::path traces_path(const std::string &variant) const { return out / "traces" / (variant + ".sct"); }
    fs::path model_path(const std::string &name, const std::string &variant) const {
        return out / "models" / (name + "_" + variant + (name.rfind("ta", 0) == 0 ? ".tpl" : ".bin"));
    }
    fs::path stats_path(const std::string &variant) const {
        return out / "models" / ("stats_" + variant + ".json");
    }
    fs::path program_path(const std::string &name) const { return out / "program" / name; }
    fs::path report_path(const std::string &name) const { return out / "reports" / name; }
    fs::path manifest_path() const { return out / "manifest.json"; }

    /// Writes an artifact and records it in the manifest.
    void emit(const fs::path &path, const std::string &content, const std::string &stage,
              uint64_t seed) const {
        write_file(path, content);
        json manifest = json::array();
        if (fs::exists(manifest_path())) {
            try {
                manifest = json::parse(read_file(manifest_path()));
            } catch (const std::exception &) {
                manifest = json::array();
            }
        }
        std::string rel = fs::relative(path, out).generic_string();
        json entry = {{"path", rel},
                      {"stage", stage},
                      {"seed", seed},
                      {"hash", to_hex(fnv1a64(content.data(), content.size()))}};
        json updated = json::array();
        for (const auto &e : manifest)
            if (e.value("path", "") != rel)
                updated.push_back(e);
        updated.push_back(entry);
        std::sort(updated.begin(), updated.end(),
                  [](const json &a, const json &b) { return a.value("path", "") < b.value("path", ""); });
        write_file(manifest_path(), updated.dump(2) + "\n");
    }

    void require_artifact(const fs::path &path, const std::string &producer) const {
        if (!fs::exists(path))
            throw Error("missing artifact: " + path.string() + "; run '" + producer + "' first");
    }
};

// ---------------------------------------------------------------------------
// Config-derived pieces.
// ---------------------------------------------------------------------------

inline vm::DeviceConfig device_config(const Config &c) {
    vm::DeviceConfig d;
    d.hw_gain = c.get("device.hw_gain", 1.0);
    d.baseline = c.get("device.baseline", 0.0);
    d.noise_sigma = c.get("device.noise_sigma", 1.0);
    d.samples_per_cycle = static_cast<int>(c.get("device.samples_per_cycle", int64_t{3}));
    d.trigger_low_level = c.get("device.trigger_low_level", -10.0);
    d.in_value = static_cast<uint8_t>(c.get("device.in_value", int64_t{0xff}));
    return d;
}

inline aes::Block parse_key(const std::string &hex) { return aes::block_from_hex(hex); }

struct ModelName {
    std::string arch; // mlp | cnn | ta
    int classes = 2;  // 2 (lsb) or 9 (hw)

    std::string str() const { return arch + std::to_string(classes); }
    aes::LeakageModel leakage(int byte_index) const {
        return {classes == 2 ? aes::LeakageKind::Lsb : aes::LeakageKind::Hw, byte_index};
    }
};

inline ModelName parse_model_name(const std::string &name) {
    ModelName m;
    if (name.rfind("mlp", 0) == 0)
        m.arch = "mlp";
    else if (name.rfind("cnn", 0) == 0)
        m.arch = "cnn";
    else if (name.rfind("ta", 0) == 0)
        m.arch = "ta";
    else
        throw Error("unknown model name: " + name + " (expected mlp2/mlp9/cnn2/cnn9/ta2/ta9)");
    std::string suffix = name.substr(m.arch.size());
    if (suffix == "2")
        m.classes = 2;
    else if (suffix == "9")
        m.classes = 9;
    else
        throw Error("model name must end in 2 or 9: " + name);
    return m;
}

inline clf::MlpSpec mlp_spec(const Config &c) {
    clf::MlpSpec spec;
    spec.hidden.clear();
    for (const auto &w : c.get_list("mlp.hidden", "200,200,200,200,200"))
        spec.hidden.push_back(static_cast<std::size_t>(std::stoul(w)));
    return spec;
}

inline clf::CnnSpec cnn_spec(const Config &c) {
    clf::CnnSpec spec;
    spec.blocks.clear();
    for (const auto &b : c.get_list("cnn.blocks", "8x11x2,16x11x2,32x11x2,64x11x2")) {
        auto dims = split(b, 'x');
        if (dims.size() != 3)
            throw Error("cnn block must be filters x kernel x pool: " + b);
        spec.blocks.push_back({std::stoul(dims[0]), std::stoul(dims[1]), std::stoul(dims[2])});
    }
    spec.dense.clear();
    for (const auto &d : c.get_list("cnn.dense", "512"))
        spec.dense.push_back(static_cast<std::size_t>(std::stoul(d)));
    return spec;
}

inline clf::TrainConfig train_config(const Config &c, const ModelName &m, uint64_t seed) {
    clf::TrainConfig cfg;
    const std::string &a = m.arch;
    cfg.learning_rate = c.get(a + ".learning_rate", a == "mlp" ? 1e-5 : 1e-4);
    cfg.batch_size = static_cast<std::size_t>(c.get(a + ".batch_size", int64_t{256}));
    cfg.epochs = static_cast<std::size_t>(c.get(a + ".epochs", a == "mlp" ? int64_t{100} : int64_t{10}));
    cfg.seed = seed;
    cfg.class_count = m.classes;
    return cfg;
}

inline adv::DeConfig de_config(const Config &c, uint64_t seed) {
    adv::DeConfig de;
    de.population = static_cast<int>(c.get("de.population", int64_t{400}));
    de.max_iterations = static_cast<int>(c.get("de.iterations", int64_t{100}));
    de.weight = c.get("de.weight", 0.5);
    de.crossover = c.get("de.crossover", 0.9);
    de.seed = seed;
    if (c.has("de.amplitude_lo") || c.has("de.amplitude_hi"))
        de.bounds = {{0, 0}, {c.get("de.amplitude_lo", -4.0), c.get("de.amplitude_hi", 4.0)}};
    return de;
}

inline adv::Termination termination_config(const Config &c) {
    adv::Termination t;
    std::string kind = c.get("de.termination", "confidence");
    t.kind = kind == "balance" ? adv::TerminationKind::Balance : adv::TerminationKind::ConfidenceTarget;
    t.target_class = static_cast<int>(c.get("de.target_class", int64_t{0}));
    t.tau = c.get("de.tau", 0.95);
    t.sigma = c.get("de.sigma", 0.05);
    return t;
}

/// Builds a Trainer for mean_rank_curve / accuracy evaluation.
inline eval::Trainer make_trainer(const Config &config, const ModelName &name, int byte_index,
                                  uint64_t seed) {
    if (name.arch == "ta") {
        double lambda = config.get("ta.lambda", 0.1);
        double ridge = config.get("ta.ridge", 1e-6);
        aes::LeakageModel leakage = name.leakage(byte_index);
        return [lambda, ridge, leakage](const data::Dataset &prof,
                                        const data::StandardizationStats &) -> eval::Attacker {
            data::Dataset relabeled = prof;
            relabeled.relabel(leakage);
            auto model = std::make_shared<ta::TemplateModel>(ta::fit_templates(relabeled, lambda, ridge));
            return [model, leakage](const data::Dataset &att) {
                data::Dataset r = att;
                r.relabel(leakage);
                return ta::ta_classify_batch(*model, r);
            };
        };
    }
    clf::ArchSpec spec = name.arch == "mlp" ? clf::ArchSpec{mlp_spec(config)} : clf::ArchSpec{cnn_spec(config)};
    clf::TrainConfig tc = train_config(config, name, seed);
    aes::LeakageModel leakage = name.leakage(byte_index);
    return [spec, tc, leakage](const data::Dataset &prof,
                               const data::StandardizationStats &stats) -> eval::Attacker {
        data::Dataset relabeled = prof;
        relabeled.relabel(leakage);
        auto model = std::make_shared<clf::ClassifierModel>(clf::train(relabeled, spec, tc, stats));
        return [model](const data::Dataset &att) { return clf::predict_dataset(*model, att); };
    };
}

// ---------------------------------------------------------------------------
// Shared stage plumbing.
// ---------------------------------------------------------------------------

inline int leakage_byte(const Config &c) { return static_cast<int>(c.get("leakage.byte", int64_t{2})); }

inline aes::FirstRoundProgram target_program() { return aes::first_round_program(); }

inline data::ImageSource image_source(const aes::FirstRoundLayout &layout) {
    return [layout](const aes::Block &p, const aes::Block &k) { return aes::memory_image(layout, p, k); };
}

inline cm::ProtectedProgram load_protected(const Context &ctx) {
    fs::path path = ctx.program_path("protected.json");
    ctx.require_artifact(path, "protect");
    json j = json::parse(read_file(path));
    cm::ProtectedProgram prot;
    prot.annotated = vm::assemble(j.at("annotated_source").get<std::string>());
    for (const auto &p : j.at("insertion_points")) {
        cm::InsertionPoint point;
        point.instruction_index = p.at("index");
        point.target_sample = p.at("target_sample");
        point.landed_sample = p.at("landed_sample");
        prot.points.push_back(point);
    }
    for (const auto &n : j.at("noise")) {
        cm::NoiseCandidateProfile prof;
        prof.instruction = vm::assemble(n.at("line").get<std::string>()).instructions[0];
        prof.mean_delta = n.at("mean_delta");
        prof.sd = n.at("sd");
        prot.noise.instructions.push_back(prof);
    }
    prot.policy.omega_domain = j.at("omega_domain").get<std::vector<int>>();
    prot.policy.reserved_register = j.at("reserved_register");
    return prot;
}

inline data::StandardizationStats load_stats(const Context &ctx, const std::string &variant) {
    fs::path path = ctx.stats_path(variant);
    ctx.require_artifact(path, "train");
    json j = json::parse(read_file(path));
    data::StandardizationStats st;
    st.mean = j.at("mean").get<std::vector<double>>();
    st.sd = j.at("sd").get<std::vector<double>>();
    return st;
}

/// Deterministic profiling/attack split shared by train/attack/mine stages.
inline std::pair<data::Dataset, data::Dataset> stage_split(const Context &ctx, const data::Dataset &corpus,
                                                           const std::string &variant) {
    auto profiling_count =
        static_cast<std::size_t>(ctx.config.get("eval.profiling_count", int64_t{10000}));
    profiling_count = std::min(profiling_count, corpus.size() - 1);
    return data::split(corpus, profiling_count, ctx.stage_seed("train-split:" + variant));
}

// ---------------------------------------------------------------------------
// Stages.
// ---------------------------------------------------------------------------

inline void stage_capture(const Context &ctx, const std::string &variant) {
    uint64_t seed = ctx.stage_seed("capture:" + variant);
    auto fr = target_program();
    data::Campaign campaign;
    campaign.count = static_cast<std::size_t>(ctx.config.get("capture.count", int64_t{12000}));
    campaign.key_policy = ctx.config.get("capture.key_policy", std::string("fixed")) == "random"
                              ? data::KeyPolicy::UniformRandom
                              : data::KeyPolicy::FixedKey;
    campaign.fixed_key =
        parse_key(ctx.config.get("capture.key", std::string("000102030405060708090a0b0c0d0e0f")));
    campaign.device = device_config(ctx.config);
    campaign.trace_samples = static_cast<uint32_t>(ctx.config.get("capture.trace_samples", int64_t{1280}));
    campaign.seed = seed;

    aes::LeakageModel model{aes::LeakageKind::Hw, leakage_byte(ctx.config)};
    data::Dataset ds;
    if (variant == "unprotected") {
        ctx.emit(ctx.program_path("unprotected.asm"), vm::disassemble(fr.program), "capture", seed);
        ds = data::acquire([&](uint64_t) { return fr.program; }, image_source(fr.layout), model, campaign);
    } else if (variant == "protected") {
        cm::ProtectedProgram prot = load_protected(ctx);
        campaign.recompile_each_run = true;
        ds = data::acquire([&](uint64_t s) { return prot.instantiate(s); }, image_source(fr.layout), model,
                           campaign);
    } else {
        throw Error("unknown capture variant: " + variant + " (expected unprotected or protected)");
    }
    fs::create_directories(ctx.traces_path(variant).parent_path());
    data::write_dataset(ctx.traces_path(variant), ds);
    ctx.emit(ctx.traces_path(variant), read_file(ctx.traces_path(variant)), "capture", seed);
}

inline void stage_train(const Context &ctx, const std::string &variant) {
    ctx.require_artifact(ctx.traces_path(variant), "capture");
    data::Dataset corpus = data::read_dataset(ctx.traces_path(variant));
    auto [prof, att] = stage_split(ctx, corpus, variant);
    auto [prof_std, stats] = data::standardize(prof);

    json stats_json = {{"mean", stats.mean}, {"sd", stats.sd}};
    ctx.emit(ctx.stats_path(variant), stats_json.dump() + "\n", "train", ctx.stage_seed("train:" + variant));

    int byte_index = leakage_byte(ctx.config);
    for (const auto &name_str : ctx.config.get_list("train.models", "mlp2,mlp9,cnn2,cnn9,ta2,ta9")) {
        ModelName name = parse_model_name(name_str);
        uint64_t seed = ctx.stage_seed("train:" + name_str + ":" + variant);
        data::Dataset relabeled = prof_std;
        relabeled.relabel(name.leakage(byte_index));
        fs::path path = ctx.model_path(name_str, variant);
        fs::create_directories(path.parent_path());
        if (name.arch == "ta") {
            auto model = ta::fit_templates(relabeled, ctx.config.get("ta.lambda", 0.1),
                                           ctx.config.get("ta.ridge", 1e-6));
            ta::write_template_model(path, model);
        } else {
            clf::ArchSpec spec =
                name.arch == "mlp" ? clf::ArchSpec{mlp_spec(ctx.config)} : clf::ArchSpec{cnn_spec(ctx.config)};
            auto model = clf::train(relabeled, spec, train_config(ctx.config, name, seed), stats);
            clf::write_model(path, model);
        }
        ctx.emit(path, read_file(path), "train", seed);
    }
}

/// Prediction vectors of a named trained model on a standardized dataset.
inline std::vector<PredictionVector> model_predictions(const Context &ctx, const std::string &name_str,
                                                       const std::string &variant,
                                                       const data::Dataset &att_std) {
    ModelName name = parse_model_name(name_str);
    fs::path path = ctx.model_path(name_str, variant);
    ctx.require_artifact(path, "train");
    if (name.arch == "ta") {
        auto model = ta::read_template_model(path);
        return ta::ta_classify_batch(model, att_std);
    }
    auto model = clf::read_model(path);
    return clf::predict_dataset(model, att_std);
}

inline void stage_attack(const Context &ctx, const std::string &name_str, const std::string &variant) {
    ctx.require_artifact(ctx.traces_path(variant), "capture");
    uint64_t seed = ctx.stage_seed("attack:" + name_str + ":" + variant);
    data::Dataset corpus = data::read_dataset(ctx.traces_path(variant));
    if (corpus.key_policy != data::KeyPolicy::FixedKey)
        throw Error("attack evaluation needs a fixed-key capture");
    auto [prof, att] = stage_split(ctx, corpus, variant);
    data::StandardizationStats stats = load_stats(ctx, variant);
    data::Dataset att_std = data::apply_stats(att, stats);

    ModelName name = parse_model_name(name_str);
    int byte_index = leakage_byte(ctx.config);
    att_std.relabel(name.leakage(byte_index));
    auto predictions = model_predictions(ctx, name_str, variant, att_std);

    std::vector<aes::Block> pts;
    for (const auto &r : att_std.records)
        pts.push_back(r.plaintext);
    auto m_max = static_cast<std::size_t>(ctx.config.get("eval.m_max", int64_t{1000}));
    auto ranks = eval::rank_trajectory(predictions, pts, name.leakage(byte_index),
                                       corpus.fixed_key[byte_index], m_max, derive_seed(seed, "order"));

    eval::RankCurve curve;
    curve.per_rep = {ranks};
    curve.m_max = ranks.size();
    curve.mean_rank.assign(ranks.begin(), ranks.end());
    ctx.emit(ctx.report_path("rank_" + name_str + "_" + variant + ".csv"), eval::rank_curve_csv(curve),
             "attack", seed);

    std::vector<uint8_t> labels;
    for (const auto &r : att_std.records)
        labels.push_back(r.label);
    double acc = eval::accuracy_of(predictions, labels);
    json summary = {{"model", name_str},
                    {"variant", variant},
                    {"accuracy", acc},
                    {"rank0_m", curve.first_zero_m()}};
    ctx.emit(ctx.report_path("attack_" + name_str + "_" + variant + ".json"), summary.dump(2) + "\n",
             "attack", seed);

    report::Series series{name_str + " (" + variant + ")", {}, {}};
    for (std::size_t m = 1; m <= curve.m_max; ++m) {
        series.x.push_back(static_cast<double>(m));
        series.y.push_back(curve.mean_rank[m - 1]);
    }
    ctx.emit(ctx.report_path("rank_" + name_str + "_" + variant + ".svg"),
             report::svg_line_plot("mean rank of the true key byte", "attack traces M", "rank", {series}),
             "attack", seed);
}

inline void stage_mine(const Context &ctx, const std::string &name_str) {
    const std::string variant = "unprotected";
    ctx.require_artifact(ctx.traces_path(variant), "capture");
    uint64_t seed = ctx.stage_seed("mine:" + name_str);
    data::Dataset corpus = data::read_dataset(ctx.traces_path(variant));
    auto [prof, att] = stage_split(ctx, corpus, variant);
    data::StandardizationStats stats = load_stats(ctx, variant);
    data::Dataset att_std = data::apply_stats(att, stats);

    auto count = static_cast<std::size_t>(ctx.config.get("mine.count", int64_t{500}));
    count = std::min(count, att_std.size());
    data::Dataset subset;
    subset.n = att_std.n;
    subset.model = att_std.model;
    subset.records.assign(att_std.records.begin(), att_std.records.begin() + count);
    subset.samples.assign(att_std.samples.begin(), att_std.samples.begin() + count * att_std.n);

    ModelName name = parse_model_name(name_str);
    fs::path model_file = ctx.model_path(name_str, variant);
    ctx.require_artifact(model_file, "train");
    adv::BatchPredictor predictor;
    std::shared_ptr<clf::ClassifierModel> clf_model;
    std::shared_ptr<ta::TemplateModel> ta_model;
    if (name.arch == "ta") {
        ta_model = std::make_shared<ta::TemplateModel>(ta::read_template_model(model_file));
        predictor = [ta_model](const float *rows, std::size_t n_rows, std::size_t n) {
            std::vector<PredictionVector> out(n_rows);
            for (std::size_t i = 0; i < n_rows; ++i)
                out[i] = ta::ta_classify(*ta_model, {rows + i * n, n});
            return out;
        };
    } else {
        clf_model = std::make_shared<clf::ClassifierModel>(clf::read_model(model_file));
        predictor = [clf_model](const float *rows, std::size_t n_rows, std::size_t n) {
            return clf::predict_batch(*clf_model, rows, n_rows, n);
        };
    }

    auto set = adv::mine_perturbations(predictor, subset, termination_config(ctx.config),
                                       de_config(ctx.config, seed));
    ctx.emit(ctx.report_path("perturbations_" + name_str + ".csv"), adv::perturbations_to_csv(set), "mine",
             seed);

    auto ok = set.classified_as_target();
    auto pos_hist = adv::position_histogram(ok, subset.n);
    std::string pos_csv = "sample,count\n";
    for (uint32_t j = 0; j < subset.n; ++j)
        pos_csv += std::to_string(j) + "," + std::to_string(pos_hist[j]) + "\n";
    ctx.emit(ctx.report_path("position_hist_" + name_str + ".csv"), pos_csv, "mine", seed);

    auto amp_hist = adv::amplitude_histogram(ok, static_cast<std::size_t>(ctx.config.get("mine.bins", int64_t{160})));
    std::string amp_csv = "bin_lo,bin_hi,count\n";
    for (std::size_t b = 0; b < amp_hist.counts.size(); ++b)
        amp_csv += report::fmt(amp_hist.bin_left(b)) + "," + report::fmt(amp_hist.bin_right(b)) + "," +
                   std::to_string(amp_hist.counts[b]) + "\n";
    ctx.emit(ctx.report_path("amplitude_hist_" + name_str + ".csv"), amp_csv, "mine", seed);

    report::Series series{"perturbation positions (" + name_str + ")", {}, {}};
    for (uint32_t j = 0; j < subset.n; ++j) {
        series.x.push_back(j);
        series.y.push_back(static_cast<double>(pos_hist[j]));
    }
    ctx.emit(ctx.report_path("position_hist_" + name_str + ".svg"),
             report::svg_line_plot("adversarial perturbation positions", "time sample", "count", {series}),
             "mine", seed);
}

/// Top `slots` histogram peaks with non-maximum suppression.
inline std::vector<uint32_t> top_peaks(const std::vector<std::size_t> &hist, std::size_t slots,
                                       uint32_t radius) {
    std::vector<std::size_t> work = hist;
    std::vector<uint32_t> peaks;
    for (std::size_t s = 0; s < slots; ++s) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < work.size(); ++j)
            if (work[j] > work[best])
                best = j;
        if (work[best] == 0)
            break;
        peaks.push_back(static_cast<uint32_t>(best));
        std::size_t lo = best > radius ? best - radius : 0;
        std::size_t hi = std::min(work.size(), best + radius + 1);
        for (std::size_t j = lo; j < hi; ++j)
            work[j] = 0;
    }
    std::sort(peaks.begin(), peaks.end());
    return peaks;
}

/// Insertion targets from a perturbation-position histogram: for each of the
/// top peaks, aim one cycle before the start of the peak's dense region, so
/// the inserted noise occupies the region and displaces it downstream (the
/// locate probe converges to the boundary landing at-or-after the target).
inline std::vector<uint32_t> insertion_targets(const std::vector<std::size_t> &hist, std::size_t slots,
                                               uint32_t radius, int samples_per_cycle) {
    std::vector<uint32_t> targets;
    for (uint32_t peak : top_peaks(hist, slots, radius)) {
        std::size_t threshold = std::max<std::size_t>(1, hist[peak] / 5);
        uint32_t start = peak;
        while (start > 0 && peak - (start - 1) <= radius && hist[start - 1] >= threshold)
            --start;
        uint32_t margin = static_cast<uint32_t>(samples_per_cycle);
        targets.push_back(start > margin ? start - margin : 0);
    }
    std::sort(targets.begin(), targets.end());
    targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
    return targets;
}

inline void stage_locate(const Context &ctx) {
    uint64_t seed = ctx.stage_seed("locate");
    auto fr = target_program();
    vm::DeviceConfig device = device_config(ctx.config);
    auto slots = static_cast<std::size_t>(ctx.config.get("cm.slots", int64_t{3}));
    auto tolerance_cycles = static_cast<uint32_t>(ctx.config.get("cm.tolerance_cycles", int64_t{2}));
    uint32_t tol_samples = tolerance_cycles * static_cast<uint32_t>(device.samples_per_cycle);

    // Positions past the program window (padding) can carry histogram mass
    // but are not insertable; measure the reachable window first.
    vm::DeviceConfig probe_cfg = device;
    probe_cfg.noise_sigma = 0;
    auto probe_run = vm::execute(fr.program, aes::memory_image(fr.layout, {}, {}), probe_cfg);
    std::size_t window_len = probe_run.trace.samples.size() -
                             static_cast<std::size_t>(device.samples_per_cycle); // sentinel cycle excluded

    std::vector<uint32_t> targets;
    std::string targets_cfg = ctx.config.get("cm.targets", std::string("auto"));
    if (targets_cfg == "auto") {
        // Sum the target-class perturbation position histograms of the mined models.
        std::vector<std::size_t> combined(window_len, 0);
        for (const auto &m : ctx.config.get_list("mine.models", "mlp2,cnn2")) {
            fs::path csv = ctx.report_path("perturbations_" + m + ".csv");
            ctx.require_artifact(csv, "mine");
            auto set = adv::perturbations_from_csv(read_file(csv)).classified_as_target();
            for (const auto &p : set.items)
                if (p.position < window_len)
                    ++combined[p.position];
        }
        targets = insertion_targets(combined, slots, 3 * static_cast<uint32_t>(device.samples_per_cycle),
                                    device.samples_per_cycle);
        if (targets.empty())
            throw Error("no target-class perturbations available to derive insertion targets");
    } else {
        for (const auto &t : split(targets_cfg, ','))
            targets.push_back(static_cast<uint32_t>(std::stoul(trim(t))));
    }
    if (targets.empty())
        throw Error("no insertion targets");

    vm::MemoryImage image = aes::memory_image(fr.layout, {}, {});
    auto points = cm::locate_insertion_points(fr.program, targets, image, device, tol_samples);
    vm::Program annotated = cm::annotate(fr.program, points);
    ctx.emit(ctx.program_path("annotated.asm"), annotated.source_text, "locate", seed);
    ctx.emit(ctx.report_path("probe_log.csv"), cm::probe_log_csv(points), "locate", seed);

    std::string csv = "target_sample,instruction_index,landed_sample,within_tolerance\n";
    for (const auto &p : points)
        csv += std::to_string(p.target_sample) + "," + std::to_string(p.instruction_index) + "," +
               std::to_string(p.landed_sample) + "," + (p.within_tolerance ? "1" : "0") + "\n";
    ctx.emit(ctx.report_path("insertion_points.csv"), csv, "locate", seed);
}

inline std::vector<cm::InsertionPoint> load_insertion_points(const Context &ctx) {
    fs::path csv_path = ctx.report_path("insertion_points.csv");
    ctx.require_artifact(csv_path, "locate");
    std::vector<cm::InsertionPoint> points;
    auto lines = split(read_file(csv_path), '\n');
    for (std::size_t i = 1; i < lines.size(); ++i) {
        std::string line = trim(lines[i]);
        if (line.empty())
            continue;
        auto f = split(line, ',');
        cm::InsertionPoint p;
        p.target_sample = static_cast<uint32_t>(std::stoul(f[0]));
        p.instruction_index = static_cast<uint32_t>(std::stoul(f[1]));
        p.landed_sample = std::stoll(f[2]);
        p.within_tolerance = f[3] == "1";
        points.push_back(p);
    }
    return points;
}

inline void stage_select(const Context &ctx) {
    uint64_t seed = ctx.stage_seed("select");
    auto mine_models = ctx.config.get_list("mine.models", "mlp2,cnn2");
    if (mine_models.size() < 2)
        throw Error("interval selection needs mined sets from at least 2 models");

    // Shared binning across the models' successful amplitude sets.
    std::vector<adv::PerturbationSet> sets;
    double lo = 0, hi = 0;
    bool first = true;
    for (const auto &m : mine_models) {
        fs::path csv = ctx.report_path("perturbations_" + m + ".csv");
        ctx.require_artifact(csv, "mine");
        auto ok = adv::perturbations_from_csv(read_file(csv)).classified_as_target();
        if (ok.items.empty())
            throw Error("model " + m + " has no target-class perturbations to select intervals from");
        for (const auto &p : ok.items) {
            if (first) {
                lo = hi = p.amplitude;
                first = false;
            }
            lo = std::min(lo, p.amplitude);
            hi = std::max(hi, p.amplitude);
        }
        sets.push_back(std::move(ok));
    }
    auto bins = static_cast<std::size_t>(ctx.config.get("mine.bins", int64_t{160}));
    std::vector<adv::Histogram> histograms;
    for (const auto &s : sets)
        histograms.push_back(adv::amplitude_histogram(s, bins, std::pair{lo, hi}));

    auto targets = cm::select_target_intervals(histograms, ctx.config.get("cm.mass_fraction", 0.5));
    std::string interval_csv = "lo,hi,fallback\n";
    for (const auto &iv : targets.intervals)
        interval_csv += report::fmt(iv.lo) + "," + report::fmt(iv.hi) + "," + (targets.fallback ? "1" : "0") + "\n";
    ctx.emit(ctx.report_path("intervals.csv"), interval_csv, "select", seed);

    fs::path annotated_path = ctx.program_path("annotated.asm");
    ctx.require_artifact(annotated_path, "locate");
    vm::Program annotated = vm::assemble(read_file(annotated_path));
    auto points = load_insertion_points(ctx);
    data::StandardizationStats stats = load_stats(ctx, "unprotected");

    std::vector<vm::Instruction> candidates;
    std::string pool = ctx.config.get("cm.candidates", std::string());
    if (pool.empty()) {
        candidates = cm::default_noise_candidates();
    } else {
        for (const auto &line : split(pool, ';'))
            if (!trim(line).empty())
                candidates.push_back(vm::assemble(trim(line)).instructions[0]);
    }

    auto fr = target_program();
    vm::DeviceConfig device = device_config(ctx.config);
    device.rng_seed = seed;
    auto reps = static_cast<int>(ctx.config.get("cm.profile_repetitions", int64_t{16}));
    auto noise = cm::select_noise_instructions(candidates, annotated, points, targets,
                                               aes::memory_image(fr.layout, {}, {}), device, stats, reps);

    json noise_json = json::array();
    for (const auto &n : noise.instructions)
        noise_json.push_back({{"line", vm::format_instruction(n.instruction)},
                              {"mean_delta", n.mean_delta},
                              {"sd", n.sd}});
    ctx.emit(ctx.program_path("noise_set.json"), noise_json.dump(2) + "\n", "select", seed);
}

inline void stage_protect(const Context &ctx) {
    uint64_t seed = ctx.stage_seed("protect");
    fs::path annotated_path = ctx.program_path("annotated.asm");
    ctx.require_artifact(annotated_path, "locate");
    fs::path noise_path = ctx.program_path("noise_set.json");
    ctx.require_artifact(noise_path, "select");

    vm::Program annotated = vm::assemble(read_file(annotated_path));
    auto points = load_insertion_points(ctx);
    json noise_json = json::parse(read_file(noise_path));
    cm::NoiseSet noise;
    for (const auto &n : noise_json) {
        cm::NoiseCandidateProfile prof;
        prof.instruction = vm::assemble(n.at("line").get<std::string>()).instructions[0];
        prof.mean_delta = n.at("mean_delta");
        prof.sd = n.at("sd");
        noise.instructions.push_back(prof);
    }
    cm::InsertionPolicy policy;
    policy.omega_domain.clear();
    for (const auto &w : ctx.config.get_list("cm.omega", "0,1,2"))
        policy.omega_domain.push_back(std::stoi(w));
    policy.reserved_register = static_cast<int>(ctx.config.get("cm.reserved_register", int64_t{24}));

    json bundle;
    bundle["annotated_source"] = annotated.source_text.empty() ? vm::disassemble(annotated)
                                                               : annotated.source_text;
    bundle["insertion_points"] = json::array();
    for (const auto &p : points)
        bundle["insertion_points"].push_back({{"index", p.instruction_index},
                                              {"target_sample", p.target_sample},
                                              {"landed_sample", p.landed_sample}});
    bundle["noise"] = noise_json;
    bundle["omega_domain"] = policy.omega_domain;
    bundle["reserved_register"] = policy.reserved_register;
    ctx.emit(ctx.program_path("protected.json"), bundle.dump(2) + "\n", "protect", seed);

    cm::ProtectedProgram prot{annotated, points, noise, policy};
    ctx.emit(ctx.program_path("protected_example.asm"), prot.instantiate(seed).source_text, "protect", seed);
}

inline void stage_evaluate(const Context &ctx) {
    uint64_t seed = ctx.stage_seed("evaluate");
    int byte_index = leakage_byte(ctx.config);
    auto repetitions = static_cast<int>(ctx.config.get("eval.repetitions", int64_t{5}));
    auto profiling_count = static_cast<std::size_t>(ctx.config.get("eval.profiling_count", int64_t{10000}));
    auto m_max = static_cast<std::size_t>(ctx.config.get("eval.m_max", int64_t{1000}));

    std::string comparison = "model,variant,rank0_m,final_mean_rank,mean_accuracy\n";
    for (const auto &variant : ctx.config.get_list("eval.variants", "unprotected,protected")) {
        ctx.require_artifact(ctx.traces_path(variant), "capture");
        data::Dataset corpus = data::read_dataset(ctx.traces_path(variant));
        std::size_t prof_count = std::min(profiling_count, corpus.size() - 1);
        for (const auto &name_str : ctx.config.get_list("eval.models", "mlp9,cnn9,ta9,mlp2,cnn2")) {
            ModelName name = parse_model_name(name_str);
            uint64_t model_seed = derive_seed(seed, name_str + ":" + variant);
            eval::Trainer trainer = make_trainer(ctx.config, name, byte_index, model_seed);

            data::Dataset relabeled = corpus;
            relabeled.relabel(name.leakage(byte_index));
            auto curve = eval::mean_rank_curve(trainer, relabeled, repetitions, prof_count, m_max, model_seed);
            ctx.emit(ctx.report_path("comparison_rank_" + name_str + "_" + variant + ".csv"),
                     eval::rank_curve_csv(curve), "evaluate", model_seed);

            // Mean accuracy over the same repetitions.
            double acc_total = 0;
            for (int rep = 0; rep < repetitions; ++rep) {
                auto [prof, att] = data::split(relabeled, prof_count, derive_seed(model_seed, "split", rep));
                auto [prof_std, stats] = data::standardize(prof);
                data::Dataset att_std = data::apply_stats(att, stats);
                auto attacker = trainer(prof_std, stats);
                auto predictions = attacker(att_std);
                std::vector<uint8_t> labels;
                for (const auto &r : att_std.records)
                    labels.push_back(r.label);
                acc_total += eval::accuracy_of(predictions, labels);
            }
            double mean_acc = acc_total / repetitions;

            report::Series series{name_str + " (" + variant + ")", {}, {}};
            for (std::size_t m = 1; m <= curve.m_max; ++m) {
                series.x.push_back(static_cast<double>(m));
                series.y.push_back(curve.mean_rank[m - 1]);
            }
            ctx.emit(ctx.report_path("comparison_rank_" + name_str + "_" + variant + ".svg"),
                     report::svg_line_plot("mean rank, " + name_str + " on " + variant, "attack traces M",
                                           "mean rank", {series}),
                     "evaluate", model_seed);

            comparison += name_str + "," + variant + "," + std::to_string(curve.first_zero_m()) + "," +
                          report::fmt(curve.mean_rank.back()) + "," + report::fmt(mean_acc) + "\n";
        }
    }
    ctx.emit(ctx.report_path("comparison.csv"), comparison, "evaluate", seed);
}

inline void stage_study_naive(const Context &ctx) {
    uint64_t seed = ctx.stage_seed("study-naive");
    ctx.require_artifact(ctx.traces_path("unprotected"), "capture");
    data::Dataset corpus = data::read_dataset(ctx.traces_path("unprotected"));
    auto count = static_cast<std::size_t>(ctx.config.get("study.count", int64_t{4500}));
    if (count < corpus.size()) {
        data::Dataset sub;
        sub.n = corpus.n;
        sub.model = corpus.model;
        sub.key_policy = corpus.key_policy;
        sub.fixed_key = corpus.fixed_key;
        sub.records.assign(corpus.records.begin(), corpus.records.begin() + count);
        sub.samples.assign(corpus.samples.begin(), corpus.samples.begin() + count * corpus.n);
        corpus = std::move(sub);
    }
    int byte_index = leakage_byte(ctx.config);
    corpus.relabel({aes::LeakageKind::Lsb, byte_index});

    ModelName name = parse_model_name(ctx.config.get("study.model", std::string("mlp2")));
    eval::NaiveStudyConfig cfg;
    cfg.profiling_count = static_cast<std::size_t>(
        ctx.config.get("study.profiling_count", static_cast<int64_t>(corpus.size() * 8 / 10)));
    cfg.m_max = static_cast<std::size_t>(ctx.config.get("eval.m_max", int64_t{1000}));
    cfg.termination = termination_config(ctx.config);
    cfg.de = de_config(ctx.config, derive_seed(seed, "mine"));
    cfg.de.population = static_cast<int>(ctx.config.get("study.de_population", int64_t{24}));
    cfg.de.max_iterations = static_cast<int>(ctx.config.get("study.de_iterations", int64_t{40}));
    cfg.seed = seed;

    auto report_data =
        eval::naive_adversarial_study(corpus, make_trainer(ctx.config, name, byte_index, seed), cfg);

    std::string csv = "M,source_mean_rank,adversarial_mean_rank\n";
    for (std::size_t m = 1; m <= report_data.source_curve.m_max; ++m) {
        csv += std::to_string(m) + "," + report::fmt(report_data.source_curve.mean_rank[m - 1]) + ",";
        csv += m <= report_data.adversarial_curve.m_max
                   ? report::fmt(report_data.adversarial_curve.mean_rank[m - 1])
                   : std::string("");
        csv += "\n";
    }
    ctx.emit(ctx.report_path("naive_study.csv"), csv, "study-naive", seed);

    json summary = {{"source_rank0_m", report_data.source_rank0_m},
                    {"adversarial_rank0_m", report_data.adversarial_rank0_m},
                    {"converted", report_data.converted}};
    ctx.emit(ctx.report_path("naive_study.json"), summary.dump(2) + "\n", "study-naive", seed);

    report::Series src{"source traces", {}, {}}, adv_series{"one-pixel converted", {}, {}};
    for (std::size_t m = 1; m <= report_data.source_curve.m_max; ++m) {
        src.x.push_back(static_cast<double>(m));
        src.y.push_back(report_data.source_curve.mean_rank[m - 1]);
    }
    for (std::size_t m = 1; m <= report_data.adversarial_curve.m_max; ++m) {
        adv_series.x.push_back(static_cast<double>(m));
        adv_series.y.push_back(report_data.adversarial_curve.mean_rank[m - 1]);
    }
    ctx.emit(ctx.report_path("naive_study.svg"),
             report::svg_line_plot("per-trace adversarial conversion is not protective", "attack traces M",
                                   "rank", {src, adv_series}),
             "study-naive", seed);
}

inline void stage_overhead(const Context &ctx) {
    uint64_t seed = ctx.stage_seed("overhead");
    auto fr = target_program();
    cm::ProtectedProgram prot = load_protected(ctx);
    std::vector<eval::ProgramVariant> variants{
        {"unprotected", [fr](uint64_t) { return fr.program; }},
        {"protected", [prot](uint64_t s) { return prot.instantiate(s); }},
    };
    auto rows = eval::execution_overhead(variants, image_source(fr.layout), device_config(ctx.config),
                                         static_cast<std::size_t>(ctx.config.get("overhead.runs", int64_t{1000})),
                                         seed);
    ctx.emit(ctx.report_path("overhead.csv"), eval::overhead_csv(rows), "overhead", seed);
}

} // namespace sidelab::pipeline

#endif
