// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.
//
// Key-recovery scoring: log-domain score and rank functions, accuracy,
// mean-rank curves over resampled dataset pairs, the per-trace adversarial
// conversion study and execution-overhead measurement.

#ifndef SIDELAB_EVALUATION_HPP
#define SIDELAB_EVALUATION_HPP

#include <functional>
#include <span>
#include <vector>

#include "sidelab/adversarial.hpp"
#include "sidelab/dataset.hpp"
#include "sidelab/report.hpp"

namespace sidelab::eval {

constexpr double kConfidenceFloor = 1e-40;
constexpr int kKeySpace = 256;

/// labels[i][k]: class index of trace i under key-byte hypothesis k.
inline std::vector<std::vector<uint8_t>> hypothesis_labels(const std::vector<aes::Block> &plaintexts,
                                                           const aes::LeakageModel &model) {
    std::vector<std::vector<uint8_t>> labels(plaintexts.size(), std::vector<uint8_t>(kKeySpace));
    for (std::size_t i = 0; i < plaintexts.size(); ++i) {
        uint8_t p = plaintexts[i][model.byte_index];
        for (int k = 0; k < kKeySpace; ++k) {
            uint8_t v = aes::sbox(static_cast<uint8_t>(p ^ k));
            labels[i][k] =
                static_cast<uint8_t>(model.kind == aes::LeakageKind::Lsb ? (v & 1) : aes::hamming_weight(v));
        }
    }
    return labels;
}

/// Log-domain score over an arbitrary candidate table:
/// S[k] = sum_i log max(d_i[labels[i][k]], floor). Equivalent in ordering to
/// the product of confidences, without the underflow.
inline std::vector<double> scores_from_table(const std::vector<PredictionVector> &predictions,
                                             const std::vector<std::vector<uint8_t>> &labels, std::size_t m,
                                             double floor = kConfidenceFloor) {
    if (m > predictions.size())
        throw Error("M exceeds the number of predictions");
    if (labels.size() < m)
        throw Error("label table smaller than M");
    std::size_t candidates = labels.empty() ? 0 : labels[0].size();
    std::vector<double> scores(candidates, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < candidates; ++k)
            scores[k] += std::log(std::max(predictions[i][labels[i][k]], floor));
    return scores;
}

inline std::vector<double> key_scores(const std::vector<PredictionVector> &predictions,
                                      const std::vector<aes::Block> &plaintexts,
                                      const aes::LeakageModel &model, std::size_t m) {
    return scores_from_table(predictions, hypothesis_labels(plaintexts, model), m);
}

/// Number of candidates scoring strictly above the true key; rank 0 means a
/// successful recovery. Ties favour the true key by construction.
inline int rank_of(std::span<const double> scores, int true_key) {
    int rank = 0;
    double own = scores[true_key];
    for (double s : scores)
        rank += s > own;
    return rank;
}

/// Rank over distinguishable candidate classes: candidates whose hypothesis
/// label columns are identical are score-equivalent by construction (the LSB
/// model collapses key pairs), so they count once.
inline int rank_of_equivalent(std::span<const double> scores,
                              const std::vector<std::vector<uint8_t>> &labels, std::size_t m, int true_key) {
    std::vector<int> representative(scores.size(), -1);
    int rank = 0;
    double own = scores[true_key];
    for (std::size_t k = 0; k < scores.size(); ++k) {
        bool duplicate = false;
        for (std::size_t k2 = 0; k2 < k && !duplicate; ++k2) {
            bool same = true;
            for (std::size_t i = 0; i < m && same; ++i)
                same = labels[i][k] == labels[i][k2];
            duplicate = same;
        }
        if (!duplicate)
            representative[k] = static_cast<int>(k);
        if (representative[k] >= 0 && scores[k] > own)
            ++rank;
    }
    return rank;
}

/// Fraction of traces whose argmax class equals the true label.
inline double accuracy_of(const std::vector<PredictionVector> &predictions,
                          const std::vector<uint8_t> &labels) {
    if (predictions.size() != labels.size())
        throw Error("prediction/label count mismatch");
    if (predictions.empty())
        return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        hits += argmax(predictions[i]) == labels[i];
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

struct RankCurve {
    std::vector<double> mean_rank;         // index M-1, M in 1..m_max
    std::vector<std::vector<int>> per_rep; // per repetition, same indexing
    std::size_t m_max = 0;

    /// Smallest M from which the mean rank is 0 through the whole measured
    /// horizon (a full recovery, not a transient tie); -1 if never reached.
    /// Label ties make the raw rank touch 0 spuriously at tiny M, so a
    /// single-point zero does not count.
    int first_zero_m() const {
        if (mean_rank.empty() || mean_rank.back() != 0.0)
            return -1;
        std::size_t i = mean_rank.size();
        while (i > 0 && mean_rank[i - 1] == 0.0)
            --i;
        return static_cast<int>(i + 1);
    }
    double rank_at(std::size_t m) const { return mean_rank.at(m - 1); }
};

/// A trained attacker: maps a standardized attack set to prediction vectors.
using Attacker = std::function<std::vector<PredictionVector>(const data::Dataset &)>;
/// Trains on a standardized profiling set (with its statistics available).
using Trainer = std::function<Attacker(const data::Dataset &, const data::StandardizationStats &)>;

/// Incremental ranks of the true key byte for M = 1..m_max over a seeded
/// shuffle of the attack-trace order.
inline std::vector<int> rank_trajectory(const std::vector<PredictionVector> &predictions,
                                        const std::vector<aes::Block> &plaintexts,
                                        const aes::LeakageModel &model, int true_key, std::size_t m_max,
                                        uint64_t order_seed) {
    std::size_t count = predictions.size();
    if (count == 0)
        throw Error("empty attack set");
    m_max = std::min(m_max, count);
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i)
        order[i] = i;
    Rng rng(order_seed);
    for (std::size_t i = count - 1; i > 0; --i)
        std::swap(order[i], order[rng.uniform_int(i + 1)]);

    auto labels = hypothesis_labels(plaintexts, model);
    std::vector<double> scores(kKeySpace, 0.0);
    std::vector<int> ranks(m_max);
    for (std::size_t m = 0; m < m_max; ++m) {
        std::size_t i = order[m];
        for (int k = 0; k < kKeySpace; ++k)
            scores[k] += std::log(std::max(predictions[i][labels[i][k]], kConfidenceFloor));
        ranks[m] = rank_of(scores, true_key);
    }
    return ranks;
}

/// Mean rank over `repetitions` fresh (seeded) splits: each repetition
/// splits, standardizes, trains from scratch and evaluates the rank at every
/// M. Repetitions run concurrently; each trains single-threaded.
inline RankCurve mean_rank_curve(const Trainer &trainer, const data::Dataset &corpus, int repetitions,
                                 std::size_t profiling_count, std::size_t m_max, uint64_t seed) {
    if (repetitions < 1)
        throw Error("repetitions must be >= 1");
    if (corpus.key_policy != data::KeyPolicy::FixedKey)
        throw Error("rank evaluation needs a fixed-key corpus");
    int true_key = corpus.fixed_key[corpus.model.byte_index];

    RankCurve curve;
    curve.per_rep.resize(repetitions);
    std::vector<std::string> failures(repetitions);
    parallel_for(static_cast<std::size_t>(repetitions), [&](std::size_t rep) {
        try {
            auto [prof, att] = data::split(corpus, profiling_count, derive_seed(seed, "split", rep));
            auto [prof_std, stats] = data::standardize(prof);
            data::Dataset att_std = data::apply_stats(att, stats);
            Attacker attacker = trainer(prof_std, stats);
            auto predictions = attacker(att_std);
            std::vector<aes::Block> pts;
            pts.reserve(att.size());
            for (const auto &r : att.records)
                pts.push_back(r.plaintext);
            curve.per_rep[rep] = rank_trajectory(predictions, pts, corpus.model, true_key, m_max,
                                                 derive_seed(seed, "order", rep));
        } catch (const std::exception &e) {
            failures[rep] = e.what();
        }
    });
    for (const auto &f : failures)
        if (!f.empty())
            throw Error("rank curve repetition failed: " + f);

    curve.m_max = curve.per_rep[0].size();
    curve.mean_rank.assign(curve.m_max, 0.0);
    for (const auto &ranks : curve.per_rep)
        for (std::size_t m = 0; m < curve.m_max; ++m)
            curve.mean_rank[m] += ranks[m];
    for (auto &v : curve.mean_rank)
        v /= repetitions;
    return curve;
}

inline std::string rank_curve_csv(const RankCurve &curve) {
    std::string out = "M,mean_rank";
    for (std::size_t r = 0; r < curve.per_rep.size(); ++r)
        out += ",rep" + std::to_string(r);
    out += "\n";
    for (std::size_t m = 0; m < curve.m_max; ++m) {
        out += std::to_string(m + 1) + "," + report::fmt(curve.mean_rank[m]);
        for (const auto &ranks : curve.per_rep)
            out += "," + std::to_string(ranks[m]);
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Naive per-trace adversarial conversion study
// ---------------------------------------------------------------------------

struct NaiveStudyConfig {
    std::size_t profiling_count = 0;
    std::size_t m_max = 1000;
    adv::Termination termination{adv::TerminationKind::ConfidenceTarget, 0, 0.95, 0.05};
    adv::DeConfig de;
    uint64_t seed = 0;
};

struct NaiveStudyReport {
    RankCurve source_curve;      // attacker trained and evaluated on source traces
    RankCurve adversarial_curve; // attacker retrained and evaluated on converted traces
    int source_rank0_m = -1;
    int adversarial_rank0_m = -1;
    std::size_t converted = 0; // successful conversions
};

/// Converts every trace (profiling and attack) to its one-pixel adversarial
/// version against a model trained on the source profiling set, retrains the
/// attacker on the converted set and reports both rank curves.
inline NaiveStudyReport naive_adversarial_study(const data::Dataset &corpus, const Trainer &trainer,
                                                const NaiveStudyConfig &config) {
    if (corpus.key_policy != data::KeyPolicy::FixedKey)
        throw Error("the naive study needs a fixed-key corpus");
    int true_key = corpus.fixed_key[corpus.model.byte_index];

    auto [prof, att] = data::split(corpus, config.profiling_count, derive_seed(config.seed, "split"));
    auto [prof_std, stats] = data::standardize(prof);
    data::Dataset att_std = data::apply_stats(att, stats);

    NaiveStudyReport report;
    Attacker source_attacker = trainer(prof_std, stats);
    {
        auto predictions = source_attacker(att_std);
        std::vector<aes::Block> pts;
        for (const auto &r : att.records)
            pts.push_back(r.plaintext);
        RankCurve curve;
        curve.per_rep = {rank_trajectory(predictions, pts, corpus.model, true_key, config.m_max,
                                         derive_seed(config.seed, "order"))};
        curve.m_max = curve.per_rep[0].size();
        curve.mean_rank.assign(curve.per_rep[0].begin(), curve.per_rep[0].end());
        report.source_curve = std::move(curve);
        report.source_rank0_m = report.source_curve.first_zero_m();
    }

    // Convert every trace with the source model.
    adv::BatchPredictor predictor = [&](const float *rows, std::size_t count, std::size_t n) {
        data::Dataset tmp;
        tmp.n = static_cast<uint32_t>(n);
        tmp.records.resize(count);
        tmp.samples.assign(rows, rows + count * n);
        return source_attacker(tmp);
    };
    auto convert = [&](const data::Dataset &std_ds) {
        data::Dataset out = std_ds;
        auto set = adv::mine_perturbations(predictor, std_ds, config.termination, config.de);
        for (const auto &p : set.items) {
            out.trace(p.trace_id)[p.position] = static_cast<float>(p.amplitude);
            report.converted += p.success;
        }
        return out;
    };
    data::Dataset prof_adv = convert(prof_std);
    data::Dataset att_adv = convert(att_std);

    // Retrain from scratch on the adversarial profiling set. Traces are
    // already in standardized units; identity statistics keep the trainer
    // interface uniform.
    data::StandardizationStats identity;
    identity.mean.assign(corpus.n, 0.0);
    identity.sd.assign(corpus.n, 1.0);
    Attacker adv_attacker = trainer(prof_adv, identity);
    {
        auto predictions = adv_attacker(att_adv);
        std::vector<aes::Block> pts;
        for (const auto &r : att_adv.records)
            pts.push_back(r.plaintext);
        RankCurve curve;
        curve.per_rep = {rank_trajectory(predictions, pts, corpus.model, true_key, config.m_max,
                                         derive_seed(config.seed, "order-adv"))};
        curve.m_max = curve.per_rep[0].size();
        curve.mean_rank.assign(curve.per_rep[0].begin(), curve.per_rep[0].end());
        report.adversarial_curve = std::move(curve);
        report.adversarial_rank0_m = report.adversarial_curve.first_zero_m();
    }
    return report;
}

// ---------------------------------------------------------------------------
// Execution-time overhead
// ---------------------------------------------------------------------------

struct OverheadRow {
    std::string variant;
    uint64_t min_cycles = 0;
    double avg_cycles = 0;
    uint64_t max_cycles = 0;
};

struct ProgramVariant {
    std::string name;
    data::ProgramSource program_for_run;
};

/// Min/avg/max total cycle counts over `runs` executions of each variant,
/// with fresh inputs per run.
inline std::vector<OverheadRow> execution_overhead(const std::vector<ProgramVariant> &variants,
                                                   const data::ImageSource &image_for_input,
                                                   const vm::DeviceConfig &config, std::size_t runs,
                                                   uint64_t seed) {
    if (runs < 1)
        throw Error("overhead measurement needs at least one run");
    std::vector<OverheadRow> rows;
    for (const auto &variant : variants) {
        OverheadRow row;
        row.variant = variant.name;
        row.min_cycles = ~0ull;
        double total = 0;
        for (std::size_t run = 0; run < runs; ++run) {
            Rng input_rng(derive_seed(seed, "overhead-inputs", run));
            aes::Block p = input_rng.bytes<16>(), k = input_rng.bytes<16>();
            vm::DeviceConfig cfg = config;
            cfg.rng_seed = derive_seed(seed, "overhead-noise", run);
            vm::Program prog = variant.program_for_run(derive_seed(seed, "overhead-compile", run));
            auto res = vm::execute(prog, image_for_input(p, k), cfg);
            row.min_cycles = std::min(row.min_cycles, res.trace.cycle_count);
            row.max_cycles = std::max(row.max_cycles, res.trace.cycle_count);
            total += static_cast<double>(res.trace.cycle_count);
        }
        row.avg_cycles = total / static_cast<double>(runs);
        rows.push_back(std::move(row));
    }
    return rows;
}

/// Table-layout CSV: variant,min_cycles,avg_cycles,max_cycles with the
/// average printed to two decimals. Byte-stable for a fixed seed.
inline std::string overhead_csv(const std::vector<OverheadRow> &rows) {
    std::string out = "variant,min_cycles,avg_cycles,max_cycles\n";
    char buf[128];
    for (const auto &r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%llu,%.2f,%llu\n", r.variant.c_str(),
                      static_cast<unsigned long long>(r.min_cycles), r.avg_cycles,
                      static_cast<unsigned long long>(r.max_cycles));
        out += buf;
    }
    return out;
}

} // namespace sidelab::eval

#endif
