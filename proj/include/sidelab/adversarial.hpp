// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.
//
// DE/rand/1/bin differential evolution, one-pixel adversarial attacks with
// confidence-target and balance termination, universal-perturbation mining
// and position/amplitude histograms.

#ifndef SIDELAB_ADVERSARIAL_HPP
#define SIDELAB_ADVERSARIAL_HPP

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "sidelab/dataset.hpp"
#include "sidelab/rng.hpp"
#include "sidelab/util.hpp"

namespace sidelab::adv {

struct DeConfig {
    int population = 400;
    int max_iterations = 100;
    double weight = 0.5;    // F
    double crossover = 0.9; // CR
    std::vector<std::pair<double, double>> bounds;
    uint64_t seed = 0;
};

using Candidate = std::vector<double>;
/// Evaluates a full generation at once so model-backed fitness functions can
/// batch their forward passes.
using BatchFitness = std::function<std::vector<double>(const std::vector<Candidate> &)>;
using StopPredicate = std::function<bool(const Candidate &, double)>;

struct DeResult {
    Candidate best;
    double best_fitness = 0;
    std::vector<double> history; // best fitness after init and each iteration
    int iterations = 0;
    bool stopped_early = false;
};

/// Classic DE/rand/1/bin maximization: mutant = a + F(b - c) clamped to the
/// bounds, binomial crossover with one forced dimension, greedy selection.
/// Runs until `stop(best)` holds or max_iterations generations complete, and
/// returns the best-so-far either way.
inline DeResult differential_evolution(const BatchFitness &fitness, const DeConfig &config,
                                       const StopPredicate &stop = {}) {
    if (config.population < 4)
        throw Error("DE population must be >= 4");
    if (config.weight <= 0 || config.weight > 2)
        throw Error("DE weight F must be in (0, 2]");
    if (config.crossover < 0 || config.crossover > 1)
        throw Error("DE crossover CR must be in [0, 1]");
    if (config.bounds.empty())
        throw Error("DE bounds must be non-empty");
    for (auto [lo, hi] : config.bounds)
        if (!(std::isfinite(lo) && std::isfinite(hi)) || lo > hi)
            throw Error("DE bounds must be finite with lo <= hi");

    const std::size_t dims = config.bounds.size();
    const std::size_t np = static_cast<std::size_t>(config.population);
    Rng rng(config.seed);

    std::vector<Candidate> pop(np, Candidate(dims));
    for (auto &x : pop)
        for (std::size_t d = 0; d < dims; ++d)
            x[d] = rng.uniform(config.bounds[d].first, config.bounds[d].second);
    std::vector<double> fit = fitness(pop);

    DeResult res;
    auto update_best = [&] {
        std::size_t bi = 0;
        for (std::size_t i = 1; i < np; ++i)
            if (fit[i] > fit[bi])
                bi = i;
        if (res.history.empty() || fit[bi] > res.best_fitness) {
            res.best = pop[bi];
            res.best_fitness = fit[bi];
        }
        res.history.push_back(res.best_fitness);
    };
    update_best();
    if (stop && stop(res.best, res.best_fitness)) {
        res.stopped_early = true;
        return res;
    }

    std::vector<Candidate> trials(np, Candidate(dims));
    for (int iter = 0; iter < config.max_iterations; ++iter) {
        for (std::size_t i = 0; i < np; ++i) {
            std::size_t a, b, c;
            do
                a = rng.uniform_int(np);
            while (a == i);
            do
                b = rng.uniform_int(np);
            while (b == i || b == a);
            do
                c = rng.uniform_int(np);
            while (c == i || c == a || c == b);
            std::size_t forced = rng.uniform_int(dims);
            for (std::size_t d = 0; d < dims; ++d) {
                double v;
                if (d == forced || rng.uniform() < config.crossover) {
                    v = pop[a][d] + config.weight * (pop[b][d] - pop[c][d]);
                    v = std::clamp(v, config.bounds[d].first, config.bounds[d].second);
                } else {
                    v = pop[i][d];
                }
                trials[i][d] = v;
            }
        }
        std::vector<double> trial_fit = fitness(trials);
        for (std::size_t i = 0; i < np; ++i) {
            if (trial_fit[i] > fit[i]) {
                pop[i] = trials[i];
                fit[i] = trial_fit[i];
            }
        }
        res.iterations = iter + 1;
        update_best();
        if (stop && stop(res.best, res.best_fitness)) {
            res.stopped_early = true;
            break;
        }
    }
    return res;
}

enum class TerminationKind : uint8_t { ConfidenceTarget, Balance };

struct Termination {
    TerminationKind kind = TerminationKind::ConfidenceTarget;
    int target_class = 0;
    double tau = 0.95;   // confidence threshold, close to 1
    double sigma = 0.05; // balance threshold, close to 0
};

struct Perturbation {
    uint32_t trace_id = 0;
    uint32_t position = 0;
    double amplitude = 0;
    PredictionVector achieved;
    bool success = false;
};

struct PerturbationSet {
    Termination termination;
    std::vector<Perturbation> items;

    PerturbationSet successful() const {
        PerturbationSet out;
        out.termination = termination;
        for (const auto &p : items)
            if (p.success)
                out.items.push_back(p);
        return out;
    }

    /// Perturbations that left the trace classified as the target class
    /// (achieved confidence above 1/2) — the operative goal of the
    /// confidence-target termination, whether or not tau itself was reached.
    PerturbationSet classified_as_target() const {
        PerturbationSet out;
        out.termination = termination;
        for (const auto &p : items) {
            double conf = p.achieved.empty()
                              ? 0.0
                              : p.achieved[static_cast<std::size_t>(termination.target_class)];
            if (p.success || conf > 0.5)
                out.items.push_back(p);
        }
        return out;
    }
};

/// Optional constraint restricting perturbation positions to a union of
/// half-open sample windows.
struct PositionWindows {
    std::vector<std::pair<uint32_t, uint32_t>> windows;

    uint32_t total() const {
        uint32_t t = 0;
        for (auto [lo, hi] : windows) {
            if (hi <= lo)
                throw Error("position window must satisfy lo < hi");
            t += hi - lo;
        }
        return t;
    }
    uint32_t map(double gene) const {
        auto offset = static_cast<uint32_t>(gene);
        for (auto [lo, hi] : windows) {
            if (offset < hi - lo)
                return lo + offset;
            offset -= hi - lo;
        }
        return windows.back().second - 1;
    }
};

using BatchPredictor = std::function<std::vector<PredictionVector>(const float *rows, std::size_t count,
                                                                   std::size_t n)>;

namespace detail {

inline uint32_t gene_to_position(double gene, uint32_t n, const std::optional<PositionWindows> &constraint) {
    if (constraint)
        return constraint->map(std::min(gene, static_cast<double>(constraint->total()) - 0.5));
    return std::min(static_cast<uint32_t>(gene), n - 1);
}

} // namespace detail

/// One-pixel attack: searches a (position, amplitude) pair with DE, scoring
/// candidates by the target-class confidence (ConfidenceTarget) or by
/// -|d0 - d1| (Balance, 2-class only). The amplitude replaces the sample
/// value at the chosen position. Default amplitude bounds are the trace's
/// own value range; mining passes set-wide bounds instead.
inline Perturbation one_pixel_attack(const BatchPredictor &model, std::span<const float> trace,
                                     const Termination &termination, DeConfig de,
                                     const std::optional<PositionWindows> &constraint = {},
                                     uint32_t trace_id = 0) {
    const uint32_t n = static_cast<uint32_t>(trace.size());
    if (n == 0)
        throw Error("cannot attack an empty trace");
    if (termination.kind == TerminationKind::ConfidenceTarget &&
        !(termination.tau > 0 && termination.tau < 1))
        throw Error("confidence threshold tau must be in (0, 1)");
    if (termination.kind == TerminationKind::Balance && termination.sigma < 0)
        throw Error("balance threshold sigma must be >= 0");

    double pos_hi = constraint ? static_cast<double>(constraint->total()) : static_cast<double>(n);
    if (de.bounds.empty()) {
        float lo = trace[0], hi = trace[0];
        for (float v : trace) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        de.bounds = {{0.0, pos_hi}, {lo, hi}};
    } else {
        if (de.bounds.size() != 2)
            throw Error("one-pixel DE bounds must have 2 dimensions (position, amplitude)");
        de.bounds[0] = {0.0, pos_hi};
    }

    std::vector<float> scratch;
    auto evaluate = [&](const std::vector<Candidate> &cands) {
        scratch.assign(cands.size() * n, 0.0f);
        for (std::size_t i = 0; i < cands.size(); ++i) {
            float *row = scratch.data() + i * n;
            std::copy(trace.begin(), trace.end(), row);
            row[detail::gene_to_position(cands[i][0], n, constraint)] = static_cast<float>(cands[i][1]);
        }
        auto preds = model(scratch.data(), cands.size(), n);
        std::vector<double> fit(cands.size());
        for (std::size_t i = 0; i < cands.size(); ++i) {
            const auto &d = preds[i];
            if (termination.kind == TerminationKind::ConfidenceTarget) {
                fit[i] = d[termination.target_class];
            } else {
                if (d.size() != 2)
                    throw Error("balance termination is only valid for 2-class models");
                fit[i] = -std::abs(d[0] - d[1]);
            }
        }
        return fit;
    };
    auto stop = [&](const Candidate &, double best_fit) {
        return termination.kind == TerminationKind::ConfidenceTarget ? best_fit >= termination.tau
                                                                     : -best_fit <= termination.sigma;
    };

    DeResult res = differential_evolution(evaluate, de, stop);

    Perturbation out;
    out.trace_id = trace_id;
    out.position = detail::gene_to_position(res.best[0], n, constraint);
    out.amplitude = res.best[1];
    std::vector<float> final_trace(trace.begin(), trace.end());
    final_trace[out.position] = static_cast<float>(out.amplitude);
    out.achieved = model(final_trace.data(), 1, n)[0];
    out.success = termination.kind == TerminationKind::ConfidenceTarget
                      ? out.achieved[termination.target_class] >= termination.tau
                      : std::abs(out.achieved[0] - out.achieved[1]) <= termination.sigma;
    return out;
}

/// One attack per trace; every outcome is recorded, success or not.
/// Per-trace seeds derive from the config seed, so attacks are reproducible
/// and run concurrently. Shared amplitude bounds default to the set-wide
/// sample range.
inline PerturbationSet mine_perturbations(const BatchPredictor &model, const data::Dataset &traces,
                                          const Termination &termination, DeConfig de,
                                          const std::optional<PositionWindows> &constraint = {}) {
    PerturbationSet set;
    set.termination = termination;
    set.items.resize(traces.size());
    if (traces.size() == 0)
        return set;

    if (de.bounds.empty()) {
        float lo = traces.samples[0], hi = traces.samples[0];
        for (float v : traces.samples) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        de.bounds = {{0.0, 0.0 /* fixed per trace */}, {lo, hi}};
    }

    std::vector<std::string> failures(traces.size());
    parallel_for(traces.size(), [&](std::size_t i) {
        try {
            DeConfig cfg = de;
            cfg.seed = derive_seed(de.seed, "one-pixel", i);
            set.items[i] =
                one_pixel_attack(model, traces.trace(i), termination, cfg, constraint, static_cast<uint32_t>(i));
        } catch (const std::exception &e) {
            failures[i] = e.what();
        }
    });
    for (const auto &f : failures)
        if (!f.empty())
            throw Error("perturbation mining failed: " + f);
    return set;
}

/// Exact position counts over n samples.
inline std::vector<std::size_t> position_histogram(const PerturbationSet &set, uint32_t n) {
    std::vector<std::size_t> counts(n, 0);
    for (const auto &p : set.items) {
        if (p.position >= n)
            throw Error("perturbation position " + std::to_string(p.position) + " outside trace length");
        ++counts[p.position];
    }
    return counts;
}

struct Histogram {
    double lo = 0, hi = 0;
    std::vector<std::size_t> counts;

    double bin_width() const { return (hi - lo) / static_cast<double>(counts.size()); }
    double bin_center(std::size_t i) const { return lo + (static_cast<double>(i) + 0.5) * bin_width(); }
    double bin_left(std::size_t i) const { return lo + static_cast<double>(i) * bin_width(); }
    double bin_right(std::size_t i) const { return lo + static_cast<double>(i + 1) * bin_width(); }
};

/// Amplitude counts over `bins` equal intervals. The default range is the
/// empirical amplitude range of the set; out-of-range values clamp to the
/// edge bins.
inline Histogram amplitude_histogram(const PerturbationSet &set, std::size_t bins = 160,
                                     std::optional<std::pair<double, double>> range = {}) {
    if (bins < 1)
        throw Error("amplitude histogram needs at least one bin");
    Histogram h;
    h.counts.assign(bins, 0);
    if (set.items.empty())
        return h;
    if (range) {
        h.lo = range->first;
        h.hi = range->second;
    } else {
        h.lo = h.hi = set.items[0].amplitude;
        for (const auto &p : set.items) {
            h.lo = std::min(h.lo, p.amplitude);
            h.hi = std::max(h.hi, p.amplitude);
        }
    }
    if (h.hi <= h.lo)
        h.hi = h.lo + 1e-9;
    for (const auto &p : set.items) {
        double t = (p.amplitude - h.lo) / (h.hi - h.lo) * static_cast<double>(bins);
        auto bin = static_cast<std::size_t>(std::clamp(t, 0.0, static_cast<double>(bins) - 1.0));
        ++h.counts[bin];
    }
    return h;
}

/// CSV persistence: trace_id, position, amplitude, success,
/// confidence_target_class, achieved_confidence.
inline std::string perturbations_to_csv(const PerturbationSet &set) {
    std::string out = "trace_id,position,amplitude,success,confidence_target_class,achieved_confidence\n";
    char buf[160];
    for (const auto &p : set.items) {
        double achieved = p.achieved.empty() ? 0.0 : p.achieved[set.termination.target_class];
        std::snprintf(buf, sizeof(buf), "%u,%u,%.9g,%d,%d,%.9g\n", p.trace_id, p.position, p.amplitude,
                      p.success ? 1 : 0, set.termination.target_class, achieved);
        out += buf;
    }
    return out;
}

inline PerturbationSet perturbations_from_csv(const std::string &csv) {
    PerturbationSet set;
    auto lines = split(csv, '\n');
    if (lines.empty() || trim(lines[0]).rfind("trace_id,", 0) != 0)
        throw Error("not a perturbation CSV");
    for (std::size_t i = 1; i < lines.size(); ++i) {
        std::string line = trim(lines[i]);
        if (line.empty())
            continue;
        auto f = split(line, ',');
        if (f.size() != 6)
            throw Error("malformed perturbation CSV line: " + line);
        Perturbation p;
        p.trace_id = static_cast<uint32_t>(std::stoul(f[0]));
        p.position = static_cast<uint32_t>(std::stoul(f[1]));
        p.amplitude = std::stod(f[2]);
        p.success = f[3] == "1";
        set.termination.target_class = std::stoi(f[4]);
        p.achieved.assign(static_cast<std::size_t>(set.termination.target_class) + 1, 0.0);
        p.achieved[set.termination.target_class] = std::stod(f[5]);
        set.items.push_back(std::move(p));
    }
    return set;
}

} // namespace sidelab::adv

#endif
