// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.
//
// Defense synthesis: locate insertion points with a binary-search trigger
// probe, pick amplitude target intervals from mined perturbation histograms,
// profile and select noise instructions, and apply the per-invocation
// compile-time insertion pass.

#ifndef SIDELAB_COUNTERMEASURE_HPP
#define SIDELAB_COUNTERMEASURE_HPP

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sidelab/adversarial.hpp"
#include "sidelab/dataset.hpp"
#include "sidelab/rng.hpp"
#include "sidelab/vm.hpp"

namespace sidelab::cm {

struct ProbeRecord {
    int iteration = 0;
    uint32_t index = 0;          // probed instruction boundary
    int64_t observed_sample = -1; // window sample where the sentinel landed
};

struct InsertionPoint {
    uint32_t instruction_index = 0;
    uint32_t target_sample = 0;
    int64_t landed_sample = -1;
    bool within_tolerance = true;
    std::vector<ProbeRecord> probes;
};

namespace detail {

/// Window sample index of the first sentinel-level sample, -1 if none.
inline int64_t sentinel_position(const vm::RawTrace &trace, double sentinel) {
    for (std::size_t i = 0; i < trace.samples.size(); ++i)
        if (trace.samples[i] == sentinel)
            return static_cast<int64_t>(i);
    return -1;
}

inline int64_t probe_once(const vm::Program &program, uint32_t boundary, const vm::MemoryImage &image,
                          const vm::DeviceConfig &config) {
    vm::Program probe = program;
    vm::Instruction low;
    low.op = vm::Opcode::TriggerLow;
    low.cycles = vm::cycle_cost(low.op);
    probe.instructions.insert(probe.instructions.begin() + boundary, low);
    vm::DeviceConfig cfg = config;
    cfg.noise_sigma = 0; // the probe observes positions, not amplitudes
    auto res = vm::execute(probe, image, cfg);
    return sentinel_position(res.trace, cfg.trigger_low_level);
}

} // namespace detail

/// For each target sample, binary-searches the instruction boundary whose
/// trigger_low probe lands at-or-after the target, re-running the program per
/// probe and scanning the trace for the forced low level. Boundaries are
/// restricted to the capture window when the program carries a trigger pair.
inline std::vector<InsertionPoint> locate_insertion_points(const vm::Program &program,
                                                           const std::vector<uint32_t> &targets,
                                                           const vm::MemoryImage &image,
                                                           const vm::DeviceConfig &config,
                                                           uint32_t tolerance_samples = 6) {
    uint32_t lo_bound = 0, hi_bound = static_cast<uint32_t>(program.instructions.size());
    if (auto high = program.first_index_of(vm::Opcode::TriggerHigh)) {
        lo_bound = *high + 1;
        auto low = program.first_index_of(vm::Opcode::TriggerLow);
        hi_bound = low ? *low : hi_bound;
    }

    int64_t reachable = detail::probe_once(program, hi_bound, image, config);
    std::vector<InsertionPoint> points;
    points.reserve(targets.size());
    for (uint32_t target : targets) {
        if (static_cast<int64_t>(target) > reachable)
            throw Error("target sample " + std::to_string(target) +
                        " is beyond the end of the program window (last probe lands at " +
                        std::to_string(reachable) + ")");
        InsertionPoint point;
        point.target_sample = target;
        uint32_t lo = lo_bound, hi = hi_bound;
        int iteration = 0;
        while (lo < hi) {
            uint32_t mid = lo + (hi - lo) / 2;
            int64_t landed = detail::probe_once(program, mid, image, config);
            point.probes.push_back({iteration++, mid, landed});
            if (landed >= static_cast<int64_t>(target))
                hi = mid;
            else
                lo = mid + 1;
        }
        point.instruction_index = lo;
        point.landed_sample = detail::probe_once(program, lo, image, config);
        point.probes.push_back({iteration, lo, point.landed_sample});
        point.within_tolerance =
            std::llabs(point.landed_sample - static_cast<int64_t>(target)) <=
            static_cast<int64_t>(tolerance_samples);
        points.push_back(std::move(point));
    }
    return points;
}

/// Emits the program with a ";@noise-slot" annotation at every located
/// boundary; source text is regenerated so the annotated file can be stored
/// and recompiled.
inline vm::Program annotate(const vm::Program &program, const std::vector<InsertionPoint> &points) {
    vm::Program out = program;
    for (const auto &p : points) {
        if (p.instruction_index > out.instructions.size())
            throw Error("insertion point index out of range");
        out.annotations.push_back({p.instruction_index, vm::kNoiseSlotTag});
    }
    std::stable_sort(out.annotations.begin(), out.annotations.end(),
                     [](const vm::Annotation &a, const vm::Annotation &b) { return a.index < b.index; });
    out.source_text = vm::disassemble(out);
    return out;
}

struct AmplitudeInterval {
    double lo = 0, hi = 0;
    bool contains(double v) const { return v >= lo && v <= hi; }
};

struct TargetIntervals {
    std::vector<AmplitudeInterval> intervals; // up to two: low mode, high mode
    bool fallback = false;                    // no overlapping side; single-model modes returned
};

namespace detail {

struct SideMode {
    bool present = false;
    double left = 0, right = 0; // hull of the top-mass bins on this side
};

/// Hull of the smallest set of heaviest bins covering `mass_fraction` of the
/// side's total mass. Sides split at amplitude 0 (standardized units).
inline SideMode side_mode(const adv::Histogram &h, bool high_side, double mass_fraction) {
    std::vector<std::size_t> bins;
    std::size_t total = 0;
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        bool is_high = h.bin_center(i) >= 0;
        if (is_high == high_side && h.counts[i] > 0) {
            bins.push_back(i);
            total += h.counts[i];
        }
    }
    SideMode mode;
    if (total == 0)
        return mode;
    std::sort(bins.begin(), bins.end(),
              [&](std::size_t a, std::size_t b) { return h.counts[a] > h.counts[b]; });
    std::size_t covered = 0;
    double left = 0, right = 0;
    bool first = true;
    for (std::size_t bin : bins) {
        covered += h.counts[bin];
        if (first) {
            left = h.bin_left(bin);
            right = h.bin_right(bin);
            first = false;
        } else {
            left = std::min(left, h.bin_left(bin));
            right = std::max(right, h.bin_right(bin));
        }
        if (static_cast<double>(covered) >= mass_fraction * static_cast<double>(total))
            break;
    }
    mode.present = true;
    mode.left = left;
    mode.right = right;
    return mode;
}

} // namespace detail

/// Combines the top-mass amplitude regions of two or more models' histograms
/// into up to two intervals (low mode, high mode) spanning the models'
/// modes. When the models share no side, each model's own modes are returned
/// with the fallback flag set.
inline TargetIntervals select_target_intervals(const std::vector<adv::Histogram> &histograms,
                                               double mass_fraction = 0.5) {
    if (histograms.size() < 2)
        throw Error("target interval selection expects histograms from at least 2 models");
    for (const auto &h : histograms)
        if (h.counts.size() != histograms[0].counts.size() || h.lo != histograms[0].lo ||
            h.hi != histograms[0].hi)
            throw Error("histograms must share their binning");

    TargetIntervals out;
    for (bool high_side : {false, true}) {
        bool all_present = true;
        double left = 0, right = 0;
        bool first = true;
        for (const auto &h : histograms) {
            auto mode = detail::side_mode(h, high_side, mass_fraction);
            if (!mode.present) {
                all_present = false;
                break;
            }
            if (first) {
                left = mode.left;
                right = mode.right;
                first = false;
            } else {
                left = std::min(left, mode.left);
                right = std::max(right, mode.right);
            }
        }
        if (all_present)
            out.intervals.push_back({left, right});
    }
    if (!out.intervals.empty())
        return out;

    // No side is shared by every model: fall back to each model's own modes.
    out.fallback = true;
    for (const auto &h : histograms)
        for (bool high_side : {false, true}) {
            auto mode = detail::side_mode(h, high_side, mass_fraction);
            if (mode.present)
                out.intervals.push_back({mode.left, mode.right});
        }
    if (out.intervals.empty())
        throw Error("no amplitude mass in any histogram");
    return out;
}

struct NoiseCandidateProfile {
    vm::Instruction instruction;
    double mean_delta = 0; // standardized amplitude, averaged over points
    double sd = 0;
    std::vector<double> per_point_mean;
};

struct NoiseSet {
    std::vector<NoiseCandidateProfile> instructions;
};

/// The common-instruction candidate pool: moves, loads, arithmetic and
/// logic on the reserved scratch register, over a ladder of common mask
/// constants so the achievable amplitudes cover the device's range.
inline std::vector<vm::Instruction> default_noise_candidates() {
    const char *lines[] = {
        "mov r24, 0xff", "ori r24, 0xff", "ldi r24, 0xff", "in r24, 0x3d",
        "ldi r24, 0x7f", "ldi r24, 0x3f", "ldi r24, 0x1f", "ldi r24, 0x0f",
        "ldi r24, 0x07", "ldi r24, 0x03", "ldi r24, 0x01", "ldi r24, 0x00",
        "eor r24, r24",  "add r24, r24",  "sub r24, r24",  "ld r24, 0x0100",
    };
    std::vector<vm::Instruction> out;
    for (const char *line : lines)
        out.push_back(vm::assemble(line).instructions[0]);
    return out;
}

/// Profiles every candidate at every insertion point. A candidate is kept
/// when its mean standardized amplitude lies inside a target interval at
/// some insertion point (the standardized level one instruction produces is
/// position-dependent), judged within the profile's standard error.
inline NoiseSet select_noise_instructions(const std::vector<vm::Instruction> &candidates,
                                          const vm::Program &program,
                                          const std::vector<InsertionPoint> &points,
                                          const TargetIntervals &targets, const vm::MemoryImage &image,
                                          const vm::DeviceConfig &config,
                                          const data::StandardizationStats &stats, int repetitions = 16) {
    if (points.empty())
        throw Error("no insertion points given");
    if (targets.intervals.empty())
        throw Error("no target intervals given");
    NoiseSet set;
    for (const auto &instr : candidates) {
        NoiseCandidateProfile prof;
        prof.instruction = instr;
        bool any_match = false;
        double sd_acc = 0;
        for (const auto &point : points) {
            auto p = vm::measure_instruction_profile(instr, program, point.instruction_index, image, config,
                                                     repetitions, stats.mean, stats.sd);
            prof.per_point_mean.push_back(p.mean);
            prof.mean_delta += p.mean;
            sd_acc += p.sd * p.sd;
            double se = p.sd / std::sqrt(static_cast<double>(repetitions));
            for (const auto &iv : targets.intervals)
                any_match |= p.mean >= iv.lo - se && p.mean <= iv.hi + se;
        }
        prof.mean_delta /= static_cast<double>(points.size());
        prof.sd = std::sqrt(sd_acc / static_cast<double>(points.size()));
        if (any_match)
            set.instructions.push_back(std::move(prof));
    }
    if (set.instructions.empty())
        throw Error("no candidate instruction matches the target amplitude intervals; "
                    "widen the intervals or extend the candidate pool");
    return set;
}

struct InsertionPolicy {
    std::vector<int> omega_domain{0, 1, 2}; // noise instructions per slot
    int reserved_register = 24;
};

namespace detail {

inline void validate_noise_instruction(const vm::Instruction &ins, const InsertionPolicy &policy) {
    if (ins.op == vm::Opcode::St || ins.op == vm::Opcode::TriggerHigh || ins.op == vm::Opcode::TriggerLow)
        throw Error("noise instructions must not write memory or toggle the trigger");
    if (ins.dst_kind == vm::DstKind::Reg && ins.dst != policy.reserved_register)
        throw Error("noise instructions must write only the reserved register r" +
                    std::to_string(policy.reserved_register));
}

} // namespace detail

/// The compile pass: at every ";@noise-slot" annotation, draws omega from the
/// policy domain and splices omega instructions picked uniformly with
/// replacement from the noise set. Annotations are consumed; the output is a
/// concrete program instance.
inline vm::Program insert_noise(const vm::Program &annotated, const std::vector<InsertionPoint> &points,
                                const NoiseSet &noise, const InsertionPolicy &policy,
                                uint64_t invocation_seed) {
    if (policy.omega_domain.empty())
        throw Error("insertion policy omega domain is empty");
    for (int w : policy.omega_domain)
        if (w < 0)
            throw Error("omega must be >= 0");
    if (noise.instructions.empty())
        throw Error("noise set is empty");
    for (const auto &p : noise.instructions)
        detail::validate_noise_instruction(p.instruction, policy);

    std::vector<uint32_t> slots;
    for (const auto &a : annotated.annotations)
        if (a.tag == vm::kNoiseSlotTag)
            slots.push_back(a.index);
    std::sort(slots.begin(), slots.end());
    if (slots.size() != points.size())
        throw Error("annotation/point mismatch: " + std::to_string(slots.size()) + " slots vs " +
                    std::to_string(points.size()) + " insertion points");
    for (std::size_t i = 0; i < slots.size(); ++i) {
        bool found = false;
        for (const auto &p : points)
            found |= p.instruction_index == slots[i];
        if (!found)
            throw Error("annotation at index " + std::to_string(slots[i]) + " has no matching insertion point");
    }

    Rng rng(invocation_seed);
    vm::Program out;
    uint32_t next_slot = 0;
    for (uint32_t i = 0; i <= annotated.instructions.size(); ++i) {
        while (next_slot < slots.size() && slots[next_slot] == i) {
            int omega = policy.omega_domain[rng.uniform_int(policy.omega_domain.size())];
            for (int k = 0; k < omega; ++k)
                out.instructions.push_back(
                    noise.instructions[rng.uniform_int(noise.instructions.size())].instruction);
            ++next_slot;
        }
        if (i < annotated.instructions.size())
            out.instructions.push_back(annotated.instructions[i]);
    }
    out.source_text = vm::disassemble(out);
    return out;
}

/// Annotated program plus everything the per-invocation pass needs.
struct ProtectedProgram {
    vm::Program annotated;
    std::vector<InsertionPoint> points;
    NoiseSet noise;
    InsertionPolicy policy;

    vm::Program instantiate(uint64_t invocation_seed) const {
        return insert_noise(annotated, points, noise, policy, invocation_seed);
    }
};

inline std::string probe_log_csv(const std::vector<InsertionPoint> &points) {
    std::string out = "target_sample,iteration,index,observed_sentinel_sample\n";
    char buf[96];
    for (const auto &p : points)
        for (const auto &r : p.probes) {
            std::snprintf(buf, sizeof(buf), "%u,%d,%u,%lld\n", p.target_sample, r.iteration, r.index,
                          static_cast<long long>(r.observed_sample));
            out += buf;
        }
    return out;
}

} // namespace sidelab::cm

#endif
