// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.
//
// Trace acquisition campaigns, fixed-length datasets, standardization,
// profiling/attack splits, Pearson correlation analysis and the SCT1 trace
// file format.

#ifndef SIDELAB_DATASET_HPP
#define SIDELAB_DATASET_HPP

#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "sidelab/aes.hpp"
#include "sidelab/rng.hpp"
#include "sidelab/util.hpp"
#include "sidelab/vm.hpp"

namespace sidelab::data {

constexpr double kSdFloor = 1e-6;

struct AcquisitionRecord {
    aes::Block plaintext{};
    aes::Block key{};
    uint8_t label = 0;
    bool operator==(const AcquisitionRecord &) const = default;
};

enum class KeyPolicy : uint8_t { FixedKey = 0, UniformRandom = 1 };

struct Dataset {
    std::vector<float> samples; // row-major, size() == records.size() * n
    std::vector<AcquisitionRecord> records;
    aes::LeakageModel model;
    uint32_t n = 0;
    KeyPolicy key_policy = KeyPolicy::FixedKey;
    aes::Block fixed_key{}; // zeros when key_policy is UniformRandom

    std::size_t size() const { return records.size(); }
    std::span<const float> trace(std::size_t i) const { return {samples.data() + i * n, n}; }
    std::span<float> trace(std::size_t i) { return {samples.data() + i * n, n}; }

    /// Recomputes labels under a different leakage model; traces unchanged.
    void relabel(const aes::LeakageModel &m) {
        model = m;
        for (auto &r : records)
            r.label = static_cast<uint8_t>(aes::label_of(r.plaintext, r.key, m));
    }
};

struct StandardizationStats {
    std::vector<double> mean;
    std::vector<double> sd; // floored at kSdFloor
};

/// One program instance per invocation seed. Unprotected campaigns return a
/// fixed program; protected campaigns re-run the insertion pass per seed.
using ProgramSource = std::function<vm::Program(uint64_t invocation_seed)>;
using ImageSource = std::function<vm::MemoryImage(const aes::Block &plaintext, const aes::Block &key)>;

struct Campaign {
    std::size_t count = 0;
    KeyPolicy key_policy = KeyPolicy::FixedKey;
    aes::Block fixed_key{};
    vm::DeviceConfig device;
    bool recompile_each_run = false;
    uint32_t trace_samples = 1280; // fixed n; windows longer than this fail
    uint64_t seed = 0;
};

/// Runs `count` acquisitions with fresh plaintexts (keys per policy) and pads
/// every captured window with baseline+noise samples to the campaign's fixed
/// n. Per-run seeds derive from (campaign seed, run index), so acquisitions
/// are reproducible and may run concurrently.
inline Dataset acquire(const ProgramSource &program_for_run, const ImageSource &image_for_input,
                       const aes::LeakageModel &model, const Campaign &campaign) {
    if (campaign.count < 1)
        throw Error("campaign count must be >= 1");
    Dataset ds;
    ds.model = model;
    ds.n = campaign.trace_samples;
    ds.key_policy = campaign.key_policy;
    ds.fixed_key = campaign.key_policy == KeyPolicy::FixedKey ? campaign.fixed_key : aes::Block{};
    ds.records.resize(campaign.count);
    ds.samples.resize(campaign.count * static_cast<std::size_t>(ds.n));

    vm::Program fixed_program;
    if (!campaign.recompile_each_run)
        fixed_program = program_for_run(derive_seed(campaign.seed, "compile", 0));

    std::vector<std::string> failures(campaign.count);
    parallel_for(campaign.count, [&](std::size_t run) {
        try {
            Rng input_rng(derive_seed(campaign.seed, "inputs", run));
            AcquisitionRecord rec;
            rec.plaintext = input_rng.bytes<16>();
            rec.key = campaign.key_policy == KeyPolicy::FixedKey ? campaign.fixed_key : input_rng.bytes<16>();
            rec.label = static_cast<uint8_t>(aes::label_of(rec.plaintext, rec.key, model));

            vm::DeviceConfig cfg = campaign.device;
            cfg.rng_seed = derive_seed(campaign.seed, "noise", run);
            vm::MemoryImage image = image_for_input(rec.plaintext, rec.key);
            vm::ExecResult res;
            if (campaign.recompile_each_run) {
                vm::Program prog = program_for_run(derive_seed(campaign.seed, "compile", run));
                res = vm::execute(prog, image, cfg);
            } else {
                res = vm::execute(fixed_program, image, cfg);
            }

            const auto &win = res.trace.samples;
            if (win.size() > ds.n) {
                failures[run] = "trace length " + std::to_string(win.size()) +
                                " exceeds configured cap " + std::to_string(ds.n);
                return;
            }
            float *row = ds.samples.data() + run * static_cast<std::size_t>(ds.n);
            for (std::size_t i = 0; i < win.size(); ++i)
                row[i] = static_cast<float>(win[i]);
            Rng pad_rng(derive_seed(campaign.seed, "pad", run));
            for (std::size_t i = win.size(); i < ds.n; ++i) {
                double v = campaign.device.baseline;
                if (campaign.device.noise_sigma > 0)
                    v += campaign.device.noise_sigma * pad_rng.normal();
                row[i] = static_cast<float>(v);
            }
            ds.records[run] = rec;
        } catch (const std::exception &e) {
            failures[run] = e.what();
        }
    });
    for (const auto &f : failures)
        if (!f.empty())
            throw Error("acquisition failed: " + f);
    return ds;
}

inline StandardizationStats compute_stats(const Dataset &ds) {
    if (ds.size() < 2)
        throw Error("standardization requires at least 2 traces");
    StandardizationStats st;
    st.mean.assign(ds.n, 0.0);
    st.sd.assign(ds.n, 0.0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        auto t = ds.trace(i);
        for (uint32_t j = 0; j < ds.n; ++j)
            st.mean[j] += t[j];
    }
    for (uint32_t j = 0; j < ds.n; ++j)
        st.mean[j] /= static_cast<double>(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        auto t = ds.trace(i);
        for (uint32_t j = 0; j < ds.n; ++j) {
            double d = t[j] - st.mean[j];
            st.sd[j] += d * d;
        }
    }
    for (uint32_t j = 0; j < ds.n; ++j)
        st.sd[j] = std::max(std::sqrt(st.sd[j] / static_cast<double>(ds.size() - 1)), kSdFloor);
    return st;
}

/// Applies stored statistics to a dataset (used on attack sets with the
/// profiling set's statistics).
inline Dataset apply_stats(const Dataset &ds, const StandardizationStats &st) {
    if (st.mean.size() != ds.n)
        throw Error("standardization statistics cover " + std::to_string(st.mean.size()) +
                    " samples, dataset has " + std::to_string(ds.n));
    Dataset out = ds;
    parallel_for(ds.size(), [&](std::size_t i) {
        auto t = out.trace(i);
        for (uint32_t j = 0; j < ds.n; ++j)
            t[j] = static_cast<float>((t[j] - st.mean[j]) / st.sd[j]);
    });
    return out;
}

/// Column-wise z-scoring; degenerate columns are handled by the sd floor.
inline std::pair<Dataset, StandardizationStats> standardize(const Dataset &ds) {
    StandardizationStats st = compute_stats(ds);
    return {apply_stats(ds, st), st};
}

/// Disjoint, exhaustive, seed-deterministic partition.
inline std::pair<Dataset, Dataset> split(const Dataset &ds, std::size_t profiling_count, uint64_t seed) {
    if (profiling_count == 0 || profiling_count >= ds.size())
        throw Error("profiling_count must be in [1, N)");
    std::vector<std::size_t> idx(ds.size());
    for (std::size_t i = 0; i < idx.size(); ++i)
        idx[i] = i;
    Rng rng(seed);
    for (std::size_t i = idx.size() - 1; i > 0; --i)
        std::swap(idx[i], idx[rng.uniform_int(i + 1)]);

    auto take = [&](std::size_t begin, std::size_t end) {
        Dataset part;
        part.model = ds.model;
        part.n = ds.n;
        part.key_policy = ds.key_policy;
        part.fixed_key = ds.fixed_key;
        part.records.reserve(end - begin);
        part.samples.reserve((end - begin) * static_cast<std::size_t>(ds.n));
        for (std::size_t i = begin; i < end; ++i) {
            part.records.push_back(ds.records[idx[i]]);
            auto t = ds.trace(idx[i]);
            part.samples.insert(part.samples.end(), t.begin(), t.end());
        }
        return part;
    };
    return {take(0, profiling_count), take(profiling_count, ds.size())};
}

/// Per-sample Pearson correlation between each column and
/// HW(Sbox(p[b] ^ k[b])) across traces. Zero-variance columns correlate 0 by
/// convention. Intended for fixed-key datasets.
inline std::vector<double> correlation_profile(const Dataset &ds) {
    if (ds.size() < 3)
        throw Error("correlation profile requires at least 3 traces");
    std::vector<double> target(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i)
        target[i] = aes::label_of(ds.records[i].plaintext, ds.records[i].key,
                                  {aes::LeakageKind::Hw, ds.model.byte_index});
    double tm = 0;
    for (double t : target)
        tm += t;
    tm /= static_cast<double>(target.size());
    double tvar = 0;
    for (double t : target)
        tvar += (t - tm) * (t - tm);

    std::vector<double> corr(ds.n, 0.0);
    if (tvar == 0)
        return corr;
    parallel_for(ds.n, [&](std::size_t j) {
        double sm = 0;
        for (std::size_t i = 0; i < ds.size(); ++i)
            sm += ds.samples[i * ds.n + j];
        sm /= static_cast<double>(ds.size());
        double cov = 0, svar = 0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            double d = ds.samples[i * ds.n + j] - sm;
            cov += d * (target[i] - tm);
            svar += d * d;
        }
        corr[j] = svar == 0 ? 0.0 : cov / std::sqrt(svar * tvar);
    });
    return corr;
}

// ---------------------------------------------------------------------------
// SCT1 trace file format (bit-exact):
//   magic "SCT1"; little-endian;
//   header { u32 N, u32 n, u8 leakage_kind, u8 byte_index,
//            16-byte fixed-key-or-zeros, u8 key_policy };
//   N records of { 16-byte plaintext, 16-byte key, u8 label, n x float32 }.
// ---------------------------------------------------------------------------

namespace detail {

template <class T> void put(std::string &out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T)); // little-endian host assumed (checked below)
}

static_assert(std::endian::native == std::endian::little, "SCT1 writer assumes a little-endian host");

template <class T> T get(const std::string &in, std::size_t &pos) {
    if (pos + sizeof(T) > in.size())
        throw Error("truncated SCT1 file");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

} // namespace detail

inline void write_dataset(const std::filesystem::path &path, const Dataset &ds) {
    std::string out;
    out.reserve(64 + ds.size() * (33 + ds.n * 4));
    out += "SCT1";
    detail::put<uint32_t>(out, static_cast<uint32_t>(ds.size()));
    detail::put<uint32_t>(out, ds.n);
    detail::put<uint8_t>(out, static_cast<uint8_t>(ds.model.kind));
    detail::put<uint8_t>(out, static_cast<uint8_t>(ds.model.byte_index));
    out.append(reinterpret_cast<const char *>(ds.fixed_key.data()), 16);
    detail::put<uint8_t>(out, static_cast<uint8_t>(ds.key_policy));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto &r = ds.records[i];
        out.append(reinterpret_cast<const char *>(r.plaintext.data()), 16);
        out.append(reinterpret_cast<const char *>(r.key.data()), 16);
        detail::put<uint8_t>(out, r.label);
        out.append(reinterpret_cast<const char *>(ds.samples.data() + i * ds.n), ds.n * sizeof(float));
    }
    write_file(path, out);
}

inline Dataset read_dataset(const std::filesystem::path &path) {
    std::string in = read_file(path);
    if (in.size() < 31 || in.compare(0, 4, "SCT1") != 0)
        throw Error("not an SCT1 trace file: " + path.string());
    std::size_t pos = 4;
    Dataset ds;
    uint32_t count = detail::get<uint32_t>(in, pos);
    ds.n = detail::get<uint32_t>(in, pos);
    ds.model.kind = static_cast<aes::LeakageKind>(detail::get<uint8_t>(in, pos));
    ds.model.byte_index = detail::get<uint8_t>(in, pos);
    for (auto &b : ds.fixed_key)
        b = static_cast<uint8_t>(detail::get<uint8_t>(in, pos));
    ds.key_policy = static_cast<KeyPolicy>(detail::get<uint8_t>(in, pos));
    ds.records.resize(count);
    ds.samples.resize(static_cast<std::size_t>(count) * ds.n);
    for (uint32_t i = 0; i < count; ++i) {
        auto &r = ds.records[i];
        for (auto &b : r.plaintext)
            b = static_cast<uint8_t>(detail::get<uint8_t>(in, pos));
        for (auto &b : r.key)
            b = static_cast<uint8_t>(detail::get<uint8_t>(in, pos));
        r.label = detail::get<uint8_t>(in, pos);
        if (pos + ds.n * sizeof(float) > in.size())
            throw Error("truncated SCT1 file");
        std::memcpy(ds.samples.data() + static_cast<std::size_t>(i) * ds.n, in.data() + pos, ds.n * sizeof(float));
        pos += ds.n * sizeof(float);
    }
    return ds;
}

} // namespace sidelab::data

#endif
