// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.
//
// A minimal 8-bit register machine with an assembler, cycle-accurate
// execution, a Hamming-weight power model and trigger-windowed trace
// capture. It stands in for a physical target device: every executed cycle
// emits a configurable number of power samples, and the capture window is
// bounded by trigger_high / trigger_low instructions.

#ifndef SIDELAB_VM_HPP
#define SIDELAB_VM_HPP

#include <array>
#include <bit>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sidelab/rng.hpp"
#include "sidelab/util.hpp"

namespace sidelab::vm {

constexpr int kRegisterCount = 32;
constexpr std::size_t kMemorySize = 65536;

/// Annotation comment prefix. ";@noise-slot" is the tag reserved for the
/// compile-time insertion pass; any ";@tag" line is recorded.
constexpr const char *kAnnotationPrefix = ";@";
constexpr const char *kNoiseSlotTag = "noise-slot";

enum class Opcode : uint8_t {
    Mov,
    Ldi,
    Ld,
    St,
    Eor,
    And,
    Or,
    Ori,
    Add,
    Sub,
    In,
    Nop,
    TriggerHigh,
    TriggerLow,
};

enum class SrcKind : uint8_t {
    None,
    Reg,     // src is a register index
    Imm,     // src is an 8-bit immediate (or port number for `in`)
    Addr,    // src is an absolute 16-bit memory address
    RegPair, // src/src_lo form a hi:lo register pair holding a 16-bit address
};

enum class DstKind : uint8_t { None, Reg, Addr };

struct Instruction {
    Opcode op = Opcode::Nop;
    DstKind dst_kind = DstKind::None;
    uint16_t dst = 0; // register index, or memory address for st
    SrcKind src_kind = SrcKind::None;
    uint16_t src = 0;
    uint8_t src_lo = 0; // low register of a RegPair
    uint8_t cycles = 1;

    bool operator==(const Instruction &) const = default;
};

/// Cycle cost table: memory accesses cost 2 cycles, everything else 1.
inline uint8_t cycle_cost(Opcode op) {
    return (op == Opcode::Ld || op == Opcode::St) ? 2 : 1;
}

inline const char *opcode_name(Opcode op) {
    switch (op) {
    case Opcode::Mov: return "mov";
    case Opcode::Ldi: return "ldi";
    case Opcode::Ld: return "ld";
    case Opcode::St: return "st";
    case Opcode::Eor: return "eor";
    case Opcode::And: return "and";
    case Opcode::Or: return "or";
    case Opcode::Ori: return "ori";
    case Opcode::Add: return "add";
    case Opcode::Sub: return "sub";
    case Opcode::In: return "in";
    case Opcode::Nop: return "nop";
    case Opcode::TriggerHigh: return "trigger_high";
    case Opcode::TriggerLow: return "trigger_low";
    }
    return "?";
}

struct Annotation {
    uint32_t index = 0; // instruction boundary the tag precedes (0..size())
    std::string tag;
    bool operator==(const Annotation &) const = default;
};

struct Program {
    std::vector<Instruction> instructions;
    std::vector<Annotation> annotations;
    std::string source_text;

    std::optional<uint32_t> first_index_of(Opcode op) const {
        for (uint32_t i = 0; i < instructions.size(); ++i)
            if (instructions[i].op == op)
                return i;
        return std::nullopt;
    }
};

class AssembleError : public Error {
  public:
    AssembleError(int line, const std::string &what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    int line() const { return line_; }

  private:
    int line_ = 0;
};

namespace detail {

inline bool parse_number(const std::string &tok, long &out) {
    if (tok.empty())
        return false;
    std::size_t pos = 0;
    try {
        if (tok.size() > 2 && tok[0] == '0' && (tok[1] == 'x' || tok[1] == 'X'))
            out = std::stol(tok.substr(2), &pos, 16), pos += 2;
        else
            out = std::stol(tok, &pos, 10);
    } catch (const std::exception &) {
        return false;
    }
    return pos == tok.size();
}

inline uint16_t parse_register(const std::string &tok, int line) {
    if (tok.size() < 2 || (tok[0] != 'r' && tok[0] != 'R'))
        throw AssembleError(line, "expected register, got '" + tok + "'");
    long idx;
    if (!parse_number(tok.substr(1), idx) || idx < 0 || idx >= kRegisterCount)
        throw AssembleError(line, "register out of range: '" + tok + "'");
    return static_cast<uint16_t>(idx);
}

inline uint16_t parse_immediate(const std::string &tok, int line) {
    long v;
    if (!parse_number(tok, v) || v < 0 || v > 0xff)
        throw AssembleError(line, "immediate out of range (0..0xff): '" + tok + "'");
    return static_cast<uint16_t>(v);
}

inline uint16_t parse_address(const std::string &tok, int line) {
    long v;
    if (!parse_number(tok, v) || v < 0 || v > 0xffff)
        throw AssembleError(line, "address out of range (0..0xffff): '" + tok + "'");
    return static_cast<uint16_t>(v);
}

inline bool looks_like_register(const std::string &tok) {
    if (tok.size() < 2 || (tok[0] != 'r' && tok[0] != 'R'))
        return false;
    long idx;
    return parse_number(tok.substr(1), idx);
}

} // namespace detail

/// Assembles one instruction per line. Grammar (documented in the README):
///   mov rd, rs | mov rd, imm      ldi rd, imm        in rd, port
///   ld rd, addr | ld rd, [rh:rl]  st addr, rs        ori rd, imm
///   eor/and/or/add/sub rd, rs|imm nop                trigger_high / trigger_low
/// ';' starts a comment; lines beginning with ";@tag" attach the annotation
/// tag to the next instruction boundary.
inline Program assemble(const std::string &source) {
    Program prog;
    prog.source_text = source;
    int line_no = 0;
    for (const std::string &raw : split(source, '\n')) {
        ++line_no;
        std::string line = trim(raw);
        if (line.empty())
            continue;
        if (line.rfind(kAnnotationPrefix, 0) == 0) {
            prog.annotations.push_back({static_cast<uint32_t>(prog.instructions.size()), trim(line.substr(2))});
            continue;
        }
        if (line[0] == ';')
            continue;
        if (auto sc = line.find(';'); sc != std::string::npos)
            line = trim(line.substr(0, sc));
        if (line.empty())
            continue;

        std::size_t sp = line.find_first_of(" \t");
        std::string mnem = line.substr(0, sp);
        std::string rest = sp == std::string::npos ? "" : trim(line.substr(sp));
        std::vector<std::string> ops;
        if (!rest.empty())
            for (auto &o : split(rest, ','))
                ops.push_back(trim(o));

        auto expect_operands = [&](std::size_t n) {
            if (ops.size() != n)
                throw AssembleError(line_no, std::string(mnem) + " expects " + std::to_string(n) +
                                                 " operand(s), got " + std::to_string(ops.size()));
        };

        Instruction ins;
        if (mnem == "nop") {
            expect_operands(0);
            ins.op = Opcode::Nop;
        } else if (mnem == "trigger_high") {
            expect_operands(0);
            ins.op = Opcode::TriggerHigh;
        } else if (mnem == "trigger_low") {
            expect_operands(0);
            ins.op = Opcode::TriggerLow;
        } else if (mnem == "ldi" || mnem == "ori" || mnem == "in") {
            expect_operands(2);
            ins.op = mnem == "ldi" ? Opcode::Ldi : mnem == "ori" ? Opcode::Ori : Opcode::In;
            ins.dst_kind = DstKind::Reg;
            ins.dst = detail::parse_register(ops[0], line_no);
            ins.src_kind = SrcKind::Imm;
            ins.src = detail::parse_immediate(ops[1], line_no);
        } else if (mnem == "mov" || mnem == "eor" || mnem == "and" || mnem == "or" || mnem == "add" ||
                   mnem == "sub") {
            expect_operands(2);
            ins.op = mnem == "mov"   ? Opcode::Mov
                     : mnem == "eor" ? Opcode::Eor
                     : mnem == "and" ? Opcode::And
                     : mnem == "or"  ? Opcode::Or
                     : mnem == "add" ? Opcode::Add
                                     : Opcode::Sub;
            ins.dst_kind = DstKind::Reg;
            ins.dst = detail::parse_register(ops[0], line_no);
            if (detail::looks_like_register(ops[1])) {
                ins.src_kind = SrcKind::Reg;
                ins.src = detail::parse_register(ops[1], line_no);
            } else {
                ins.src_kind = SrcKind::Imm;
                ins.src = detail::parse_immediate(ops[1], line_no);
            }
        } else if (mnem == "ld") {
            expect_operands(2);
            ins.op = Opcode::Ld;
            ins.dst_kind = DstKind::Reg;
            ins.dst = detail::parse_register(ops[0], line_no);
            const std::string &src = ops[1];
            if (!src.empty() && src.front() == '[') {
                if (src.back() != ']')
                    throw AssembleError(line_no, "unterminated indirect operand: '" + src + "'");
                std::string inner = trim(src.substr(1, src.size() - 2));
                auto colon = inner.find(':');
                if (colon == std::string::npos)
                    throw AssembleError(line_no, "indirect operand must be [rh:rl]: '" + src + "'");
                ins.src_kind = SrcKind::RegPair;
                ins.src = detail::parse_register(trim(inner.substr(0, colon)), line_no);
                ins.src_lo = static_cast<uint8_t>(detail::parse_register(trim(inner.substr(colon + 1)), line_no));
            } else {
                ins.src_kind = SrcKind::Addr;
                ins.src = detail::parse_address(src, line_no);
            }
        } else if (mnem == "st") {
            expect_operands(2);
            ins.op = Opcode::St;
            ins.dst_kind = DstKind::Addr;
            ins.dst = detail::parse_address(ops[0], line_no);
            ins.src_kind = SrcKind::Reg;
            ins.src = detail::parse_register(ops[1], line_no);
        } else {
            throw AssembleError(line_no, "unknown opcode: '" + mnem + "'");
        }
        ins.cycles = cycle_cost(ins.op);
        prog.instructions.push_back(ins);
    }
    return prog;
}

inline std::string format_instruction(const Instruction &ins) {
    auto hex2 = [](uint16_t v) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "0x%02x", v);
        return std::string(buf);
    };
    auto hex4 = [](uint16_t v) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "0x%04x", v);
        return std::string(buf);
    };
    std::string out = opcode_name(ins.op);
    switch (ins.op) {
    case Opcode::Nop:
    case Opcode::TriggerHigh:
    case Opcode::TriggerLow:
        return out;
    case Opcode::St:
        return out + " " + hex4(ins.dst) + ", r" + std::to_string(ins.src);
    default:
        break;
    }
    out += " r" + std::to_string(ins.dst) + ", ";
    switch (ins.src_kind) {
    case SrcKind::Reg:
        out += "r" + std::to_string(ins.src);
        break;
    case SrcKind::Imm:
        out += hex2(ins.src);
        break;
    case SrcKind::Addr:
        out += hex4(ins.src);
        break;
    case SrcKind::RegPair:
        out += "[r" + std::to_string(ins.src) + ":r" + std::to_string(ins.src_lo) + "]";
        break;
    case SrcKind::None:
        break;
    }
    return out;
}

/// Canonical source text; assemble(disassemble(p)) reproduces p's
/// instructions and annotations.
inline std::string disassemble(const Program &prog) {
    std::string out;
    std::size_t next_ann = 0;
    auto anns = prog.annotations; // annotations sorted by index, stable
    std::stable_sort(anns.begin(), anns.end(),
                     [](const Annotation &a, const Annotation &b) { return a.index < b.index; });
    for (uint32_t i = 0; i <= prog.instructions.size(); ++i) {
        while (next_ann < anns.size() && anns[next_ann].index == i)
            out += std::string(kAnnotationPrefix) + anns[next_ann++].tag + "\n";
        if (i < prog.instructions.size())
            out += format_instruction(prog.instructions[i]) + "\n";
    }
    return out;
}

enum class UninitRead : uint8_t { ZeroFill, Fail };

struct DeviceConfig {
    double hw_gain = 1.0;
    double baseline = 0.0;
    double noise_sigma = 1.0;
    int samples_per_cycle = 3; // one processor cycle spans three trace samples
    // Per-bit weighting of the leakage: bit b of a written byte contributes
    // 1 + bit_gain_spread*(7-2b)/7 (bit 0 heaviest, mean weight 1). Zero
    // spread is the pure Hamming-weight model; any spread below 7/31 keeps
    // the power strictly monotone in Hamming weight.
    double bit_gain_spread = 0.2;
    double trigger_low_level = -10.0;
    uint64_t rng_seed = 0;
    uint8_t in_value = 0xff; // constant returned by `in` (status-register stand-in)
    UninitRead uninit_read = UninitRead::ZeroFill;
    uint64_t cycle_budget = 1000000;
};

/// Leakage level of a written byte under the per-bit weighting.
inline double leakage_level(uint8_t value, double bit_gain_spread) {
    double level = 0;
    for (int b = 0; b < 8; ++b)
        if (value & (1u << b))
            level += 1.0 + bit_gain_spread * (7.0 - 2.0 * b) / 7.0;
    return level;
}

/// Initial memory contents for one execution.
struct MemoryImage {
    std::vector<std::pair<uint16_t, uint8_t>> bytes;

    void set(uint16_t addr, uint8_t value) { bytes.emplace_back(addr, value); }
    void set_block(uint16_t addr, std::span<const uint8_t> data) {
        for (std::size_t i = 0; i < data.size(); ++i)
            bytes.emplace_back(static_cast<uint16_t>(addr + i), data[i]);
    }
};

struct RawTrace {
    std::vector<double> samples; // captured window only
    uint64_t cycle_count = 0;    // total cycles executed by the whole program
    std::pair<uint32_t, uint32_t> trigger_window{0, 0};
};

struct MachineState {
    std::array<uint8_t, kRegisterCount> regs{};
    std::vector<uint8_t> memory = std::vector<uint8_t>(kMemorySize, 0);
    std::vector<bool> initialized = std::vector<bool>(kMemorySize, false);

    uint8_t read(uint16_t addr, UninitRead policy) const {
        if (!initialized[addr] && policy == UninitRead::Fail)
            throw Error("uninitialized memory read at 0x" + to_hex(addr).substr(12));
        return memory[addr];
    }
    void write(uint16_t addr, uint8_t value) {
        memory[addr] = value;
        initialized[addr] = true;
    }
};

struct ExecLogEntry {
    uint32_t instruction_index = 0;
    uint64_t cycle_begin = 0;        // global cycle at which the instruction started
    int64_t window_sample_begin = -1; // first captured sample index, -1 if outside window
    uint32_t sample_count = 0;        // captured samples emitted by this instruction
    int written_value = -1;           // byte written this instruction, -1 if none
};

struct ExecResult {
    RawTrace trace;
    MachineState state;
    std::vector<ExecLogEntry> log;
};

/// Executes a program to completion. Power model: every executed cycle emits
/// samples_per_cycle samples valued hw_gain * leakage_level(byte written on
/// that cycle) + baseline + N(0, noise_sigma) — bit-weighted Hamming weight.
/// Writes land on the final cycle of an instruction; earlier cycles and
/// non-writing instructions emit level 0.
/// trigger_high opens the capture window after its own cycle; trigger_low
/// emits its cycle forced to trigger_low_level, then closes the window.
/// Noise is drawn only for captured samples, so two programs with an
/// identical window prefix see identical noise.
inline ExecResult execute(const Program &prog, const MemoryImage &image, const DeviceConfig &config) {
    if (config.samples_per_cycle < 1)
        throw Error("samples_per_cycle must be >= 1");
    ExecResult res;
    MachineState &st = res.state;
    for (auto [addr, value] : image.bytes)
        st.write(addr, value);

    Rng rng(config.rng_seed);
    bool window_open = !prog.first_index_of(Opcode::TriggerHigh).has_value();
    uint64_t cycle = 0;
    auto &samples = res.trace.samples;

    std::array<double, 256> level;
    for (int v = 0; v < 256; ++v)
        level[v] = leakage_level(static_cast<uint8_t>(v), config.bit_gain_spread);

    for (uint32_t idx = 0; idx < prog.instructions.size(); ++idx) {
        const Instruction &ins = prog.instructions[idx];
        ExecLogEntry log{idx, cycle, -1, 0, -1};

        std::optional<uint8_t> written;
        auto operand = [&]() -> uint8_t {
            return ins.src_kind == SrcKind::Reg ? st.regs[ins.src] : static_cast<uint8_t>(ins.src);
        };
        switch (ins.op) {
        case Opcode::Mov:
        case Opcode::Ldi:
            written = operand();
            break;
        case Opcode::Ld: {
            uint16_t addr = ins.src_kind == SrcKind::RegPair
                                ? static_cast<uint16_t>((st.regs[ins.src] << 8) | st.regs[ins.src_lo])
                                : ins.src;
            written = st.read(addr, config.uninit_read);
            break;
        }
        case Opcode::St:
            written = st.regs[ins.src];
            st.write(ins.dst, *written);
            break;
        case Opcode::Eor:
            written = static_cast<uint8_t>(st.regs[ins.dst] ^ operand());
            break;
        case Opcode::And:
            written = static_cast<uint8_t>(st.regs[ins.dst] & operand());
            break;
        case Opcode::Or:
        case Opcode::Ori:
            written = static_cast<uint8_t>(st.regs[ins.dst] | operand());
            break;
        case Opcode::Add:
            written = static_cast<uint8_t>(st.regs[ins.dst] + operand());
            break;
        case Opcode::Sub:
            written = static_cast<uint8_t>(st.regs[ins.dst] - operand());
            break;
        case Opcode::In:
            written = config.in_value;
            break;
        case Opcode::Nop:
        case Opcode::TriggerHigh:
        case Opcode::TriggerLow:
            break;
        }
        if (written && ins.dst_kind == DstKind::Reg)
            st.regs[ins.dst] = *written;
        if (written)
            log.written_value = *written;

        for (uint8_t c = 0; c < ins.cycles; ++c) {
            ++cycle;
            if (cycle > config.cycle_budget)
                throw Error("cycle budget exceeded (" + std::to_string(config.cycle_budget) + " cycles)");
            bool last_cycle = (c == ins.cycles - 1);
            bool captured = window_open && ins.op != Opcode::TriggerHigh;
            if (!captured)
                continue;
            if (log.window_sample_begin < 0)
                log.window_sample_begin = static_cast<int64_t>(samples.size());
            for (int s = 0; s < config.samples_per_cycle; ++s) {
                double value;
                if (ins.op == Opcode::TriggerLow) {
                    value = config.trigger_low_level;
                } else {
                    double hw = (last_cycle && written) ? level[*written] : 0.0;
                    value = config.hw_gain * hw + config.baseline;
                    if (config.noise_sigma > 0)
                        value += config.noise_sigma * rng.normal();
                }
                samples.push_back(value);
                ++log.sample_count;
            }
        }
        if (ins.op == Opcode::TriggerHigh)
            window_open = true;
        else if (ins.op == Opcode::TriggerLow)
            window_open = false;

        res.log.push_back(log);
    }
    res.trace.cycle_count = cycle;
    res.trace.trigger_window = {0, static_cast<uint32_t>(samples.size())};
    return res;
}

/// Mean/sd of the standardized amplitude an instruction contributes when
/// inserted at `position` in `context`, measured against the baseline
/// program's per-sample standardization statistics. `repetitions` runs vary
/// only the sample noise; sd is 0 for a single repetition.
struct AmplitudeProfile {
    double mean = 0;
    double sd = 0;
};

inline AmplitudeProfile measure_instruction_profile(const Instruction &instr, const Program &context,
                                                    uint32_t position, const MemoryImage &image,
                                                    const DeviceConfig &config, int repetitions,
                                                    std::span<const double> column_mean,
                                                    std::span<const double> column_sd) {
    if (column_mean.empty() || column_mean.size() != column_sd.size())
        throw Error("missing standardization statistics for instruction profiling");
    if (position > context.instructions.size())
        throw Error("insertion position out of range");
    if (repetitions < 1)
        throw Error("repetitions must be >= 1");

    Program probe = context;
    probe.instructions.insert(probe.instructions.begin() + position, instr);

    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(repetitions));
    for (int rep = 0; rep < repetitions; ++rep) {
        DeviceConfig cfg = config;
        cfg.rng_seed = derive_seed(config.rng_seed, "instr-profile", static_cast<uint64_t>(rep));
        ExecResult res = execute(probe, image, cfg);
        const ExecLogEntry &entry = res.log[position];
        if (entry.window_sample_begin < 0 || entry.sample_count == 0)
            throw Error("instruction at position " + std::to_string(position) + " is outside the capture window");
        double acc = 0;
        for (uint32_t s = 0; s < entry.sample_count; ++s) {
            std::size_t col = static_cast<std::size_t>(entry.window_sample_begin) + s;
            if (col >= column_mean.size())
                throw Error("standardization statistics do not cover sample " + std::to_string(col));
            acc += (res.trace.samples[col] - column_mean[col]) / column_sd[col];
        }
        values.push_back(acc / entry.sample_count);
    }

    AmplitudeProfile out;
    for (double v : values)
        out.mean += v;
    out.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0;
        for (double v : values)
            ss += (v - out.mean) * (v - out.mean);
        out.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return out;
}

} // namespace sidelab::vm

#endif
