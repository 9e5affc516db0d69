// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.
//
// Reference AES-128 (FIPS-197), leakage-model labeling, and generation of
// the first-round assembly program that runs on the simulated device.

#ifndef SIDELAB_AES_HPP
#define SIDELAB_AES_HPP

#include <array>
#include <bit>
#include <cstdint>
#include <string>

#include "sidelab/vm.hpp"

namespace sidelab::aes {

using Block = std::array<uint8_t, 16>;

inline constexpr std::array<uint8_t, 256> kSbox = {
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
};

inline uint8_t sbox(uint8_t v) { return kSbox[v]; }

inline int hamming_weight(uint8_t v) { return std::popcount(v); }

inline uint8_t xtime(uint8_t a) {
    return static_cast<uint8_t>((a << 1) ^ ((a & 0x80) ? 0x1b : 0x00));
}

/// 176-byte expanded key schedule.
inline std::array<uint8_t, 176> key_schedule(const Block &key) {
    std::array<uint8_t, 176> w{};
    std::copy(key.begin(), key.end(), w.begin());
    uint8_t rcon = 0x01;
    for (int i = 16; i < 176; i += 4) {
        uint8_t t[4] = {w[i - 4], w[i - 3], w[i - 2], w[i - 1]};
        if (i % 16 == 0) {
            uint8_t tmp = t[0];
            t[0] = static_cast<uint8_t>(sbox(t[1]) ^ rcon);
            t[1] = sbox(t[2]);
            t[2] = sbox(t[3]);
            t[3] = sbox(tmp);
            rcon = xtime(rcon);
        }
        for (int j = 0; j < 4; ++j)
            w[i + j] = static_cast<uint8_t>(w[i - 16 + j] ^ t[j]);
    }
    return w;
}

namespace detail {

inline void sub_bytes(Block &s) {
    for (auto &b : s)
        b = sbox(b);
}

// State bytes are column-major per FIPS-197: s[r][c] = block[r + 4c].
inline void shift_rows(Block &s) {
    Block t = s;
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c)
            s[r + 4 * c] = t[r + 4 * ((c + r) % 4)];
}

inline void mix_columns(Block &s) {
    for (int c = 0; c < 4; ++c) {
        uint8_t *col = &s[4 * c];
        uint8_t t = static_cast<uint8_t>(col[0] ^ col[1] ^ col[2] ^ col[3]);
        uint8_t s0 = col[0];
        for (int r = 0; r < 4; ++r) {
            uint8_t next = (r == 3) ? s0 : col[r + 1];
            col[r] = static_cast<uint8_t>(col[r] ^ t ^ xtime(static_cast<uint8_t>(col[r] ^ next)));
        }
    }
}

inline void add_round_key(Block &s, const uint8_t *rk) {
    for (int i = 0; i < 16; ++i)
        s[i] ^= rk[i];
}

} // namespace detail

/// FIPS-197 AES-128 encryption.
inline Block aes128_encrypt(const Block &plaintext, const Block &key) {
    auto w = key_schedule(key);
    Block s = plaintext;
    detail::add_round_key(s, &w[0]);
    for (int round = 1; round <= 9; ++round) {
        detail::sub_bytes(s);
        detail::shift_rows(s);
        detail::mix_columns(s);
        detail::add_round_key(s, &w[16 * round]);
    }
    detail::sub_bytes(s);
    detail::shift_rows(s);
    detail::add_round_key(s, &w[160]);
    return s;
}

/// State after the first-round AddRoundKey, SubBytes, ShiftRows and
/// MixColumns (before the round-1 key addition) — the reference oracle for
/// the VM program.
inline Block round1_state(const Block &plaintext, const Block &key) {
    Block s = plaintext;
    detail::add_round_key(s, key.data());
    detail::sub_bytes(s);
    detail::shift_rows(s);
    detail::mix_columns(s);
    return s;
}

enum class LeakageKind : uint8_t { Lsb = 0, Hw = 1 };

struct LeakageModel {
    LeakageKind kind = LeakageKind::Hw;
    int byte_index = 2; // zero-based; "the 3rd key byte"

    int class_count() const { return kind == LeakageKind::Lsb ? 2 : 9; }
    bool operator==(const LeakageModel &) const = default;
};

/// Class label of a trace: LSB or HW of Sbox(p[b] ^ k[b]).
inline int label_of(const Block &plaintext, const Block &key, const LeakageModel &model) {
    uint8_t v = sbox(static_cast<uint8_t>(plaintext[model.byte_index] ^ key[model.byte_index]));
    return model.kind == LeakageKind::Lsb ? (v & 1) : hamming_weight(v);
}

// Memory map of the generated first-round program. The S-box page and the
// xtime mask page are page-aligned so an indirect load through [r27:r26]
// indexes them with a single high-byte setup.
struct FirstRoundLayout {
    uint16_t plaintext_addr = 0x0100;
    uint16_t key_addr = 0x0110;
    uint16_t shifted_addr = 0x0120; // SubBytes output in ShiftRows order
    uint16_t output_addr = 0x0130;  // MixColumns output
    uint8_t sbox_page = 0x02;
    uint8_t mask_page = 0x03; // xtime reduction mask: [0x00]=0x00, [0x80]=0x1b
};

struct FirstRoundProgram {
    vm::Program program;
    FirstRoundLayout layout;
};

struct FirstRoundOptions {
    FirstRoundLayout layout;
    // r24 is reserved for inserted noise instructions and never touched by
    // the generated code; r26/r27 form the indirect pointer pair.
    int reserved_register = 24;
};

/// Emits straight-line VM assembly for the first AES round, bracketed by a
/// trigger pair. AddRoundKey and SubBytes run per byte; SubBytes results are
/// stored in ShiftRows order; MixColumns uses xtime with a conditional-free
/// mask lookup so the cycle count is input-independent.
inline FirstRoundProgram first_round_program(const FirstRoundOptions &options = {}) {
    const FirstRoundLayout &L = options.layout;
    std::string src;
    auto emit = [&src](const std::string &line) { src += line + "\n"; };
    auto hex2 = [](unsigned v) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "0x%02x", v);
        return std::string(buf);
    };
    auto hex4 = [](unsigned v) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "0x%04x", v);
        return std::string(buf);
    };

    emit("; aes-128 first round (AddRoundKey, SubBytes, ShiftRows, MixColumns)");
    emit("ldi r27, " + hex2(L.sbox_page));
    emit("trigger_high");
    for (int i = 0; i < 16; ++i) {
        int r = i % 4, c = i / 4;
        int shifted_slot = r + 4 * ((c - r + 4) % 4); // position after ShiftRows
        emit("ld r0, " + hex4(L.plaintext_addr + i));
        emit("ld r1, " + hex4(L.key_addr + i));
        emit("eor r0, r1");
        emit("mov r26, r0");
        emit("ld r2, [r27:r26]");
        emit("st " + hex4(L.shifted_addr + shifted_slot) + ", r2");
    }
    emit("ldi r27, " + hex2(L.mask_page));
    for (int c = 0; c < 4; ++c) {
        for (int r = 0; r < 4; ++r)
            emit("ld r" + std::to_string(r) + ", " + hex4(L.shifted_addr + 4 * c + r));
        emit("mov r4, r0");
        emit("eor r4, r1");
        emit("eor r4, r2");
        emit("eor r4, r3");
        for (int r = 0; r < 4; ++r) {
            int next = (r + 1) % 4;
            emit("mov r5, r" + std::to_string(r));
            emit("eor r5, r" + std::to_string(next));
            emit("mov r26, r5");
            emit("and r26, 0x80");
            emit("ld r6, [r27:r26]");
            emit("add r5, r5");
            emit("eor r5, r6");
            emit("eor r5, r" + std::to_string(r));
            emit("eor r5, r4");
            emit("st " + hex4(L.output_addr + 4 * c + r) + ", r5");
        }
    }
    emit("trigger_low");

    FirstRoundProgram out;
    out.program = vm::assemble(src);
    out.layout = L;
    return out;
}

/// Memory image holding the inputs and lookup tables the program needs.
inline vm::MemoryImage memory_image(const FirstRoundLayout &layout, const Block &plaintext, const Block &key) {
    vm::MemoryImage img;
    img.set_block(layout.plaintext_addr, plaintext);
    img.set_block(layout.key_addr, key);
    img.set_block(static_cast<uint16_t>(layout.sbox_page << 8), kSbox);
    img.set(static_cast<uint16_t>(layout.mask_page << 8), 0x00);
    img.set(static_cast<uint16_t>((layout.mask_page << 8) | 0x80), 0x1b);
    return img;
}

/// Round-1 output read back from the machine after execution.
inline Block round_output(const vm::MachineState &state, const FirstRoundLayout &layout) {
    Block out{};
    for (int i = 0; i < 16; ++i)
        out[i] = state.memory[layout.output_addr + i];
    return out;
}

inline Block block_from_hex(const std::string &hex) {
    if (hex.size() != 32)
        throw Error("block hex string must have 32 characters");
    Block out{};
    auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9')
            return c - '0';
        if (c >= 'a' && c <= 'f')
            return c - 'a' + 10;
        if (c >= 'A' && c <= 'F')
            return c - 'A' + 10;
        throw Error("invalid hex digit");
    };
    for (int i = 0; i < 16; ++i)
        out[i] = static_cast<uint8_t>((nib(hex[2 * i]) << 4) | nib(hex[2 * i + 1]));
    return out;
}

inline std::string block_to_hex(const Block &b) {
    static const char *digits = "0123456789abcdef";
    std::string out;
    out.reserve(32);
    for (uint8_t v : b) {
        out.push_back(digits[v >> 4]);
        out.push_back(digits[v & 0xf]);
    }
    return out;
}

} // namespace sidelab::aes

#endif
