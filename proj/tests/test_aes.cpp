// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sidelab/aes.hpp"

using namespace sidelab;
using namespace sidelab::aes;

TEST_CASE("FIPS-197 reference vector") {
    Block pt = block_from_hex("00112233445566778899aabbccddeeff");
    Block key = block_from_hex("000102030405060708090a0b0c0d0e0f");
    CHECK(block_to_hex(aes128_encrypt(pt, key)) == "69c4e0d86a7b0430d8cdb78070b4c55a");
}

TEST_CASE("sbox and determinism") {
    CHECK(sbox(0x00) == 0x63);
    CHECK(sbox(0x53) == 0xed);
    Block pt{}, key{};
    CHECK(aes128_encrypt(pt, key) == aes128_encrypt(pt, key));
}

TEST_CASE("label_of matches the S-box oracle") {
    Block p{}, k{};
    CHECK(label_of(p, k, {LeakageKind::Lsb, 2}) == 1); // LSB(0x63)
    CHECK(label_of(p, k, {LeakageKind::Hw, 2}) == 4);  // HW(0x63)
}

TEST_CASE("label depends only on the targeted byte xor") {
    Rng rng(11);
    LeakageModel lsb{LeakageKind::Lsb, 2}, hw{LeakageKind::Hw, 2};
    for (int iter = 0; iter < 200; ++iter) {
        Block p = rng.bytes<16>(), k = rng.bytes<16>();
        Block p2 = rng.bytes<16>(), k2 = rng.bytes<16>();
        p2[2] = static_cast<uint8_t>(p[2] ^ k[2] ^ k2[2]); // equal xor at byte 2
        CHECK(label_of(p, k, lsb) == label_of(p2, k2, lsb));
        CHECK(label_of(p, k, hw) == label_of(p2, k2, hw));
    }
}

TEST_CASE("hw labels follow a binomial(8, 1/2) profile") {
    Rng rng(13);
    LeakageModel hw{LeakageKind::Hw, 2};
    std::array<int, 9> hist{};
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        Block p = rng.bytes<16>(), k = rng.bytes<16>();
        int label = label_of(p, k, hw);
        REQUIRE(label >= 0);
        REQUIRE(label <= 8);
        ++hist[static_cast<std::size_t>(label)];
    }
    for (int c = 0; c <= 8; ++c) {
        double binom = 1.0;
        for (int j = 0; j < c; ++j)
            binom = binom * (8 - j) / (j + 1);
        double expect = n * binom / 256.0;
        double sd = std::sqrt(expect * (1.0 - binom / 256.0));
        CHECK(std::abs(hist[static_cast<std::size_t>(c)] - expect) < 5 * sd + 5);
    }
}

TEST_CASE("vm first-round program matches the reference oracle") {
    auto fr = first_round_program();
    vm::DeviceConfig cfg;
    cfg.noise_sigma = 0.0;

    // Exactly one trigger pair wraps the round.
    int highs = 0, lows = 0;
    for (const auto &ins : fr.program.instructions) {
        highs += ins.op == vm::Opcode::TriggerHigh;
        lows += ins.op == vm::Opcode::TriggerLow;
    }
    CHECK(highs == 1);
    CHECK(lows == 1);
    CHECK(*fr.program.first_index_of(vm::Opcode::TriggerHigh) <
          *fr.program.first_index_of(vm::Opcode::TriggerLow));

    SUBCASE("all-zero input") {
        Block p{}, k{};
        auto res = vm::execute(fr.program, memory_image(fr.layout, p, k), cfg);
        CHECK(round_output(res.state, fr.layout) == round1_state(p, k));
    }

    SUBCASE("exhaustive single-byte sweep") {
        for (int v = 0; v < 256; ++v) {
            Block p{}, k{};
            p[0] = static_cast<uint8_t>(v);
            k[5] = static_cast<uint8_t>(255 - v);
            auto res = vm::execute(fr.program, memory_image(fr.layout, p, k), cfg);
            REQUIRE(round_output(res.state, fr.layout) == round1_state(p, k));
        }
    }

    SUBCASE("randomized full-state inputs") {
        Rng rng(17);
        for (int iter = 0; iter < 100; ++iter) {
            Block p = rng.bytes<16>(), k = rng.bytes<16>();
            auto res = vm::execute(fr.program, memory_image(fr.layout, p, k), cfg);
            REQUIRE(round_output(res.state, fr.layout) == round1_state(p, k));
        }
    }
}

TEST_CASE("first-round program never touches the reserved noise register") {
    auto fr = first_round_program();
    for (const auto &ins : fr.program.instructions) {
        if (ins.dst_kind == vm::DstKind::Reg)
            CHECK(ins.dst != 24);
        if (ins.src_kind == vm::SrcKind::Reg)
            CHECK(ins.src != 24);
        if (ins.src_kind == vm::SrcKind::RegPair) {
            CHECK(ins.src != 24);
            CHECK(ins.src_lo != 24);
        }
    }
}

TEST_CASE("first-round trace length is input independent") {
    auto fr = first_round_program();
    vm::DeviceConfig cfg;
    cfg.noise_sigma = 0.0;
    Rng rng(23);
    auto first = vm::execute(fr.program, memory_image(fr.layout, rng.bytes<16>(), rng.bytes<16>()), cfg);
    for (int iter = 0; iter < 20; ++iter) {
        auto res = vm::execute(fr.program, memory_image(fr.layout, rng.bytes<16>(), rng.bytes<16>()), cfg);
        CHECK(res.trace.samples.size() == first.trace.samples.size());
        CHECK(res.trace.cycle_count == first.trace.cycle_count);
    }
    MESSAGE("window samples: ", first.trace.samples.size(), ", total cycles: ", first.trace.cycle_count);
}
