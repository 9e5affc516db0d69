// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.
//
// CLI surface over the pipeline stages. Parsing lives here so tests can run
// commands in-process; tools/main.cpp is a thin argv wrapper.

#ifndef SIDELAB_CLI_HPP
#define SIDELAB_CLI_HPP

#include <CLI11.hpp>

#include <iostream>

#include "sidelab/pipeline.hpp"

namespace sidelab::cli {

inline int run(std::vector<std::string> args) {
    CLI::App app{"sidelab: attack and defend a simulated leaky AES device"};
    app.require_subcommand(1);

    std::string config_file;
    std::string out_dir = "out";
    uint64_t seed = 1;
    unsigned threads = 0;
    app.add_option("--config", config_file, "flat key=value configuration file");
    app.add_option("--out", out_dir, "output directory")->envname("SIDELAB_OUT");
    app.add_option("--seed", seed, "master seed; every stage derives from it");
    app.add_option("--threads", threads, "worker threads (0 = hardware default)");

    std::string capture_variant = "unprotected";
    auto *capture = app.add_subcommand("capture", "acquire a trace dataset");
    capture->add_option("--variant", capture_variant, "unprotected or protected");

    std::string train_variant = "unprotected";
    auto *train = app.add_subcommand("train", "train the configured models");
    train->add_option("--variant", train_variant, "unprotected or protected");

    std::string attack_model = "mlp9", attack_variant = "unprotected";
    auto *attack = app.add_subcommand("attack", "rank/accuracy report for a trained model");
    attack->add_option("--model", attack_model, "model name (mlp2/mlp9/cnn2/cnn9/ta2/ta9)");
    attack->add_option("--variant", attack_variant, "unprotected or protected");

    std::string mine_model = "mlp2";
    auto *mine = app.add_subcommand("mine", "mine one-pixel perturbations against a trained model");
    mine->add_option("--model", mine_model, "model name");

    auto *locate = app.add_subcommand("locate", "find noise insertion points in the program");
    auto *select = app.add_subcommand("select", "select noise instructions matching mined amplitudes");
    auto *protect = app.add_subcommand("protect", "emit the protected program bundle");
    auto *evaluate = app.add_subcommand("evaluate", "full protected-vs-unprotected comparison");
    auto *study = app.add_subcommand("study-naive", "per-trace adversarial conversion study");
    auto *overhead = app.add_subcommand("overhead", "execution-time overhead table");

    // CLI11 wants argv order reversed.
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError &e) {
        return app.exit(e);
    }

    try {
        pipeline::Context ctx;
        if (!config_file.empty())
            ctx.config = pipeline::Config::from_file(config_file);
        ctx.out = out_dir;
        ctx.master_seed = seed;
        if (threads > 0)
            thread_count() = threads;

        if (capture->parsed())
            pipeline::stage_capture(ctx, capture_variant);
        else if (train->parsed())
            pipeline::stage_train(ctx, train_variant);
        else if (attack->parsed())
            pipeline::stage_attack(ctx, attack_model, attack_variant);
        else if (mine->parsed())
            pipeline::stage_mine(ctx, mine_model);
        else if (locate->parsed())
            pipeline::stage_locate(ctx);
        else if (select->parsed())
            pipeline::stage_select(ctx);
        else if (protect->parsed())
            pipeline::stage_protect(ctx);
        else if (evaluate->parsed())
            pipeline::stage_evaluate(ctx);
        else if (study->parsed())
            pipeline::stage_study_naive(ctx);
        else if (overhead->parsed())
            pipeline::stage_overhead(ctx);
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace sidelab::cli

#endif
