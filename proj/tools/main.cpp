// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.

#include "sidelab/cli.hpp"

int main(int argc, char **argv) {
    return sidelab::cli::run({argv + 1, argv + argc});
}
