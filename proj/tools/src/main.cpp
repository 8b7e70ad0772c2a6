// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include <string>
#include <vector>

#include "commands.hpp"

int main(int argc, char** argv) {
  return dkl::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
