#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vx::check {

struct SuiteResult {
    std::string name;
    int passed = 0;
    int failed = 0;
    double worst = 0.0;           // largest error the suite observed
    double worst_composed = 0.0;  // gradcheck only: composed-block error
    std::string first_failure;

    bool ok() const { return failed == 0 && passed > 0; }
};

struct Options {
    std::string filter;  // substring match on suite names; empty runs all
    bool sabotage_vjp = false;
    std::uint64_t seed = 1;
    bool quick = false;  // trimmed case counts for unit-test budgets
};

// Finite-difference checks for every differentiable op, then for the full
// attention block on a small scene. Tolerances: 1e-5 per op, 1e-4 composed.
SuiteResult gradcheck_suite(std::uint64_t seed, bool sabotage, bool quick);

// Segment reductions against direct loops, plus point-permutation checks.
SuiteResult scatter_suite(std::uint64_t seed, bool quick);

// Vectorized encode/ffn/decode against the per-voxel reference path.
SuiteResult vsa_suite(std::uint64_t seed, int instances);

// Per-segment softmax columns must sum to one on randomized layouts.
SuiteResult softmax_suite(std::uint64_t seed, int layouts);

std::vector<SuiteResult> run_suites(const Options& opt);

}  // namespace vx::check
