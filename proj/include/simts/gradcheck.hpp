#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace simts {

/// One named finite-difference check; `run` builds random inputs and returns
/// the max relative error reported by grad_check.
struct GradCheckCase {
    std::string name;
    std::function<double(std::mt19937_64&)> run;
};

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0.0;
};

/// Every differentiable op plus the SimTS losses on a tiny model
/// (C=2, K=8, T=16, C′=8).
std::vector<GradCheckCase> default_gradcheck_cases();

std::vector<GradCheckResult> run_gradcheck(std::uint64_t seed, const std::vector<GradCheckCase>& cases);

inline constexpr double kGradCheckTolerance = 1e-4;

}  // namespace simts
