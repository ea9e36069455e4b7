#pragma once

#include <functional>
#include <vector>

#include "vb/nn/tensor.hpp"

namespace vb::nn {

struct GradCheckInput {
    Shape shape;
    std::vector<double> value;
};

struct GradCheckReport {
    double max_rel_err = 0.0; // worst relative disagreement across all elements
    int worst_input = -1;
    std::int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Compares reverse-mode gradients against central finite differences.
//
// `build` must construct the loss (a scalar tensor) from the given input
// tensors on the given tape, deterministically: called once with tracked
// leaves for the analytic pass and then twice per element with perturbed
// constants for the numeric pass.
//
// Per element the relative error is |a - n| / max(|a|, |n|); disagreements
// below `abs_floor` count as zero so that near-zero gradients do not blow
// up the ratio.
GradCheckReport grad_check(
    const std::vector<GradCheckInput>& inputs,
    const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& build,
    double h = 1e-5, double abs_floor = 1e-7);

} // namespace vb::nn
