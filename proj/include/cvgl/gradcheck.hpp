#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "cvgl/mixer.hpp"

namespace cvgl {

struct GradcheckEntry {
    std::string name;
    std::size_t coordinates = 0;
    double max_relative_error = 0.0;
};

// Finite-difference validation of the full training objective: B random
// token pairs through one shared mixer into the symmetric InfoNCE loss with a
// learnable temperature. One entry per mixer tensor, then grad_Q, grad_R
// (descriptor gradients of the loss) and tau.
struct GradcheckOptions {
    MixerConfig mixer;
    std::size_t batch = 4;
    std::uint64_t seed = 0;
    double eps = 1e-5;
    double label_smoothing = 0.1;
    // Test hook: perturbs every analytic gradient so the check must fail.
    bool corrupt = false;
};

std::vector<GradcheckEntry> run_gradcheck(const GradcheckOptions& opts);

// Config used by the CLI and acceptance suite: s=8, 4x4 maps (n=16),
// hidden 16, d=4, r=4, L=2.
MixerConfig gradcheck_default_mixer();

void write_gradcheck_table(std::ostream& os, const std::vector<GradcheckEntry>& entries, double tolerance);

} // namespace cvgl
