#pragma once

#include <cmath>

#include "cvgl/numerics.hpp"

namespace cvgl {

enum class TemperatureMode { Fixed, Learnable };

inline constexpr double kMinTemperature = 0.01;
inline constexpr double kMaxTemperature = 1.0;

struct LossConfig {
    TemperatureMode temperature_mode = TemperatureMode::Fixed;
    double tau = 0.1;                         // used in fixed mode
    double log_inv_tau = std::log(1.0 / 0.07);  // learnable-mode state
    double label_smoothing = 0.1;

    // Effective temperature for the current mode.
    double temperature() const;
    // Keeps tau within [kMinTemperature, kMaxTemperature] in learnable mode.
    void clamp();
    void validate() const;
};

// Row i of queries matches row i of references. Rows must be unit length.
struct BatchPair {
    Matrix queries;     // B x dim, ground side
    Matrix references;  // B x dim, satellite side

    void validate() const;
};

Matrix similarity_logits(const BatchPair& batch, double tau);

struct LossResult {
    double loss = 0.0;
    Matrix grad_queries;
    Matrix grad_references;
    double grad_tau = 0.0;  // d loss / d tau
};

// Mean of the ground->satellite and satellite->ground smoothed cross-entropies.
LossResult symmetric_infonce(const BatchPair& batch, const LossConfig& cfg);

// Same computation on arbitrary (not necessarily unit) rows; used where
// inputs are perturbed off the sphere, e.g. finite differences.
LossResult symmetric_infonce_raw(const Matrix& queries, const Matrix& references, double tau,
                                 double label_smoothing);

// Finite-difference check of grad_Q, grad_R and (learnable mode) the
// log-inverse-temperature gradient. Returns the max relative error.
double loss_gradient_check(const LossConfig& cfg, const BatchPair& batch, double eps = 1e-5);

} // namespace cvgl
