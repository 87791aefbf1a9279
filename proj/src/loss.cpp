#include "cvgl/loss.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "cvgl/error.hpp"

namespace cvgl {

double LossConfig::temperature() const {
    if (temperature_mode == TemperatureMode::Fixed) return tau;
    return std::exp(-log_inv_tau);
}

void LossConfig::clamp() {
    if (temperature_mode != TemperatureMode::Learnable) return;
    // tau = exp(-log_inv_tau) in [min, max]  <=>  log_inv_tau in [-ln max, -ln min]
    log_inv_tau = std::clamp(log_inv_tau, -std::log(kMaxTemperature), -std::log(kMinTemperature));
}

void LossConfig::validate() const {
    if (!(temperature() > 0.0) || !std::isfinite(temperature())) {
        throw UsageError("loss: temperature must be positive and finite");
    }
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
        throw UsageError("loss: label_smoothing must be in [0,1)");
    }
}

void BatchPair::validate() const {
    if (!queries.same_shape(references)) {
        throw ShapeError("batch: queries " + queries.shape_str() + " vs references " +
                         references.shape_str());
    }
    if (queries.rows() < 2) throw ShapeError("batch: contrastive loss needs at least 2 pairs");
    for (const Matrix* m : {&queries, &references}) {
        for (std::size_t i = 0; i < m->rows(); ++i) {
            const double norm = l2_norm(m->row(i));
            if (std::abs(norm - 1.0) > 1e-6) {
                throw NumericError("batch: row " + std::to_string(i) + " has norm " +
                                   std::to_string(norm) + ", expected unit descriptors");
            }
        }
    }
}

Matrix similarity_logits(const BatchPair& batch, double tau) {
    if (!(tau > 0.0)) throw UsageError("similarity_logits: tau must be positive");
    batch.validate();
    Matrix logits = matmul_nt(batch.queries, batch.references);
    for (double& v : logits.data()) v /= tau;
    return logits;
}

namespace {

// Writes softmax(x) into p and returns log-sum-exp(x).
double softmax_into(std::span<const double> x, std::span<double> p) {
    const double mx = *std::max_element(x.begin(), x.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
        p[j] = std::exp(x[j] - mx);
        sum += p[j];
    }
    for (double& v : p) v /= sum;
    return mx + std::log(sum);
}

} // namespace

LossResult symmetric_infonce_raw(const Matrix& queries, const Matrix& references, double tau,
                                 double label_smoothing) {
    if (!queries.same_shape(references)) {
        throw ShapeError("infonce: queries " + queries.shape_str() + " vs references " +
                         references.shape_str());
    }
    if (!(tau > 0.0)) throw UsageError("infonce: tau must be positive");
    const std::size_t b = queries.rows();
    if (b < 2) throw ShapeError("infonce: need at least 2 pairs");

    const double on_target = 1.0 - label_smoothing;
    const double off_target = label_smoothing / static_cast<double>(b - 1);
    auto target = [&](std::size_t i, std::size_t j) { return i == j ? on_target : off_target; };

    Matrix logits = matmul_nt(queries, references);
    for (double& v : logits.data()) v /= tau;

    // Row direction (ground -> satellite).
    Matrix p_rows(b, b);
    double ce_rows = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double lse = softmax_into(logits.row(i), p_rows.row(i));
        for (std::size_t j = 0; j < b; ++j) ce_rows -= target(i, j) * (logits(i, j) - lse);
    }
    // Column direction (satellite -> ground) on the transposed logits.
    const Matrix logits_t = transpose(logits);
    Matrix p_cols_t(b, b);
    double ce_cols = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
        const double lse = softmax_into(logits_t.row(j), p_cols_t.row(j));
        for (std::size_t i = 0; i < b; ++i) ce_cols -= target(j, i) * (logits_t(j, i) - lse);
    }
    const double inv_b = 1.0 / static_cast<double>(b);

    LossResult out;
    out.loss = 0.5 * (ce_rows + ce_cols) * inv_b;

    // d loss / d logit_ij
    Matrix g(b, b);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            g(i, j) = 0.5 * inv_b * ((p_rows(i, j) - target(i, j)) + (p_cols_t(j, i) - target(i, j)));
        }
    }
    double grad_tau = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) grad_tau -= g.data()[k] * logits.data()[k];
    out.grad_tau = grad_tau / tau;

    out.grad_queries = matmul(g, references);
    out.grad_references = matmul_tn(g, queries);
    for (double& v : out.grad_queries.data()) v /= tau;
    for (double& v : out.grad_references.data()) v /= tau;
    return out;
}

LossResult symmetric_infonce(const BatchPair& batch, const LossConfig& cfg) {
    cfg.validate();
    batch.validate();
    return symmetric_infonce_raw(batch.queries, batch.references, cfg.temperature(),
                                 cfg.label_smoothing);
}

double loss_gradient_check(const LossConfig& cfg, const BatchPair& batch, double eps) {
    cfg.validate();
    batch.validate();
    const bool learnable = cfg.temperature_mode == TemperatureMode::Learnable;
    const std::size_t b = batch.queries.rows();
    const std::size_t dim = batch.queries.cols();
    const std::size_t block = b * dim;

    std::vector<double> params;
    params.reserve(2 * block + 1);
    params.insert(params.end(), batch.queries.data().begin(), batch.queries.data().end());
    params.insert(params.end(), batch.references.data().begin(), batch.references.data().end());
    if (learnable) params.push_back(cfg.temperature());

    const LossResult analytic = symmetric_infonce(batch, cfg);
    std::vector<double> grads;
    grads.reserve(params.size());
    grads.insert(grads.end(), analytic.grad_queries.data().begin(), analytic.grad_queries.data().end());
    grads.insert(grads.end(), analytic.grad_references.data().begin(),
                 analytic.grad_references.data().end());
    if (learnable) grads.push_back(analytic.grad_tau);

    const double fixed_tau = cfg.temperature();
    auto f = [&](std::span<const double> p) {
        Matrix q(b, dim, std::vector<double>(p.begin(), p.begin() + block));
        Matrix r(b, dim, std::vector<double>(p.begin() + block, p.begin() + 2 * block));
        const double tau = learnable ? p[2 * block] : fixed_tau;
        return symmetric_infonce_raw(q, r, tau, cfg.label_smoothing).loss;
    };
    return finite_diff_check(f, params, grads, eps);
}

} // namespace cvgl
