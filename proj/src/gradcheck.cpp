#include "cvgl/gradcheck.hpp"

#include <algorithm>
#include <iomanip>
#include <ostream>

#include "cvgl/loss.hpp"
#include "cvgl/rng.hpp"

namespace cvgl {

MixerConfig gradcheck_default_mixer() {
    MixerConfig c;
    c.num_maps = 8;
    c.map_height = 4;
    c.map_width = 4;
    c.hidden_dim = 16;
    c.out_depth = 4;
    c.out_rows = 4;
    c.num_blocks = 2;
    return c;
}

namespace {

struct Objective {
    const MixerConfig& cfg;
    const std::vector<Matrix>& ground;
    const std::vector<Matrix>& sat;
    double label_smoothing;

    Matrix encode(const std::vector<Matrix>& tokens, const MixerParams& p) const {
        Matrix out(tokens.size(), cfg.descriptor_dim());
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const auto d = mixer_forward(tokens[i], p, cfg);
            std::copy(d.begin(), d.end(), out.row(i).begin());
        }
        return out;
    }

    double loss(const MixerParams& p, double tau) const {
        return symmetric_infonce_raw(encode(ground, p), encode(sat, p), tau, label_smoothing).loss;
    }
};

} // namespace

std::vector<GradcheckEntry> run_gradcheck(const GradcheckOptions& opts) {
    const MixerConfig& cfg = opts.mixer;
    cfg.validate();
    Rng rng(opts.seed);
    MixerParams params = MixerParams::init(cfg, rng.next_u64());
    std::vector<Matrix> ground;
    std::vector<Matrix> sat;
    for (std::size_t i = 0; i < opts.batch; ++i) {
        for (auto* side : {&ground, &sat}) {
            Matrix t(cfg.n(), cfg.num_maps);
            for (double& v : t.data()) v = rng.normal();
            side->push_back(std::move(t));
        }
    }
    LossConfig loss_cfg;
    loss_cfg.temperature_mode = TemperatureMode::Learnable;
    loss_cfg.label_smoothing = opts.label_smoothing;
    const double tau = loss_cfg.temperature();

    // Analytic pass.
    std::vector<MixerCache> gc;
    std::vector<MixerCache> sc;
    BatchPair batch{Matrix(opts.batch, cfg.descriptor_dim()), Matrix(opts.batch, cfg.descriptor_dim())};
    for (std::size_t i = 0; i < opts.batch; ++i) {
        gc.push_back(mixer_forward_cached(ground[i], params, cfg));
        sc.push_back(mixer_forward_cached(sat[i], params, cfg));
        std::copy(gc[i].descriptor.begin(), gc[i].descriptor.end(), batch.queries.row(i).begin());
        std::copy(sc[i].descriptor.begin(), sc[i].descriptor.end(), batch.references.row(i).begin());
    }
    const LossResult lr = symmetric_infonce(batch, loss_cfg);
    MixerParams total = MixerParams::zeros(cfg);
    auto accumulate = [&](const MixerGradients& g) {
        auto dst = total.tensors();
        const auto src = g.params.tensors();
        for (std::size_t t = 0; t < dst.size(); ++t)
            for (std::size_t k = 0; k < dst[t]->size(); ++k) dst[t]->data()[k] += src[t]->data()[k];
    };
    for (std::size_t i = 0; i < opts.batch; ++i) {
        accumulate(mixer_backward(gc[i], params, cfg, lr.grad_queries.row(i)));
        accumulate(mixer_backward(sc[i], params, cfg, lr.grad_references.row(i)));
    }

    auto perturbed = [&](std::vector<double> g) {
        if (opts.corrupt)
            for (double& v : g) v = v * 1.5 + 1e-3;
        return g;
    };

    std::vector<GradcheckEntry> out;
    const Objective obj{cfg, ground, sat, opts.label_smoothing};
    const auto names = params.tensor_names();
    const auto analytic = std::as_const(total).tensors();
    for (std::size_t t = 0; t < names.size(); ++t) {
        const Matrix base = *params.tensors()[t];
        MixerParams work = params;
        Matrix* target = work.tensors()[t];
        auto f = [&](std::span<const double> x) {
            std::copy(x.begin(), x.end(), target->data().begin());
            return obj.loss(work, tau);
        };
        const auto g = perturbed({analytic[t]->data().begin(), analytic[t]->data().end()});
        out.push_back({names[t], base.size(), finite_diff_check(f, base.data(), g, opts.eps)});
    }

    // Descriptor-level gradients of the loss, and the temperature.
    const Matrix q0 = batch.queries;
    const Matrix r0 = batch.references;
    {
        auto f = [&](std::span<const double> x) {
            Matrix q(q0.rows(), q0.cols(), {x.begin(), x.end()});
            return symmetric_infonce_raw(q, r0, tau, opts.label_smoothing).loss;
        };
        const auto g = perturbed({lr.grad_queries.data().begin(), lr.grad_queries.data().end()});
        out.push_back({"grad_Q", q0.size(), finite_diff_check(f, q0.data(), g, opts.eps)});
    }
    {
        auto f = [&](std::span<const double> x) {
            Matrix r(r0.rows(), r0.cols(), {x.begin(), x.end()});
            return symmetric_infonce_raw(q0, r, tau, opts.label_smoothing).loss;
        };
        const auto g = perturbed({lr.grad_references.data().begin(), lr.grad_references.data().end()});
        out.push_back({"grad_R", r0.size(), finite_diff_check(f, r0.data(), g, opts.eps)});
    }
    {
        auto f = [&](std::span<const double> x) { return symmetric_infonce_raw(q0, r0, x[0], opts.label_smoothing).loss; };
        const std::vector<double> p{tau};
        const auto g = perturbed({lr.grad_tau});
        out.push_back({"tau", 1, finite_diff_check(f, p, g, opts.eps * tau)});
    }
    return out;
}

void write_gradcheck_table(std::ostream& os, const std::vector<GradcheckEntry>& entries, double tolerance) {
    const auto flags = os.flags();
    os << std::left << std::setw(12) << "tensor" << std::right << std::setw(8) << "coords" << std::setw(16)
       << "max_rel_err" << "  status\n";
    for (const auto& e : entries) {
        os << std::left << std::setw(12) << e.name << std::right << std::setw(8) << e.coordinates << std::setw(16)
           << std::scientific << std::setprecision(3) << e.max_relative_error << "  "
           << (e.max_relative_error < tolerance ? "ok" : "FAIL") << '\n';
        os.unsetf(std::ios::floatfield);
    }
    os.flags(flags);
}

} // namespace cvgl
