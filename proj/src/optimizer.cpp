#include "tkfac/optimizer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

namespace tkfac {

std::pair<Matrix, Matrix> damp_normal(const FisherFactors& f, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("damp_normal: negative lambda");
    const double sd = std::sqrt(f.delta);
    const double sl = std::sqrt(lambda);
    Matrix phi_hat = f.phi * sd;
    Matrix psi_hat = f.psi * sd;
    for (std::size_t i = 0; i < phi_hat.rows(); ++i) phi_hat(i, i) += sl;
    for (std::size_t i = 0; i < psi_hat.rows(); ++i) psi_hat(i, i) += sl;
    return {std::move(phi_hat), std::move(psi_hat)};
}

NewDampResult damp_new_conv(const FisherFactors& f, double nu, int input_dim, int output_dim) {
    if (!(nu > 0.0)) throw std::invalid_argument("damp_new_conv: nu must be positive");
    NewDampResult r;
    r.delta_clamped = std::max(nu, f.delta);
    const double sd = std::sqrt(r.delta_clamped);
    r.phi_hat = f.phi * sd;
    r.psi_hat = f.psi * sd;
    const double add_in = r.delta_clamped / (double)input_dim;
    const double add_out = r.delta_clamped / (double)output_dim;
    for (std::size_t i = 0; i < r.phi_hat.rows(); ++i) r.phi_hat(i, i) += add_in;
    for (std::size_t i = 0; i < r.psi_hat.rows(); ++i) r.psi_hat(i, i) += add_out;
    return r;
}

double fc_beta_expansion(const Vector& delta, const Vector& delta_clamped) {
    if (delta.empty() || delta.size() != delta_clamped.size())
        throw std::invalid_argument("fc_beta_expansion: bad inputs");
    double beta = 0.0;
    bool any = false;
    for (std::size_t l = 0; l < delta.size(); ++l) {
        if (!(delta[l] > 0.0)) continue;  // degenerate layer, skip in the max
        beta = std::max(beta, delta_clamped[l] / delta[l]);
        any = true;
    }
    if (!any) throw DegenerateBlock("fc_beta_expansion: all layer deltas are zero");
    return beta;
}

Matrix ema_update(const Matrix& old_factor, const Matrix& fresh, double epsilon) {
    if (epsilon < 0.0 || epsilon >= 1.0) throw std::invalid_argument("ema_update: epsilon in [0,1)");
    Matrix out = old_factor * epsilon;
    Matrix f = fresh * (1.0 - epsilon);
    out += f;
    return out;
}

Matrix invert_factor(const Matrix& m) {
    double mean_diag = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) mean_diag += std::abs(m(i, i));
    mean_diag /= (double)m.rows();
    double jitter = 0.0;
    const double cap = 1e-6 * mean_diag;
    for (;;) {
        try {
            return sym_inverse(m, jitter);
        } catch (const SingularMatrixError&) {
            if (jitter >= cap || !(mean_diag > 0.0))
                throw;
            jitter = jitter == 0.0 ? 1e-12 * mean_diag : jitter * 10.0;
            jitter = std::min(jitter, cap);
        }
    }
}

void natural_gradient_step(Matrix& weight, Matrix& momentum, const Matrix& grad,
                           const LayerDampedFactors& factors, double alpha, double tau,
                           long iteration, int t_inv) {
    if (!factors.initialized || factors.inverse_iteration < 0 ||
        iteration - factors.inverse_iteration >= t_inv)
        throw StaleInverse("natural_gradient_step: inverses older than T_INV at iteration " +
                           std::to_string(iteration));
    // Matrix identity form of (phi_inv (x) psi_inv) vec(grad).
    Matrix delta_w = matmul(matmul(factors.psi_inv, grad), factors.phi_inv);
    delta_w *= -alpha;
    momentum *= tau;
    momentum += delta_w;
    weight += momentum;
}

void sgdm_step(Matrix& weight, Matrix& momentum, const Matrix& grad, double alpha, double tau) {
    momentum *= tau;
    momentum += grad * (-alpha);
    weight += momentum;
}

void adam_step(Matrix& weight, Matrix& m, Matrix& v, long t, const Matrix& grad, double alpha,
               double beta1, double beta2, double eps) {
    const double bc1 = 1.0 - std::pow(beta1, (double)t);
    const double bc2 = 1.0 - std::pow(beta2, (double)t);
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const double g = grad.data()[i];
        m.data()[i] = beta1 * m.data()[i] + (1.0 - beta1) * g;
        v.data()[i] = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
        const double mhat = m.data()[i] / bc1;
        const double vhat = v.data()[i] / bc2;
        weight.data()[i] -= alpha * mhat / (std::sqrt(vhat) + eps);
    }
}

namespace {

FisherFactors zero_factors(const LayerSpec& spec) {
    FisherFactors f;
    f.delta = 0.0;
    f.phi = Matrix(spec.weight_cols(), spec.weight_cols());
    f.psi = Matrix(spec.weight_rows(), spec.weight_rows());
    return f;
}

struct RefreshDiagnostics {
    Vector delta;
    Vector delta_clamped;
    Vector damping_ratio;
    double beta = 1.0;
};

// Factor refresh for TKFAC (both damping modes) and the KFAC baseline.
// Returns per-layer deltas and the damping diagnostics of this refresh.
RefreshDiagnostics refresh_factors(const Network& net, const BatchTrace& ftrace,
                                   const TrainOptions& opts, long iteration,
                                   DampedFactors& state) {
    const std::vector<int> pl = net.parametric_layers();
    const std::size_t n_layers = pl.size();
    RefreshDiagnostics diag;
    diag.delta.assign(n_layers, 0.0);
    diag.delta_clamped.assign(n_layers, 0.0);
    diag.damping_ratio.assign(n_layers, 0.0);

    if (opts.optimizer == OptimizerKind::kfac) {
        for (std::size_t i = 0; i < n_layers; ++i) {
            KfacFactors kf = kfac_factors(ftrace, pl[i]);
            const double sl = std::sqrt(opts.damping.lambda);
            Matrix phi_hat = kf.a;
            Matrix psi_hat = kf.g;
            for (std::size_t d = 0; d < phi_hat.rows(); ++d) phi_hat(d, d) += sl;
            for (std::size_t d = 0; d < psi_hat.rows(); ++d) psi_hat(d, d) += sl;
            LayerDampedFactors& lf = state.layers[i];
            if (lf.initialized) {
                lf.phi_hat = ema_update(lf.phi_hat, phi_hat, opts.epsilon);
                lf.psi_hat = ema_update(lf.psi_hat, psi_hat, opts.epsilon);
            } else {
                lf.phi_hat = std::move(phi_hat);
                lf.psi_hat = std::move(psi_hat);
                lf.initialized = true;
            }
            lf.factor_iteration = iteration;
            diag.delta[i] = trace(kf.a) * trace(kf.g);
        }
        return diag;
    }

    // TKFAC: compute raw factors first (the new damping needs all deltas
    // before the fully-connected beta expansion can be applied).
    std::vector<FisherFactors> raw(n_layers);
    for (std::size_t i = 0; i < n_layers; ++i) {
        try {
            raw[i] = tkfac_factors(ftrace, pl[i]);
        } catch (const DegenerateBlock&) {
            raw[i] = zero_factors(net.layers[pl[i]]);
        }
    }

    if (opts.ema_before_damping) {
        for (std::size_t i = 0; i < n_layers; ++i) {
            LayerDampedFactors& lf = state.layers[i];
            if (lf.initialized) {
                lf.raw_phi = ema_update(lf.raw_phi, raw[i].phi, opts.epsilon);
                lf.raw_psi = ema_update(lf.raw_psi, raw[i].psi, opts.epsilon);
                lf.raw_delta = opts.epsilon * lf.raw_delta + (1.0 - opts.epsilon) * raw[i].delta;
            } else {
                lf.raw_phi = raw[i].phi;
                lf.raw_psi = raw[i].psi;
                lf.raw_delta = raw[i].delta;
            }
            raw[i].phi = lf.raw_phi;
            raw[i].psi = lf.raw_psi;
            raw[i].delta = lf.raw_delta;
        }
    }

    const bool new_mode = opts.damping.mode == DampingMode::new_conv;
    if (new_mode) {
        for (std::size_t i = 0; i < n_layers; ++i) {
            diag.delta[i] = raw[i].delta;
            diag.delta_clamped[i] = net.layers[pl[i]].is_conv()
                                        ? std::max(opts.damping.nu, raw[i].delta)
                                        : raw[i].delta;  // no clamp on dense layers
        }
        diag.beta = fc_beta_expansion(diag.delta, diag.delta_clamped);
    } else {
        for (std::size_t i = 0; i < n_layers; ++i) {
            diag.delta[i] = raw[i].delta;
            diag.delta_clamped[i] = raw[i].delta;
        }
    }

    for (std::size_t i = 0; i < n_layers; ++i) {
        const LayerSpec& spec = net.layers[pl[i]];
        Matrix phi_hat, psi_hat;
        double added_in;
        double curvature_delta;
        if (new_mode) {
            FisherFactors f = raw[i];
            if (spec.is_conv()) {
                NewDampResult r =
                    damp_new_conv(f, opts.damping.nu, spec.weight_cols(), spec.weight_rows());
                phi_hat = std::move(r.phi_hat);
                psi_hat = std::move(r.psi_hat);
                curvature_delta = r.delta_clamped;
                added_in = r.delta_clamped / (double)spec.weight_cols();
            } else {
                // Dense layer under new damping: expand delta by beta, then
                // apply the same trace-scaled diagonal.
                f.delta *= diag.beta;
                const double sd = std::sqrt(f.delta);
                phi_hat = f.phi * sd;
                psi_hat = f.psi * sd;
                added_in = f.delta / (double)spec.weight_cols();
                const double add_out = f.delta / (double)spec.weight_rows();
                for (std::size_t d = 0; d < phi_hat.rows(); ++d) phi_hat(d, d) += added_in;
                for (std::size_t d = 0; d < psi_hat.rows(); ++d) psi_hat(d, d) += add_out;
                curvature_delta = f.delta;
            }
        } else {
            auto [ph, ps] = damp_normal(raw[i], opts.damping.lambda);
            phi_hat = std::move(ph);
            psi_hat = std::move(ps);
            added_in = std::sqrt(opts.damping.lambda);
            curvature_delta = raw[i].delta;
        }

        // Damping diagnostic: added diagonal over the mean diagonal of the
        // (clamped) delta * phi curvature part.
        const double mean_diag =
            curvature_delta * trace(raw[i].phi) / (double)raw[i].phi.rows();
        diag.damping_ratio[i] = mean_diag > 0.0 ? added_in / mean_diag : 0.0;

        LayerDampedFactors& lf = state.layers[i];
        if (lf.initialized && !opts.ema_before_damping) {
            lf.phi_hat = ema_update(lf.phi_hat, phi_hat, opts.epsilon);
            lf.psi_hat = ema_update(lf.psi_hat, psi_hat, opts.epsilon);
        } else {
            lf.phi_hat = std::move(phi_hat);
            lf.psi_hat = std::move(psi_hat);
            lf.initialized = true;
        }
        lf.factor_iteration = iteration;
    }
    return diag;
}

} // namespace

TrainResult run_training(Network& net, const TrainData& data, const TrainOptions& opts) {
    if (opts.batch_size < 1 || opts.iterations < 0)
        throw std::invalid_argument("run_training: bad batch size or iteration count");
    if (data.sample_count() == 0) throw std::invalid_argument("run_training: empty dataset");

    std::mt19937_64 rng(opts.seed);
    // Separate stream for the Fisher label sampling and the analysis hook
    // so enabling diagnostics does not perturb the training trajectory.
    std::mt19937_64 fisher_rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);
    std::mt19937_64 analysis_rng(opts.seed ^ 0x5851f42d4c957f2dULL);

    const std::vector<int> pl = net.parametric_layers();
    const bool second_order = opts.optimizer == OptimizerKind::tkfac_nor ||
                              opts.optimizer == OptimizerKind::tkfac_new ||
                              opts.optimizer == OptimizerKind::kfac;

    DampedFactors damped;
    damped.layers.resize(pl.size());
    std::vector<Matrix> momentum(pl.size());
    AdamState adam;
    adam.m.resize(pl.size());
    adam.v.resize(pl.size());
    for (std::size_t i = 0; i < pl.size(); ++i) {
        const Matrix& w = net.weights[pl[i]];
        momentum[i] = Matrix(w.rows(), w.cols());
        adam.m[i] = Matrix(w.rows(), w.cols());
        adam.v[i] = Matrix(w.rows(), w.cols());
    }

    const int n = data.sample_count();
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    int cursor = 0;

    const int iters_per_epoch = std::max(1, n / opts.batch_size);

    TrainResult result;
    RefreshDiagnostics last_diag;
    last_diag.delta.assign(pl.size(), 0.0);
    last_diag.damping_ratio.assign(pl.size(), 0.0);
    double step_seconds = 0.0;

    for (long t = 0; t < opts.iterations; ++t) {
        const int epoch = (int)(t / iters_per_epoch);

        // Mini-batch selection (excluded from the step timer).
        const int bs = std::min(opts.batch_size, n);
        Matrix batch((std::size_t)net.input_dim(), (std::size_t)bs);
        Targets targets;
        if (!data.autoencoder) targets.labels.resize(bs);
        for (int j = 0; j < bs; ++j) {
            if (cursor >= n) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const int idx = order[cursor++];
            for (std::size_t r = 0; r < batch.rows(); ++r) batch(r, j) = data.inputs(r, idx);
            if (!data.autoencoder) targets.labels[j] = data.labels[idx];
        }
        if (data.autoencoder) targets.values = batch;

        double alpha = opts.alpha;
        if (opts.lr_decay_every_epochs > 0)
            alpha *= std::pow(opts.lr_decay, (double)(epoch / opts.lr_decay_every_epochs));

        const auto t0 = std::chrono::steady_clock::now();

        ForwardCache cache = forward(net, batch);

        if (second_order && t % opts.t_fim == 0) {
            Targets ftargets = opts.fisher_labels == LabelMode::model_sample
                                   ? sample_labels(net, cache.output, fisher_rng)
                                   : targets;
            BatchTrace ftrace = backward(net, cache, ftargets);
            last_diag = refresh_factors(net, ftrace, opts, t, damped);
            if (opts.on_refresh)
                opts.on_refresh(t, last_diag.delta, last_diag.delta_clamped, damped);
        }
        if (second_order && t % opts.t_inv == 0) {
            for (LayerDampedFactors& lf : damped.layers) {
                lf.phi_inv = invert_factor(lf.phi_hat);
                lf.psi_inv = invert_factor(lf.psi_hat);
                lf.inverse_iteration = t;
            }
        }

        if (opts.analysis_every > 0 && opts.on_analysis && t % opts.analysis_every == 0) {
            Targets atargets = sample_labels(net, cache.output, analysis_rng);
            BatchTrace atrace = backward(net, cache, atargets);
            opts.on_analysis(t, net, atrace);
        }

        BatchTrace gtrace = backward(net, cache, targets);
        if (!std::isfinite(gtrace.loss))
            throw NonFiniteLoss("run_training: non-finite loss at iteration " + std::to_string(t));

        for (std::size_t i = 0; i < pl.size(); ++i) {
            Matrix& w = net.weights[pl[i]];
            const Matrix& grad = gtrace.layers[i].grad;
            switch (opts.optimizer) {
                case OptimizerKind::tkfac_nor:
                case OptimizerKind::tkfac_new:
                case OptimizerKind::kfac:
                    natural_gradient_step(w, momentum[i], grad, damped.layers[i], alpha, opts.tau,
                                          t, opts.t_inv);
                    break;
                case OptimizerKind::sgdm:
                    sgdm_step(w, momentum[i], grad, alpha, opts.tau);
                    break;
                case OptimizerKind::adam:
                    adam_step(w, adam.m[i], adam.v[i], t + 1, grad, alpha);
                    break;
            }
        }

        step_seconds +=
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        result.final_loss = gtrace.loss;
        if (t % opts.metrics_every == 0 || t + 1 == opts.iterations) {
            MetricsRecord rec;
            rec.iteration = t;
            rec.epoch = epoch;
            rec.seconds = step_seconds;
            rec.loss = gtrace.loss;
            if (data.autoencoder) {
                double se = 0.0;
                for (std::size_t idx = 0; idx < cache.output.size(); ++idx) {
                    const double d = cache.output.data()[idx] - targets.values.data()[idx];
                    se += d * d;
                }
                rec.error = se / (double)bs;
            } else {
                int wrong = 0;
                for (int j = 0; j < bs; ++j) {
                    std::size_t best = 0;
                    for (std::size_t r = 1; r < cache.output.rows(); ++r)
                        if (cache.output(r, j) > cache.output(best, j)) best = r;
                    if ((int)best != targets.labels[j]) ++wrong;
                }
                rec.error = (double)wrong / (double)bs;
            }
            rec.beta = last_diag.beta;
            rec.layer_delta = last_diag.delta;
            rec.layer_damping_ratio = last_diag.damping_ratio;
            result.metrics.push_back(std::move(rec));
        }
    }
    result.iterations = opts.iterations;
    return result;
}

} // namespace tkfac
