#pragma once

#include "tkfac/fisher.hpp"
#include "tkfac/matrix.hpp"
#include "tkfac/metrics.hpp"
#include "tkfac/network.hpp"

#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

namespace tkfac {

class StaleInverse : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class OptimizerKind { tkfac_nor, tkfac_new, kfac, sgdm, adam };

enum class DampingMode { normal, new_conv };

struct DampingPolicy {
    DampingMode mode = DampingMode::normal;
    double lambda = 1e-3;  // normal mode
    double nu = 1.0;       // new-conv mode trace clamp
};

/// Normal damping: phi_hat = sqrt(delta) phi + sqrt(lambda) I (psi alike).
/// A degenerate block (delta == 0) falls back to pure damping.
std::pair<Matrix, Matrix> damp_normal(const FisherFactors& f, double lambda);

struct NewDampResult {
    Matrix phi_hat;
    Matrix psi_hat;
    double delta_clamped = 0.0;
};

/// New conv damping: delta~ = max(nu, delta),
/// phi~ = sqrt(delta~) phi + (delta~ / (n_{l-1} k^2)) I,
/// psi~ = sqrt(delta~) psi + (delta~ / n_l) I.
/// `input_dim` and `output_dim` are the factor dimensions of the layer.
NewDampResult damp_new_conv(const FisherFactors& f, double nu, int input_dim, int output_dim);

/// beta = max_l delta~_l / delta_l over layers; layers with delta == 0 are
/// skipped (DegenerateBlock if all are).
double fc_beta_expansion(const Vector& delta, const Vector& delta_clamped);

/// Convex blend: eps * old + (1 - eps) * fresh, entrywise.
Matrix ema_update(const Matrix& old_factor, const Matrix& fresh, double epsilon);

/// Per-layer damped factors with cached inverses and staleness bookkeeping.
struct LayerDampedFactors {
    Matrix phi_hat;
    Matrix psi_hat;
    Matrix phi_inv;
    Matrix psi_inv;
    // EMA state for the ablation mode that averages before damping.
    Matrix raw_phi;
    Matrix raw_psi;
    double raw_delta = 0.0;
    bool initialized = false;
    long factor_iteration = -1;   // iteration the factors were computed at
    long inverse_iteration = -1;  // iteration the inverses were computed at
};

struct DampedFactors {
    std::vector<LayerDampedFactors> layers;  // one per parametric layer
};

/// Symmetric inverse with jitter escalation (x10 from zero up to
/// 1e-6 * mean diagonal) before giving up.
Matrix invert_factor(const Matrix& m);

/// Preconditioned momentum step for one layer:
/// delta_w = psi_inv * grad * phi_inv, m <- tau m - alpha delta_w, w += m.
/// Throws StaleInverse when the cached inverses are older than t_inv.
void natural_gradient_step(Matrix& weight, Matrix& momentum, const Matrix& grad,
                           const LayerDampedFactors& factors, double alpha, double tau,
                           long iteration, int t_inv);

struct AdamState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    long t = 0;
};

void sgdm_step(Matrix& weight, Matrix& momentum, const Matrix& grad, double alpha, double tau);
void adam_step(Matrix& weight, Matrix& m, Matrix& v, long t, const Matrix& grad, double alpha,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// A dataset view for training: inputs column-per-sample plus either class
/// labels or (autoencoder) the inputs themselves as targets.
struct TrainData {
    Matrix inputs;
    std::vector<int> labels;  // empty for autoencoder tasks
    bool autoencoder = false;
    int sample_count() const { return (int)inputs.cols(); }
};

struct TrainOptions {
    OptimizerKind optimizer = OptimizerKind::tkfac_nor;
    double alpha = 1e-3;
    DampingPolicy damping;
    double epsilon = 0.95;  // EMA weight on the old estimate
    double tau = 0.9;       // momentum
    int t_fim = 100;
    int t_inv = 100;
    int batch_size = 128;
    long iterations = 0;  // total optimizer steps
    unsigned long long seed = 0;
    LabelMode fisher_labels = LabelMode::model_sample;
    bool ema_before_damping = false;  // ablation flag
    double lr_decay = 0.1;
    int lr_decay_every_epochs = 0;  // 0 disables the step schedule
    int metrics_every = 1;

    /// Called every `analysis_every` iterations (0 disables) with the
    /// current iteration, network, and a model-sample BatchTrace of the
    /// current mini-batch, before the weight update.
    int analysis_every = 0;
    std::function<void(long, const Network&, const BatchTrace&)> on_analysis;

    /// Refresh hook: per-layer (delta, delta~) right after a factor update.
    std::function<void(long, const Vector&, const Vector&, const DampedFactors&)> on_refresh;
};

struct TrainResult {
    std::vector<MetricsRecord> metrics;
    double final_loss = 0.0;
    long iterations = 0;
};

/// The full training loop: mini-batch selection, factor refresh every
/// t_fim steps, inverse refresh every t_inv steps, gradient computation,
/// preconditioned momentum update. Deterministic under a fixed seed.
TrainResult run_training(Network& net, const TrainData& data, const TrainOptions& opts);

} // namespace tkfac
