#pragma once

#include "tkfac/matrix.hpp"
#include "tkfac/network.hpp"

#include <stdexcept>

namespace tkfac {

class DegenerateBlock : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A layer's exact Fisher block, plus the per-sample input/output traces
/// (tr Lambda^(i), tr Gamma^(i)) captured during construction. For dense
/// layers these are the rank-1 per-sample traces the error bounds consume.
struct ExactFisherBlock {
    int layer = -1;
    Matrix f;
    int sample_count = 0;
    Vector tr_input;   // per-sample tr(Lambda)
    Vector tr_output;  // per-sample tr(Gamma)
};

/// Trace-restricted Kronecker factorization of a block:
/// F ~= delta * kron(phi, psi) with tr(phi) == tr(psi) == 1.
struct FisherFactors {
    double delta = 0.0;
    Matrix phi;  // input side
    Matrix psi;  // output side
};

// Smallest delta treated as nonzero; below it the block is degenerate.
inline constexpr double kDegenerateDelta = 1e-30;

/// F_l = (1/N) sum_i kron(a a^T, g g^T) for a dense layer, in the
/// (input (x) output) ordering fixed by the column-major vec convention.
ExactFisherBlock exact_fim_dense(const BatchTrace& trace, int layer);

/// F_l = (1/N) sum_i vec(DW^(i)) vec(DW^(i))^T for a conv layer, with
/// DW = DS * A_hat^T. No spatial decorrelation assumption involved.
ExactFisherBlock exact_fim_conv(const BatchTrace& trace, int layer);

/// Sum-of-Kronecker form for a conv layer: sum over spatial locations of
/// (1/N) sum_i kron(a_hat_loc a_hat_loc^T, ds_loc ds_loc^T). Equals the
/// exact block exactly when cross-location product terms vanish.
Matrix sum_kron_fim_conv(const BatchTrace& trace, int layer);

/// delta = E[tr(Lambda) tr(Gamma)], phi = E[tr(Gamma) Lambda] / delta,
/// psi = E[tr(Lambda) Gamma] / delta.
FisherFactors tkfac_factors_dense(const BatchTrace& trace, int layer);

/// Conv analogue: per-location trace-weighted sums, normalized globally by
/// delta = sum_loc E[tr(a a^T) tr(u u^T)] so that tr(phi) == tr(psi) == 1.
FisherFactors tkfac_factors_conv(const BatchTrace& trace, int layer);

/// Dispatches on the layer kind.
FisherFactors tkfac_factors(const BatchTrace& trace, int layer);

struct KfacFactors {
    Matrix a;  // input side E[Lambda]
    Matrix g;  // output side E[Gamma]
};

/// Comparison baseline: A = E[Lambda], G = E[Gamma] for dense layers; for
/// conv layers A sums patch outer products over locations and G averages
/// them (spatially-summed/averaged convention).
KfacFactors kfac_factors(const BatchTrace& trace, int layer);

} // namespace tkfac
