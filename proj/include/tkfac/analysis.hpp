#pragma once

#include "tkfac/fisher.hpp"
#include "tkfac/matrix.hpp"
#include "tkfac/network.hpp"

#include <stdexcept>
#include <vector>

namespace tkfac {

class CapExceeded : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Per-layer approximation-error snapshot at one sampled iteration.
struct LayerErrorEntry {
    int layer = -1;
    std::size_t block_dim = 0;
    double tkfac_error = 0.0;
    double kfac_error = 0.0;
    double tkfac_bound = 0.0;
    double kfac_bound = 0.0;
    double trace_exact = 0.0;
    double trace_tkfac = 0.0;
};

struct ErrorReport {
    long iteration = 0;
    std::vector<LayerErrorEntry> layers;
    double sum_tkfac_error() const;
    double sum_kfac_error() const;
};

/// ||F - delta * kron(phi, psi)||_F with the factored block materialized.
double approx_error(const ExactFisherBlock& exact, const FisherFactors& factors);
/// ||F - kron(A, G)||_F for the KFAC baseline.
double approx_error(const ExactFisherBlock& exact, const KfacFactors& factors);

/// Worst-pair bound on the factorization error from per-sample traces:
/// (2(N-1)/N) max_{i<j} sqrt(trL_i trL_j trG_i trG_j). Zero when N == 1.
double tkfac_bound(const Vector& tr_input, const Vector& tr_output);
/// KFAC analogue: (2(N-1)/N) max_{i<j} (trL_i+trL_j)(trG_i+trG_j)/4.
double kfac_bound(const Vector& tr_input, const Vector& tr_output);

/// Computes one ErrorReport over all parametric dense layers of the trace,
/// without materializing any exact block: all Frobenius quantities reduce
/// to pairwise inner products of the rank-1 per-sample factors.
/// Throws CapExceeded when any block dimension exceeds `block_dim_cap`.
ErrorReport error_report(const Network& net, const BatchTrace& trace, long iteration,
                         std::size_t block_dim_cap);

/// Dense reference path used to cross-check error_report on small nets.
ErrorReport error_report_dense(const Network& net, const BatchTrace& trace, long iteration,
                               std::size_t block_dim_cap);

inline constexpr std::size_t kDefaultBlockDimCap = 2048;

/// Absolute Pearson correlations between flattened per-location outer
/// products vec(a_hat_i ds_i^T) over the batch, for one conv layer.
/// Zero-variance locations get correlation 0 off-diagonal and are flagged.
struct LocationCorrelation {
    Matrix corr;                       // o x o, diagonal 1
    std::vector<bool> degenerate;      // per-location zero-variance flag
};

LocationCorrelation location_correlation(const BatchTrace& trace, int layer);

} // namespace tkfac
