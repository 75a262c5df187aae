#include "tkfac/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace tkfac {

double ErrorReport::sum_tkfac_error() const {
    double s = 0.0;
    for (const auto& e : layers) s += e.tkfac_error;
    return s;
}

double ErrorReport::sum_kfac_error() const {
    double s = 0.0;
    for (const auto& e : layers) s += e.kfac_error;
    return s;
}

double approx_error(const ExactFisherBlock& exact, const FisherFactors& factors) {
    Matrix approx = kron(factors.phi, factors.psi);
    approx *= factors.delta;
    if (approx.rows() != exact.f.rows() || approx.cols() != exact.f.cols())
        throw DimensionError("approx_error: factored block dimension mismatch");
    return frob_norm(exact.f - approx);
}

double approx_error(const ExactFisherBlock& exact, const KfacFactors& factors) {
    Matrix approx = kron(factors.a, factors.g);
    if (approx.rows() != exact.f.rows() || approx.cols() != exact.f.cols())
        throw DimensionError("approx_error: factored block dimension mismatch");
    return frob_norm(exact.f - approx);
}

double tkfac_bound(const Vector& tr_input, const Vector& tr_output) {
    const std::size_t n = tr_input.size();
    if (n != tr_output.size()) throw DimensionError("tkfac_bound: trace list length mismatch");
    if (n <= 1) return 0.0;
    double mx = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            mx = std::max(mx, std::sqrt(tr_input[i] * tr_input[j] * tr_output[i] * tr_output[j]));
    return 2.0 * (double)(n - 1) / (double)n * mx;
}

double kfac_bound(const Vector& tr_input, const Vector& tr_output) {
    const std::size_t n = tr_input.size();
    if (n != tr_output.size()) throw DimensionError("kfac_bound: trace list length mismatch");
    if (n <= 1) return 0.0;
    double mx = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            mx = std::max(mx, (tr_input[i] + tr_input[j]) * (tr_output[i] + tr_output[j]) / 4.0);
    return 2.0 * (double)(n - 1) / (double)n * mx;
}

namespace {

double quadratic_form(const Matrix& m, const Matrix& cols, std::size_t j) {
    // cols(:,j)^T m cols(:,j)
    double s = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < m.cols(); ++c) acc += m(r, c) * cols(c, j);
        s += cols(r, j) * acc;
    }
    return s;
}

struct FastLayerErrors {
    double tkfac_error;
    double kfac_error;
    double trace_exact;
    double trace_tkfac;
};

// All Frobenius quantities of ||F - factored||_F reduce to pairwise inner
// products when the per-sample blocks are rank-1 outer products:
// <L_i (x) G_i, L_j (x) G_j> = (a_i.a_j)^2 (g_i.g_j)^2.
FastLayerErrors dense_errors_fast(const LayerTrace& lt, const FisherFactors* tk,
                                  const KfacFactors& kf) {
    const std::size_t n = lt.a.cols();
    Vector tra(n), trg(n);
    for (std::size_t j = 0; j < n; ++j) {
        double sa = 0.0, sg = 0.0;
        for (std::size_t i = 0; i < lt.a.rows(); ++i) sa += lt.a(i, j) * lt.a(i, j);
        for (std::size_t i = 0; i < lt.g.rows(); ++i) sg += lt.g(i, j) * lt.g(i, j);
        tra[j] = sa;
        trg[j] = sg;
    }

    Matrix gram_a = matmul_tn(lt.a, lt.a);
    Matrix gram_g = matmul_tn(lt.g, lt.g);
    double f_sq = 0.0;
    double trace_exact = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        trace_exact += tra[i] * trg[i] / (double)n;
        for (std::size_t j = 0; j < n; ++j) {
            const double pa = gram_a(i, j);
            const double pg = gram_g(i, j);
            f_sq += pa * pa * pg * pg;
        }
    }
    f_sq /= (double)(n * n);

    FastLayerErrors out{};
    out.trace_exact = trace_exact;

    if (tk != nullptr) {
        if (n == 1) {
            out.tkfac_error = 0.0;  // single-sample factorization is exact
        } else {
            double cross = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                cross += quadratic_form(tk->phi, lt.a, j) * quadratic_form(tk->psi, lt.g, j);
            cross /= (double)n;
            const double np = frob_norm(tk->phi);
            const double nq = frob_norm(tk->psi);
            const double err_sq =
                f_sq - 2.0 * tk->delta * cross + tk->delta * tk->delta * np * np * nq * nq;
            out.tkfac_error = std::sqrt(std::max(0.0, err_sq));
        }
        out.trace_tkfac = tk->delta * trace(tk->phi) * trace(tk->psi);
    } else {
        out.tkfac_error = std::sqrt(f_sq);  // degenerate block: factored part is zero
        out.trace_tkfac = 0.0;
    }

    double cross_k = 0.0;
    for (std::size_t j = 0; j < n; ++j)
        cross_k += quadratic_form(kf.a, lt.a, j) * quadratic_form(kf.g, lt.g, j);
    cross_k /= (double)n;
    const double na = frob_norm(kf.a);
    const double ng = frob_norm(kf.g);
    out.kfac_error = std::sqrt(std::max(0.0, f_sq - 2.0 * cross_k + na * na * ng * ng));
    return out;
}

FastLayerErrors conv_errors_fast(const LayerTrace& lt, const FisherFactors* tk,
                                 const KfacFactors& kf) {
    const std::size_t n = lt.ds.size();
    std::vector<Matrix> dw(n);
    for (std::size_t j = 0; j < n; ++j) dw[j] = matmul_nt(lt.ds[j], lt.a_hat[j]);

    double f_sq = 0.0;
    double trace_exact = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double fn = frob_norm(dw[i]);
        trace_exact += fn * fn / (double)n;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = frob_dot(dw[i], dw[j]);
            f_sq += d * d;
        }
    }
    f_sq /= (double)(n * n);

    FastLayerErrors out{};
    out.trace_exact = trace_exact;

    if (tk != nullptr) {
        double cross = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            cross += frob_dot(dw[j], matmul(matmul(tk->psi, dw[j]), tk->phi));
        cross /= (double)n;
        const double np = frob_norm(tk->phi);
        const double nq = frob_norm(tk->psi);
        out.tkfac_error = std::sqrt(std::max(
            0.0, f_sq - 2.0 * tk->delta * cross + tk->delta * tk->delta * np * np * nq * nq));
        out.trace_tkfac = tk->delta * trace(tk->phi) * trace(tk->psi);
    } else {
        out.tkfac_error = std::sqrt(f_sq);
        out.trace_tkfac = 0.0;
    }

    double cross_k = 0.0;
    for (std::size_t j = 0; j < n; ++j)
        cross_k += frob_dot(dw[j], matmul(matmul(kf.g, dw[j]), kf.a));
    cross_k /= (double)n;
    const double na = frob_norm(kf.a);
    const double ng = frob_norm(kf.g);
    out.kfac_error = std::sqrt(std::max(0.0, f_sq - 2.0 * cross_k + na * na * ng * ng));
    return out;
}

void check_cap(const LayerTrace& lt, std::size_t cap) {
    const std::size_t dim = lt.is_conv ? lt.a_hat[0].rows() * lt.ds[0].rows()
                                       : lt.a.rows() * lt.g.rows();
    if (dim > cap)
        throw CapExceeded("error_report: block dimension " + std::to_string(dim) +
                          " exceeds cap " + std::to_string(cap));
}

} // namespace

ErrorReport error_report(const Network& net, const BatchTrace& trace, long iteration,
                         std::size_t block_dim_cap) {
    (void)net;
    ErrorReport report;
    report.iteration = iteration;
    for (const LayerTrace& lt : trace.layers) {
        check_cap(lt, block_dim_cap);
        LayerErrorEntry entry;
        entry.layer = lt.layer;
        entry.block_dim = lt.is_conv ? lt.a_hat[0].rows() * lt.ds[0].rows()
                                     : lt.a.rows() * lt.g.rows();

        FisherFactors tk;
        bool have_tk = true;
        try {
            tk = tkfac_factors(trace, lt.layer);
        } catch (const DegenerateBlock&) {
            have_tk = false;
        }
        KfacFactors kf = kfac_factors(trace, lt.layer);

        FastLayerErrors fe = lt.is_conv ? conv_errors_fast(lt, have_tk ? &tk : nullptr, kf)
                                        : dense_errors_fast(lt, have_tk ? &tk : nullptr, kf);
        entry.tkfac_error = fe.tkfac_error;
        entry.kfac_error = fe.kfac_error;
        entry.trace_exact = fe.trace_exact;
        entry.trace_tkfac = fe.trace_tkfac;

        Vector tra(trace.sample_count), trg(trace.sample_count);
        if (lt.is_conv) {
            for (int j = 0; j < trace.sample_count; ++j) {
                const double fa = frob_norm(lt.a_hat[j]);
                const double fg = frob_norm(lt.ds[j]);
                tra[j] = fa * fa;
                trg[j] = fg * fg;
            }
        } else {
            for (int j = 0; j < trace.sample_count; ++j) {
                tra[j] = dot(lt.a.col(j), lt.a.col(j));
                trg[j] = dot(lt.g.col(j), lt.g.col(j));
            }
        }
        entry.tkfac_bound = tkfac_bound(tra, trg);
        entry.kfac_bound = kfac_bound(tra, trg);
        report.layers.push_back(entry);
    }
    return report;
}

ErrorReport error_report_dense(const Network& net, const BatchTrace& trace, long iteration,
                               std::size_t block_dim_cap) {
    (void)net;
    ErrorReport report;
    report.iteration = iteration;
    for (const LayerTrace& lt : trace.layers) {
        check_cap(lt, block_dim_cap);
        ExactFisherBlock exact =
            lt.is_conv ? exact_fim_conv(trace, lt.layer) : exact_fim_dense(trace, lt.layer);
        LayerErrorEntry entry;
        entry.layer = lt.layer;
        entry.block_dim = exact.f.rows();
        entry.trace_exact = tkfac::trace(exact.f);

        try {
            FisherFactors tk = tkfac_factors(trace, lt.layer);
            entry.tkfac_error = trace.sample_count == 1 ? 0.0 : approx_error(exact, tk);
            entry.trace_tkfac = tk.delta * tkfac::trace(tk.phi) * tkfac::trace(tk.psi);
        } catch (const DegenerateBlock&) {
            entry.tkfac_error = frob_norm(exact.f);
            entry.trace_tkfac = 0.0;
        }
        entry.kfac_error = approx_error(exact, kfac_factors(trace, lt.layer));
        entry.tkfac_bound = tkfac_bound(exact.tr_input, exact.tr_output);
        entry.kfac_bound = kfac_bound(exact.tr_input, exact.tr_output);
        report.layers.push_back(entry);
    }
    return report;
}

LocationCorrelation location_correlation(const BatchTrace& trace, int layer) {
    const LayerTrace& lt = trace.at_layer(layer);
    if (!lt.is_conv) throw std::invalid_argument("location_correlation: layer is not conv");
    const std::size_t n = lt.ds.size();
    const std::size_t o = lt.ds[0].cols();
    const std::size_t nk = lt.a_hat[0].rows();
    const std::size_t nl = lt.ds[0].rows();

    // Mean outer product per location.
    std::vector<Matrix> mean_outer(o, Matrix(nk, nl));
    for (std::size_t loc = 0; loc < o; ++loc)
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t ia = 0; ia < nk; ++ia)
                for (std::size_t ig = 0; ig < nl; ++ig)
                    mean_outer[loc](ia, ig) +=
                        lt.a_hat[s](ia, loc) * lt.ds[s](ig, loc) / (double)n;

    Matrix cov(o, o);
    for (std::size_t i = 0; i < o; ++i)
        for (std::size_t j = i; j < o; ++j) {
            double second = 0.0;
            for (std::size_t s = 0; s < n; ++s) {
                double pa = 0.0, pg = 0.0;
                for (std::size_t ia = 0; ia < nk; ++ia)
                    pa += lt.a_hat[s](ia, i) * lt.a_hat[s](ia, j);
                for (std::size_t ig = 0; ig < nl; ++ig)
                    pg += lt.ds[s](ig, i) * lt.ds[s](ig, j);
                second += pa * pg;
            }
            second /= (double)n;
            const double c = second - frob_dot(mean_outer[i], mean_outer[j]);
            cov(i, j) = c;
            cov(j, i) = c;
        }

    LocationCorrelation out;
    out.corr = Matrix(o, o);
    out.degenerate.assign(o, false);
    constexpr double kVarTiny = 1e-30;
    for (std::size_t i = 0; i < o; ++i) out.degenerate[i] = !(cov(i, i) > kVarTiny);
    for (std::size_t i = 0; i < o; ++i) {
        out.corr(i, i) = 1.0;
        for (std::size_t j = i + 1; j < o; ++j) {
            double r = 0.0;
            if (!out.degenerate[i] && !out.degenerate[j])
                r = std::abs(cov(i, j)) / std::sqrt(cov(i, i) * cov(j, j));
            out.corr(i, j) = r;
            out.corr(j, i) = r;
        }
    }
    return out;
}

} // namespace tkfac
