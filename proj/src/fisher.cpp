#include "tkfac/fisher.hpp"

#include <cmath>
#include <string>

namespace tkfac {

namespace {

const LayerTrace& dense_trace(const BatchTrace& trace, int layer) {
    const LayerTrace& lt = trace.at_layer(layer);
    if (lt.is_conv) throw std::invalid_argument("layer " + std::to_string(layer) + " is not dense");
    return lt;
}

const LayerTrace& conv_trace(const BatchTrace& trace, int layer) {
    const LayerTrace& lt = trace.at_layer(layer);
    if (!lt.is_conv) throw std::invalid_argument("layer " + std::to_string(layer) + " is not conv");
    return lt;
}

double col_sq_norm(const Matrix& m, std::size_t j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) s += m(i, j) * m(i, j);
    return s;
}

} // namespace

ExactFisherBlock exact_fim_dense(const BatchTrace& trace, int layer) {
    const LayerTrace& lt = dense_trace(trace, layer);
    const std::size_t n = lt.a.cols();
    if (n == 0) throw std::invalid_argument("exact_fim_dense: empty batch");
    const std::size_t ma = lt.a.rows();
    const std::size_t mg = lt.g.rows();

    // Columns of M are a^(i) (x) g^(i) = vec(g a^T); F = M M^T / N.
    Matrix m(ma * mg, n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t ia = 0; ia < ma; ++ia)
            for (std::size_t ig = 0; ig < mg; ++ig)
                m(ia * mg + ig, j) = lt.a(ia, j) * lt.g(ig, j);

    ExactFisherBlock block;
    block.layer = layer;
    block.sample_count = (int)n;
    block.f = matmul_nt(m, m);
    block.f *= 1.0 / (double)n;
    block.tr_input.resize(n);
    block.tr_output.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        block.tr_input[j] = col_sq_norm(lt.a, j);
        block.tr_output[j] = col_sq_norm(lt.g, j);
    }
    return block;
}

ExactFisherBlock exact_fim_conv(const BatchTrace& trace, int layer) {
    const LayerTrace& lt = conv_trace(trace, layer);
    const std::size_t n = lt.ds.size();
    if (n == 0) throw std::invalid_argument("exact_fim_conv: empty batch");
    const std::size_t rows = lt.ds[0].rows();        // n_l
    const std::size_t cols = lt.a_hat[0].rows();     // n_{l-1} k^2 (+1)

    Matrix m(rows * cols, n);
    for (std::size_t j = 0; j < n; ++j) {
        Matrix dw = matmul_nt(lt.ds[j], lt.a_hat[j]);  // n_l x n_{l-1}k^2
        m.set_col(j, vec(dw));
    }

    ExactFisherBlock block;
    block.layer = layer;
    block.sample_count = (int)n;
    block.f = matmul_nt(m, m);
    block.f *= 1.0 / (double)n;
    block.tr_input.resize(n);
    block.tr_output.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double fa = frob_norm(lt.a_hat[j]);
        const double fg = frob_norm(lt.ds[j]);
        block.tr_input[j] = fa * fa;
        block.tr_output[j] = fg * fg;
    }
    return block;
}

Matrix sum_kron_fim_conv(const BatchTrace& trace, int layer) {
    const LayerTrace& lt = conv_trace(trace, layer);
    const std::size_t n = lt.ds.size();
    if (n == 0) throw std::invalid_argument("sum_kron_fim_conv: empty batch");
    const std::size_t nk = lt.a_hat[0].rows();
    const std::size_t nl = lt.ds[0].rows();
    const std::size_t o = lt.ds[0].cols();

    Matrix f(nk * nl, nk * nl);
    Matrix m(nk * nl, n);
    for (std::size_t loc = 0; loc < o; ++loc) {
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t ia = 0; ia < nk; ++ia)
                for (std::size_t ig = 0; ig < nl; ++ig)
                    m(ia * nl + ig, j) = lt.a_hat[j](ia, loc) * lt.ds[j](ig, loc);
        add_matmul_nt(f, m, m, 1.0 / (double)n);
    }
    return f;
}

FisherFactors tkfac_factors_dense(const BatchTrace& trace, int layer) {
    const LayerTrace& lt = dense_trace(trace, layer);
    const std::size_t n = lt.a.cols();
    if (n == 0) throw std::invalid_argument("tkfac_factors_dense: empty batch");

    Vector tr_a(n), tr_g(n);
    double delta = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        tr_a[j] = col_sq_norm(lt.a, j);
        tr_g[j] = col_sq_norm(lt.g, j);
        delta += tr_a[j] * tr_g[j];
    }
    delta /= (double)n;
    if (!(delta > kDegenerateDelta))
        throw DegenerateBlock("tkfac_factors_dense: delta vanished at layer " + std::to_string(layer));

    // phi = E[tr(Gamma) Lambda] / delta: scale the activation columns by
    // sqrt(tr Gamma / N / delta) and form the Gram matrix (psi analogous).
    Matrix a_scaled = lt.a;
    Matrix g_scaled = lt.g;
    for (std::size_t j = 0; j < n; ++j) {
        const double wa = std::sqrt(tr_g[j] / ((double)n * delta));
        const double wg = std::sqrt(tr_a[j] / ((double)n * delta));
        for (std::size_t i = 0; i < a_scaled.rows(); ++i) a_scaled(i, j) *= wa;
        for (std::size_t i = 0; i < g_scaled.rows(); ++i) g_scaled(i, j) *= wg;
    }

    FisherFactors f;
    f.delta = delta;
    f.phi = matmul_nt(a_scaled, a_scaled);
    f.psi = matmul_nt(g_scaled, g_scaled);
    return f;
}

FisherFactors tkfac_factors_conv(const BatchTrace& trace, int layer) {
    const LayerTrace& lt = conv_trace(trace, layer);
    const std::size_t n = lt.ds.size();
    if (n == 0) throw std::invalid_argument("tkfac_factors_conv: empty batch");
    const std::size_t nk = lt.a_hat[0].rows();
    const std::size_t nl = lt.ds[0].rows();
    const std::size_t o = lt.ds[0].cols();

    double delta = 0.0;
    Matrix phi(nk, nk);
    Matrix psi(nl, nl);
    Matrix a_cols(nk, n);
    Matrix g_cols(nl, n);
    for (std::size_t loc = 0; loc < o; ++loc) {
        Vector tra(n), trg(n);
        for (std::size_t j = 0; j < n; ++j) {
            double sa = 0.0, sg = 0.0;
            for (std::size_t i = 0; i < nk; ++i) {
                const double v = lt.a_hat[j](i, loc);
                a_cols(i, j) = v;
                sa += v * v;
            }
            for (std::size_t i = 0; i < nl; ++i) {
                const double v = lt.ds[j](i, loc);
                g_cols(i, j) = v;
                sg += v * v;
            }
            tra[j] = sa;
            trg[j] = sg;
            delta += sa * sg / (double)n;
        }
        Matrix a_scaled = a_cols;
        Matrix g_scaled = g_cols;
        for (std::size_t j = 0; j < n; ++j) {
            const double wa = std::sqrt(trg[j] / (double)n);
            const double wg = std::sqrt(tra[j] / (double)n);
            for (std::size_t i = 0; i < nk; ++i) a_scaled(i, j) *= wa;
            for (std::size_t i = 0; i < nl; ++i) g_scaled(i, j) *= wg;
        }
        add_matmul_nt(phi, a_scaled, a_scaled, 1.0);
        add_matmul_nt(psi, g_scaled, g_scaled, 1.0);
    }
    if (!(delta > kDegenerateDelta))
        throw DegenerateBlock("tkfac_factors_conv: delta vanished at layer " + std::to_string(layer));

    phi *= 1.0 / delta;
    psi *= 1.0 / delta;
    FisherFactors f;
    f.delta = delta;
    f.phi = std::move(phi);
    f.psi = std::move(psi);
    return f;
}

FisherFactors tkfac_factors(const BatchTrace& trace, int layer) {
    return trace.at_layer(layer).is_conv ? tkfac_factors_conv(trace, layer)
                                         : tkfac_factors_dense(trace, layer);
}

KfacFactors kfac_factors(const BatchTrace& trace, int layer) {
    const LayerTrace& lt = trace.at_layer(layer);
    KfacFactors kf;
    if (!lt.is_conv) {
        const double n = (double)lt.a.cols();
        kf.a = matmul_nt(lt.a, lt.a);
        kf.a *= 1.0 / n;
        kf.g = matmul_nt(lt.g, lt.g);
        kf.g *= 1.0 / n;
    } else {
        const double n = (double)lt.ds.size();
        const double o = (double)lt.ds[0].cols();
        kf.a = Matrix(lt.a_hat[0].rows(), lt.a_hat[0].rows());
        kf.g = Matrix(lt.ds[0].rows(), lt.ds[0].rows());
        for (std::size_t j = 0; j < lt.ds.size(); ++j) {
            add_matmul_nt(kf.a, lt.a_hat[j], lt.a_hat[j], 1.0 / n);
            add_matmul_nt(kf.g, lt.ds[j], lt.ds[j], 1.0 / (n * o));
        }
    }
    return kf;
}

} // namespace tkfac
