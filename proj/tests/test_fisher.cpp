#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tkfac/fisher.hpp"
#include "tkfac/network.hpp"

#include <cmath>
#include <random>

using namespace tkfac;

namespace {

double max_abs_diff(const Matrix& a, const Matrix& b) {
    REQUIRE(a.rows() == b.rows());
    REQUIRE(a.cols() == b.cols());
    double m = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
    return m;
}

// A dense BatchTrace built directly from activation/gradient matrices,
// bypassing backward(), so the Fisher oracles are independent of it.
BatchTrace make_dense_trace(const Matrix& a, const Matrix& g) {
    LayerTrace lt;
    lt.layer = 0;
    lt.is_conv = false;
    lt.a = a;
    lt.g = g;
    lt.grad = matmul_nt(g, a);
    lt.grad *= 1.0 / (double)a.cols();
    BatchTrace t;
    t.sample_count = (int)a.cols();
    t.layers.push_back(std::move(lt));
    return t;
}

BatchTrace make_conv_trace(std::vector<Matrix> a_hat, std::vector<Matrix> ds) {
    LayerTrace lt;
    lt.layer = 0;
    lt.is_conv = true;
    lt.a_hat = std::move(a_hat);
    lt.ds = std::move(ds);
    BatchTrace t;
    t.sample_count = (int)lt.ds.size();
    t.layers.push_back(std::move(lt));
    return t;
}

// Oracle: F = (1/N) sum_i kron(a a^T, g g^T), built with kron() directly.
Matrix dense_fim_oracle(const Matrix& a, const Matrix& g) {
    const std::size_t n = a.cols();
    Matrix f(a.rows() * g.rows(), a.rows() * g.rows());
    for (std::size_t j = 0; j < n; ++j) {
        Matrix la = outer(a.col(j), a.col(j));
        Matrix lg = outer(g.col(j), g.col(j));
        Matrix k = kron(la, lg);
        k *= 1.0 / (double)n;
        f += k;
    }
    return f;
}

} // namespace

TEST_CASE("exact dense FIM: hand example N=1, a=(1,0), g=(2,0)") {
    Matrix a(2, 1), g(2, 1);
    a(0, 0) = 1.0;
    g(0, 0) = 2.0;
    auto block = exact_fim_dense(make_dense_trace(a, g), 0);
    REQUIRE(block.f.rows() == 4);
    // vec(g a^T) = a (x) g = (2, 0, 0, 0)^T, so F = diag(4, 0, 0, 0).
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(block.f(i, j) == doctest::Approx(i == 0 && j == 0 ? 4.0 : 0.0));
    CHECK(block.tr_input[0] == doctest::Approx(1.0));
    CHECK(block.tr_output[0] == doctest::Approx(4.0));
}

TEST_CASE("exact dense FIM equals the kron-of-outer-products oracle") {
    std::mt19937_64 rng(3);
    Matrix a = random_matrix(4, 7, rng);
    Matrix g = random_matrix(3, 7, rng);
    auto block = exact_fim_dense(make_dense_trace(a, g), 0);
    CHECK(max_abs_diff(block.f, dense_fim_oracle(a, g)) < 1e-10);
    CHECK(min_sym_eigenvalue(block.f) > -1e-10);  // PSD
}

TEST_CASE("TKFAC dense factors: closed-form moments and trace restriction") {
    std::mt19937_64 rng(4);
    Matrix a = random_matrix(5, 9, rng);
    Matrix g = random_matrix(3, 9, rng);
    auto trace_b = make_dense_trace(a, g);
    auto f = tkfac_factors_dense(trace_b, 0);

    // Oracle: accumulate E[trG Lambda], E[trL Gamma], E[trL trG] directly.
    const std::size_t n = a.cols();
    double delta = 0.0;
    Matrix phi_acc(5, 5), psi_acc(3, 3);
    for (std::size_t j = 0; j < n; ++j) {
        Vector aj = a.col(j), gj = g.col(j);
        const double trl = dot(aj, aj);
        const double trg = dot(gj, gj);
        delta += trl * trg / (double)n;
        Matrix la = outer(aj, aj);
        la *= trg / (double)n;
        phi_acc += la;
        Matrix lg = outer(gj, gj);
        lg *= trl / (double)n;
        psi_acc += lg;
    }
    phi_acc *= 1.0 / delta;
    psi_acc *= 1.0 / delta;

    CHECK(f.delta == doctest::Approx(delta).epsilon(1e-12));
    CHECK(max_abs_diff(f.phi, phi_acc) < 1e-12);
    CHECK(max_abs_diff(f.psi, psi_acc) < 1e-12);
    CHECK(trace(f.phi) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(trace(f.psi) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(min_sym_eigenvalue(f.phi) > -1e-12);
    CHECK(min_sym_eigenvalue(f.psi) > -1e-12);
}

TEST_CASE("TKFAC preserves the exact trace: tr(F) == delta") {
    std::mt19937_64 rng(5);
    Matrix a = random_matrix(6, 11, rng);
    Matrix g = random_matrix(4, 11, rng);
    auto trace_b = make_dense_trace(a, g);
    auto block = exact_fim_dense(trace_b, 0);
    auto f = tkfac_factors_dense(trace_b, 0);
    CHECK(trace(block.f) == doctest::Approx(f.delta).epsilon(1e-12));
    // tr(delta phi (x) psi) = delta tr(phi) tr(psi) = delta.
    CHECK(f.delta * trace(f.phi) * trace(f.psi) == doctest::Approx(trace(block.f)).epsilon(1e-12));
}

TEST_CASE("partial-trace consistency of the TKFAC factors") {
    std::mt19937_64 rng(6);
    Matrix a = random_matrix(4, 8, rng);
    Matrix g = random_matrix(3, 8, rng);
    auto trace_b = make_dense_trace(a, g);
    auto block = exact_fim_dense(trace_b, 0);
    auto f = tkfac_factors_dense(trace_b, 0);

    // PTr over the output factor recovers delta * phi exactly: the partial
    // trace of each kron term is trG * Lambda.
    Matrix pt = partial_trace(block.f, g.rows());
    Matrix expect = f.phi;
    expect *= f.delta;
    CHECK(max_abs_diff(pt, expect) < 1e-12);
}

TEST_CASE("N=1 TKFAC factorization is exact") {
    std::mt19937_64 rng(7);
    Matrix a = random_matrix(4, 1, rng);
    Matrix g = random_matrix(3, 1, rng);
    auto trace_b = make_dense_trace(a, g);
    auto block = exact_fim_dense(trace_b, 0);
    auto f = tkfac_factors_dense(trace_b, 0);
    Matrix approx = kron(f.phi, f.psi);
    approx *= f.delta;
    CHECK(max_abs_diff(block.f, approx) < 1e-10);
}

TEST_CASE("scale covariance: a -> c a rescales delta by c^2, leaves phi fixed") {
    std::mt19937_64 rng(8);
    Matrix a = random_matrix(4, 6, rng);
    Matrix g = random_matrix(3, 6, rng);
    auto f1 = tkfac_factors_dense(make_dense_trace(a, g), 0);
    Matrix a2 = a;
    a2 *= 3.0;
    auto f2 = tkfac_factors_dense(make_dense_trace(a2, g), 0);
    CHECK(f2.delta == doctest::Approx(9.0 * f1.delta).epsilon(1e-12));
    CHECK(max_abs_diff(f2.phi, f1.phi) < 1e-12);
    CHECK(max_abs_diff(f2.psi, f1.psi) < 1e-12);
}

TEST_CASE("degenerate dense block throws") {
    Matrix a(3, 2), g(2, 2);  // all zeros
    CHECK_THROWS_AS((void)tkfac_factors_dense(make_dense_trace(a, g), 0), DegenerateBlock);
}

TEST_CASE("KFAC dense factors are the plain second moments") {
    std::mt19937_64 rng(9);
    Matrix a = random_matrix(4, 6, rng);
    Matrix g = random_matrix(3, 6, rng);
    auto kf = kfac_factors(make_dense_trace(a, g), 0);
    Matrix ea(4, 4), eg(3, 3);
    for (std::size_t j = 0; j < 6; ++j) {
        ea += outer(a.col(j), a.col(j));
        eg += outer(g.col(j), g.col(j));
    }
    ea *= 1.0 / 6.0;
    eg *= 1.0 / 6.0;
    CHECK(max_abs_diff(kf.a, ea) < 1e-12);
    CHECK(max_abs_diff(kf.g, eg) < 1e-12);
}

TEST_CASE("exact conv FIM equals vec(DW) outer products and the sum-kron form") {
    std::mt19937_64 rng(10);
    const std::size_t nk = 4, nl = 2, o = 3, n = 5;
    std::vector<Matrix> a_hat, ds;
    for (std::size_t j = 0; j < n; ++j) {
        a_hat.push_back(random_matrix(nk, o, rng));
        ds.push_back(random_matrix(nl, o, rng));
    }
    auto trace_b = make_conv_trace(a_hat, ds);
    auto block = exact_fim_conv(trace_b, 0);
    REQUIRE(block.f.rows() == nk * nl);

    // Oracle: (1/N) sum vec(DW) vec(DW)^T with DW = DS A_hat^T.
    Matrix oracle(nk * nl, nk * nl);
    for (std::size_t j = 0; j < n; ++j) {
        Vector v = vec(matmul_nt(ds[j], a_hat[j]));
        Matrix vv = outer(v, v);
        vv *= 1.0 / (double)n;
        oracle += vv;
    }
    CHECK(max_abs_diff(block.f, oracle) < 1e-10);

    // The sum-kron form equals the exact block plus cross-location terms;
    // verify it against its own direct oracle.
    Matrix sk = sum_kron_fim_conv(trace_b, 0);
    Matrix sk_oracle(nk * nl, nk * nl);
    for (std::size_t loc = 0; loc < o; ++loc)
        for (std::size_t j = 0; j < n; ++j) {
            Vector aj(nk), gj(nl);
            for (std::size_t i = 0; i < nk; ++i) aj[i] = a_hat[j](i, loc);
            for (std::size_t i = 0; i < nl; ++i) gj[i] = ds[j](i, loc);
            Matrix k = kron(outer(aj, aj), outer(gj, gj));
            k *= 1.0 / (double)n;
            sk_oracle += k;
        }
    CHECK(max_abs_diff(sk, sk_oracle) < 1e-10);
}

TEST_CASE("sum-kron conv form is exact when each sample uses one location") {
    // With disjoint single-location supports the cross-location products
    // vanish, so the exact block and the sum-kron form coincide.
    std::mt19937_64 rng(11);
    const std::size_t nk = 3, nl = 2, o = 2;
    std::vector<Matrix> a_hat, ds;
    for (std::size_t j = 0; j < 4; ++j) {
        Matrix a(nk, o), g(nl, o);
        const std::size_t loc = j % o;
        for (std::size_t i = 0; i < nk; ++i) a(i, loc) = std::normal_distribution<>()(rng);
        for (std::size_t i = 0; i < nl; ++i) g(i, loc) = std::normal_distribution<>()(rng);
        a_hat.push_back(std::move(a));
        ds.push_back(std::move(g));
    }
    auto trace_b = make_conv_trace(a_hat, ds);
    CHECK(max_abs_diff(exact_fim_conv(trace_b, 0).f, sum_kron_fim_conv(trace_b, 0)) < 1e-12);
}

TEST_CASE("TKFAC conv factors: trace restriction and moment oracle") {
    std::mt19937_64 rng(12);
    const std::size_t nk = 4, nl = 3, o = 4, n = 6;
    std::vector<Matrix> a_hat, ds;
    for (std::size_t j = 0; j < n; ++j) {
        a_hat.push_back(random_matrix(nk, o, rng));
        ds.push_back(random_matrix(nl, o, rng));
    }
    auto trace_b = make_conv_trace(a_hat, ds);
    auto f = tkfac_factors_conv(trace_b, 0);

    // Oracle: per-location trace-weighted second moments, one global delta.
    double delta = 0.0;
    Matrix phi_acc(nk, nk), psi_acc(nl, nl);
    for (std::size_t loc = 0; loc < o; ++loc)
        for (std::size_t j = 0; j < n; ++j) {
            Vector aj(nk), gj(nl);
            for (std::size_t i = 0; i < nk; ++i) aj[i] = a_hat[j](i, loc);
            for (std::size_t i = 0; i < nl; ++i) gj[i] = ds[j](i, loc);
            const double trl = dot(aj, aj);
            const double trg = dot(gj, gj);
            delta += trl * trg / (double)n;
            Matrix la = outer(aj, aj);
            la *= trg / (double)n;
            phi_acc += la;
            Matrix lg = outer(gj, gj);
            lg *= trl / (double)n;
            psi_acc += lg;
        }
    phi_acc *= 1.0 / delta;
    psi_acc *= 1.0 / delta;

    CHECK(f.delta == doctest::Approx(delta).epsilon(1e-10));
    CHECK(max_abs_diff(f.phi, phi_acc) < 1e-10);
    CHECK(max_abs_diff(f.psi, psi_acc) < 1e-10);
    CHECK(trace(f.phi) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(trace(f.psi) == doctest::Approx(1.0).epsilon(1e-12));

    // Trace preservation against the sum-kron block (the object the conv
    // factorization approximates): tr(sum-kron F) == delta.
    CHECK(trace(sum_kron_fim_conv(trace_b, 0)) == doctest::Approx(delta).epsilon(1e-10));
}

TEST_CASE("conv KFAC factors match the summed/averaged patch moments") {
    std::mt19937_64 rng(13);
    const std::size_t nk = 3, nl = 2, o = 3, n = 4;
    std::vector<Matrix> a_hat, ds;
    for (std::size_t j = 0; j < n; ++j) {
        a_hat.push_back(random_matrix(nk, o, rng));
        ds.push_back(random_matrix(nl, o, rng));
    }
    auto kf = kfac_factors(make_conv_trace(a_hat, ds), 0);
    Matrix ea(nk, nk), eg(nl, nl);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t loc = 0; loc < o; ++loc) {
            Vector aj(nk), gj(nl);
            for (std::size_t i = 0; i < nk; ++i) aj[i] = a_hat[j](i, loc);
            for (std::size_t i = 0; i < nl; ++i) gj[i] = ds[j](i, loc);
            ea += outer(aj, aj);
            eg += outer(gj, gj);
        }
    ea *= 1.0 / (double)n;
    eg *= 1.0 / ((double)n * (double)o);
    CHECK(max_abs_diff(kf.a, ea) < 1e-12);
    CHECK(max_abs_diff(kf.g, eg) < 1e-12);
}

TEST_CASE("end-to-end: factors from a real backward pass keep the trace identity") {
    std::mt19937_64 rng(14);
    auto net = Network::make(
        {LayerSpec::dense_layer(6, 5, Activation::relu, BiasMode::homogeneous),
         LayerSpec::dense_layer(5, 4, Activation::identity)},
        LossKind::softmax_cross_entropy);
    net.init_weights(rng);
    Matrix inputs = random_matrix(6, 20, rng);
    auto cache = forward(net, inputs);
    auto targets = sample_labels(net, cache.output, rng);
    auto trace_b = backward(net, cache, targets);

    for (int layer : net.parametric_layers()) {
        auto block = exact_fim_dense(trace_b, layer);
        auto f = tkfac_factors(trace_b, layer);
        CHECK(trace(block.f) == doctest::Approx(f.delta).epsilon(1e-10));
        CHECK(trace(f.phi) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(trace(f.psi) == doctest::Approx(1.0).epsilon(1e-12));
    }
}
