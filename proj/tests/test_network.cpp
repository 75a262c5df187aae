#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tkfac/network.hpp"

#include <cmath>
#include <random>

using namespace tkfac;

namespace {

double batch_loss(const Network& net, const Matrix& inputs, const Targets& targets) {
    return loss_value(net, forward(net, inputs).output, targets);
}

// Central finite-difference gradient of the mean batch loss w.r.t. weights.
Matrix fd_gradient(Network net, int layer, const Matrix& inputs, const Targets& targets,
                   double h = 1e-6) {
    Matrix g(net.weights[layer].rows(), net.weights[layer].cols());
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) {
            const double w0 = net.weights[layer](i, j);
            net.weights[layer](i, j) = w0 + h;
            const double lp = batch_loss(net, inputs, targets);
            net.weights[layer](i, j) = w0 - h;
            const double lm = batch_loss(net, inputs, targets);
            net.weights[layer](i, j) = w0;
            g(i, j) = (lp - lm) / (2.0 * h);
        }
    return g;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    REQUIRE(a.rows() == b.rows());
    REQUIRE(a.cols() == b.cols());
    double m = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
    return m;
}

// Independent single-sample forward pass written as plain loops.
Vector naive_dense_forward(const Network& net, Vector x) {
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const LayerSpec& spec = net.layers[l];
        REQUIRE(spec.kind == LayerSpec::Kind::dense);
        Vector in = x;
        if (spec.bias == BiasMode::homogeneous) in.push_back(1.0);
        Vector s(spec.out_width, 0.0);
        for (int i = 0; i < spec.out_width; ++i)
            for (std::size_t j = 0; j < in.size(); ++j) s[i] += net.weights[l](i, j) * in[j];
        for (double& v : s) {
            if (spec.activation == Activation::relu) v = v > 0.0 ? v : 0.0;
            if (spec.activation == Activation::sigmoid) v = 1.0 / (1.0 + std::exp(-v));
        }
        x = std::move(s);
    }
    return x;
}

} // namespace

TEST_CASE("Network::make validates conformance and loss pairing") {
    auto l1 = LayerSpec::dense_layer(4, 3, Activation::relu);
    auto out = LayerSpec::dense_layer(3, 2, Activation::identity);
    CHECK_NOTHROW((void)Network::make({l1, out}, LossKind::softmax_cross_entropy));

    // mismatched widths
    CHECK_THROWS_AS((void)Network::make({LayerSpec::dense_layer(4, 5, Activation::relu), out},
                                        LossKind::softmax_cross_entropy),
                    std::invalid_argument);
    // softmax needs identity output
    CHECK_THROWS_AS((void)Network::make({l1, LayerSpec::dense_layer(3, 2, Activation::relu)},
                                        LossKind::softmax_cross_entropy),
                    std::invalid_argument);
    // binary cross-entropy needs sigmoid output
    CHECK_THROWS_AS((void)Network::make({l1, out}, LossKind::binary_cross_entropy),
                    std::invalid_argument);
    CHECK_NOTHROW((void)Network::make({l1, LayerSpec::dense_layer(3, 2, Activation::sigmoid)},
                                      LossKind::binary_cross_entropy));
}

TEST_CASE("forward agrees with a naive per-sample implementation") {
    std::mt19937_64 rng(42);
    auto net = Network::make(
        {LayerSpec::dense_layer(5, 7, Activation::relu, BiasMode::homogeneous),
         LayerSpec::dense_layer(7, 4, Activation::sigmoid),
         LayerSpec::dense_layer(4, 3, Activation::identity)},
        LossKind::softmax_cross_entropy);
    net.init_weights(rng);
    Matrix inputs = random_matrix(5, 9, rng);
    auto cache = forward(net, inputs);
    for (std::size_t j = 0; j < inputs.cols(); ++j) {
        Vector y = naive_dense_forward(net, inputs.col(j));
        for (std::size_t i = 0; i < y.size(); ++i)
            CHECK(cache.output(i, j) == doctest::Approx(y[i]).epsilon(1e-12));
    }
}

TEST_CASE("softmax columns are normalized and shift invariant") {
    std::mt19937_64 rng(1);
    Matrix logits = random_matrix(6, 4, rng, 3.0);
    Matrix p = softmax_columns(logits);
    for (std::size_t j = 0; j < p.cols(); ++j) {
        double sum = 0.0;
        for (std::size_t i = 0; i < p.rows(); ++i) {
            CHECK(p(i, j) > 0.0);
            sum += p(i, j);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    Matrix shifted = logits;
    for (std::size_t j = 0; j < shifted.cols(); ++j)
        for (std::size_t i = 0; i < shifted.rows(); ++i) shifted(i, j) += 100.0;
    CHECK(max_abs_diff(softmax_columns(shifted), p) < 1e-12);
}

TEST_CASE("backward gradient matches finite differences (softmax net)") {
    std::mt19937_64 rng(7);
    auto net = Network::make(
        {LayerSpec::dense_layer(6, 5, Activation::sigmoid, BiasMode::homogeneous),
         LayerSpec::dense_layer(5, 4, Activation::sigmoid),
         LayerSpec::dense_layer(4, 3, Activation::identity)},
        LossKind::softmax_cross_entropy);
    net.init_weights(rng);
    Matrix inputs = random_matrix(6, 8, rng);
    Targets targets;
    std::uniform_int_distribution<int> lab(0, 2);
    for (int i = 0; i < 8; ++i) targets.labels.push_back(lab(rng));

    auto trace = backward(net, forward(net, inputs), targets);
    for (int layer : net.parametric_layers()) {
        Matrix fd = fd_gradient(net, layer, inputs, targets);
        CHECK(max_abs_diff(trace.at_layer(layer).grad, fd) < 1e-5);
    }
}

TEST_CASE("backward gradient matches finite differences (binary cross-entropy autoencoder)") {
    std::mt19937_64 rng(8);
    auto net = Network::make(
        {LayerSpec::dense_layer(6, 4, Activation::sigmoid, BiasMode::homogeneous),
         LayerSpec::dense_layer(4, 6, Activation::sigmoid, BiasMode::homogeneous)},
        LossKind::binary_cross_entropy);
    net.init_weights(rng);
    Matrix inputs(6, 5);
    std::uniform_real_distribution<double> unif(0.05, 0.95);
    for (double& v : inputs.data()) v = unif(rng);
    Targets targets;
    targets.values = inputs;

    auto trace = backward(net, forward(net, inputs), targets);
    for (int layer : net.parametric_layers()) {
        Matrix fd = fd_gradient(net, layer, inputs, targets);
        CHECK(max_abs_diff(trace.at_layer(layer).grad, fd) < 1e-5);
    }
}

TEST_CASE("backward gradient matches finite differences (conv net)") {
    std::mt19937_64 rng(9);
    ConvGeom g1{4, 4, 3, 1, 1};
    ConvGeom g2{4, 4, 2, 2, 0};
    auto net = Network::make(
        {LayerSpec::conv_layer(1, 3, g1, Activation::relu, BiasMode::homogeneous),
         LayerSpec::conv_layer(3, 2, g2, Activation::sigmoid),
         LayerSpec::dense_layer(8, 3, Activation::identity)},
        LossKind::softmax_cross_entropy);
    net.init_weights(rng);
    Matrix inputs = random_matrix(16, 4, rng);
    Targets targets;
    targets.labels = {0, 2, 1, 1};

    auto trace = backward(net, forward(net, inputs), targets);
    for (int layer : net.parametric_layers()) {
        Matrix fd = fd_gradient(net, layer, inputs, targets);
        CHECK(max_abs_diff(trace.at_layer(layer).grad, fd) < 1e-5);
    }
}

TEST_CASE("per-sample dense gradient structure: mean of g a^T") {
    std::mt19937_64 rng(10);
    auto net = Network::make({LayerSpec::dense_layer(4, 3, Activation::identity)},
                             LossKind::softmax_cross_entropy);
    net.init_weights(rng);
    Matrix inputs = random_matrix(4, 6, rng);
    Targets targets;
    targets.labels = {0, 1, 2, 0, 1, 2};
    auto trace = backward(net, forward(net, inputs), targets);
    const LayerTrace& lt = trace.at_layer(0);

    Matrix acc(3, 4);
    for (std::size_t i = 0; i < 6; ++i) {
        Matrix o = outer(lt.g.col(i), lt.a.col(i));
        acc += o;
    }
    acc *= 1.0 / 6.0;
    CHECK(max_abs_diff(acc, lt.grad) < 1e-12);
}

TEST_CASE("im2col matches a hand sliding-window expansion") {
    // 1 channel, 3x3 image with entries 1..9, 2x2 kernel, stride 1, no pad.
    Matrix image(1, 9);
    for (int i = 0; i < 9; ++i) image(0, i) = i + 1;
    ConvGeom geom{3, 3, 2, 1, 0};
    Matrix cols = im2col(image, geom);
    REQUIRE(cols.rows() == 4);
    REQUIRE(cols.cols() == 4);
    const double expect[4][4] = {// patches at (0,0), (0,1), (1,0), (1,1)
                                 {1, 2, 4, 5},
                                 {2, 3, 5, 6},
                                 {4, 5, 7, 8},
                                 {5, 6, 8, 9}};
    for (int p = 0; p < 4; ++p)
        for (int r = 0; r < 4; ++r) CHECK(cols(r, p) == doctest::Approx(expect[p][r]));
}

TEST_CASE("im2col honors padding with zeros") {
    Matrix image(1, 1);
    image(0, 0) = 3.0;
    ConvGeom geom{1, 1, 3, 1, 1};
    Matrix cols = im2col(image, geom);
    REQUIRE(cols.rows() == 9);
    REQUIRE(cols.cols() == 1);
    for (int r = 0; r < 9; ++r) CHECK(cols(r, 0) == doctest::Approx(r == 4 ? 3.0 : 0.0));
}

TEST_CASE("col2im is the adjoint of im2col") {
    std::mt19937_64 rng(11);
    ConvGeom geom{5, 4, 3, 2, 1};
    const int channels = 2;
    Matrix image = random_matrix(channels, 20, rng);
    Matrix cols = random_matrix(channels * 9, geom.locations(), rng);
    // <im2col(x), c> == <x, col2im(c)>
    const double lhs = frob_dot(im2col(image, geom), cols);
    const double rhs = frob_dot(image, col2im(cols, channels, geom));
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("1x1 conv on a 1x1 image equals a dense layer") {
    std::mt19937_64 rng(12);
    ConvGeom geom{1, 1, 1, 1, 0};
    auto conv_net = Network::make(
        {LayerSpec::conv_layer(4, 3, geom, Activation::identity)},
        LossKind::softmax_cross_entropy);
    auto dense_net = Network::make({LayerSpec::dense_layer(4, 3, Activation::identity)},
                                   LossKind::softmax_cross_entropy);
    conv_net.init_weights(rng);
    dense_net.weights[0] = conv_net.weights[0];

    Matrix inputs = random_matrix(4, 5, rng);
    Targets targets;
    targets.labels = {0, 1, 2, 0, 1};
    auto conv_trace = backward(conv_net, forward(conv_net, inputs), targets);
    auto dense_trace = backward(dense_net, forward(dense_net, inputs), targets);
    CHECK(max_abs_diff(conv_trace.at_layer(0).grad, dense_trace.at_layer(0).grad) < 1e-12);
    CHECK(conv_trace.loss == doctest::Approx(dense_trace.loss).epsilon(1e-12));
}

TEST_CASE("loss_value hand examples") {
    auto net = Network::make({LayerSpec::dense_layer(2, 2, Activation::identity)},
                             LossKind::softmax_cross_entropy);
    Matrix out(2, 1);
    out(0, 0) = 0.0;
    out(1, 0) = 0.0;
    Targets t;
    t.labels = {0};
    CHECK(loss_value(net, out, t) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    auto bce = Network::make({LayerSpec::dense_layer(2, 2, Activation::sigmoid)},
                             LossKind::binary_cross_entropy);
    Matrix p(2, 1);
    p(0, 0) = 0.5;
    p(1, 0) = 0.5;
    Targets tb;
    tb.values = Matrix(2, 1);
    tb.values(0, 0) = 1.0;
    CHECK(loss_value(bce, p, tb) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("sample_labels is deterministic under a fixed seed and tracks the model") {
    auto net = Network::make({LayerSpec::dense_layer(3, 3, Activation::identity)},
                             LossKind::softmax_cross_entropy);
    // logits strongly favor class 2
    Matrix out(3, 4000);
    for (std::size_t j = 0; j < out.cols(); ++j) out(2, j) = 4.0;

    std::mt19937_64 rng_a(99), rng_b(99);
    auto ta = sample_labels(net, out, rng_a);
    auto tb = sample_labels(net, out, rng_b);
    REQUIRE(ta.labels.size() == tb.labels.size());
    for (std::size_t i = 0; i < ta.labels.size(); ++i) CHECK(ta.labels[i] == tb.labels[i]);

    int hits = 0;
    for (int l : ta.labels) hits += (l == 2);
    const double p2 = std::exp(4.0) / (std::exp(4.0) + 2.0);  // ~0.9647
    const double freq = hits / 4000.0;
    CHECK(std::abs(freq - p2) < 0.02);
}

TEST_CASE("sample_labels draws factorized Bernoulli targets under BCE") {
    auto net = Network::make({LayerSpec::dense_layer(2, 2, Activation::sigmoid)},
                             LossKind::binary_cross_entropy);
    Matrix out(2, 5000);
    for (std::size_t j = 0; j < out.cols(); ++j) {
        out(0, j) = 0.9;
        out(1, j) = 0.1;
    }
    std::mt19937_64 rng(123);
    auto t = sample_labels(net, out, rng);
    double mean0 = 0.0, mean1 = 0.0;
    for (std::size_t j = 0; j < out.cols(); ++j) {
        CHECK((t.values(0, j) == 0.0 || t.values(0, j) == 1.0));
        mean0 += t.values(0, j);
        mean1 += t.values(1, j);
    }
    CHECK(std::abs(mean0 / 5000.0 - 0.9) < 0.02);
    CHECK(std::abs(mean1 / 5000.0 - 0.1) < 0.02);
}

TEST_CASE("init_weights is seed-deterministic and zeroes bias columns") {
    auto make_net = [] {
        return Network::make(
            {LayerSpec::dense_layer(4, 3, Activation::relu, BiasMode::homogeneous),
             LayerSpec::dense_layer(3, 2, Activation::identity)},
            LossKind::softmax_cross_entropy);
    };
    auto n1 = make_net();
    auto n2 = make_net();
    std::mt19937_64 r1(5), r2(5);
    n1.init_weights(r1);
    n2.init_weights(r2);
    CHECK(max_abs_diff(n1.weights[0], n2.weights[0]) == 0.0);
    CHECK(max_abs_diff(n1.weights[1], n2.weights[1]) == 0.0);
    for (std::size_t i = 0; i < n1.weights[0].rows(); ++i)
        CHECK(n1.weights[0](i, n1.weights[0].cols() - 1) == 0.0);
}
