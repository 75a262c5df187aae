#include "tkfac/network.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tkfac {

namespace {

double activate(Activation act, double x) {
    switch (act) {
        case Activation::identity: return x;
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
    }
    return x;
}

// Derivative in terms of pre-activation s and activation a = phi(s).
// ReLU derivative at 0 is defined as 0.
double activate_deriv(Activation act, double s, double a) {
    switch (act) {
        case Activation::identity: return 1.0;
        case Activation::relu: return s > 0.0 ? 1.0 : 0.0;
        case Activation::sigmoid: return a * (1.0 - a);
    }
    (void)s;
    return 1.0;
}

constexpr double kProbClamp = 1e-12;

} // namespace

LayerSpec LayerSpec::dense_layer(int in, int out, Activation act, BiasMode bias) {
    if (in < 1 || out < 1) throw std::invalid_argument("dense_layer: widths must be >= 1");
    LayerSpec s;
    s.kind = Kind::dense;
    s.in_width = in;
    s.out_width = out;
    s.activation = act;
    s.bias = bias;
    return s;
}

LayerSpec LayerSpec::conv_layer(int in_ch, int out_ch, ConvGeom geom, Activation act, BiasMode bias) {
    if (in_ch < 1 || out_ch < 1) throw std::invalid_argument("conv_layer: channel counts must be >= 1");
    if (!geom.valid()) throw std::invalid_argument("conv_layer: invalid geometry");
    LayerSpec s;
    s.kind = Kind::conv;
    s.in_channels = in_ch;
    s.out_channels = out_ch;
    s.geom = geom;
    s.activation = act;
    s.bias = bias;
    return s;
}

LayerSpec LayerSpec::activation_layer(int width, Activation act) {
    if (width < 1) throw std::invalid_argument("activation_layer: width must be >= 1");
    LayerSpec s;
    s.kind = Kind::activation_only;
    s.in_width = width;
    s.out_width = width;
    s.activation = act;
    return s;
}

int LayerSpec::weight_rows() const {
    switch (kind) {
        case Kind::dense: return out_width;
        case Kind::conv: return out_channels;
        default: return 0;
    }
}

int LayerSpec::weight_cols() const {
    const int extra = bias == BiasMode::homogeneous ? 1 : 0;
    switch (kind) {
        case Kind::dense: return in_width + extra;
        case Kind::conv: return in_channels * geom.kernel * geom.kernel + extra;
        default: return 0;
    }
}

int LayerSpec::input_dim() const {
    switch (kind) {
        case Kind::dense: return in_width;
        case Kind::conv: return in_channels * geom.in_h * geom.in_w;
        default: return in_width;
    }
}

int LayerSpec::output_dim() const {
    switch (kind) {
        case Kind::dense: return out_width;
        case Kind::conv: return out_channels * geom.locations();
        default: return out_width;
    }
}

Network Network::make(std::vector<LayerSpec> layers, LossKind loss) {
    if (layers.empty()) throw std::invalid_argument("Network::make: no layers");
    for (std::size_t l = 1; l < layers.size(); ++l) {
        if (layers[l].input_dim() != layers[l - 1].output_dim())
            throw std::invalid_argument("Network::make: layer " + std::to_string(l) +
                                        " input dim " + std::to_string(layers[l].input_dim()) +
                                        " != previous output dim " +
                                        std::to_string(layers[l - 1].output_dim()));
    }
    const Activation last = layers.back().activation;
    if (loss == LossKind::softmax_cross_entropy && last != Activation::identity)
        throw std::invalid_argument("Network::make: softmax loss requires identity output activation");
    if (loss == LossKind::binary_cross_entropy && last != Activation::sigmoid)
        throw std::invalid_argument("Network::make: binary cross-entropy requires sigmoid output");

    Network net;
    net.loss = loss;
    net.layers = std::move(layers);
    net.weights.resize(net.layers.size());
    for (std::size_t l = 0; l < net.layers.size(); ++l)
        if (net.layers[l].parametric())
            net.weights[l] = Matrix(net.layers[l].weight_rows(), net.layers[l].weight_cols());
    return net;
}

std::vector<int> Network::parametric_layers() const {
    std::vector<int> idx;
    for (std::size_t l = 0; l < layers.size(); ++l)
        if (layers[l].parametric()) idx.push_back((int)l);
    return idx;
}

void Network::init_weights(std::mt19937_64& rng) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
        if (!layers[l].parametric()) continue;
        const LayerSpec& spec = layers[l];
        int fan_in = spec.weight_cols() - (spec.bias == BiasMode::homogeneous ? 1 : 0);
        const double scale = spec.activation == Activation::relu ? std::sqrt(2.0 / fan_in)
                                                                 : std::sqrt(1.0 / fan_in);
        std::normal_distribution<double> dist(0.0, scale);
        Matrix& w = weights[l];
        for (std::size_t i = 0; i < w.rows(); ++i)
            for (std::size_t j = 0; j < w.cols(); ++j) w(i, j) = dist(rng);
        if (spec.bias == BiasMode::homogeneous)
            for (std::size_t i = 0; i < w.rows(); ++i) w(i, w.cols() - 1) = 0.0;
    }
}

Matrix im2col(const Matrix& image, const ConvGeom& geom) {
    if (!geom.valid()) throw std::invalid_argument("im2col: invalid geometry");
    const int channels = (int)image.rows();
    if ((int)image.cols() != geom.in_h * geom.in_w)
        throw DimensionError("im2col: spatial size mismatch");
    const int k = geom.kernel;
    const int oh = geom.out_h();
    const int ow = geom.out_w();
    Matrix cols(channels * k * k, oh * ow);
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            const int col = oy * ow + ox;
            for (int c = 0; c < channels; ++c)
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const int iy = oy * geom.stride - geom.padding + ky;
                        const int ix = ox * geom.stride - geom.padding + kx;
                        const int row = (c * k + ky) * k + kx;
                        double v = 0.0;
                        if (iy >= 0 && iy < geom.in_h && ix >= 0 && ix < geom.in_w)
                            v = image(c, iy * geom.in_w + ix);
                        cols(row, col) = v;
                    }
        }
    return cols;
}

Matrix col2im(const Matrix& cols, int channels, const ConvGeom& geom) {
    const int k = geom.kernel;
    const int oh = geom.out_h();
    const int ow = geom.out_w();
    if ((int)cols.rows() != channels * k * k || (int)cols.cols() != oh * ow)
        throw DimensionError("col2im: shape mismatch");
    Matrix image(channels, geom.in_h * geom.in_w);
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            const int col = oy * ow + ox;
            for (int c = 0; c < channels; ++c)
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const int iy = oy * geom.stride - geom.padding + ky;
                        const int ix = ox * geom.stride - geom.padding + kx;
                        if (iy < 0 || iy >= geom.in_h || ix < 0 || ix >= geom.in_w) continue;
                        const int row = (c * k + ky) * k + kx;
                        image(c, iy * geom.in_w + ix) += cols(row, col);
                    }
        }
    return image;
}

namespace {

Matrix append_ones_row(const Matrix& a) {
    Matrix out(a.rows() + 1, a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
    for (std::size_t j = 0; j < a.cols(); ++j) out(a.rows(), j) = 1.0;
    return out;
}

Matrix drop_last_row(const Matrix& a) {
    Matrix out(a.rows() - 1, a.cols());
    for (std::size_t i = 0; i + 1 < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
    return out;
}

Matrix apply_activation(Activation act, const Matrix& s) {
    Matrix a = s;
    if (act != Activation::identity)
        for (double& x : a.data()) x = activate(act, x);
    return a;
}

// Reshape column `j` of `flat` (n*o entries, channel-major) into n x o.
Matrix column_as_matrix(const Matrix& flat, std::size_t j, int n, int o) {
    Matrix m(n, o);
    for (int c = 0; c < n; ++c)
        for (int p = 0; p < o; ++p) m(c, p) = flat(c * o + p, j);
    return m;
}

void matrix_into_column(const Matrix& m, Matrix& flat, std::size_t j) {
    std::size_t r = 0;
    for (std::size_t c = 0; c < m.rows(); ++c)
        for (std::size_t p = 0; p < m.cols(); ++p) flat(r++, j) = m(c, p);
}

} // namespace

ForwardCache forward(const Network& net, const Matrix& inputs) {
    if ((int)inputs.rows() != net.input_dim())
        throw DimensionError("forward: input dim " + std::to_string(inputs.rows()) +
                             " does not match network input " + std::to_string(net.input_dim()));
    const int batch = (int)inputs.cols();
    ForwardCache cache;
    cache.input = inputs;
    cache.preacts.resize(net.layers.size());
    cache.activations.resize(net.layers.size());
    cache.patches.resize(net.layers.size());

    const Matrix* prev = &cache.input;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const LayerSpec& spec = net.layers[l];
        switch (spec.kind) {
            case LayerSpec::Kind::dense: {
                Matrix a_in = spec.bias == BiasMode::homogeneous ? append_ones_row(*prev) : *prev;
                cache.preacts[l] = matmul(net.weights[l], a_in);
                break;
            }
            case LayerSpec::Kind::conv: {
                const int o = spec.geom.locations();
                Matrix s_flat(spec.out_channels * o, batch);
                cache.patches[l].resize(batch);
                for (int i = 0; i < batch; ++i) {
                    Matrix image = column_as_matrix(*prev, i, spec.in_channels,
                                                    spec.geom.in_h * spec.geom.in_w);
                    Matrix cols = im2col(image, spec.geom);
                    if (spec.bias == BiasMode::homogeneous) cols = append_ones_row(cols);
                    Matrix s = matmul(net.weights[l], cols);
                    matrix_into_column(s, s_flat, i);
                    cache.patches[l][i] = std::move(cols);
                }
                cache.preacts[l] = std::move(s_flat);
                break;
            }
            case LayerSpec::Kind::activation_only:
                cache.preacts[l] = *prev;
                break;
        }
        cache.activations[l] = apply_activation(spec.activation, cache.preacts[l]);
        prev = &cache.activations[l];
    }
    cache.output = cache.activations.back();
    return cache;
}

Matrix softmax_columns(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (std::size_t j = 0; j < logits.cols(); ++j) {
        double mx = logits(0, j);
        for (std::size_t i = 1; i < logits.rows(); ++i) mx = std::max(mx, logits(i, j));
        double sum = 0.0;
        for (std::size_t i = 0; i < logits.rows(); ++i) {
            const double e = std::exp(logits(i, j) - mx);
            p(i, j) = e;
            sum += e;
        }
        for (std::size_t i = 0; i < logits.rows(); ++i) p(i, j) /= sum;
    }
    return p;
}

double loss_value(const Network& net, const Matrix& output, const Targets& targets) {
    const std::size_t batch = output.cols();
    double total = 0.0;
    if (net.loss == LossKind::softmax_cross_entropy) {
        if (targets.labels.size() != batch) throw DimensionError("loss_value: label count mismatch");
        Matrix p = softmax_columns(output);
        for (std::size_t j = 0; j < batch; ++j) {
            const double pj = std::max(p((std::size_t)targets.labels[j], j), kProbClamp);
            total -= std::log(pj);
        }
    } else {
        if (targets.values.rows() != output.rows() || targets.values.cols() != output.cols())
            throw DimensionError("loss_value: target shape mismatch");
        for (std::size_t j = 0; j < batch; ++j)
            for (std::size_t i = 0; i < output.rows(); ++i) {
                const double p = std::clamp(output(i, j), kProbClamp, 1.0 - kProbClamp);
                const double y = targets.values(i, j);
                total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
            }
    }
    return total / (double)batch;
}

BatchTrace backward(const Network& net, const ForwardCache& cache, const Targets& targets) {
    const int batch = cache.batch();
    const int L = (int)net.layers.size();

    // dL/ds for the output layer; the loss/activation pairing enforced by
    // Network::make gives the usual (prediction - target) form.
    Matrix ds_out;
    if (net.loss == LossKind::softmax_cross_entropy) {
        if ((int)targets.labels.size() != batch)
            throw DimensionError("backward: label count mismatch");
        ds_out = softmax_columns(cache.output);
        for (int j = 0; j < batch; ++j) ds_out((std::size_t)targets.labels[j], (std::size_t)j) -= 1.0;
    } else {
        if (targets.values.rows() != cache.output.rows() || targets.values.cols() != cache.output.cols())
            throw DimensionError("backward: target shape mismatch");
        ds_out = cache.output - targets.values;
    }

    BatchTrace trace;
    trace.sample_count = batch;
    trace.loss = loss_value(net, cache.output, targets);

    std::vector<LayerTrace> reversed;
    Matrix da;  // dL/da_l for the boundary below layer l+1
    for (int l = L - 1; l >= 0; --l) {
        const LayerSpec& spec = net.layers[l];
        Matrix ds;
        if (l == L - 1) {
            ds = std::move(ds_out);
        } else {
            ds = da;
            const Matrix& s = cache.preacts[l];
            const Matrix& a = cache.activations[l];
            for (std::size_t idx = 0; idx < ds.size(); ++idx)
                ds.data()[idx] *= activate_deriv(spec.activation, s.data()[idx], a.data()[idx]);
        }

        const Matrix& below = l == 0 ? cache.input : cache.activations[l - 1];
        switch (spec.kind) {
            case LayerSpec::Kind::dense: {
                LayerTrace lt;
                lt.layer = l;
                lt.is_conv = false;
                lt.a = spec.bias == BiasMode::homogeneous ? append_ones_row(below) : below;
                lt.g = ds;
                lt.grad = matmul_nt(ds, lt.a);
                lt.grad *= 1.0 / (double)batch;
                reversed.push_back(std::move(lt));

                Matrix da_prev = matmul_tn(net.weights[l], ds);
                if (spec.bias == BiasMode::homogeneous) da_prev = drop_last_row(da_prev);
                da = std::move(da_prev);
                break;
            }
            case LayerSpec::Kind::conv: {
                const int o = spec.geom.locations();
                LayerTrace lt;
                lt.layer = l;
                lt.is_conv = true;
                lt.a_hat = cache.patches[l];
                lt.ds.resize(batch);
                lt.grad = Matrix(spec.weight_rows(), spec.weight_cols());
                Matrix da_prev(spec.input_dim(), batch);
                for (int i = 0; i < batch; ++i) {
                    Matrix dsi = column_as_matrix(ds, i, spec.out_channels, o);
                    add_matmul_nt(lt.grad, dsi, lt.a_hat[i], 1.0 / (double)batch);
                    Matrix dcols = matmul_tn(net.weights[l], dsi);
                    if (spec.bias == BiasMode::homogeneous) dcols = drop_last_row(dcols);
                    Matrix dimage = col2im(dcols, spec.in_channels, spec.geom);
                    matrix_into_column(dimage, da_prev, i);
                    lt.ds[i] = std::move(dsi);
                }
                reversed.push_back(std::move(lt));
                da = std::move(da_prev);
                break;
            }
            case LayerSpec::Kind::activation_only:
                da = std::move(ds);
                break;
        }
    }

    trace.layers.assign(std::make_move_iterator(reversed.rbegin()),
                        std::make_move_iterator(reversed.rend()));
    return trace;
}

Targets sample_labels(const Network& net, const Matrix& output, std::mt19937_64& rng) {
    Targets t;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    if (net.loss == LossKind::softmax_cross_entropy) {
        Matrix p = softmax_columns(output);
        t.labels.resize(output.cols());
        for (std::size_t j = 0; j < output.cols(); ++j) {
            const double u = unif(rng);
            double acc = 0.0;
            std::size_t pick = output.rows() - 1;
            for (std::size_t i = 0; i < output.rows(); ++i) {
                acc += p(i, j);
                if (u <= acc) {
                    pick = i;
                    break;
                }
            }
            t.labels[j] = (int)pick;
        }
    } else {
        t.values = Matrix(output.rows(), output.cols());
        for (std::size_t j = 0; j < output.cols(); ++j)
            for (std::size_t i = 0; i < output.rows(); ++i)
                t.values(i, j) = unif(rng) < output(i, j) ? 1.0 : 0.0;
    }
    return t;
}

const LayerTrace& BatchTrace::at_layer(int network_layer) const {
    for (const LayerTrace& lt : layers)
        if (lt.layer == network_layer) return lt;
    throw std::out_of_range("BatchTrace::at_layer: no trace for layer " +
                            std::to_string(network_layer));
}

} // namespace tkfac
