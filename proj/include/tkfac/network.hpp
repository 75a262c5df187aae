#pragma once

#include "tkfac/matrix.hpp"

#include <optional>
#include <random>
#include <vector>

namespace tkfac {

enum class Activation { identity, relu, sigmoid };
enum class LossKind { softmax_cross_entropy, binary_cross_entropy };
enum class BiasMode { none, homogeneous };
enum class LabelMode { data, model_sample };

struct ConvGeom {
    int in_h = 0;
    int in_w = 0;
    int kernel = 1;
    int stride = 1;
    int padding = 0;

    int out_h() const { return (in_h + 2 * padding - kernel) / stride + 1; }
    int out_w() const { return (in_w + 2 * padding - kernel) / stride + 1; }
    int locations() const { return out_h() * out_w(); }
    bool valid() const {
        return in_h >= 1 && in_w >= 1 && kernel >= 1 && stride >= 1 && padding >= 0 &&
               in_h + 2 * padding >= kernel && in_w + 2 * padding >= kernel;
    }
};

struct LayerSpec {
    enum class Kind { dense, conv, activation_only };

    Kind kind = Kind::dense;
    int in_width = 0;   // dense / activation_only
    int out_width = 0;  // dense
    int in_channels = 0;
    int out_channels = 0;
    ConvGeom geom;
    Activation activation = Activation::identity;
    BiasMode bias = BiasMode::none;

    static LayerSpec dense_layer(int in, int out, Activation act, BiasMode bias = BiasMode::none);
    static LayerSpec conv_layer(int in_ch, int out_ch, ConvGeom geom, Activation act,
                                BiasMode bias = BiasMode::none);
    static LayerSpec activation_layer(int width, Activation act);

    bool parametric() const { return kind != Kind::activation_only; }
    bool is_conv() const { return kind == Kind::conv; }

    /// Weight shape: m_l x m_{l-1}(+1) for dense, n_l x n_{l-1} k^2 (+1) for conv.
    int weight_rows() const;
    int weight_cols() const;
    /// Flattened input/output vector lengths.
    int input_dim() const;
    int output_dim() const;
    /// Spatial location count o_{l-1} (1 for dense).
    int locations() const { return is_conv() ? geom.locations() : 1; }
};

struct Network {
    std::vector<LayerSpec> layers;
    std::vector<Matrix> weights;  // aligned with layers; empty for non-parametric
    LossKind loss = LossKind::softmax_cross_entropy;

    /// Validates shape conformance and allocates zero weights.
    static Network make(std::vector<LayerSpec> layers, LossKind loss);

    int input_dim() const { return layers.front().input_dim(); }
    int output_dim() const { return layers.back().output_dim(); }
    std::vector<int> parametric_layers() const;

    void init_weights(std::mt19937_64& rng);
};

struct ForwardCache {
    Matrix input;                              // d0 x N
    std::vector<Matrix> preacts;               // per layer, flattened s_l (dim x N)
    std::vector<Matrix> activations;           // per layer, flattened a_l (dim x N)
    std::vector<std::vector<Matrix>> patches;  // per layer per sample: im2col output (conv only)
    Matrix output;                             // a_L (dim x N)
    int batch() const { return (int)input.cols(); }
};

/// Targets for the loss: class labels (softmax) or a dense target matrix
/// (binary cross-entropy), one column per sample.
struct Targets {
    std::vector<int> labels;
    Matrix values;
};

struct LayerTrace {
    int layer = -1;  // index into Network::layers
    bool is_conv = false;
    Matrix a;                   // dense: (m_{l-1}[+1]) x N activations
    Matrix g;                   // dense: m_l x N pre-activation gradients
    std::vector<Matrix> a_hat;  // conv: per-sample im2col (n k^2 [+1]) x o
    std::vector<Matrix> ds;     // conv: per-sample n_l x o pre-activation gradients
    Matrix grad;                // mean dL/dW over the batch
};

struct BatchTrace {
    std::vector<LayerTrace> layers;  // one entry per parametric layer, in order
    double loss = 0.0;
    int sample_count = 0;

    const LayerTrace& at_layer(int network_layer) const;
};

ForwardCache forward(const Network& net, const Matrix& inputs);

double loss_value(const Network& net, const Matrix& output, const Targets& targets);

/// Backprop through the cached forward pass. Returns per-sample activations
/// and pre-activation gradients together with the mean weight gradient.
BatchTrace backward(const Network& net, const ForwardCache& cache, const Targets& targets);

/// Draws targets from the network's own predictive distribution (the true
/// Fisher's label distribution): categorical under softmax, factorized
/// Bernoulli under binary cross-entropy.
Targets sample_labels(const Network& net, const Matrix& output, std::mt19937_64& rng);

/// im2col for a single sample stored as channels x (h*w), row-major spatial.
Matrix im2col(const Matrix& image, const ConvGeom& geom);
/// Adjoint of im2col: scatters patch columns back onto the image grid.
Matrix col2im(const Matrix& cols, int channels, const ConvGeom& geom);

Matrix softmax_columns(const Matrix& logits);

} // namespace tkfac
