#pragma once

#include "tkfac/matrix.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tkfac {

class DataFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Dataset {
    Matrix inputs;            // dim x N, values in [0, 1] for image data
    std::vector<int> labels;  // empty when unlabeled
    int image_h = 0;
    int image_w = 0;
    int channels = 1;
    int sample_count() const { return (int)inputs.cols(); }
    int dim() const { return (int)inputs.rows(); }
};

/// Loads IDX-format images (magic 0x00000803) and labels (0x00000801),
/// normalizing pixel values to [0, 1].
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);

/// 2x2 mean pooling; requires even spatial dimensions.
Dataset downsample_2x2(const Dataset& d);

/// Deterministic subset of `count` samples chosen by the seeded generator.
Dataset subset(const Dataset& d, int count, unsigned long long seed);

struct SyntheticSpec {
    int dim = 196;
    int count = 1000;
    int classes = 10;  // 0: unlabeled (autoencoder-style inputs only)
    int image_h = 14;
    int image_w = 14;
    int channels = 1;
};

/// Deterministic synthetic image-like dataset: each class has a fixed
/// Gaussian-blob template, samples add pixel noise; values clipped to [0,1].
Dataset synthetic_dataset(const SyntheticSpec& spec, unsigned long long seed);

/// Writes a dataset back out as an IDX image/label file pair (test and
/// fixture tooling for environments without the real files).
void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path);

} // namespace tkfac
