#include "tkfac/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace tkfac {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_be32(std::istream& in, const std::string& what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataFormatError("truncated IDX file while reading " + what);
    return ((std::uint32_t)b[0] << 24) | ((std::uint32_t)b[1] << 16) | ((std::uint32_t)b[2] << 8) |
           (std::uint32_t)b[3];
}

void write_be32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v >> 24), (unsigned char)(v >> 16),
                          (unsigned char)(v >> 8), (unsigned char)v};
    out.write(reinterpret_cast<const char*>(b), 4);
}

} // namespace

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw DataFormatError("cannot open image file: " + images_path);
    if (read_be32(img, "image magic") != kImageMagic)
        throw DataFormatError("bad image magic in " + images_path);
    const std::uint32_t count = read_be32(img, "image count");
    const std::uint32_t rows = read_be32(img, "image rows");
    const std::uint32_t cols = read_be32(img, "image cols");

    Dataset d;
    d.image_h = (int)rows;
    d.image_w = (int)cols;
    d.channels = 1;
    d.inputs = Matrix(rows * cols, count);
    std::vector<unsigned char> buf(rows * cols);
    for (std::uint32_t i = 0; i < count; ++i) {
        img.read(reinterpret_cast<char*>(buf.data()), (std::streamsize)buf.size());
        if (!img) throw DataFormatError("truncated image data in " + images_path);
        for (std::size_t p = 0; p < buf.size(); ++p) d.inputs(p, i) = buf[p] / 255.0;
    }

    if (!labels_path.empty()) {
        std::ifstream lab(labels_path, std::ios::binary);
        if (!lab) throw DataFormatError("cannot open label file: " + labels_path);
        if (read_be32(lab, "label magic") != kLabelMagic)
            throw DataFormatError("bad label magic in " + labels_path);
        const std::uint32_t lcount = read_be32(lab, "label count");
        if (lcount != count) throw DataFormatError("label/image count mismatch");
        d.labels.resize(count);
        for (std::uint32_t i = 0; i < count; ++i) {
            char c;
            lab.read(&c, 1);
            if (!lab) throw DataFormatError("truncated label data in " + labels_path);
            d.labels[i] = (unsigned char)c;
        }
    }
    return d;
}

Dataset downsample_2x2(const Dataset& d) {
    if (d.image_h % 2 != 0 || d.image_w % 2 != 0 || d.channels != 1)
        throw DataFormatError("downsample_2x2: needs even single-channel images");
    Dataset out;
    out.image_h = d.image_h / 2;
    out.image_w = d.image_w / 2;
    out.channels = 1;
    out.labels = d.labels;
    out.inputs = Matrix((std::size_t)(out.image_h * out.image_w), d.inputs.cols());
    for (std::size_t s = 0; s < d.inputs.cols(); ++s)
        for (int y = 0; y < out.image_h; ++y)
            for (int x = 0; x < out.image_w; ++x) {
                const double v = (d.inputs((2 * y) * d.image_w + 2 * x, s) +
                                  d.inputs((2 * y) * d.image_w + 2 * x + 1, s) +
                                  d.inputs((2 * y + 1) * d.image_w + 2 * x, s) +
                                  d.inputs((2 * y + 1) * d.image_w + 2 * x + 1, s)) /
                                 4.0;
                out.inputs((std::size_t)(y * out.image_w + x), s) = v;
            }
    return out;
}

Dataset subset(const Dataset& d, int count, unsigned long long seed) {
    count = std::min(count, d.sample_count());
    std::vector<int> order(d.sample_count());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    Dataset out;
    out.image_h = d.image_h;
    out.image_w = d.image_w;
    out.channels = d.channels;
    out.inputs = Matrix(d.inputs.rows(), (std::size_t)count);
    if (!d.labels.empty()) out.labels.resize(count);
    for (int j = 0; j < count; ++j) {
        const int idx = order[j];
        for (std::size_t r = 0; r < d.inputs.rows(); ++r) out.inputs(r, j) = d.inputs(r, idx);
        if (!d.labels.empty()) out.labels[j] = d.labels[idx];
    }
    return out;
}

Dataset synthetic_dataset(const SyntheticSpec& spec, unsigned long long seed) {
    if (spec.dim != spec.image_h * spec.image_w * spec.channels)
        throw DataFormatError("synthetic_dataset: dim does not match image geometry");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.08);

    const int n_classes = std::max(1, spec.classes);
    // One blob template per class: a couple of Gaussian bumps on the grid.
    std::vector<std::vector<double>> templates(n_classes, std::vector<double>(spec.dim, 0.0));
    for (int c = 0; c < n_classes; ++c) {
        for (int blob = 0; blob < 3; ++blob) {
            const double cy = unif(rng) * spec.image_h;
            const double cx = unif(rng) * spec.image_w;
            const double sig = 1.0 + 2.0 * unif(rng);
            const double amp = 0.5 + 0.5 * unif(rng);
            for (int ch = 0; ch < spec.channels; ++ch)
                for (int y = 0; y < spec.image_h; ++y)
                    for (int x = 0; x < spec.image_w; ++x) {
                        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                        templates[c][(ch * spec.image_h + y) * spec.image_w + x] +=
                            amp * std::exp(-d2 / (2.0 * sig * sig));
                    }
        }
    }

    Dataset d;
    d.image_h = spec.image_h;
    d.image_w = spec.image_w;
    d.channels = spec.channels;
    d.inputs = Matrix((std::size_t)spec.dim, (std::size_t)spec.count);
    if (spec.classes > 0) d.labels.resize(spec.count);
    std::uniform_int_distribution<int> pick(0, n_classes - 1);
    for (int s = 0; s < spec.count; ++s) {
        const int c = pick(rng);
        if (spec.classes > 0) d.labels[s] = c;
        for (int p = 0; p < spec.dim; ++p) {
            const double v = templates[c][p] + noise(rng);
            d.inputs((std::size_t)p, s) = std::clamp(v, 0.0, 1.0);
        }
    }
    return d;
}

void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
    std::ofstream img(images_path, std::ios::binary);
    if (!img) throw DataFormatError("cannot write image file: " + images_path);
    write_be32(img, kImageMagic);
    write_be32(img, (std::uint32_t)d.sample_count());
    write_be32(img, (std::uint32_t)d.image_h);
    write_be32(img, (std::uint32_t)d.image_w);
    for (int s = 0; s < d.sample_count(); ++s)
        for (std::size_t p = 0; p < d.inputs.rows(); ++p) {
            const unsigned char b =
                (unsigned char)std::lround(std::clamp(d.inputs(p, s), 0.0, 1.0) * 255.0);
            img.write(reinterpret_cast<const char*>(&b), 1);
        }

    if (!labels_path.empty() && !d.labels.empty()) {
        std::ofstream lab(labels_path, std::ios::binary);
        if (!lab) throw DataFormatError("cannot write label file: " + labels_path);
        write_be32(lab, kLabelMagic);
        write_be32(lab, (std::uint32_t)d.labels.size());
        for (int v : d.labels) {
            const char c = (char)v;
            lab.write(&c, 1);
        }
    }
}

} // namespace tkfac
