#pragma once

// Dataset ingestion and serialization: IDX (MNIST/FashionMNIST), CIFAR10
// binary batches, a procedural toy dataset for fast deterministic tests, and
// the .dcgm condensed-set format (little-endian, bit-exact round trip).

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dc/tensor.hpp"

namespace dc {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

// Images are stored normalized: x = (raw - mean[ch]) / std[ch], with the
// normalization constants of the training split kept alongside.
struct Dataset {
    Tensor<float> images;  // [N,c,H,W]
    std::vector<int> labels;
    int classes = 0;
    std::string name;
    std::string split;  // "train" or "test"
    std::vector<float> norm_mean, norm_std;

    int64_t size() const { return images.shape.empty() ? 0 : images.shape[0]; }
    int64_t channels() const { return images.shape[1]; }
    int64_t height() const { return images.shape[2]; }
    int64_t width() const { return images.shape[3]; }

    std::vector<std::vector<int>> indices_by_class() const {
        std::vector<std::vector<int>> by(static_cast<size_t>(classes));
        for (size_t i = 0; i < labels.size(); ++i)
            by[static_cast<size_t>(labels[i])].push_back(static_cast<int>(i));
        return by;
    }
};

// A plain training set: selected real images or a synthetic set.
struct TrainSet {
    Tensor<float> images;  // [N,c,H,W]
    std::vector<int> labels;
};

inline TrainSet subset(const Dataset& ds, const std::vector<int>& indices) {
    const int64_t c = ds.channels(), h = ds.height(), w = ds.width();
    const int64_t px = c * h * w;
    TrainSet out;
    out.images = Tensor<float>({static_cast<int64_t>(indices.size()), c, h, w});
    out.labels.reserve(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
        const int64_t src = indices[i];
        std::copy_n(ds.images.v.begin() + src * px, px,
                    out.images.v.begin() + static_cast<int64_t>(i) * px);
        out.labels.push_back(ds.labels[static_cast<size_t>(src)]);
    }
    return out;
}

// Learnable condensed images with fixed, balanced, class-major labels.
struct SyntheticSet {
    Tensor<float> images;  // [classes*ipc, c, H, W]
    std::vector<int> labels;
    int classes = 0;
    int ipc = 0;
    std::vector<float> norm_mean, norm_std;
    std::string provenance;

    TrainSet as_train_set() const { return {images, labels}; }
};

// ---- IDX ----

// Big-endian IDX pair (images magic 0x00000803, labels 0x00000801).
// The result is normalized with its own per-channel statistics.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// Loads train and test IDX pairs from a directory using the standard MNIST
// file names; both splits are normalized with the training statistics.
std::pair<Dataset, Dataset> load_mnist_dir(const std::string& dir, const std::string& name = "mnist");

// ---- CIFAR10 binary batches ----

std::pair<Dataset, Dataset> load_cifar10_dir(const std::string& dir);

// ---- toy dataset ----

struct ToyOptions {
    int jitter = 1;          // max |shift| in pixels
    double noise_std = 0.5;  // additive gaussian pixel noise
    double amp_lo = 0.7, amp_hi = 1.3;
    int test_per_class = 0;  // 0: max(10, per_class/5)
};

// Clean class template in [0,1], one distinct pattern per class.
Tensor<float> toy_template(int cls, int size);

// Procedural grayscale dataset: C template classes with jitter, amplitude
// scaling and pixel noise. Deterministic per seed (bit-exact).
std::pair<Dataset, Dataset> make_toy(int classes, int per_class, int size, uint64_t seed,
                                     const ToyOptions& opt = {});

// ---- condensed-set serialization (.dcgm) ----

constexpr uint16_t kCondensedFormatVersion = 1;

// layout, little-endian:
//   "DCGM" | u16 version | u16 reserved | u32 C, ipc, c, H, W
//   f32 mean[c] | f32 std[c] | u32 prov_len | prov bytes
//   i32 labels[C*ipc] | f32 pixels[C*ipc*c*H*W]
void save_condensed(const SyntheticSet& set, const std::string& path);
SyntheticSet load_condensed(const std::string& path);

// Reads only the header; used by the `inspect` command.
std::string describe_condensed(const std::string& path);

// ---- image export ----

// De-normalizes, clamps to [0,1] and tiles classes as rows, ipc as columns.
void export_image_grid(const SyntheticSet& set, const std::string& path);

// Minimal PNG encoder (8-bit gray or RGB, stored deflate blocks).
void write_png(const std::string& path, const std::vector<uint8_t>& pixels,
               int width, int height, int channels);

} // namespace dc
