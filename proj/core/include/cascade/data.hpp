#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cascade/tensor.hpp"

namespace cascade {

struct Dataset {
    Tensor<float> images;  // N,C,H,W in [0, 1]
    std::vector<int> labels;
    std::size_t class_count = 0;
    std::string split;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t channels() const { return images.dim(1); }
    std::size_t height() const { return images.dim(2); }
    std::size_t width() const { return images.dim(3); }
    void validate() const;
};

/// CIFAR-10 binary records: one label byte, then 3072 pixel bytes (R, G, B planes of 32x32).
Dataset parse_cifar10_records(std::span<const std::uint8_t> bytes, const std::string& split,
                              const std::string& source = "<memory>");
/// Reads data_batch_1..5.bin and test_batch.bin.
std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir);

Dataset parse_mnist_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                        const std::string& split);
/// Reads train-{images-idx3,labels-idx1}-ubyte and t10k-{...}-ubyte.
std::pair<Dataset, Dataset> load_mnist_idx(const std::filesystem::path& dir);

struct SyntheticSpec {
    std::uint64_t seed = 0;
    std::size_t n = 1000;
    std::size_t classes = 10;
    std::size_t size = 16;
    std::size_t channels = 3;
    std::string split = "train";
    double noise = 0.2;
};

/// Class-conditional Gaussian-blob images. Class prototypes depend only on
/// the seed, so train and test splits drawn with the same seed share them.
Dataset synthetic_dataset(const SyntheticSpec& spec);

struct Normalization {
    std::vector<float> mean;
    std::vector<float> stddev;
};

/// Per-channel statistics over a whole split.
Normalization channel_statistics(const Dataset& ds);

enum class CropMode { random, center };

struct AugmentConfig {
    double flip_probability = 0.0;
    std::size_t pad = 0;  // zero padding added before cropping back to the input size
    CropMode crop = CropMode::random;
    std::optional<Normalization> normalize;
};

struct Batch {
    Tensor<float> images;
    Tensor<float> one_hot;
    std::vector<int> labels;
    std::vector<std::size_t> indices;  // source sample of each row
};

/// Deterministic epoch stream. Shuffle order and augmentation draws are
/// counter-based on (seed, epoch, sample index), so any epoch can be
/// regenerated independently. The final partial batch is emitted.
class BatchStream {
public:
    BatchStream(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                AugmentConfig augment, bool shuffle);

    std::size_t batch_count() const noexcept;
    bool next(Batch& out);
    const std::vector<std::size_t>& order() const noexcept { return order_; }

private:
    const Dataset* ds_;
    std::size_t batch_size_;
    std::uint64_t seed_, epoch_;
    AugmentConfig augment_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

/// Convenience: the whole epoch at once.
std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                           const AugmentConfig& augment, bool shuffle);

/// Writes the augmented (unnormalized) copy of sample `index` for the given epoch into `out` (C*H*W).
void augment_sample(const Dataset& ds, std::size_t index, std::uint64_t seed, std::uint64_t epoch,
                    const AugmentConfig& augment, std::span<float> out);

}  // namespace cascade
