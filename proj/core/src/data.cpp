#include "cascade/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "cascade/error.hpp"
#include "cascade/rng.hpp"

namespace cascade {

void Dataset::validate() const {
    if (images.rank() != 4) throw DataError("dataset images must be N,C,H,W");
    if (images.dim(0) != labels.size())
        throw DataError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                        std::to_string(labels.size()) + " labels");
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_count)
            throw DataError("label " + std::to_string(labels[i]) + " at sample " + std::to_string(i) +
                            " outside [0, " + std::to_string(class_count) + ")");
}

namespace {

constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path.string() + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t off) {
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

Dataset concat(std::vector<Dataset> parts, const std::string& split) {
    std::size_t n = 0;
    for (const auto& p : parts) n += p.size();
    const auto& s = parts.front().images.shape();
    Dataset out;
    out.split = split;
    out.class_count = parts.front().class_count;
    std::vector<float> values;
    values.reserve(n * s[1] * s[2] * s[3]);
    for (auto& p : parts) {
        values.insert(values.end(), p.images.values().begin(), p.images.values().end());
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    }
    out.images = Tensor<float>({n, s[1], s[2], s[3]}, std::move(values));
    return out;
}

}  // namespace

Dataset parse_cifar10_records(std::span<const std::uint8_t> bytes, const std::string& split,
                              const std::string& source) {
    if (bytes.empty()) throw DataError(source + ": empty CIFAR-10 file");
    if (bytes.size() % kCifarRecord != 0) {
        const std::size_t complete = bytes.size() / kCifarRecord;
        throw DataError(source + ": truncated CIFAR-10 record at byte offset " +
                        std::to_string(complete * kCifarRecord) + " (file size " + std::to_string(bytes.size()) +
                        " is not a multiple of " + std::to_string(kCifarRecord) + ")");
    }
    const std::size_t n = bytes.size() / kCifarRecord;
    Dataset ds;
    ds.split = split;
    ds.class_count = 10;
    ds.images = Tensor<float>({n, 3, kCifarSide, kCifarSide});
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = i * kCifarRecord;
        if (bytes[off] > 9)
            throw DataError(source + ": label byte " + std::to_string(bytes[off]) + " > 9 at byte offset " +
                            std::to_string(off));
        ds.labels[i] = bytes[off];
        float* dst = ds.images.data().data() + i * kCifarPixels;
        for (std::size_t p = 0; p < kCifarPixels; ++p) dst[p] = static_cast<float>(bytes[off + 1 + p]) / 255.0f;
    }
    return ds;
}

std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir) {
    std::vector<Dataset> train;
    for (int b = 1; b <= 5; ++b) {
        const auto path = dir / ("data_batch_" + std::to_string(b) + ".bin");
        train.push_back(parse_cifar10_records(read_file(path), "train", path.string()));
    }
    const auto test_path = dir / "test_batch.bin";
    Dataset test = parse_cifar10_records(read_file(test_path), "test", test_path.string());
    return {concat(std::move(train), "train"), std::move(test)};
}

Dataset parse_mnist_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                        const std::string& split) {
    if (images.size() < 16) throw DataError("idx image file too short for its header");
    if (labels.size() < 8) throw DataError("idx label file too short for its header");
    if (be32(images, 0) != 0x00000803) throw DataError("bad idx image magic, expected 0x00000803");
    if (be32(labels, 0) != 0x00000801) throw DataError("bad idx label magic, expected 0x00000801");
    const std::size_t n = be32(images, 4), rows = be32(images, 8), cols = be32(images, 12);
    const std::size_t nl = be32(labels, 4);
    if (n != nl)
        throw DataError("idx count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
    if (n == 0 || rows == 0 || cols == 0) throw DataError("idx image file declares an empty tensor");
    if (images.size() != 16 + n * rows * cols)
        throw DataError("idx image payload is " + std::to_string(images.size() - 16) + " bytes, header implies " +
                        std::to_string(n * rows * cols));
    if (labels.size() != 8 + n)
        throw DataError("idx label payload is " + std::to_string(labels.size() - 8) + " bytes, header implies " +
                        std::to_string(n));
    Dataset ds;
    ds.split = split;
    ds.class_count = 10;
    ds.images = Tensor<float>({n, 1, rows, cols});
    for (std::size_t i = 0; i < n * rows * cols; ++i) ds.images[i] = static_cast<float>(images[16 + i]) / 255.0f;
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[8 + i] > 9)
            throw DataError("idx label " + std::to_string(labels[8 + i]) + " > 9 at byte offset " +
                            std::to_string(8 + i));
        ds.labels[i] = labels[8 + i];
    }
    return ds;
}

std::pair<Dataset, Dataset> load_mnist_idx(const std::filesystem::path& dir) {
    auto load = [&](const std::string& prefix, const std::string& split) {
        return parse_mnist_idx(read_file(dir / (prefix + "-images-idx3-ubyte")),
                               read_file(dir / (prefix + "-labels-idx1-ubyte")), split);
    };
    return {load("train", "train"), load("t10k", "test")};
}

namespace {

struct Bump {
    double cy, cx, sigma;
    std::vector<double> amplitude;  // per channel
};

std::vector<Bump> class_prototype(std::uint64_t seed, std::size_t cls, std::size_t size, std::size_t channels) {
    std::mt19937_64 rng(counter_hash(seed, kStreamSyntheticPrototype, 0, cls));
    std::uniform_real_distribution<double> pos(0.2 * size, 0.8 * size), sig(1.5, 3.5), amp(-0.6, 0.6);
    std::vector<Bump> bumps(3);
    for (auto& b : bumps) {
        b.cy = pos(rng);
        b.cx = pos(rng);
        b.sigma = sig(rng);
        b.amplitude.resize(channels);
        for (auto& a : b.amplitude) a = amp(rng);
    }
    return bumps;
}

std::uint64_t split_tag(const std::string& split) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : split) h = (h ^ c) * 0x100000001b3ULL;
    return h;
}

}  // namespace

Dataset synthetic_dataset(const SyntheticSpec& spec) {
    if (spec.classes < 1 || spec.n < spec.classes)
        throw ConfigError("synthetic dataset needs n >= classes >= 1");
    if (spec.size < 1 || spec.channels < 1) throw ConfigError("synthetic dataset needs positive image extents");
    std::vector<std::vector<Bump>> protos;
    for (std::size_t c = 0; c < spec.classes; ++c)
        protos.push_back(class_prototype(spec.seed, c, spec.size, spec.channels));

    Dataset ds;
    ds.split = spec.split;
    ds.class_count = spec.classes;
    ds.images = Tensor<float>({spec.n, spec.channels, spec.size, spec.size});
    ds.labels.resize(spec.n);
    const std::size_t plane = spec.size * spec.size;
    const std::uint64_t tag = split_tag(spec.split);
    for (std::size_t i = 0; i < spec.n; ++i) {
        const std::size_t cls = i % spec.classes;
        ds.labels[i] = static_cast<int>(cls);
        std::mt19937_64 rng(counter_hash(spec.seed, kStreamSyntheticSample, tag, i));
        std::uniform_real_distribution<double> shift(-2.0, 2.0), gain(0.7, 1.3);
        std::normal_distribution<double> noise(0.0, spec.noise);
        const double dy = shift(rng), dx = shift(rng), g = gain(rng);
        float* img = ds.images.data().data() + i * spec.channels * plane;
        for (std::size_t c = 0; c < spec.channels; ++c)
            for (std::size_t y = 0; y < spec.size; ++y)
                for (std::size_t x = 0; x < spec.size; ++x) {
                    double v = 0.5;
                    for (const auto& b : protos[cls]) {
                        const double ry = static_cast<double>(y) - b.cy - dy, rx = static_cast<double>(x) - b.cx - dx;
                        v += g * b.amplitude[c] * std::exp(-(ry * ry + rx * rx) / (2 * b.sigma * b.sigma));
                    }
                    v += noise(rng);
                    img[c * plane + y * spec.size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
    }
    return ds;
}

Normalization channel_statistics(const Dataset& ds) {
    const std::size_t n = ds.size(), c = ds.channels(), plane = ds.height() * ds.width();
    Normalization norm;
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0, sq = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const float* p = ds.images.data().data() + (i * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) {
                s += p[k];
                sq += static_cast<double>(p[k]) * p[k];
            }
        }
        const double count = static_cast<double>(n * plane);
        const double mean = s / count;
        const double var = std::max(sq / count - mean * mean, 0.0);
        norm.mean.push_back(static_cast<float>(mean));
        norm.stddev.push_back(static_cast<float>(std::max(std::sqrt(var), 1e-6)));
    }
    return norm;
}

void augment_sample(const Dataset& ds, std::size_t index, std::uint64_t seed, std::uint64_t epoch,
                    const AugmentConfig& augment, std::span<float> out) {
    const std::size_t c = ds.channels(), h = ds.height(), w = ds.width(), plane = h * w;
    const float* src = ds.images.data().data() + index * c * plane;
    const bool flip =
        augment.flip_probability > 0 && unit_double(counter_hash(seed, kStreamFlip, epoch, index)) < augment.flip_probability;
    long oy = 0, ox = 0;
    if (augment.pad > 0 && augment.crop == CropMode::random) {
        const std::uint64_t r = counter_hash(seed, kStreamCrop, epoch, index);
        const std::uint64_t span = 2 * augment.pad + 1;
        oy = static_cast<long>(r % span) - static_cast<long>(augment.pad);
        ox = static_cast<long>((r / span) % span) - static_cast<long>(augment.pad);
    }
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const long sy = static_cast<long>(y) + oy;
                const long sx0 = static_cast<long>(flip ? w - 1 - x : x);
                const long sx = sx0 + ox;
                float v = 0.0f;  // zero padding
                if (sy >= 0 && sy < static_cast<long>(h) && sx >= 0 && sx < static_cast<long>(w))
                    v = src[ch * plane + static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)];
                out[ch * plane + y * w + x] = v;
            }
}

BatchStream::BatchStream(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                         AugmentConfig augment, bool shuffle)
    : ds_(&ds), batch_size_(batch_size), seed_(seed), epoch_(epoch), augment_(std::move(augment)) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    order_.resize(ds.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (shuffle)
        for (std::size_t i = order_.size(); i-- > 1;) {
            const std::size_t j = counter_hash(seed, kStreamPermutation, epoch, i) % (i + 1);
            std::swap(order_[i], order_[j]);
        }
}

std::size_t BatchStream::batch_count() const noexcept {
    return (order_.size() + batch_size_ - 1) / batch_size_;
}

bool BatchStream::next(Batch& out) {
    if (cursor_ >= order_.size()) return false;
    const std::size_t b = std::min(batch_size_, order_.size() - cursor_);
    const std::size_t c = ds_->channels(), h = ds_->height(), w = ds_->width(), chw = c * h * w;
    out.images = Tensor<float>({b, c, h, w});
    out.one_hot = Tensor<float>({b, ds_->class_count});
    out.labels.resize(b);
    out.indices.assign(order_.begin() + static_cast<long>(cursor_), order_.begin() + static_cast<long>(cursor_ + b));
    for (std::size_t r = 0; r < b; ++r) {
        const std::size_t idx = out.indices[r];
        std::span<float> dst(out.images.data().data() + r * chw, chw);
        augment_sample(*ds_, idx, seed_, epoch_, augment_, dst);
        if (augment_.normalize) {
            const auto& nm = *augment_.normalize;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t k = 0; k < h * w; ++k)
                    dst[ch * h * w + k] = (dst[ch * h * w + k] - nm.mean[ch]) / nm.stddev[ch];
        }
        out.labels[r] = ds_->labels[idx];
        out.one_hot.at2(r, static_cast<std::size_t>(out.labels[r])) = 1.0f;
    }
    cursor_ += b;
    return true;
}

std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                           const AugmentConfig& augment, bool shuffle) {
    BatchStream stream(ds, batch_size, seed, epoch, augment, shuffle);
    std::vector<Batch> out;
    for (Batch b; stream.next(b);) out.push_back(std::move(b));
    return out;
}

}  // namespace cascade
