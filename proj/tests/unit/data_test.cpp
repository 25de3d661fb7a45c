#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "cascade/data.hpp"
#include "cascade/error.hpp"

using namespace cascade;
namespace fs = std::filesystem;

namespace {

// One CIFAR-10 record: label, then R, G, B planes of 32x32.
std::vector<std::uint8_t> cifar_record(std::uint8_t label, std::uint8_t seed) {
    std::vector<std::uint8_t> r(3073);
    r[0] = label;
    for (std::size_t i = 0; i < 3072; ++i) r[1 + i] = static_cast<std::uint8_t>((i * 7 + seed) % 256);
    return r;
}

std::vector<std::uint8_t> cifar_file(std::size_t n, std::uint8_t seed) {
    std::vector<std::uint8_t> out;
    for (std::size_t i = 0; i < n; ++i) {
        auto r = cifar_record(static_cast<std::uint8_t>(i % 10), static_cast<std::uint8_t>(seed + i));
        out.insert(out.end(), r.begin(), r.end());
    }
    return out;
}

void put_be32(std::vector<std::uint8_t>& v, std::uint32_t x) {
    for (int s = 24; s >= 0; s -= 8) v.push_back(static_cast<std::uint8_t>(x >> s));
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols, std::uint32_t magic = 0x803) {
    std::vector<std::uint8_t> v;
    put_be32(v, magic);
    put_be32(v, n);
    put_be32(v, rows);
    put_be32(v, cols);
    for (std::uint32_t i = 0; i < n * rows * cols; ++i) v.push_back(static_cast<std::uint8_t>(i % 251));
    return v;
}

std::vector<std::uint8_t> idx_labels(std::uint32_t n) {
    std::vector<std::uint8_t> v;
    put_be32(v, 0x801);
    put_be32(v, n);
    for (std::uint32_t i = 0; i < n; ++i) v.push_back(static_cast<std::uint8_t>((i * 3) % 10));
    return v;
}

void write(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(p, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("cascade-data-" + tag + "-" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

Dataset synth(std::uint64_t seed, std::size_t n = 100, std::string split = "train") {
    SyntheticSpec s;
    s.seed = seed;
    s.n = n;
    s.classes = 10;
    s.size = 8;
    s.split = std::move(split);
    return synthetic_dataset(s);
}

}  // namespace

TEST(Cifar, FirstRecordPixels) {
    auto bytes = cifar_file(2, 5);
    auto ds = parse_cifar10_records(bytes, "train");
    ASSERT_EQ(ds.size(), 2u);
    EXPECT_EQ(ds.labels[0], 0);
    EXPECT_EQ(ds.labels[1], 1);
    EXPECT_EQ(ds.images.shape(), (Shape{2, 3, 32, 32}));
    // channel 1 (G) of record 0 starts at byte 1 + 1024
    EXPECT_EQ(ds.images.at4(0, 0, 0, 0), 5.0f / 255.0f);
    EXPECT_EQ(ds.images.at4(0, 1, 0, 0), static_cast<float>((1024 * 7 + 5) % 256) / 255.0f);
    EXPECT_EQ(ds.images.at4(0, 2, 31, 31), static_cast<float>((3071 * 7 + 5) % 256) / 255.0f);
}

TEST(Cifar, TruncatedFileNamesByteOffset) {
    auto bytes = cifar_file(3, 0);
    bytes.resize(bytes.size() - 10);
    try {
        parse_cifar10_records(bytes, "train", "x.bin");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset 6146"), std::string::npos) << e.what();
    }
}

TEST(Cifar, BadLabelRejected) {
    auto bytes = cifar_file(1, 0);
    bytes[0] = 12;
    EXPECT_THROW(parse_cifar10_records(bytes, "train"), DataError);
}

TEST(Cifar, DirectoryLayout) {
    TempDir d("cifar");
    for (int b = 1; b <= 5; ++b) write(d.path / ("data_batch_" + std::to_string(b) + ".bin"), cifar_file(4, static_cast<std::uint8_t>(b)));
    write(d.path / "test_batch.bin", cifar_file(3, 9));
    auto [train, test] = load_cifar10(d.path);
    EXPECT_EQ(train.size(), 20u);
    EXPECT_EQ(test.size(), 3u);
    // batch 2 follows batch 1
    EXPECT_EQ(train.images.at4(4, 0, 0, 0), 2.0f / 255.0f);
}

TEST(Cifar, MissingFileIsDataError) {
    TempDir d("cifar-missing");
    EXPECT_THROW(load_cifar10(d.path), DataError);
}

TEST(Mnist, ValidFixture) {
    auto ds = parse_mnist_idx(idx_images(3, 4, 5), idx_labels(3), "train");
    EXPECT_EQ(ds.images.shape(), (Shape{3, 1, 4, 5}));
    EXPECT_EQ(ds.labels, (std::vector<int>{0, 3, 6}));
    EXPECT_EQ(ds.images.at4(1, 0, 0, 0), 20.0f / 255.0f);
}

TEST(Mnist, BadMagic) { EXPECT_THROW(parse_mnist_idx(idx_images(2, 2, 2, 0x802), idx_labels(2), "train"), DataError); }

TEST(Mnist, CountMismatch) { EXPECT_THROW(parse_mnist_idx(idx_images(3, 2, 2), idx_labels(2), "train"), DataError); }

TEST(Mnist, TruncatedPayload) {
    auto img = idx_images(3, 2, 2);
    img.pop_back();
    EXPECT_THROW(parse_mnist_idx(img, idx_labels(3), "train"), DataError);
}

TEST(Mnist, DirectoryLayout) {
    TempDir d("mnist");
    write(d.path / "train-images-idx3-ubyte", idx_images(6, 3, 3));
    write(d.path / "train-labels-idx1-ubyte", idx_labels(6));
    write(d.path / "t10k-images-idx3-ubyte", idx_images(2, 3, 3));
    write(d.path / "t10k-labels-idx1-ubyte", idx_labels(2));
    auto [train, test] = load_mnist_idx(d.path);
    EXPECT_EQ(train.size(), 6u);
    EXPECT_EQ(test.size(), 2u);
}

TEST(Synthetic, SameSeedSameData) {
    auto a = synth(3), b = synth(3);
    EXPECT_TRUE(a.images.identical(b.images));
    EXPECT_EQ(a.labels, b.labels);
}

TEST(Synthetic, DifferentSeedDifferentData) { EXPECT_FALSE(synth(3).images.identical(synth(4).images)); }

TEST(Synthetic, ClassBalanced) {
    auto ds = synth(1, 1000);
    std::vector<int> counts(10, 0);
    for (int l : ds.labels) ++counts[static_cast<std::size_t>(l)];
    for (int c : counts) EXPECT_EQ(c, 100);
}

TEST(Synthetic, SplitsDifferButShareClasses) {
    auto tr = synth(2, 50, "train"), te = synth(2, 50, "test");
    EXPECT_FALSE(tr.images.identical(te.images));
    EXPECT_EQ(tr.class_count, te.class_count);
}

TEST(Synthetic, PixelsInUnitRange) {
    const auto ds = synth(5);
    for (float v : ds.images.values()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(Stream, UnshuffledIsDatasetOrder) {
    auto ds = synth(1, 25);
    auto bs = batches(ds, 10, 0, 0, AugmentConfig{}, false);
    ASSERT_EQ(bs.size(), 3u);
    EXPECT_EQ(bs[2].labels.size(), 5u);
    std::size_t k = 0;
    for (const auto& b : bs)
        for (std::size_t r = 0; r < b.labels.size(); ++r, ++k) {
            EXPECT_EQ(b.indices[r], k);
            for (std::size_t p = 0; p < 3 * 64; ++p) EXPECT_EQ(b.images[r * 192 + p], ds.images[k * 192 + p]);
        }
}

TEST(Stream, SameSeedSameStream) {
    auto ds = synth(1, 40);
    AugmentConfig aug;
    aug.flip_probability = 0.5;
    aug.pad = 2;
    auto a = batches(ds, 16, 9, 3, aug, true), b = batches(ds, 16, 9, 3, aug, true);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_TRUE(a[i].images.identical(b[i].images));
        EXPECT_EQ(a[i].indices, b[i].indices);
    }
}

TEST(Stream, EpochIsPermutation) {
    auto ds = synth(1, 37);
    for (std::uint64_t epoch = 0; epoch < 3; ++epoch) {
        BatchStream s(ds, 8, 4, epoch, AugmentConfig{}, true);
        std::set<std::size_t> seen(s.order().begin(), s.order().end());
        EXPECT_EQ(seen.size(), 37u);
        EXPECT_EQ(*seen.rbegin(), 36u);
    }
    EXPECT_NE(BatchStream(ds, 8, 4, 0, {}, true).order(), BatchStream(ds, 8, 4, 1, {}, true).order());
}

TEST(Stream, FlipAlwaysMirrors) {
    auto ds = synth(1, 12);
    AugmentConfig aug;
    aug.flip_probability = 1.0;
    for (const auto& b : batches(ds, 5, 2, 0, aug, true))
        for (std::size_t r = 0; r < b.labels.size(); ++r) {
            const std::size_t src = b.indices[r];
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t y = 0; y < 8; ++y)
                    for (std::size_t x = 0; x < 8; ++x)
                        EXPECT_EQ(b.images.at4(r, c, y, x), ds.images.at4(src, c, y, 7 - x));
        }
}

TEST(Stream, OneHotMatchesLabels) {
    auto ds = synth(2, 20);
    for (const auto& b : batches(ds, 7, 1, 0, {}, true))
        for (std::size_t r = 0; r < b.labels.size(); ++r)
            for (std::size_t k = 0; k < 10; ++k)
                EXPECT_EQ(b.one_hot.at2(r, k), static_cast<int>(k) == b.labels[r] ? 1.0f : 0.0f);
}

TEST(Stream, CenterCropWithPaddingIsIdentity) {
    auto ds = synth(3, 10);
    AugmentConfig aug;
    aug.pad = 4;
    aug.crop = CropMode::center;
    auto b = batches(ds, 10, 0, 0, aug, false);
    EXPECT_TRUE(b[0].images.identical(ds.images));
}

TEST(Stream, NormalizationUsesChannelStatistics) {
    auto ds = synth(4, 50);
    AugmentConfig aug;
    aug.normalize = channel_statistics(ds);
    auto b = batches(ds, 50, 0, 0, aug, false)[0];
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0;
        for (std::size_t n = 0; n < 50; ++n)
            for (std::size_t p = 0; p < 64; ++p) m += b.images[(n * 3 + c) * 64 + p];
        EXPECT_NEAR(m / (50 * 64), 0.0, 1e-4);
    }
}

TEST(Stream, ZeroBatchSizeRejected) {
    auto ds = synth(1, 10);
    EXPECT_THROW(BatchStream(ds, 0, 0, 0, {}, false), ConfigError);
}
