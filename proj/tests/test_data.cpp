#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lcnn/data.hpp"
#include "support/synthetic_cifar.hpp"

using namespace lcnn;
using namespace lcnn::testing;

namespace {

std::string serialize(std::span<const LabeledImage> recs) {
    std::ostringstream os;
    write_cifar_batch(os, recs);
    return os.str();
}

std::span<const std::uint8_t> as_bytes(const std::string& s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

LabeledImage solid(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    LabeledImage img;
    constexpr std::size_t plane = kCifarSide * kCifarSide;
    std::fill_n(img.pixels.begin(), plane, r);
    std::fill_n(img.pixels.begin() + plane, plane, g);
    std::fill_n(img.pixels.begin() + 2 * plane, plane, b);
    return img;
}

Image image_from(std::size_t h, std::size_t w, const std::vector<float>& v) { return Image({h, w}, v); }

bool is_binary(std::span<const float> v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return x == 0.0f || x == 1.0f; });
}

}  // namespace

// ---------------------------------------------------------------------------
// CIFAR binary loader

TEST(CifarLoader, RoundTripIsByteExact) {
    auto recs = synthetic_cifar(25, 3);
    const auto bytes = serialize(recs);
    ASSERT_EQ(bytes.size(), 25u * 3073);
    auto parsed = parse_cifar_batch(as_bytes(bytes));
    ASSERT_EQ(parsed.size(), 25u);
    for (std::size_t i = 0; i < 25; ++i) {
        EXPECT_EQ(parsed[i].label, recs[i].label);
        EXPECT_EQ(parsed[i].pixels, recs[i].pixels);
    }
    EXPECT_EQ(serialize(parsed), bytes);
}

TEST(CifarLoader, LoadsFromDisk) {
    const auto dir = std::filesystem::temp_directory_path() / "lcnn_test_loader";
    std::filesystem::create_directories(dir);
    const auto path = dir / "data_batch_1.bin";
    const auto bytes = serialize(synthetic_cifar(10, 4));
    std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    auto recs = load_cifar_batch(path);
    EXPECT_EQ(recs.size(), 10u);
    EXPECT_EQ(serialize(recs), bytes);
    EXPECT_THROW(load_cifar_batch(dir / "missing.bin"), DataError);
    std::filesystem::remove_all(dir);
}

TEST(CifarLoader, RejectsBadLength) {
    std::string truncated(3072, '\0');
    try {
        parse_cifar_batch(as_bytes(truncated), "batch.bin");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("3072"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("batch.bin"), std::string::npos);
    }
}

TEST(CifarLoader, RejectsBadLabelWithRecordIndex) {
    auto bytes = serialize(synthetic_cifar(5, 1));
    bytes[3 * 3073] = 10;
    try {
        parse_cifar_batch(as_bytes(bytes));
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("record 3"), std::string::npos);
    }
}

// ---------------------------------------------------------------------------
// Grayscale

TEST(Grayscale, Examples) {
    EXPECT_EQ(to_grayscale(solid(255, 255, 255))[0], 1.0f);
    EXPECT_EQ(to_grayscale(solid(0, 0, 0))[0], 0.0f);
    EXPECT_NEAR(to_grayscale(solid(255, 0, 0))[0], 0.299, 1e-6);
    EXPECT_NEAR(to_grayscale(solid(0, 255, 0))[0], 0.587, 1e-6);
    EXPECT_NEAR(to_grayscale(solid(0, 0, 255))[0], 0.114, 1e-6);
    EXPECT_NEAR(to_grayscale(solid(10, 20, 30))[0], (0.299 * 10 + 0.587 * 20 + 0.114 * 30) / 255, 1e-6);
}

TEST(Grayscale, RangeAndMonotonicity) {
    CounterRng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const auto r = static_cast<std::uint8_t>(rng.below(255));
        const auto g = static_cast<std::uint8_t>(rng.below(256));
        const auto b = static_cast<std::uint8_t>(rng.below(256));
        const float base = to_grayscale(solid(r, g, b))[0];
        EXPECT_GE(base, 0.0f);
        EXPECT_LE(base, 1.0f);
        EXPECT_GE(to_grayscale(solid(static_cast<std::uint8_t>(r + 1), g, b))[0], base);
    }
}

// ---------------------------------------------------------------------------
// Canny

TEST(Canny, ConstantImageHasNoEdges) {
    for (float c : {0.0f, 0.4f, 1.0f}) {
        auto e = canny(Image({8, 8}, c));
        for (auto v : e.data()) EXPECT_EQ(v, 0.0f);
    }
}

TEST(Canny, VerticalStepHandTrace) {
    // Left half 0, right half 1. Along a row the blurred profile is
    // [0, 0, .110, .347, .653, .890, 1, 1]; Sobel peaks tie at x = 3 and
    // x = 4, NMS keeps the first in scan order, the frame is cleared.
    std::vector<float> px(64);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 4; x < 8; ++x) px[y * 8 + x] = 1.0f;
    auto e = canny(image_from(8, 8, px));
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
            const float want = (x == 3 && y >= 1 && y <= 6) ? 1.0f : 0.0f;
            EXPECT_EQ(e[y * 8 + x], want) << "(" << y << "," << x << ")";
        }
}

TEST(Canny, HorizontalStepIsTransposed) {
    std::vector<float> px(64);
    for (std::size_t y = 4; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) px[y * 8 + x] = 1.0f;
    auto e = canny(image_from(8, 8, px));
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x)
            EXPECT_EQ(e[y * 8 + x], (y == 3 && x >= 1 && x <= 6) ? 1.0f : 0.0f) << "(" << y << "," << x << ")";
}

TEST(Canny, OutputsAreBinaryAndDeterministic) {
    CounterRng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        Image img({32, 32});
        for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
        auto a = canny(img);
        EXPECT_TRUE(is_binary(a.data()));
        EXPECT_EQ(a, canny(img));
        for (std::size_t i = 0; i < 32; ++i) {
            EXPECT_EQ(a[i], 0.0f);
            EXPECT_EQ(a[31 * 32 + i], 0.0f);
            EXPECT_EQ(a[i * 32], 0.0f);
            EXPECT_EQ(a[i * 32 + 31], 0.0f);
        }
    }
}

TEST(Canny, ThresholdsControlDensity) {
    auto recs = synthetic_cifar(20, 6);
    std::size_t loose = 0, strict = 0;
    for (const auto& r : recs) {
        auto g = to_grayscale(r);
        const auto a = canny(g, {1.4, 0.05, 0.15});
        const auto b = canny(g, {1.4, 0.2, 0.6});
        loose += static_cast<std::size_t>(std::count(a.data().begin(), a.data().end(), 1.0f));
        strict += static_cast<std::size_t>(std::count(b.data().begin(), b.data().end(), 1.0f));
    }
    EXPECT_GT(loose, strict);
    EXPECT_GT(strict, 0u);
}

TEST(Canny, EdgeDensityIsSaneOnStructuredImages) {
    for (const auto& r : synthetic_cifar(100, 7)) {
        auto e = canny(to_grayscale(r));
        double frac = 0;
        for (auto v : e.data()) frac += v;
        frac /= static_cast<double>(e.size());
        EXPECT_GT(frac, 0.0);
        EXPECT_LT(frac, 0.5);
    }
}

// ---------------------------------------------------------------------------
// Resize

TEST(Resize, SameSizeIsIdentity) {
    Image img({5, 5});
    CounterRng rng(2);
    for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
    EXPECT_EQ(resize_bilinear(img, 5), img);
}

TEST(Resize, ConstantStaysConstant) {
    for (std::size_t side : {1, 3, 7, 32, 224}) {
        auto out = resize_bilinear(Image({4, 4}, 0.625f), side);
        EXPECT_EQ(out.shape(), (Shape{side, side}));
        for (auto v : out.data()) EXPECT_EQ(v, 0.625f);
    }
}

TEST(Resize, HalfPixelHandEvaluation) {
    auto out = resize_bilinear(image_from(2, 2, {0, 1, 0, 1}), 4);
    const float cols[] = {0.0f, 0.25f, 0.75f, 1.0f};
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) EXPECT_FLOAT_EQ(out[y * 4 + x], cols[x]);
}

TEST(Resize, PreservesValueRange) {
    CounterRng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Image img({9, 9});
        for (auto& v : img.data()) v = static_cast<float>(rng.uniform(0.2, 0.7));
        const auto [lo, hi] = std::minmax_element(img.data().begin(), img.data().end());
        for (std::size_t side : {4, 13, 40}) {
            const auto out = resize_bilinear(img, side);
            for (auto v : out.data()) {
                EXPECT_GE(v, *lo);
                EXPECT_LE(v, *hi);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Stream pairs and the LCDS container

TEST(StreamPairs, ContainerRoundTrip) {
    auto recs = synthetic_cifar(100, 11);
    auto set = make_stream_pairs(recs, 32);
    ASSERT_EQ(set.size(), 100u);
    std::stringstream ss;
    write_container(ss, set);
    const std::string bytes = ss.str();
    EXPECT_EQ(bytes.substr(0, 4), "LCDS");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 100);
    EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 32);

    auto back = read_container(ss);
    EXPECT_EQ(back.side, 32u);
    EXPECT_EQ(back.labels, set.labels);
    EXPECT_EQ(back.gray, set.gray);
    EXPECT_EQ(back.edge, set.edge);
    for (std::size_t i = 0; i < 100; ++i) {
        EXPECT_EQ(back.labels[i], recs[i].label);
        EXPECT_TRUE(is_binary(back.edge_image(i)));
    }
}

TEST(StreamPairs, RegenerationIsByteIdentical) {
    auto recs = synthetic_cifar(50, 12);
    std::ostringstream a, b;
    write_container(a, make_stream_pairs(recs, 32));
    write_container(b, make_stream_pairs(recs, 32));
    EXPECT_EQ(a.str(), b.str());
}

TEST(StreamPairs, ResizedEdgesAreRebinarized) {
    auto set = make_stream_pairs(synthetic_cifar(10, 13), 48);
    EXPECT_EQ(set.side, 48u);
    EXPECT_EQ(set.gray.size(), 10u * 48 * 48);
    for (std::size_t i = 0; i < set.size(); ++i) EXPECT_TRUE(is_binary(set.edge_image(i)));
}

TEST(StreamPairs, GatherSelectsStreams) {
    auto set = make_stream_pairs(synthetic_cifar(6, 14), 32);
    const std::size_t idx[] = {4, 1};
    auto both = set.gather<float>(idx, StreamSelect::Both);
    ASSERT_EQ(both.size(), 2u);
    EXPECT_EQ(both[0].shape(), (Shape{2, 1, 32, 32}));
    EXPECT_EQ(both[0][0], set.gray_image(4)[0]);
    EXPECT_EQ(both[1][1024 + 500], set.edge_image(1)[500]);
    auto edge = set.gather<float>(idx, StreamSelect::Edge);
    ASSERT_EQ(edge.size(), 1u);
    EXPECT_EQ(edge[0], both[1]);
    EXPECT_EQ(set.gather<float>(idx, StreamSelect::Gray)[0], both[0]);
}

TEST(StreamPairs, RejectsCorruptContainer) {
    std::ostringstream os;
    write_container(os, make_stream_pairs(synthetic_cifar(3, 15), 32));
    auto bytes = os.str();
    std::istringstream truncated(bytes.substr(0, bytes.size() - 10));
    EXPECT_THROW(read_container(truncated), FormatError);
    bytes[12] = 42;  // first label byte
    std::istringstream bad_label(bytes);
    EXPECT_THROW(read_container(bad_label), FormatError);
    EXPECT_THROW(load_container("/nonexistent/train.lcds"), DataError);
}
