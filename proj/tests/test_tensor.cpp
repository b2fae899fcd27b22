#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

#include "lcnn/random.hpp"
#include "lcnn/tensor.hpp"

using namespace lcnn;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed) {
    Tensor<double> t(std::move(shape));
    CounterRng rng(seed);
    for (auto& v : t.data()) v = rng.uniform(-5.0, 5.0);
    return t;
}

}  // namespace

TEST(Tensor, ZipElementwiseExamples) {
    auto add = zip_elementwise(ZipOp::Add, Tensor<double>::from({1, 2}), Tensor<double>::from({3, 4}));
    EXPECT_EQ(add, Tensor<double>::from({4, 6}));

    auto a = random_tensor({2, 3, 4, 5}, 1);
    auto zero = zip_elementwise(ZipOp::Sub, a, a);
    for (auto v : zero.data()) EXPECT_EQ(v, 0.0);

    auto ad = zip_elementwise(ZipOp::AbsDiff, Tensor<double>::from({2, -5}), Tensor<double>::from({-1, -2}));
    EXPECT_EQ(ad, Tensor<double>::from({3, 3}));
}

TEST(Tensor, ShapeMismatchNamesBothShapes) {
    Tensor<float> a({2, 3});
    Tensor<float> b({3, 2});
    try {
        zip_elementwise(ZipOp::Add, a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("(2,3)"), std::string::npos);
        EXPECT_NE(msg.find("(3,2)"), std::string::npos);
    }
    EXPECT_THROW(accumulate(a, b), ShapeError);
}

TEST(Tensor, ScaleExamples) {
    EXPECT_EQ(scale(Tensor<double>::from({2, 4}), 0.5), Tensor<double>::from({1, 2}));
    auto a = random_tensor({3, 7}, 2);
    EXPECT_EQ(scale(a, 1.0), a);
    const auto zeroed = scale(a, 0.0);
    for (auto v : zeroed.data()) EXPECT_EQ(v, 0.0);
}

TEST(Tensor, AccumulateExamples) {
    auto dst = Tensor<double>::from({1, 1});
    accumulate(dst, Tensor<double>::from({2, 3}));
    EXPECT_EQ(dst, Tensor<double>::from({3, 4}));

    auto a = random_tensor({4, 4}, 3);
    auto before = a;
    accumulate(a, Tensor<double>({4, 4}));
    EXPECT_EQ(a, before);

    auto c = Tensor<double>::from({0});
    for (int i = 0; i < 3; ++i) accumulate(c, Tensor<double>::from({1}));
    EXPECT_EQ(c[0], 3.0);
}

TEST(Tensor, AlgebraicProperties) {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        auto a = random_tensor({2, 3, 4, 5}, 100 + seed);
        auto b = random_tensor({2, 3, 4, 5}, 200 + seed);
        EXPECT_EQ(zip_elementwise(ZipOp::Add, a, b), zip_elementwise(ZipOp::Add, b, a));
        EXPECT_EQ(zip_elementwise(ZipOp::Sub, a, b), scale(zip_elementwise(ZipOp::Sub, b, a), -1.0));
        auto ab = zip_elementwise(ZipOp::AbsDiff, a, b);
        EXPECT_EQ(ab, zip_elementwise(ZipOp::AbsDiff, b, a));
        for (auto v : ab.data()) EXPECT_GE(v, 0.0);
    }
}

TEST(Tensor, IndexMappingIsBijection) {
    Tensor<double> t({2, 3, 4, 5});
    double counter = 0;
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < 4; ++y)
                for (std::size_t x = 0; x < 5; ++x) t.at(n, c, y, x) = counter++;
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i], static_cast<double>(i));
}

TEST(Tensor, RejectsBadShapes) {
    EXPECT_THROW(Tensor<float>({2, 0, 3}), ShapeError);
    EXPECT_THROW(Tensor<float>(Shape{}), ShapeError);
    EXPECT_THROW(Tensor<float>({1, 1, 1, 1, 1}), ShapeError);
    EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
    EXPECT_THROW(Tensor<float>({2, 3}).reshaped({5}), ShapeError);
}

TEST(Tensor, SerializationLayout) {
    auto t = Tensor<float>({1, 2}, std::vector<float>{1.0f, -2.0f});
    std::ostringstream os;
    write_tensor(os, t);
    const std::string bytes = os.str();
    // magic, rank, 2 extents, precision, 2 floats
    ASSERT_EQ(bytes.size(), 4u + 1 + 8 + 1 + 8);
    EXPECT_EQ(bytes.substr(0, 4), "LCNT");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 2);
    EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 1);  // little-endian u32 extent 1
    EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 2);
    EXPECT_EQ(static_cast<unsigned char>(bytes[13]), 4);
    // 1.0f = 0x3F800000, little-endian
    EXPECT_EQ(static_cast<unsigned char>(bytes[14 + 3]), 0x3F);
    EXPECT_EQ(static_cast<unsigned char>(bytes[14 + 2]), 0x80);
}

TEST(Tensor, SerializationRoundTripBothPrecisions) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto d = random_tensor({1 + seed, 2, 3, 1 + seed % 2}, seed);
        std::stringstream ss;
        write_tensor(ss, d);
        EXPECT_EQ(read_tensor<double>(ss), d);

        auto f = d.cast<float>();
        std::stringstream sf;
        write_tensor(sf, f);
        EXPECT_EQ(read_tensor<float>(sf), f);
    }
}

TEST(Tensor, RejectsCorruptStreams) {
    std::stringstream bad_magic("LCNX\x01");
    EXPECT_THROW(read_tensor<float>(bad_magic), FormatError);

    std::ostringstream os;
    write_tensor(os, Tensor<float>({4}));
    std::string truncated = os.str().substr(0, os.str().size() - 2);
    std::stringstream ts(truncated);
    EXPECT_THROW(read_tensor<float>(ts), FormatError);

    std::string bad_precision = os.str();
    bad_precision[4 + 1 + 4] = 3;
    std::stringstream bp(bad_precision);
    EXPECT_THROW(read_tensor<float>(bp), FormatError);
}

TEST(CounterRng, DeterministicAndInRange) {
    CounterRng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        const double u = a.uniform();
        EXPECT_EQ(u, b.uniform());
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    auto w = v;
    CounterRng(9).shuffle(std::span<int>(v));
    CounterRng(9).shuffle(std::span<int>(w));
    EXPECT_EQ(v, w);
    std::sort(w.begin(), w.end());
    for (int i = 0; i < 50; ++i) EXPECT_EQ(w[i], i);
}
