#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcnn/fusion.hpp"
#include "lcnn/tensor.hpp"

namespace lcnn {

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: 3073-byte records, label byte then 1024 R, 1024 G
// and 1024 B bytes, each plane row-major 32x32.

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;
inline constexpr std::size_t kCifarClasses = 10;

struct LabeledImage {
    std::uint8_t label = 0;
    std::array<std::uint8_t, kCifarPixels> pixels{};  // planes R, G, B
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::vector<LabeledImage> parse_cifar_batch(std::span<const std::uint8_t> bytes,
                                                   const std::string& origin = "<memory>") {
    if (bytes.size() % kCifarRecord != 0)
        throw DataError(origin + ": length " + std::to_string(bytes.size()) + " is not a multiple of " +
                        std::to_string(kCifarRecord));
    const std::size_t count = bytes.size() / kCifarRecord;
    std::vector<LabeledImage> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint8_t* rec = bytes.data() + i * kCifarRecord;
        if (rec[0] >= kCifarClasses)
            throw DataError(origin + ": corrupt record " + std::to_string(i) + ", label byte " +
                            std::to_string(rec[0]));
        out[i].label = rec[0];
        std::copy_n(rec + 1, kCifarPixels, out[i].pixels.begin());
    }
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto len = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> bytes(len);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(len));
    if (!in) throw DataError("read failed: " + path.string());
    return bytes;
}

inline std::vector<LabeledImage> load_cifar_batch(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return parse_cifar_batch(bytes, path.string());
}

inline void write_cifar_batch(std::ostream& os, std::span<const LabeledImage> records) {
    for (const auto& r : records) {
        os.put(static_cast<char>(r.label));
        os.write(reinterpret_cast<const char*>(r.pixels.data()), kCifarPixels);
    }
}

// ---------------------------------------------------------------------------
// Single-channel images are rank-2 (height, width) float tensors.

using Image = Tensor<float>;

/// BT.601 luma scaled to [0, 1].
inline Image to_grayscale(const LabeledImage& img) {
    constexpr std::size_t plane = kCifarSide * kCifarSide;
    Image out({kCifarSide, kCifarSide});
    for (std::size_t i = 0; i < plane; ++i) {
        const std::uint32_t weighted = 299u * img.pixels[i] + 587u * img.pixels[plane + i] +
                                       114u * img.pixels[2 * plane + i];
        out[i] = static_cast<float>(static_cast<double>(weighted) / 255000.0);
    }
    return out;
}

struct CannyParams {
    double sigma = 1.4;
    double low = 0.1;   // on max-normalized gradient magnitude
    double high = 0.3;
};

namespace detail {

/// Row-major double image with clamp-to-edge reads.
struct Plane {
    std::size_t h = 0, w = 0;
    std::vector<double> v;

    double clamped(std::ptrdiff_t y, std::ptrdiff_t x) const {
        y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(h) - 1);
        x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(w) - 1);
        return v[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
    }
};

inline std::array<double, 25> gaussian5x5(double sigma) {
    std::array<double, 25> k{};
    double sum = 0;
    for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx)
            sum += k[(dy + 2) * 5 + dx + 2] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
    for (auto& x : k) x /= sum;
    return k;
}

// Magnitudes closer than this (after max-normalization) count as equal in
// non-maximum suppression, so mathematically tied plateaus resolve the same
// way regardless of rounding in the blur.
inline constexpr double kNmsTieTolerance = 1e-9;

}  // namespace detail

/// Gaussian 5x5 -> Sobel -> max-normalized magnitude -> 4-direction NMS ->
/// double threshold -> 8-connected hysteresis. Output is {0,1} with a zero
/// one-pixel frame. On plateaus along the gradient direction the pixel first
/// in row-major order is kept.
inline Image canny(const Image& gray, const CannyParams& params = {}) {
    if (gray.rank() != 2) throw ShapeError("canny: expected a (height, width) image, got " + to_string(gray.shape()));
    const std::size_t h = gray.dim(0), w = gray.dim(1);
    Image out({h, w});
    if (h < 3 || w < 3) return out;

    detail::Plane src{h, w, std::vector<double>(gray.data().begin(), gray.data().end())};
    const auto kernel = detail::gaussian5x5(params.sigma);
    detail::Plane blur{h, w, std::vector<double>(h * w)};
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0;
            for (int dy = -2; dy <= 2; ++dy)
                for (int dx = -2; dx <= 2; ++dx)
                    acc += kernel[(dy + 2) * 5 + dx + 2] *
                           src.clamped(static_cast<std::ptrdiff_t>(y) + dy, static_cast<std::ptrdiff_t>(x) + dx);
            blur.v[y * w + x] = acc;
        }

    std::vector<double> mag(h * w);
    std::vector<std::uint8_t> dir(h * w);
    double max_mag = 0;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const auto iy = static_cast<std::ptrdiff_t>(y), ix = static_cast<std::ptrdiff_t>(x);
            auto p = [&](int dy, int dx) { return blur.clamped(iy + dy, ix + dx); };
            const double gx = (p(-1, 1) + 2 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2 * p(0, -1) + p(1, -1));
            const double gy = (p(1, -1) + 2 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1));
            const double m = std::sqrt(gx * gx + gy * gy);
            mag[y * w + x] = m;
            max_mag = std::max(max_mag, m);
            double deg = std::atan2(gy, gx) * 180.0 / std::numbers::pi;
            if (deg < 0) deg += 180.0;
            dir[y * w + x] = deg < 22.5 || deg >= 157.5 ? 0 : deg < 67.5 ? 1 : deg < 112.5 ? 2 : 3;
        }
    if (max_mag == 0) return out;
    for (auto& m : mag) m /= max_mag;

    // Per direction: the neighbor earlier in row-major order, as (dy, dx).
    // The later neighbor is its mirror image.
    static constexpr int kEarlier[4][2] = {{0, -1}, {-1, -1}, {-1, 0}, {-1, 1}};
    enum : std::uint8_t { None = 0, Weak = 1, Strong = 2 };
    std::vector<std::uint8_t> cls(h * w, None);
    for (std::size_t y = 1; y + 1 < h; ++y)
        for (std::size_t x = 1; x + 1 < w; ++x) {
            const std::size_t i = y * w + x;
            const auto* e = kEarlier[dir[i]];
            const double m = mag[i];
            const double m_earlier = mag[(y + e[0]) * w + (x + e[1])];
            const double m_later = mag[(y - e[0]) * w + (x - e[1])];
            const bool keep = m - m_earlier > detail::kNmsTieTolerance && m - m_later >= -detail::kNmsTieTolerance;
            if (!keep) continue;
            if (m >= params.high)
                cls[i] = Strong;
            else if (m >= params.low)
                cls[i] = Weak;
        }

    std::vector<std::size_t> stack;
    for (std::size_t i = 0; i < h * w; ++i)
        if (cls[i] == Strong) {
            out[i] = 1.0f;
            stack.push_back(i);
        }
    while (!stack.empty()) {
        const std::size_t i = stack.back();
        stack.pop_back();
        const std::size_t y = i / w, x = i % w;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const auto ny = static_cast<std::ptrdiff_t>(y) + dy, nx = static_cast<std::ptrdiff_t>(x) + dx;
                if (ny < 1 || nx < 1 || ny + 1 >= static_cast<std::ptrdiff_t>(h) || nx + 1 >= static_cast<std::ptrdiff_t>(w))
                    continue;
                const std::size_t j = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
                if (cls[j] == Weak && out[j] == 0.0f) {
                    out[j] = 1.0f;
                    stack.push_back(j);
                }
            }
    }
    return out;
}

/// Bilinear resize to out_side x out_side with half-pixel centers and
/// clamp-to-edge sampling. Same size returns a bitwise copy.
inline Image resize_bilinear(const Image& img, std::size_t out_side) {
    if (img.rank() != 2) throw ShapeError("resize_bilinear: expected a (height, width) image");
    if (out_side == 0) throw ConfigError("resize_bilinear: out_side must be >= 1");
    const std::size_t h = img.dim(0), w = img.dim(1);
    if (h == out_side && w == out_side) return img;
    Image out({out_side, out_side});
    auto source = [](std::size_t dst, std::size_t in, std::size_t out_n, std::size_t& i0, std::size_t& i1,
                     double& frac) {
        double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        i0 = static_cast<std::size_t>(std::floor(s));
        i1 = std::min(i0 + 1, in - 1);
        frac = s - static_cast<double>(i0);
    };
    for (std::size_t y = 0; y < out_side; ++y) {
        std::size_t y0, y1;
        double fy;
        source(y, h, out_side, y0, y1, fy);
        for (std::size_t x = 0; x < out_side; ++x) {
            std::size_t x0, x1;
            double fx;
            source(x, w, out_side, x0, x1, fx);
            const double top = img[y0 * w + x0] * (1 - fx) + img[y0 * w + x1] * fx;
            const double bot = img[y1 * w + x0] * (1 - fx) + img[y1 * w + x1] * fx;
            out[y * out_side + x] = static_cast<float>(top * (1 - fy) + bot * fy);
        }
    }
    return out;
}

inline Image binarize(const Image& img, float threshold = 0.5f) {
    Image out(img.shape());
    for (std::size_t i = 0; i < img.size(); ++i) out[i] = img[i] >= threshold ? 1.0f : 0.0f;
    return out;
}

// ---------------------------------------------------------------------------
// Two-stream dataset: grayscale + Canny edge map per record.

enum class StreamSelect { Both, Gray, Edge };

struct StreamPairSet {
    std::size_t side = 0;
    std::vector<std::uint8_t> labels;
    std::vector<float> gray;  // count * side * side
    std::vector<float> edge;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t pixels() const noexcept { return side * side; }

    std::span<const float> gray_image(std::size_t i) const { return {gray.data() + i * pixels(), pixels()}; }
    std::span<const float> edge_image(std::size_t i) const { return {edge.data() + i * pixels(), pixels()}; }

    void append(std::uint8_t label, const Image& g, const Image& e) {
        if (g.size() != pixels() || e.size() != pixels())
            throw ShapeError("StreamPairSet: image does not match side " + std::to_string(side));
        labels.push_back(label);
        gray.insert(gray.end(), g.data().begin(), g.data().end());
        edge.insert(edge.end(), e.data().begin(), e.data().end());
    }

    /// First `n` records (or all, when fewer).
    StreamPairSet head(std::size_t n) const {
        n = std::min(n, size());
        StreamPairSet out;
        out.side = side;
        out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
        out.gray.assign(gray.begin(), gray.begin() + static_cast<std::ptrdiff_t>(n * pixels()));
        out.edge.assign(edge.begin(), edge.begin() + static_cast<std::ptrdiff_t>(n * pixels()));
        return out;
    }

    /// Gathers the given records into per-stream (n, 1, side, side) tensors.
    template <Real T = float>
    StreamBundle<T> gather(std::span<const std::size_t> indices, StreamSelect which) const {
        const Shape shape{indices.size(), 1, side, side};
        auto collect = [&](const std::vector<float>& src) {
            Tensor<T> t(shape);
            for (std::size_t k = 0; k < indices.size(); ++k)
                std::copy_n(src.data() + indices[k] * pixels(), pixels(), t.raw() + k * pixels());
            return t;
        };
        StreamBundle<T> out;
        if (which != StreamSelect::Edge) out.push_back(collect(gray));
        if (which != StreamSelect::Gray) out.push_back(collect(edge));
        return out;
    }
};

/// Grayscale, Canny on the native grayscale, then optional resize (the edge
/// map is re-binarized at 0.5 after resizing).
inline void add_stream_pair(StreamPairSet& set, const LabeledImage& rec, const CannyParams& params) {
    Image g = to_grayscale(rec);
    Image e = canny(g, params);
    if (set.side != kCifarSide) {
        g = resize_bilinear(g, set.side);
        e = binarize(resize_bilinear(e, set.side));
    }
    set.append(rec.label, g, e);
}

inline StreamPairSet make_stream_pairs(std::span<const LabeledImage> records, std::size_t side,
                                       const CannyParams& params = {}) {
    StreamPairSet set;
    set.side = side;
    set.labels.reserve(records.size());
    for (const auto& r : records) add_stream_pair(set, r, params);
    return set;
}

/// "LCDS" | u32 count | u32 side | per record: u8 label, gray LCNT (1,side,side),
/// edge LCNT (1,side,side), both 32-bit.
inline void write_container(std::ostream& os, const StreamPairSet& set) {
    io::write_magic(os, "LCDS");
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(set.size()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(set.side));
    const Shape shape{1, set.side, set.side};
    for (std::size_t i = 0; i < set.size(); ++i) {
        io::write_le<std::uint8_t>(os, set.labels[i]);
        auto g = set.gray_image(i);
        auto e = set.edge_image(i);
        write_tensor(os, Tensor<float>(shape, std::vector<float>(g.begin(), g.end())));
        write_tensor(os, Tensor<float>(shape, std::vector<float>(e.begin(), e.end())));
    }
}

inline StreamPairSet read_container(std::istream& is) {
    io::expect_magic(is, "LCDS");
    const auto count = io::read_le<std::uint32_t>(is);
    StreamPairSet set;
    set.side = io::read_le<std::uint32_t>(is);
    if (set.side == 0) throw FormatError("LCDS: side must be >= 1");
    const Shape shape{1, set.side, set.side};
    set.labels.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto label = io::read_le<std::uint8_t>(is);
        if (label >= kCifarClasses) throw FormatError("LCDS: record " + std::to_string(i) + " has label " + std::to_string(label));
        auto g = read_tensor<float>(is);
        auto e = read_tensor<float>(is);
        if (g.shape() != shape || e.shape() != shape)
            throw FormatError("LCDS: record " + std::to_string(i) + " image shape does not match side " +
                              std::to_string(set.side));
        set.labels.push_back(label);
        set.gray.insert(set.gray.end(), g.data().begin(), g.data().end());
        set.edge.insert(set.edge.end(), e.data().begin(), e.data().end());
    }
    return set;
}

inline StreamPairSet load_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return read_container(in);
}

inline void save_container(const std::filesystem::path& path, const StreamPairSet& set) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    write_container(out, set);
    if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace lcnn
