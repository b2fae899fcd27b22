#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <new>
#include <initializer_list>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace lcnn {

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid layer or network configuration (sizes, strides, rates, modes).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

inline std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

/// Storage aligned to a fixed boundary. Vectorized reductions pick their
/// split points from the address, so a fixed alignment keeps results
/// independent of where the allocator happened to place a buffer.
inline constexpr std::size_t kStorageAlignment = 64;

template <typename T>
struct AlignedAllocator {
    using value_type = T;
    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kStorageAlignment}));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kStorageAlignment}); }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <typename T>
concept Real = std::is_same_v<T, float> || std::is_same_v<T, double>;

/// Dense row-major tensor of rank 1..4. Rank-4 tensors are NCHW.
template <Real T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
        validate_shape(shape_);
        data_.assign(element_count(shape_), fill);
    }

    Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        validate_shape(shape_);
        if (data_.size() != element_count(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + lcnn::to_string(shape_));
    }

    static Tensor from(std::initializer_list<T> values) {
        return Tensor({values.size()}, std::vector<T>(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    std::span<T> data() & noexcept { return data_; }
    std::span<const T> data() const& noexcept { return data_; }
    void data() && = delete;  // a span into a dying temporary
    T* raw() noexcept { return data_.data(); }
    const T* raw() const noexcept { return data_.data(); }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return ((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
    }
    T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) noexcept {
        return data_[offset(n, c, y, x)];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return data_[offset(n, c, y, x)];
    }

    /// Same data, new shape. Element count must be preserved.
    Tensor reshaped(Shape shape) const& {
        Tensor out = *this;
        out.reshape(std::move(shape));
        return out;
    }
    Tensor reshaped(Shape shape) && {
        reshape(std::move(shape));
        return std::move(*this);
    }
    void reshape(Shape shape) {
        validate_shape(shape);
        if (element_count(shape) != data_.size())
            throw ShapeError("cannot reshape " + lcnn::to_string(shape_) + " to " +
                             lcnn::to_string(shape));
        shape_ = std::move(shape);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <Real U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        std::transform(data_.begin(), data_.end(), out.data().begin(),
                       [](T v) { return static_cast<U>(v); });
        return out;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        if (a.shape_ != b.shape_) return false;
        return std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(T)) == 0;
    }

private:
    static void validate_shape(const Shape& shape) {
        if (shape.empty() || shape.size() > 4)
            throw ShapeError("tensor rank must be 1..4, got " + std::to_string(shape.size()));
        for (auto e : shape)
            if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + lcnn::to_string(shape));
    }

    Shape shape_;
    AlignedVector<T> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b)
        throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

enum class ZipOp { Add, Sub, Mul, AbsDiff };

template <Real T>
Tensor<T> zip_elementwise(ZipOp op, const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "zip_elementwise");
    Tensor<T> out(a.shape());
    const T* pa = a.raw();
    const T* pb = b.raw();
    T* po = out.raw();
    const std::size_t n = a.size();
    switch (op) {
        case ZipOp::Add:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
            break;
        case ZipOp::Sub:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
            break;
        case ZipOp::Mul:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
            break;
        case ZipOp::AbsDiff:
            for (std::size_t i = 0; i < n; ++i) po[i] = std::abs(pa[i] - pb[i]);
            break;
    }
    return out;
}

template <Real T>
Tensor<T> scale(const Tensor<T>& a, T k) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = k * a[i];
    return out;
}

/// dst[i] += src[i], visited in ascending flat index. Callers that accumulate
/// several sources do so in a fixed source order, which makes sums reproducible.
template <Real T>
Tensor<T>& accumulate(Tensor<T>& dst, const Tensor<T>& src) {
    require_same_shape(dst.shape(), src.shape(), "accumulate");
    T* d = dst.raw();
    const T* s = src.raw();
    for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
    return dst;
}

// ---------------------------------------------------------------------------
// Little-endian binary helpers shared by every on-disk format in the project.

namespace io {

template <typename U>
void write_le(std::ostream& os, U value) {
    static_assert(std::is_trivially_copyable_v<U>);
    std::array<unsigned char, sizeof(U)> bytes{};
    std::memcpy(bytes.data(), &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
    static_assert(std::is_trivially_copyable_v<U>);
    std::array<unsigned char, sizeof(U)> bytes{};
    is.read(reinterpret_cast<char*>(bytes.data()), sizeof(U));
    if (!is) throw FormatError("unexpected end of stream");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    U value;
    std::memcpy(&value, bytes.data(), sizeof(U));
    return value;
}

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), magic.size()); }

inline void expect_magic(std::istream& is, std::string_view magic) {
    std::string got(magic.size(), '\0');
    is.read(got.data(), got.size());
    if (!is || got != magic) throw FormatError("bad magic: expected \"" + std::string(magic) + "\"");
}

inline void write_string(std::ostream& os, std::string_view s) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
    auto len = read_le<std::uint32_t>(is);
    std::string s(len, '\0');
    is.read(s.data(), len);
    if (!is) throw FormatError("truncated string");
    return s;
}

}  // namespace io

/// "LCNT" | u8 rank | u32 extents... | u8 precision (4 or 8) | LE IEEE-754 payload.
template <Real T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    io::write_magic(os, "LCNT");
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(sizeof(T)));
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    } else {
        for (auto v : t.data()) io::write_le<T>(os, v);
    }
}

/// Reads a tensor of either precision and converts it to T.
template <Real T>
Tensor<T> read_tensor(std::istream& is) {
    io::expect_magic(is, "LCNT");
    auto rank = io::read_le<std::uint8_t>(is);
    if (rank < 1 || rank > 4) throw FormatError("tensor rank out of range: " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = io::read_le<std::uint32_t>(is);
    auto precision = io::read_le<std::uint8_t>(is);
    if (precision != 4 && precision != 8)
        throw FormatError("unknown tensor precision code " + std::to_string(precision));
    Tensor<T> out(shape);
    auto read_payload = [&]<typename U>(U) {
        if constexpr (std::is_same_v<U, T> && std::endian::native == std::endian::little) {
            is.read(reinterpret_cast<char*>(out.raw()), static_cast<std::streamsize>(out.size() * sizeof(T)));
            if (!is) throw FormatError("truncated tensor payload");
        } else {
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(io::read_le<U>(is));
        }
    };
    if (precision == 4)
        read_payload(float{});
    else
        read_payload(double{});
    return out;
}

}  // namespace lcnn
