#include "protodensity/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "protodensity/errors.hpp"

namespace protodensity {

namespace {

void check_dims(const Shape& shape) {
    for (std::size_t d : shape) {
        if (d == 0) {
            throw DimensionError("tensor dims must be positive, got " + shape_string(shape));
        }
    }
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
    }
}

template <typename T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t offset) {
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        value |= static_cast<T>(static_cast<T>(bytes[offset + i]) << (8 * i));
    }
    return value;
}

} // namespace

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    check_dims(shape_);
    data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims(shape_);
    if (data_.size() != shape_size(shape_)) {
        throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
    }
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                             shape_string(shape_));
    }
    return shape_[axis];
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw DimensionError("item() on non-scalar tensor " + shape_string(shape_));
    }
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
        throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                             shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                             " vs " + shape_string(b.shape()));
    }
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                             ", got " + shape_string(t.shape()));
    }
}

std::vector<std::uint8_t> encode_pdtf(const Tensor& tensor, Dtype dtype) {
    if (tensor.rank() > 255) throw DimensionError("PDTF supports at most 255 dims");
    std::vector<std::uint8_t> out = {'P', 'D', 'T', 'F'};
    out.push_back(static_cast<std::uint8_t>(dtype));
    out.push_back(static_cast<std::uint8_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) {
        if (d > 0xffffffffull) throw DimensionError("PDTF dim exceeds u32");
        put_le(out, static_cast<std::uint32_t>(d));
    }
    const std::size_t width = dtype == Dtype::Float32 ? 4 : 8;
    out.reserve(out.size() + tensor.size() * width);
    for (double v : tensor.data()) {
        if (dtype == Dtype::Float32) {
            put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        } else {
            put_le(out, std::bit_cast<std::uint64_t>(v));
        }
    }
    return out;
}

Tensor decode_pdtf(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 6 || std::memcmp(bytes.data(), "PDTF", 4) != 0) {
        throw IoError("PDTF: bad magic");
    }
    const std::uint8_t code = bytes[4];
    if (code > 1) throw IoError("PDTF: unknown dtype code " + std::to_string(code));
    const Dtype dtype = static_cast<Dtype>(code);
    const std::size_t ndim = bytes[5];
    std::size_t offset = 6;
    if (bytes.size() < offset + 4 * ndim) throw IoError("PDTF: truncated header");
    Shape shape(ndim);
    for (std::size_t i = 0; i < ndim; ++i) {
        shape[i] = get_le<std::uint32_t>(bytes, offset);
        if (shape[i] == 0) throw IoError("PDTF: zero dimension");
        offset += 4;
    }
    const std::size_t n = shape_size(shape);
    const std::size_t width = dtype == Dtype::Float32 ? 4 : 8;
    if (bytes.size() != offset + n * width) {
        throw IoError("PDTF: payload is " + std::to_string(bytes.size() - offset) +
                      " bytes, expected " + std::to_string(n * width));
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i, offset += width) {
        if (dtype == Dtype::Float32) {
            data[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, offset));
        } else {
            data[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, offset));
        }
    }
    return Tensor(std::move(shape), std::move(data));
}

void write_pdtf(const std::filesystem::path& path, const Tensor& tensor, Dtype dtype) {
    const auto bytes = encode_pdtf(tensor, dtype);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

Tensor read_pdtf(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    try {
        return decode_pdtf(bytes);
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

std::uint64_t checksum(std::span<const double> values, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (double v : values) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xffu;
            h *= 1099511628211ull;
        }
    }
    return h;
}

} // namespace protodensity
