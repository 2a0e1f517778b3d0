#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace protodensity {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major float64 tensor. A rank-0 tensor (empty shape) holds one scalar.
class Tensor {
public:
    Tensor() : data_(1, 0.0) {}
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value) { return Tensor(Shape{}, value); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    const double& operator[](std::size_t i) const noexcept { return data_[i]; }

    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const double& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const double& at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    const double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    /// Scalar value of a one-element tensor.
    double item() const;

    Tensor reshaped(Shape shape) const;
    void fill(double value);

    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

// Throws DimensionError with `what` and both shapes when a and b differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);
void require_rank(const Tensor& t, std::size_t rank, const char* what);

// ---------------------------------------------------------------------------
// PDTF binary format:
//   "PDTF" | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim x u32 LE dims | LE payload
// ---------------------------------------------------------------------------

enum class Dtype : std::uint8_t { Float32 = 0, Float64 = 1 };

std::vector<std::uint8_t> encode_pdtf(const Tensor& tensor, Dtype dtype = Dtype::Float64);
Tensor decode_pdtf(std::span<const std::uint8_t> bytes);

void write_pdtf(const std::filesystem::path& path, const Tensor& tensor,
                Dtype dtype = Dtype::Float64);
Tensor read_pdtf(const std::filesystem::path& path);

/// FNV-1a over the raw bytes of every value; stable fingerprint for parameters.
std::uint64_t checksum(std::span<const double> values, std::uint64_t seed = 14695981039346656037ull);

} // namespace protodensity
