#pragma once

#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fssentry/errors.hpp"

namespace fssentry {

enum class DType : uint8_t { f32 = 0, f64 = 1, u8 = 2 };

const char* dtype_name(DType dt);

/// Dense n-dimensional array, row-major. Carrier for images, features,
/// logits and gradients across the library. Rank 0 = scalar (one element).
class Tensor {
public:
    Tensor() : dtype_(DType::f32), data_(std::vector<float>{}) {}

    Tensor(std::vector<size_t> shape, DType dt);

    static Tensor zeros(std::vector<size_t> shape, DType dt = DType::f32);
    static Tensor full(std::vector<size_t> shape, double value, DType dt = DType::f32);
    static Tensor from_f32(std::vector<size_t> shape, std::vector<float> values);
    static Tensor from_f64(std::vector<size_t> shape, std::vector<double> values);
    static Tensor from_u8(std::vector<size_t> shape, std::vector<uint8_t> values);

    const std::vector<size_t>& shape() const { return shape_; }
    DType dtype() const { return dtype_; }
    size_t rank() const { return shape_.size(); }
    size_t numel() const;

    std::span<float> f32();
    std::span<const float> f32() const;
    std::span<double> f64();
    std::span<const double> f64() const;
    std::span<uint8_t> u8();
    std::span<const uint8_t> u8() const;

    /// Element read as double regardless of dtype.
    double get(size_t flat_index) const;
    void set(size_t flat_index, double value);

    Tensor astype(DType dt) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

private:
    std::vector<size_t> shape_;
    DType dtype_;
    std::variant<std::vector<float>, std::vector<double>, std::vector<uint8_t>> data_;
};

size_t shape_numel(const std::vector<size_t>& shape);
std::string shape_str(const std::vector<size_t>& shape);

// FSTN binary tensor file: magic "FSTN", version byte 1, dtype byte
// (0=float32, 1=float64, 2=uint8), rank byte, one reserved zero byte,
// rank little-endian u32 extents, then the row-major little-endian payload.
void tensor_write(const std::string& path, const Tensor& t);
Tensor tensor_read(const std::string& path);

} // namespace fssentry
