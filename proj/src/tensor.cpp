#include "fssentry/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace fssentry {

const char* dtype_name(DType dt) {
    switch (dt) {
        case DType::f32: return "float32";
        case DType::f64: return "float64";
        case DType::u8: return "uint8";
    }
    return "?";
}

size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const std::vector<size_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(std::vector<size_t> shape, DType dt) : shape_(std::move(shape)), dtype_(dt) {
    size_t n = shape_numel(shape_);
    switch (dt) {
        case DType::f32: data_ = std::vector<float>(n, 0.f); break;
        case DType::f64: data_ = std::vector<double>(n, 0.0); break;
        case DType::u8: data_ = std::vector<uint8_t>(n, 0); break;
    }
}

Tensor Tensor::zeros(std::vector<size_t> shape, DType dt) { return Tensor(std::move(shape), dt); }

Tensor Tensor::full(std::vector<size_t> shape, double value, DType dt) {
    Tensor t(std::move(shape), dt);
    for (size_t i = 0; i < t.numel(); ++i) t.set(i, value);
    return t;
}

Tensor Tensor::from_f32(std::vector<size_t> shape, std::vector<float> values) {
    if (shape_numel(shape) != values.size())
        throw ShapeError("from_f32: shape " + shape_str(shape) + " vs " + std::to_string(values.size()) + " values");
    Tensor t;
    t.shape_ = std::move(shape);
    t.dtype_ = DType::f32;
    t.data_ = std::move(values);
    return t;
}

Tensor Tensor::from_f64(std::vector<size_t> shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size())
        throw ShapeError("from_f64: shape " + shape_str(shape) + " vs " + std::to_string(values.size()) + " values");
    Tensor t;
    t.shape_ = std::move(shape);
    t.dtype_ = DType::f64;
    t.data_ = std::move(values);
    return t;
}

Tensor Tensor::from_u8(std::vector<size_t> shape, std::vector<uint8_t> values) {
    if (shape_numel(shape) != values.size())
        throw ShapeError("from_u8: shape " + shape_str(shape) + " vs " + std::to_string(values.size()) + " values");
    Tensor t;
    t.shape_ = std::move(shape);
    t.dtype_ = DType::u8;
    t.data_ = std::move(values);
    return t;
}

size_t Tensor::numel() const { return shape_numel(shape_); }

std::span<float> Tensor::f32() {
    if (dtype_ != DType::f32) throw ShapeError("tensor is not float32");
    return std::get<std::vector<float>>(data_);
}
std::span<const float> Tensor::f32() const {
    if (dtype_ != DType::f32) throw ShapeError("tensor is not float32");
    return std::get<std::vector<float>>(data_);
}
std::span<double> Tensor::f64() {
    if (dtype_ != DType::f64) throw ShapeError("tensor is not float64");
    return std::get<std::vector<double>>(data_);
}
std::span<const double> Tensor::f64() const {
    if (dtype_ != DType::f64) throw ShapeError("tensor is not float64");
    return std::get<std::vector<double>>(data_);
}
std::span<uint8_t> Tensor::u8() {
    if (dtype_ != DType::u8) throw ShapeError("tensor is not uint8");
    return std::get<std::vector<uint8_t>>(data_);
}
std::span<const uint8_t> Tensor::u8() const {
    if (dtype_ != DType::u8) throw ShapeError("tensor is not uint8");
    return std::get<std::vector<uint8_t>>(data_);
}

double Tensor::get(size_t i) const {
    switch (dtype_) {
        case DType::f32: return std::get<std::vector<float>>(data_)[i];
        case DType::f64: return std::get<std::vector<double>>(data_)[i];
        case DType::u8: return std::get<std::vector<uint8_t>>(data_)[i];
    }
    return 0;
}

void Tensor::set(size_t i, double v) {
    switch (dtype_) {
        case DType::f32: std::get<std::vector<float>>(data_)[i] = static_cast<float>(v); break;
        case DType::f64: std::get<std::vector<double>>(data_)[i] = v; break;
        case DType::u8: std::get<std::vector<uint8_t>>(data_)[i] = static_cast<uint8_t>(v); break;
    }
}

Tensor Tensor::astype(DType dt) const {
    if (dt == dtype_) return *this;
    Tensor out(shape_, dt);
    for (size_t i = 0; i < numel(); ++i) out.set(i, get(i));
    return out;
}

bool Tensor::all_finite() const {
    if (dtype_ == DType::u8) return true;
    for (size_t i = 0; i < numel(); ++i)
        if (!std::isfinite(get(i))) return false;
    return true;
}

namespace {

constexpr char kMagic[4] = {'F', 'S', 'T', 'N'};
constexpr uint8_t kVersion = 1;

void put_u32_le(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

void put_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

uint32_t read_u32_le(const uint8_t* p) {
    return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

uint64_t read_u64_le(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
    return v;
}

} // namespace

void tensor_write(const std::string& path, const Tensor& t) {
    std::string buf;
    buf.append(kMagic, 4);
    buf.push_back(static_cast<char>(kVersion));
    buf.push_back(static_cast<char>(t.dtype()));
    if (t.rank() > 255) throw FormatError("rank: tensor rank " + std::to_string(t.rank()) + " exceeds 255");
    buf.push_back(static_cast<char>(t.rank()));
    buf.push_back(0); // reserved
    for (size_t e : t.shape()) {
        if (e > 0xFFFFFFFFull) throw FormatError("extents: extent too large for u32");
        put_u32_le(buf, static_cast<uint32_t>(e));
    }
    switch (t.dtype()) {
        case DType::f32:
            for (float v : t.f32()) put_u32_le(buf, std::bit_cast<uint32_t>(v));
            break;
        case DType::f64:
            for (double v : t.f64()) put_u64_le(buf, std::bit_cast<uint64_t>(v));
            break;
        case DType::u8:
            for (uint8_t v : t.u8()) buf.push_back(static_cast<char>(v));
            break;
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("short write: " + path);
}

Tensor tensor_read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const uint8_t* p = reinterpret_cast<const uint8_t*>(buf.data());
    size_t n = buf.size();

    if (n < 4 || std::memcmp(p, kMagic, 4) != 0) throw FormatError("magic: expected \"FSTN\" in " + path);
    if (n < 5) throw FormatError("version: truncated header in " + path);
    if (p[4] != kVersion)
        throw FormatError("version: expected 1, got " + std::to_string(int(p[4])) + " in " + path);
    if (n < 6) throw FormatError("dtype: truncated header in " + path);
    uint8_t dt_byte = p[5];
    if (dt_byte > 2) throw FormatError("dtype: unknown code " + std::to_string(int(dt_byte)) + " in " + path);
    DType dt = static_cast<DType>(dt_byte);
    if (n < 7) throw FormatError("rank: truncated header in " + path);
    size_t rank = p[6];
    if (n < 8) throw FormatError("reserved: truncated header in " + path);
    if (p[7] != 0) throw FormatError("reserved: nonzero reserved byte in " + path);

    size_t off = 8;
    if (n < off + 4 * rank) throw FormatError("extents: truncated extents in " + path);
    std::vector<size_t> shape(rank);
    for (size_t i = 0; i < rank; ++i) {
        shape[i] = read_u32_le(p + off);
        off += 4;
    }
    size_t count = shape_numel(shape);
    size_t elem = dt == DType::f64 ? 8 : (dt == DType::f32 ? 4 : 1);
    if (n < off + count * elem) throw FormatError("payload: truncated payload in " + path);
    if (n > off + count * elem) throw FormatError("payload: trailing bytes in " + path);

    switch (dt) {
        case DType::f32: {
            std::vector<float> v(count);
            for (size_t i = 0; i < count; ++i) v[i] = std::bit_cast<float>(read_u32_le(p + off + 4 * i));
            return Tensor::from_f32(std::move(shape), std::move(v));
        }
        case DType::f64: {
            std::vector<double> v(count);
            for (size_t i = 0; i < count; ++i) v[i] = std::bit_cast<double>(read_u64_le(p + off + 8 * i));
            return Tensor::from_f64(std::move(shape), std::move(v));
        }
        case DType::u8: {
            std::vector<uint8_t> v(count);
            std::memcpy(v.data(), p + off, count);
            return Tensor::from_u8(std::move(shape), std::move(v));
        }
    }
    throw FormatError("dtype: unreachable");
}

} // namespace fssentry
