#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fssentry/rng.hpp"
#include "fssentry/tensor.hpp"

using namespace fssentry;

namespace {

std::string tmp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "fssentry_tensor_tests";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

} // namespace

TEST_SUITE("tensor") {

TEST_CASE("write then read a 2x3 float32 tensor is bit-exact") {
    Tensor t = Tensor::from_f32({2, 3}, {1.f, -2.5f, 3.25f, 0.f, 1e-7f, 42.f});
    std::string path = tmp_path("roundtrip.fstn");
    tensor_write(path, t);
    Tensor r = tensor_read(path);
    CHECK(r.shape() == t.shape());
    CHECK(r.dtype() == DType::f32);
    for (size_t i = 0; i < t.numel(); ++i) CHECK(r.f32()[i] == t.f32()[i]);
}

TEST_CASE("rank-0 scalar tensor round-trips") {
    Tensor t = Tensor::from_f64({}, {3.14159});
    std::string path = tmp_path("scalar.fstn");
    tensor_write(path, t);
    Tensor r = tensor_read(path);
    CHECK(r.rank() == 0);
    CHECK(r.numel() == 1);
    CHECK(r.f64()[0] == t.f64()[0]);
}

TEST_CASE("bad magic reports the magic field") {
    std::string path = tmp_path("badmagic.fstn");
    std::ofstream f(path, std::ios::binary);
    f << "XXXX";
    f.put(1);
    f.put(0);
    f.put(0);
    f.put(0);
    f.close();
    CHECK_THROWS_WITH_AS(tensor_read(path), doctest::Contains("magic"), FormatError);
}

TEST_CASE("bad version and truncation report their fields") {
    // wrong version byte
    {
        std::string path = tmp_path("badver.fstn");
        std::ofstream f(path, std::ios::binary);
        f << "FSTN";
        f.put(9);
        f.close();
        CHECK_THROWS_WITH_AS(tensor_read(path), doctest::Contains("version"), FormatError);
    }
    // truncated payload
    {
        Tensor t = Tensor::from_f32({4}, {1, 2, 3, 4});
        std::string path = tmp_path("trunc.fstn");
        tensor_write(path, t);
        auto size = std::filesystem::file_size(path);
        std::filesystem::resize_file(path, size - 3);
        CHECK_THROWS_WITH_AS(tensor_read(path), doctest::Contains("payload"), FormatError);
    }
    // unknown dtype code
    {
        std::string path = tmp_path("baddtype.fstn");
        std::ofstream f(path, std::ios::binary);
        f << "FSTN";
        f.put(1);
        f.put(7);
        f.put(0);
        f.put(0);
        f.close();
        CHECK_THROWS_WITH_AS(tensor_read(path), doctest::Contains("dtype"), FormatError);
    }
}

TEST_CASE("round-trip is the identity for all dtypes and ranks 0-4") {
    RngStream rng(7, 1);
    for (DType dt : {DType::f32, DType::f64, DType::u8}) {
        for (size_t rank = 0; rank <= 4; ++rank) {
            std::vector<size_t> shape;
            for (size_t r = 0; r < rank; ++r) shape.push_back(1 + rng.uniform_int(4));
            Tensor t(shape, dt);
            for (size_t i = 0; i < t.numel(); ++i) {
                if (dt == DType::u8)
                    t.set(i, static_cast<double>(rng.uniform_int(256)));
                else
                    t.set(i, rng.uniform(-10, 10));
            }
            std::string path = tmp_path("any.fstn");
            tensor_write(path, t);
            Tensor r = tensor_read(path);
            REQUIRE(r.shape() == t.shape());
            REQUIRE(r.dtype() == dt);
            for (size_t i = 0; i < t.numel(); ++i) CHECK(r.get(i) == t.get(i));
        }
    }
}

TEST_CASE("trailing bytes are rejected") {
    Tensor t = Tensor::from_f32({2}, {1, 2});
    std::string path = tmp_path("trailing.fstn");
    tensor_write(path, t);
    std::ofstream f(path, std::ios::binary | std::ios::app);
    f.put(0);
    f.close();
    CHECK_THROWS_AS(tensor_read(path), FormatError);
}

} // TEST_SUITE
