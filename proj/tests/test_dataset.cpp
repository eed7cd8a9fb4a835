#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "fssentry/dataset.hpp"
#include "fssentry/errors.hpp"

using namespace fssentry;

TEST_SUITE("dataset") {

TEST_CASE("same args and seed generate bit-identical datasets") {
    Dataset a = synth_generate(10, 20, 99);
    Dataset b = synth_generate(10, 20, 99);
    REQUIRE(a.classes.size() == b.classes.size());
    for (const auto& [cid, imgs] : a.classes) {
        const auto& other = b.classes.at(cid);
        REQUIRE(imgs.size() == other.size());
        for (size_t i = 0; i < imgs.size(); ++i) {
            auto x = imgs[i].f32();
            auto y = other[i].f32();
            for (size_t j = 0; j < x.size(); ++j) REQUIRE(x[j] == y[j]);
        }
    }
    Dataset c = synth_generate(10, 20, 100);
    CHECK(c.classes.at(0)[0].f32()[0] != a.classes.at(0)[0].f32()[0]);
}

TEST_CASE("24 classes x 20 samples gives 480 images, all inside [0,1]") {
    Dataset ds = synth_generate(24, 20, 7);
    size_t total = 0;
    for (const auto& [cid, imgs] : ds.classes) {
        total += imgs.size();
        for (const auto& img : imgs) {
            REQUIRE(img.shape() == std::vector<size_t>{3, 16, 16});
            for (float v : img.f32()) {
                REQUIRE(v >= 0.f);
                REQUIRE(v <= 1.f);
            }
        }
    }
    CHECK(total == 480);
}

TEST_CASE("generator preconditions and parameter-space exhaustion") {
    CHECK_THROWS_AS(synth_generate(4, 20, 1), ConfigError);
    CHECK_THROWS_AS(synth_generate(8, 5, 1), ConfigError);
    CHECK_THROWS_AS(synth_generate(145, 20, 1), ConfigError);
}

TEST_CASE("split sizes follow the ratios and are deterministic") {
    Dataset ds = synth_generate(24, 20, 5);
    split_classes(ds, {14.0 / 24, 4.0 / 24, 6.0 / 24}, 11);
    CHECK(ds.classes_of(Split::train).size() == 14);
    CHECK(ds.classes_of(Split::val).size() == 4);
    CHECK(ds.classes_of(Split::test).size() == 6);

    Dataset ds2 = synth_generate(24, 20, 5);
    split_classes(ds2, {14.0 / 24, 4.0 / 24, 6.0 / 24}, 11);
    CHECK(ds.classes_of(Split::train) == ds2.classes_of(Split::train));
    CHECK(ds.classes_of(Split::test) == ds2.classes_of(Split::test));
}

TEST_CASE("splits partition the classes") {
    Dataset ds = synth_generate(20, 20, 3);
    split_classes(ds, {0.5, 0.25, 0.25}, 2);
    std::set<int> all;
    size_t total = 0;
    for (Split s : {Split::train, Split::val, Split::test}) {
        auto ids = ds.classes_of(s);
        total += ids.size();
        all.insert(ids.begin(), ids.end());
    }
    CHECK(total == 20);
    CHECK(all.size() == 20); // pairwise disjoint
    CHECK_THROWS_AS(split_classes(ds, {0.5, 0.5, 0.5}, 2), ConfigError);
}

TEST_CASE("episode sampling sizes and disjointness") {
    Dataset ds = synth_generate(12, 20, 8);
    split_classes(ds, {0.5, 0.25, 0.25}, 8);
    RngStream rng(8, 1);

    Episode ep = sample_episode(ds, Split::train, 5, 5, 15, rng);
    size_t support_count = 0;
    for (const auto& s : ep.support) support_count += s.size();
    CHECK(support_count == 25);
    CHECK(ep.query.size() == 15);

    Episode small = sample_episode(ds, Split::train, 2, 1, 2, rng);
    CHECK(small.way_classes.size() == 2);
    CHECK(small.query.size() == 2);
    // support and query draws never collide inside an episode
    for (size_t w = 0; w < 2; ++w)
        for (size_t q = 0; q < small.query.size(); ++q)
            if (small.query_way[q] == static_cast<int>(w))
                CHECK(std::find(small.support_ids[w].begin(), small.support_ids[w].end(),
                                small.query_ids[q]) == small.support_ids[w].end());

    CHECK_THROWS_AS(sample_episode(ds, Split::train, 2, 1, 3, rng), ConfigError);
    CHECK_THROWS_AS(sample_episode(ds, Split::val, 10, 1, 10, rng), SamplingError);
}

TEST_CASE("each test class appears in episodes at the binomial rate") {
    Dataset ds = synth_generate(24, 20, 4);
    split_classes(ds, {14.0 / 24, 4.0 / 24, 6.0 / 24}, 4);
    RngStream rng(4, 2);
    auto test_classes = ds.classes_of(Split::test);
    REQUIRE(test_classes.size() == 6);
    std::map<int, int> hits;
    const int n = 1000;
    for (int e = 0; e < n; ++e) {
        Episode ep = sample_episode(ds, Split::test, 5, 1, 5, rng);
        for (int cid : ep.way_classes) ++hits[cid];
    }
    double expect = n * 5.0 / 6.0;
    double sigma = std::sqrt(n * (5.0 / 6.0) * (1.0 / 6.0));
    for (int cid : test_classes) CHECK(std::abs(hits[cid] - expect) <= 3 * sigma);
}

TEST_CASE("attack episodes never include the target class in the redraw") {
    Dataset ds = synth_generate(12, 20, 9);
    split_classes(ds, {0.5, 0.25, 0.25}, 9);
    int t = ds.classes_of(Split::test)[0];
    RngStream rng(9, 3);
    std::vector<size_t> fixed{0, 1, 2, 3, 4};
    for (int i = 0; i < 10000; ++i) {
        AttackEpisode ae = sample_attack_episode(ds, t, fixed, 3, 1, 1, rng);
        CHECK(ae.other_classes.size() == 2); // |C^-t| = K-1
        for (int cid : ae.other_classes) REQUIRE(cid != t);
    }
}

TEST_CASE("target queries avoid the fixed support source samples") {
    Dataset ds = synth_generate(12, 20, 10);
    split_classes(ds, {0.5, 0.25, 0.25}, 10);
    int t = ds.classes_of(Split::test)[1];
    RngStream rng(10, 4);
    std::vector<size_t> fixed{2, 5, 7, 11, 13};
    for (int i = 0; i < 1000; ++i) {
        AttackEpisode ae = sample_attack_episode(ds, t, fixed, 5, 5, 8, rng);
        for (size_t qid : ae.target_query_ids)
            CHECK(std::find(fixed.begin(), fixed.end(), qid) == fixed.end());
    }
    // too few non-support samples for the requested query count
    std::vector<size_t> all;
    for (size_t i = 0; i < 15; ++i) all.push_back(i);
    CHECK_THROWS_AS(sample_attack_episode(ds, t, all, 5, 5, 8, rng), SamplingError);
}

TEST_CASE("dataset save/load round-trip preserves images and splits") {
    Dataset ds = synth_generate(8, 20, 12);
    split_classes(ds, {0.5, 0.25, 0.25}, 12);
    auto dir = (std::filesystem::temp_directory_path() / "fssentry_ds_roundtrip").string();
    std::filesystem::remove_all(dir);
    save_dataset(ds, dir);
    Dataset back = load_dataset(dir);
    REQUIRE(back.classes.size() == ds.classes.size());
    CHECK(back.generator_desc == ds.generator_desc);
    for (const auto& [cid, imgs] : ds.classes) {
        CHECK(back.split.at(cid) == ds.split.at(cid));
        for (size_t i = 0; i < imgs.size(); ++i) {
            auto x = imgs[i].f32();
            auto y = back.classes.at(cid)[i].f32();
            for (size_t j = 0; j < x.size(); ++j) REQUIRE(x[j] == y[j]);
        }
    }
}

TEST_CASE("loader rescales uint8 tensors to [0,1] floats") {
    auto dir = (std::filesystem::temp_directory_path() / "fssentry_ds_u8").string();
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir + "/class_0000");
    std::vector<uint8_t> raw(3 * 16 * 16);
    for (size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<uint8_t>(i % 256);
    tensor_write(dir + "/class_0000/img_0000.fstn", Tensor::from_u8({3, 16, 16}, raw));
    std::ofstream mf(dir + "/manifest.txt");
    mf << "0,test,class_0000/img_0000.fstn\n";
    mf.close();
    Dataset ds = load_dataset(dir);
    const Tensor& img = ds.classes.at(0)[0];
    CHECK(img.dtype() == DType::f32);
    CHECK(img.f32()[255] == doctest::Approx(255.f / 255.f));
    CHECK(img.f32()[10] == doctest::Approx(10.f / 255.f));
}

} // TEST_SUITE
