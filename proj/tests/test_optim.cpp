#include <doctest.h>

#include <cmath>

#include "fssentry/optim.hpp"

using namespace fssentry;

TEST_SUITE("optim") {

TEST_CASE("sgd: lr=0.1, wd=0, p=1, g=1 gives p=0.9") {
    Tensor p = Tensor::from_f32({1}, {1.f});
    OptimizerConfig cfg;
    cfg.kind = OptKind::sgd;
    cfg.lr = 0.1;
    OptimizerState state(cfg);
    state.step({&p}, {Tensor::from_f32({1}, {1.f})});
    CHECK(p.f32()[0] == doctest::Approx(0.9f));
}

TEST_CASE("sgd weight decay enters the gradient") {
    Tensor p = Tensor::from_f32({1}, {2.f});
    OptimizerConfig cfg;
    cfg.kind = OptKind::sgd;
    cfg.lr = 0.5;
    cfg.weight_decay = 0.1;
    OptimizerState state(cfg);
    state.step({&p}, {Tensor::zeros({1})});
    // p <- p - lr * (0 + wd * p) = 2 - 0.5 * 0.2
    CHECK(p.f32()[0] == doctest::Approx(1.9f));
}

TEST_CASE("adam step with zero gradients leaves parameters unchanged") {
    Tensor p = Tensor::from_f32({3}, {1.f, -2.f, 0.5f});
    OptimizerConfig cfg;
    cfg.kind = OptKind::adam;
    cfg.lr = 0.1;
    OptimizerState state(cfg);
    state.step({&p}, {Tensor::zeros({3})});
    CHECK(p.f32()[0] == doctest::Approx(1.f));
    CHECK(p.f32()[1] == doctest::Approx(-2.f));
    CHECK(p.f32()[2] == doctest::Approx(0.5f));
}

TEST_CASE("100 sgd steps contract a quadratic to its minimum") {
    // loss (p-3)^2, grad 2(p-3); from p=0 with lr=0.1 the gap scales by 0.8
    Tensor p = Tensor::from_f32({1}, {0.f});
    OptimizerConfig cfg;
    cfg.kind = OptKind::sgd;
    cfg.lr = 0.1;
    OptimizerState state(cfg);
    for (int i = 0; i < 100; ++i) {
        Tensor g = Tensor::from_f32({1}, {2.f * (p.f32()[0] - 3.f)});
        state.step({&p}, {g});
    }
    CHECK(std::abs(p.f32()[0] - 3.f) < 1e-6);
}

TEST_CASE("adam drives a quadratic toward its minimum") {
    Tensor p = Tensor::from_f32({1}, {0.f});
    OptimizerConfig cfg;
    cfg.kind = OptKind::adam;
    cfg.lr = 0.05;
    OptimizerState state(cfg);
    for (int i = 0; i < 2000; ++i) {
        Tensor g = Tensor::from_f32({1}, {2.f * (p.f32()[0] - 3.f)});
        state.step({&p}, {g});
    }
    CHECK(std::abs(p.f32()[0] - 3.f) < 1e-2);
}

TEST_CASE("decay schedule multiplies lr by gamma every step-size epochs") {
    OptimizerConfig cfg;
    cfg.kind = OptKind::sgd;
    cfg.lr = 1.0;
    cfg.decay_step = 10;
    cfg.gamma = 0.1;
    OptimizerState state(cfg);
    state.set_epoch(0);
    CHECK(state.effective_lr() == doctest::Approx(1.0));
    state.set_epoch(9);
    CHECK(state.effective_lr() == doctest::Approx(1.0));
    state.set_epoch(10);
    CHECK(state.effective_lr() == doctest::Approx(0.1));
    state.set_epoch(25);
    CHECK(state.effective_lr() == doctest::Approx(0.01));
}

TEST_CASE("a step never changes parameter shapes and rejects mismatches") {
    Tensor p = Tensor::zeros({2, 2});
    OptimizerConfig cfg;
    cfg.kind = OptKind::sgd;
    OptimizerState state(cfg);
    CHECK_THROWS_AS(state.step({&p}, {Tensor::zeros({4})}), ShapeError);
    state.step({&p}, {Tensor::zeros({2, 2})});
    CHECK(p.shape() == std::vector<size_t>{2, 2});
}

} // TEST_SUITE
