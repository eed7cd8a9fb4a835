#include <doctest.h>

#include <cmath>

#include "fssentry/graph.hpp"
#include "fssentry/rng.hpp"

using namespace fssentry;

namespace {

// straight-line forward oracle, independent of the kernels the library uses
std::vector<double> naive_conv(const std::vector<double>& x, const std::vector<double>& w,
                               const std::vector<double>& b, size_t cin, size_t h, size_t wd,
                               size_t cout, size_t k, size_t pad) {
    std::vector<double> y(cout * h * wd, 0.0);
    for (size_t co = 0; co < cout; ++co)
        for (size_t i = 0; i < h; ++i)
            for (size_t j = 0; j < wd; ++j) {
                double acc = b[co];
                for (size_t ci = 0; ci < cin; ++ci)
                    for (size_t kh = 0; kh < k; ++kh)
                        for (size_t kw = 0; kw < k; ++kw) {
                            long ih = static_cast<long>(i + kh) - static_cast<long>(pad);
                            long iw = static_cast<long>(j + kw) - static_cast<long>(pad);
                            if (ih < 0 || iw < 0 || ih >= static_cast<long>(h) ||
                                iw >= static_cast<long>(wd))
                                continue;
                            acc += x[(ci * h + ih) * wd + iw] * w[((co * cin + ci) * k + kh) * k + kw];
                        }
                y[(co * h + i) * wd + j] = acc;
            }
    return y;
}

std::vector<double> naive_relu(std::vector<double> x) {
    for (auto& v : x)
        if (v < 0) v = 0;
    return x;
}

std::vector<double> naive_pool(const std::vector<double>& x, size_t c, size_t h, size_t w) {
    std::vector<double> y(c * (h / 2) * (w / 2));
    for (size_t ci = 0; ci < c; ++ci)
        for (size_t i = 0; i < h / 2; ++i)
            for (size_t j = 0; j < w / 2; ++j)
                y[(ci * (h / 2) + i) * (w / 2) + j] =
                    (x[(ci * h + 2 * i) * w + 2 * j] + x[(ci * h + 2 * i) * w + 2 * j + 1] +
                     x[(ci * h + 2 * i + 1) * w + 2 * j] + x[(ci * h + 2 * i + 1) * w + 2 * j + 1]) /
                    4.0;
    return y;
}

Tensor random_image_batch(RngStream& rng, size_t n, size_t c, size_t h, size_t w) {
    Tensor t = Tensor::zeros({n, c, h, w});
    for (auto& v : t.f32()) v = static_cast<float>(rng.uniform());
    return t;
}

// relative-or-absolute gradient comparison, the discipline used everywhere
void check_grad(double analytic, double numeric, double rel_tol = 1e-4, double abs_tol = 1e-6) {
    if (std::abs(analytic) < 1e-8) {
        CHECK(std::abs(analytic - numeric) < abs_tol);
    } else {
        CHECK(std::abs(analytic - numeric) / std::abs(analytic) < rel_tol);
    }
}

} // namespace

TEST_SUITE("graph") {

TEST_CASE("1x1 convolution with identity kernel passes any image through") {
    RngStream rng(3, 3);
    Network net;
    net.topology = "encoder";
    net.layers = {LayerSpec{LayerKind::conv, 1, 0, 1, 1, ActKind::relu}};
    net.params = {{Tensor::from_f32({1, 1, 1, 1}, {1.f}), Tensor::zeros({1})}};
    Tensor img = random_image_batch(rng, 2, 1, 5, 5);
    Tensor out = net.forward(img);
    REQUIRE(out.shape() == img.shape());
    for (size_t i = 0; i < img.numel(); ++i) CHECK(out.f32()[i] == img.f32()[i]);
}

TEST_CASE("fully connected layer with zero weights and bias gives zeros") {
    Network net;
    net.topology = "relation_head";
    net.layers = {LayerSpec::fully_connected(6, 4)};
    net.params = {{Tensor::zeros({4, 6}), Tensor::zeros({4})}};
    Tensor x = Tensor::from_f32({1, 6}, {1, 2, 3, 4, 5, 6});
    Tensor y = net.forward(x);
    REQUIRE(y.shape() == std::vector<size_t>{1, 4});
    for (float v : y.f32()) CHECK(v == 0.f);
}

TEST_CASE("random 3-layer encoder matches a straight-line re-implementation") {
    RngStream rng(17, 4);
    Network net = make_desk_encoder(rng);
    Tensor batch = random_image_batch(rng, 3, 3, 16, 16);
    Tensor got = net.forward(batch);
    REQUIRE(got.shape() == std::vector<size_t>{3, 64, 2, 2});

    for (size_t n = 0; n < 3; ++n) {
        std::vector<double> cur(batch.f32().begin() + n * 768, batch.f32().begin() + (n + 1) * 768);
        size_t c = 3, h = 16, w = 16;
        for (size_t li = 0; li < net.layers.size(); li += 3) {
            const LayerSpec& l = net.layers[li];
            std::vector<double> wv, bv;
            for (float v : net.params[li][0].f32()) wv.push_back(v);
            for (float v : net.params[li][1].f32()) bv.push_back(v);
            cur = naive_conv(cur, wv, bv, c, h, w, l.out, l.k, l.pad);
            c = l.out;
            cur = naive_relu(cur);
            cur = naive_pool(cur, c, h, w);
            h /= 2;
            w /= 2;
        }
        REQUIRE(cur.size() == 256);
        for (size_t i = 0; i < 256; ++i) {
            double ref = cur[i];
            double val = got.f32()[n * 256 + i];
            CHECK(std::abs(ref - val) < 1e-4);
        }
    }
}

TEST_CASE("shape mismatch raises a shape error naming expected and actual") {
    RngStream rng(1, 1);
    Network net = make_desk_encoder(rng);
    Tensor bad = Tensor::zeros({1, 4, 16, 16});
    CHECK_THROWS_AS(net.forward(bad), ShapeError);
    CHECK_THROWS_AS(net.out_shape({1, 4, 16, 16}), ShapeError);
    CHECK(net.out_shape({7, 3, 16, 16}) == std::vector<size_t>{7, 64, 2, 2});
}

TEST_CASE("grad of L(x) = sum(x^2)/2 is x itself") {
    Tape<double> tape;
    auto x = tape.leaf({1.0, -2.0, 3.0}, {3});
    auto loss = tape.scale(tape.sumsq(x), 0.5);
    tape.backward(loss);
    CHECK(tape.grad(x)[0] == doctest::Approx(1.0));
    CHECK(tape.grad(x)[1] == doctest::Approx(-2.0));
    CHECK(tape.grad(x)[2] == doctest::Approx(3.0));
}

TEST_CASE("constant loss has zero gradients everywhere") {
    Tape<double> tape;
    auto x = tape.leaf({1.0, 2.0, 3.0, 4.0}, {4});
    auto zero = tape.scale(x, 0.0);
    auto loss = tape.mean_all(zero);
    tape.backward(loss);
    for (double g : tape.grad(x)) CHECK(g == 0.0);
}

TEST_CASE("softmax cross-entropy gradient equals softmax minus onehot") {
    Tape<double> tape;
    auto logits = tape.leaf({2.0, 1.0, 0.1, -1.0, 0.0, 1.0}, {2, 3});
    auto loss = tape.softmax_xent(logits, {0, 2});
    tape.backward(loss);
    // hand-computed probabilities per row
    for (size_t row = 0; row < 2; ++row) {
        double z[3];
        for (int j = 0; j < 3; ++j) z[j] = tape.val(logits)[row * 3 + j];
        double denom = std::exp(z[0]) + std::exp(z[1]) + std::exp(z[2]);
        for (int j = 0; j < 3; ++j) {
            double p = std::exp(z[j]) / denom;
            double expected = (p - ((row == 0 && j == 0) || (row == 1 && j == 2) ? 1.0 : 0.0)) / 2.0;
            CHECK(tape.grad(logits)[row * 3 + j] == doctest::Approx(expected).epsilon(1e-9));
        }
    }
}

TEST_CASE("grad_params and grad_input match central finite differences") {
    RngStream rng(31, 8);
    // small conv + fc network in float64
    Network net;
    net.topology = "encoder";
    net.layers = {LayerSpec::conv2d(2, 3, 3), LayerSpec::activation(ActKind::relu),
                  LayerSpec::downsample2(), LayerSpec::fully_connected(3 * 3 * 3, 4)};
    net.init_params(rng);

    Tensor batch = Tensor::zeros({2, 2, 6, 6}, DType::f64);
    for (size_t i = 0; i < batch.numel(); ++i) batch.set(i, rng.uniform(0.05, 0.95));
    std::vector<int> labels{1, 3};

    GradResult res = grad_params(net, LossKind::softmax_xent, batch, labels);

    auto loss_at = [&](const Tensor& probe) {
        return grad_params(net, LossKind::softmax_xent, probe, labels).loss;
    };
    Tensor fd = finite_diff_grad(loss_at, batch, 1e-4);
    for (size_t i = 0; i < batch.numel(); ++i)
        check_grad(res.input_grad.get(i), fd.get(i));

    // parameter gradients via perturbing each parameter tensor entry
    auto plist = net.param_list();
    for (size_t pi = 0; pi < plist.size(); ++pi) {
        Tensor& p = *plist[pi];
        for (size_t i = 0; i < std::min<size_t>(p.numel(), 8); ++i) {
            double orig = p.get(i);
            double h = 1e-4;
            p.set(i, orig + h);
            double fplus = grad_params(net, LossKind::softmax_xent, batch, labels).loss;
            p.set(i, orig - h);
            double fminus = grad_params(net, LossKind::softmax_xent, batch, labels).loss;
            p.set(i, orig);
            check_grad(res.param_grads[pi].get(i), (fplus - fminus) / (2 * h));
        }
    }
}

TEST_CASE("mse gradients match finite differences on a decoder-style net") {
    RngStream rng(77, 2);
    Network net;
    net.topology = "decoder";
    net.layers = {LayerSpec::upsample2(), LayerSpec::conv2d(2, 1, 3),
                  LayerSpec::activation(ActKind::sigmoid)};
    net.init_params(rng);
    Tensor batch = Tensor::zeros({1, 2, 3, 3}, DType::f64);
    for (size_t i = 0; i < batch.numel(); ++i) batch.set(i, rng.uniform(-1, 1));
    Tensor target = Tensor::zeros({1, 1, 6, 6}, DType::f64);
    for (size_t i = 0; i < target.numel(); ++i) target.set(i, rng.uniform());

    GradResult res = grad_params(net, LossKind::mse, batch, {}, target);
    auto loss_at = [&](const Tensor& probe) {
        return grad_params(net, LossKind::mse, probe, {}, target).loss;
    };
    Tensor fd = finite_diff_grad(loss_at, batch, 1e-4);
    for (size_t i = 0; i < batch.numel(); ++i) check_grad(res.input_grad.get(i), fd.get(i));
}

TEST_CASE("finite_diff_grad of sum is all ones") {
    Tensor x = Tensor::from_f64({4}, {0.3, -1.2, 5.0, 0.0});
    auto fn = [](const Tensor& t) {
        double acc = 0;
        for (size_t i = 0; i < t.numel(); ++i) acc += t.get(i);
        return acc;
    };
    Tensor g = finite_diff_grad(fn, x, 1e-5);
    for (size_t i = 0; i < 4; ++i) CHECK(g.get(i) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("finite_diff_grad of x[0]^2 at x=[2] is 4") {
    Tensor x = Tensor::from_f64({1}, {2.0});
    auto fn = [](const Tensor& t) { return t.get(0) * t.get(0); };
    Tensor g = finite_diff_grad(fn, x, 1e-5);
    CHECK(std::abs(g.get(0) - 4.0) < 1e-6);
}

TEST_CASE("finite_diff_grad surfaces non-finite evaluations") {
    Tensor x = Tensor::from_f64({1}, {0.0});
    auto fn = [](const Tensor& t) { return 1.0 / t.get(0); };
    CHECK_THROWS_AS(finite_diff_grad(fn, x, 0.0), NumericError);
}

TEST_CASE("cw margin clamps at -kappa and routes gradients to the right logits") {
    Tape<double> tape;
    auto logits = tape.leaf({5.0, 1.0, 0.0, -3.0, 2.0, 1.0}, {2, 3});
    auto margin = tape.cw_margin(logits, 0, 0.5);
    // row 0: 5 - 2 = 3 (active); row 1: -3 - 2 = -5, clamped to -0.5
    CHECK(tape.val(margin)[0] == doctest::Approx(3.0));
    CHECK(tape.val(margin)[1] == doctest::Approx(-0.5));
    auto loss = tape.mean_all(margin);
    tape.backward(loss);
    CHECK(tape.grad(logits)[0] == doctest::Approx(0.5));  // +1/2 on (0, t)
    CHECK(tape.grad(logits)[1] == doctest::Approx(-0.5)); // -1/2 on (0, argmax)
    for (size_t i = 3; i < 6; ++i) CHECK(tape.grad(logits)[i] == 0.0); // clamped row
}

} // TEST_SUITE
