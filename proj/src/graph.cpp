#include "fssentry/graph.hpp"

namespace fssentry {

namespace {

template <typename T>
GradResult grad_all_impl(const Network& net, LossKind loss, const Tensor& batch,
                         const std::vector<int>& labels, const Tensor& target) {
    Tape<T> tape;
    auto x = tape.leaf(batch);
    std::vector<typename Tape<T>::Var> pvars;
    std::vector<typename Tape<T>::Var> layer_outs;
    // forward with per-layer outputs recorded so a non-finite loss can be
    // attributed to the first offending layer
    auto cur = x;
    for (size_t li = 0; li < net.layers.size(); ++li) {
        const LayerSpec& l = net.layers[li];
        switch (l.kind) {
            case LayerKind::conv: {
                auto w = tape.leaf(net.params[li][0]);
                auto b = tape.leaf(net.params[li][1]);
                pvars.push_back(w);
                pvars.push_back(b);
                cur = tape.conv2d(cur, w, b, l.k, l.pad);
                break;
            }
            case LayerKind::fc: {
                auto w = tape.leaf(net.params[li][0]);
                auto b = tape.leaf(net.params[li][1]);
                pvars.push_back(w);
                pvars.push_back(b);
                if (tape.shape(cur).size() != 2) {
                    size_t n = tape.shape(cur)[0];
                    cur = tape.reshape(cur, {n, tape.numel(cur) / n});
                }
                cur = tape.fc(cur, w, b);
                break;
            }
            case LayerKind::act:
                cur = l.act == ActKind::relu ? tape.relu(cur) : tape.sigmoid(cur);
                break;
            case LayerKind::down2:
                cur = tape.avgpool2(cur);
                break;
            case LayerKind::up2:
                cur = tape.upsample2(cur);
                break;
        }
        layer_outs.push_back(cur);
    }

    typename Tape<T>::Var lossv;
    if (loss == LossKind::softmax_xent) {
        if (tape.shape(cur).size() != 2) {
            size_t n = tape.shape(cur)[0];
            cur = tape.reshape(cur, {n, tape.numel(cur) / n});
        }
        lossv = tape.softmax_xent(cur, labels);
    } else {
        auto tgt = tape.leaf(target);
        auto diff = tape.sub(cur, tgt);
        lossv = tape.scale(tape.sumsq(diff), 1.0 / static_cast<double>(tape.numel(cur)));
    }

    double lv = static_cast<double>(tape.val(lossv)[0]);
    if (!std::isfinite(lv)) {
        for (size_t li = 0; li < layer_outs.size(); ++li) {
            for (T v : tape.val(layer_outs[li]))
                if (!std::isfinite(static_cast<double>(v)))
                    throw NumericError("non-finite activation at layer " + std::to_string(li));
        }
        throw NumericError("non-finite loss");
    }

    tape.backward(lossv);

    GradResult res;
    res.loss = lv;
    for (auto pv : pvars) res.param_grads.push_back(tape.grad_tensor(pv));
    res.input_grad = tape.grad_tensor(x);
    return res;
}

} // namespace

GradResult grad_all(const Network& net, LossKind loss, const Tensor& batch,
                    const std::vector<int>& labels, const Tensor& target) {
    if (batch.dtype() == DType::f64) return grad_all_impl<double>(net, loss, batch, labels, target);
    return grad_all_impl<float>(net, loss, batch, labels, target);
}

GradResult grad_params(const Network& net, LossKind loss, const Tensor& batch,
                       const std::vector<int>& labels, const Tensor& target) {
    return grad_all(net, loss, batch, labels, target);
}

Tensor grad_input(const Network& net, LossKind loss, const Tensor& batch,
                  const std::vector<int>& labels, const Tensor& target) {
    return grad_all(net, loss, batch, labels, target).input_grad;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& fn, const Tensor& x, double h) {
    Tensor g = Tensor::zeros(x.shape(), DType::f64);
    Tensor probe = x;
    for (size_t i = 0; i < x.numel(); ++i) {
        double v = x.get(i);
        probe.set(i, v + h);
        double fp = fn(probe);
        probe.set(i, v - h);
        double fm = fn(probe);
        probe.set(i, v);
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(i));
        g.set(i, (fp - fm) / (2.0 * h));
    }
    return g;
}

} // namespace fssentry
