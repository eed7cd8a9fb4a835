#include "fssentry/optim.hpp"

#include <cmath>

#include "fssentry/errors.hpp"

namespace fssentry {

double OptimizerState::effective_lr() const {
    if (cfg_.decay_step <= 0) return cfg_.lr;
    int drops = epoch_ / cfg_.decay_step;
    return cfg_.lr * std::pow(cfg_.gamma, drops);
}

void OptimizerState::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) throw ShapeError("optimizer_step: param/grad count mismatch");
    for (size_t i = 0; i < params.size(); ++i)
        if (params[i]->shape() != grads[i].shape())
            throw ShapeError("optimizer_step: shape mismatch at parameter " + std::to_string(i) + ": " +
                             shape_str(params[i]->shape()) + " vs " + shape_str(grads[i].shape()));

    double lr = effective_lr();
    ++step_count_;

    if (cfg_.kind == OptKind::sgd) {
        for (size_t i = 0; i < params.size(); ++i) {
            auto p = params[i]->f32();
            for (size_t j = 0; j < p.size(); ++j) {
                float g = static_cast<float>(grads[i].get(j)) + static_cast<float>(cfg_.weight_decay) * p[j];
                p[j] -= static_cast<float>(lr) * g;
            }
        }
        return;
    }

    if (m_.empty()) {
        for (auto* p : params) {
            m_.push_back(Tensor::zeros(p->shape()));
            v_.push_back(Tensor::zeros(p->shape()));
        }
    }
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->f32();
        auto m = m_[i].f32();
        auto v = v_[i].f32();
        for (size_t j = 0; j < p.size(); ++j) {
            float g = static_cast<float>(grads[i].get(j)) + static_cast<float>(cfg_.weight_decay) * p[j];
            m[j] = static_cast<float>(cfg_.beta1) * m[j] + (1.f - static_cast<float>(cfg_.beta1)) * g;
            v[j] = static_cast<float>(cfg_.beta2) * v[j] + (1.f - static_cast<float>(cfg_.beta2)) * g * g;
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            p[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }
}

void optimizer_step(OptimizerState& state, const std::vector<Tensor*>& params,
                    const std::vector<Tensor>& grads) {
    state.step(params, grads);
}

} // namespace fssentry
