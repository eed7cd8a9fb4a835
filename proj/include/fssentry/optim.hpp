#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fssentry/tensor.hpp"

namespace fssentry {

enum class OptKind { sgd, adam };

struct OptimizerConfig {
    OptKind kind = OptKind::adam;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // lr multiplied by gamma every decay_step epochs (0 disables the schedule)
    int decay_step = 0;
    double gamma = 1.0;
};

/// SGD / Adam state over a fixed parameter list. Weight decay is added to
/// the gradient (p' = p - lr * (g + wd * p) for SGD; same g' feeds Adam's
/// moment updates with bias correction). A step never changes shapes.
class OptimizerState {
public:
    explicit OptimizerState(OptimizerConfig cfg) : cfg_(cfg) {}

    const OptimizerConfig& config() const { return cfg_; }
    void set_epoch(int e) { epoch_ = e; }
    double effective_lr() const;
    int64_t steps_taken() const { return step_count_; }

    void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads);

private:
    OptimizerConfig cfg_;
    int64_t step_count_ = 0;
    int epoch_ = 0;
    std::vector<Tensor> m_, v_; // adam moments, lazily sized
};

void optimizer_step(OptimizerState& state, const std::vector<Tensor*>& params,
                    const std::vector<Tensor>& grads);

} // namespace fssentry
