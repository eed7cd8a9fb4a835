#pragma once

#include <string>
#include <vector>

#include "fssentry/dataset.hpp"
#include "fssentry/fewshot.hpp"
#include "fssentry/net.hpp"
#include "fssentry/optim.hpp"
#include "fssentry/rng.hpp"
#include "fssentry/tensor.hpp"

namespace fssentry {

enum class FilterKind { identity, noise, feats, bitr, tvm, fpa, fpa_prime };

const char* filter_kind_name(FilterKind k);
FilterKind filter_kind_parse(const std::string& s);

struct TvmParams {
    double p = 0.5;      // Bernoulli keep probability per pixel
    double lambda = 0.03;
    int iters = 50;
    double step = 0.1;
};

/// Encoder/decoder pair used as the autoencoder filter. `stage` records how
/// far the weights got: standard (image MSE), fpa, or fpa_prime.
struct AeModel {
    Network encoder;
    Network decoder;
    std::string stage = "standard";

    std::vector<Tensor> apply(const std::vector<Tensor>& images) const;
};

AeModel make_desk_ae(RngStream& rng);
void save_ae(const AeModel& ae, const std::string& dir);
AeModel load_ae(const std::string& dir);

struct FilterSpec {
    FilterKind kind = FilterKind::fpa;
    int bitr_r = 6;
    TvmParams tvm;
    const AeModel* ae = nullptr; // required for fpa / fpa_prime

    void validate() const;
    std::string name() const;
};

// Every filter maps image batches onto image batches of identical shape
// with values in [0, 1].

/// Adds zero-mean Gaussian noise with per-channel variance equal to the
/// batch's empirical channel variance, then clips.
std::vector<Tensor> filter_noise(const std::vector<Tensor>& images, RngStream& rng);

/// 2x2 sliding-window median per channel; bottom/right edges replicate.
/// Median of four = mean of the two middle order statistics.
std::vector<Tensor> filter_feats_median(const std::vector<Tensor>& images);

/// Quantize to 2^r levels: floor(x * (2^r - 1) + 0.5) / (2^r - 1).
std::vector<Tensor> filter_bitr(const std::vector<Tensor>& images, int r);

/// Bernoulli keep-mask data term plus smoothed-TV regularizer, minimized by
/// plain gradient descent from z0 = x.
std::vector<Tensor> filter_tvm(const std::vector<Tensor>& images, const TvmParams& params,
                               RngStream& rng);

/// TVM objective for a per-pixel (HxW) mask shared across channels; exposed
/// so the descent property is testable.
double tvm_objective(const Tensor& z, const Tensor& x, const std::vector<uint8_t>& mask, double lambda);
Tensor tvm_solve(const Tensor& x, const std::vector<uint8_t>& mask, const TvmParams& params,
                 std::vector<double>* objective_trace = nullptr);

std::vector<Tensor> apply_filter(const FilterSpec& spec, const std::vector<Tensor>& images,
                                 RngStream& rng);

struct AeTrainLog {
    std::vector<double> train_loss; // per epoch
    std::vector<double> val_loss;
    int best_epoch = -1;
    double best_val = 0;
};

/// Standard autoencoder: image-space MSE on the train split, best validation
/// checkpoint kept.
AeModel train_ae_standard(const Dataset& ds, OptimizerConfig opt, int epochs, RngStream& rng,
                          int batch_size = 32, AeTrainLog* log = nullptr);

/// Fine-tune toward feature-space preservation: mean over the batch of
/// 0.01 * |x - x^|^2 / dim(x)^(1/2) + |f - f^|^2 / dim(f)^(1/2), with f the
/// frozen few-shot backbone features.
AeModel finetune_fpa(const AeModel& ae, const Network& fewshot_encoder, const Dataset& ds,
                     OptimizerConfig opt, int epochs, RngStream& rng, int batch_size = 32,
                     AeTrainLog* log = nullptr);

/// FPA plus a logits reconstruction term; each sample is scored as a query
/// against a fixed 5-way 5-shot calibration support redrawn every epoch.
AeModel finetune_fpa_prime(const AeModel& ae, const FewShotModel& model, const Dataset& ds,
                           OptimizerConfig opt, int epochs, RngStream& rng, int batch_size = 32,
                           AeTrainLog* log = nullptr);

/// Training-graph loss values for a batch (what the fine-tuning steps see);
/// tests compare these against straight-line re-evaluations.
double fpa_batch_loss(const AeModel& ae, const Network& fewshot_encoder,
                      const std::vector<Tensor>& images);
double fpa_prime_batch_loss(const AeModel& ae, const FewShotModel& model,
                            const std::vector<Tensor>& way_features, const std::vector<Tensor>& images);

/// Mean per-pixel reconstruction RMSE over a split.
double ae_rmse(const AeModel& ae, const Dataset& ds, Split split);
/// Mean feature reconstruction error |f - f^|^2 / dim(f)^(1/2) over a split.
double ae_feature_error(const AeModel& ae, const Network& fewshot_encoder, const Dataset& ds, Split split);

} // namespace fssentry
