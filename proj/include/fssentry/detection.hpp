#pragma once

#include <span>
#include <string>
#include <vector>

#include "fssentry/fewshot.hpp"
#include "fssentry/filters.hpp"
#include "fssentry/rng.hpp"
#include "fssentry/tensor.hpp"

namespace fssentry {

/// One split of an n-shot support set into n-1 auxiliary supports and a
/// single auxiliary query (indices into the support set).
struct AuxSplit {
    std::vector<size_t> aux_support;
    size_t aux_query = 0;
    int split_index = 0;
};

AuxSplit aux_split(size_t n_shot, RngStream& rng);
/// All n leave-one-out partitions; every sample is the query exactly once.
std::vector<AuxSplit> aux_partitions(size_t n_shot);

enum class StatKind { u_adv, u_adv_avg, u_adv_prime, odin, iforest };
enum class Direction { flag_if_above, flag_if_below };

const char* stat_name(StatKind k);
StatKind stat_parse(const std::string& s);

struct DetectionScore {
    StatKind kind = StatKind::u_adv;
    double value = 0;
    Direction direction = Direction::flag_if_above;
};

/// BitR separates better with the flipped condition; every other filter
/// flags above the threshold.
Direction filter_direction(FilterKind kind);

/// L1 difference between the auxiliary query's K-way logits before and
/// after filtering the auxiliary support. The context supplies the other
/// K-1 ways (way 0 is the inspected class).
DetectionScore u_adv(const FewShotModel& model, const FilterSpec& filter,
                     const std::vector<std::vector<Tensor>>& context_support,
                     const std::vector<Tensor>& support_set, const AuxSplit& split, RngStream& rng);

DetectionScore u_adv_averaged(const FewShotModel& model, const FilterSpec& filter,
                              const std::vector<std::vector<Tensor>>& context_support,
                              const std::vector<Tensor>& support_set, RngStream& rng);

/// Leave-one-out misclassification fraction after filtering; in [0, 1].
DetectionScore u_adv_prime(const FewShotModel& model, const FilterSpec& filter,
                           const std::vector<std::vector<Tensor>>& context_support,
                           const std::vector<Tensor>& support_set, RngStream& rng);

struct OdinConfig {
    double temperature = 100.0;
    double eps = 0.002;
};

/// Max temperature-scaled softmax of the auxiliary query after the gradient
/// preprocessing step; low values flag outliers.
DetectionScore odin_score(const FewShotModel& model,
                          const std::vector<std::vector<Tensor>>& context_support,
                          const std::vector<Tensor>& support_set, const OdinConfig& cfg, RngStream& rng);

// ---- isolation forest ----

struct IsoNode {
    int feature = -1; // -1 marks a leaf
    float split = 0;
    int left = -1, right = -1;
    int size = 0; // points that reached this node during fitting
};

struct IsoTree {
    std::vector<IsoNode> nodes; // nodes[0] is the root
};

struct IsolationForestModel {
    int n_trees = 0;
    int subsample = 0; // M
    size_t dim = 0;
    std::vector<IsoTree> trees;
};

/// Average unsuccessful-search depth c(n) = 2 H(n-1) - 2 (n-1)/n, exact
/// harmonic number.
double iforest_c(int n);

IsolationForestModel iforest_fit(const std::vector<std::vector<float>>& features, int n_trees, int M,
                                 RngStream& rng);

double iforest_path_length(const IsoTree& tree, std::span<const float> x);
double iforest_expected_height(const IsolationForestModel& model, std::span<const float> x);
/// s(x, M) = 2^(-E(height) / c(M)); scores near 1 are anomalous.
DetectionScore iforest_score(const IsolationForestModel& model, std::span<const float> x);

/// Flattened encoder embedding of one image (feature input for the forest).
std::vector<float> encoder_embedding(const Network& encoder, const Tensor& image);
/// Mean per-sample forest score over a support set's embeddings.
DetectionScore iforest_set_score(const IsolationForestModel& model, const Network& encoder,
                                 const std::vector<Tensor>& support_set);

bool verdict(const DetectionScore& score, double threshold);

} // namespace fssentry
