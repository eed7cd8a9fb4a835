#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fssentry/dataset.hpp"
#include "fssentry/graph.hpp"
#include "fssentry/net.hpp"
#include "fssentry/optim.hpp"
#include "fssentry/rng.hpp"
#include "fssentry/tensor.hpp"

namespace fssentry {

enum class HeadKind { prototypical, relation };

const char* head_name(HeadKind h);
HeadKind head_parse(const std::string& s);

/// Metric-based few-shot classifier: shared encoder plus either the
/// prototypical distance head or a small relation head over pooled features.
struct FewShotModel {
    Network encoder;
    HeadKind head = HeadKind::prototypical;
    Network relation_head; // used when head == relation
    int k_way = 5;
    int n_shot = 5;

    std::vector<Tensor*> param_list();
    std::vector<const Tensor*> param_list() const;
};

FewShotModel make_fewshot_model(HeadKind head, RngStream& rng);

/// Mean encoder feature of a class's support samples (identity for N=1).
Tensor class_feature(const Network& encoder, const std::vector<Tensor>& support_of_class);

/// Per-query K-way scores; ways ordered as `support_per_way`. Argmax ties
/// break to the lowest way index.
Tensor episode_logits(const FewShotModel& model, const std::vector<std::vector<Tensor>>& support_per_way,
                      const std::vector<Tensor>& queries);

Tensor proto_logits(const FewShotModel& model, const std::vector<std::vector<Tensor>>& support_per_way,
                    const std::vector<Tensor>& queries);
Tensor relation_logits(const FewShotModel& model, const std::vector<std::vector<Tensor>>& support_per_way,
                       const std::vector<Tensor>& queries);

int argmax_row(const Tensor& logits, size_t row);

/// Logits of query images against precomputed per-way class features
/// (as returned by class_feature), without re-encoding any support.
Tensor query_logits(const FewShotModel& model, const std::vector<Tensor>& way_features,
                    const std::vector<Tensor>& queries);

/// Episode graph on a tape. The image batch is a single leaf laid out as
/// all support rows (way-major) followed by query rows, so attack code can
/// slice per-slot pixel gradients out of `batch`.
struct EpisodeGraph {
    int logits = -1;
    int batch = -1;
    size_t support_rows = 0;
    std::vector<size_t> way_begin; // row ranges per way within the batch
    std::vector<size_t> way_end;
    std::vector<int> encoder_params;
    std::vector<int> head_params;
};

template <typename T>
EpisodeGraph build_episode_graph(Tape<T>& tape, const FewShotModel& model,
                                 const std::vector<std::vector<Tensor>>& support_per_way,
                                 const std::vector<Tensor>& queries);

/// Head logits for a batch variable already on the tape (support rows
/// way-major, then query rows); lets callers compose the batch themselves.
template <typename T>
int episode_logits_on_batch(Tape<T>& tape, const FewShotModel& model, int batch_var,
                            const std::vector<size_t>& way_begin, const std::vector<size_t>& way_end,
                            size_t support_rows, size_t n_queries,
                            std::vector<int>* encoder_params = nullptr,
                            std::vector<int>* head_params = nullptr);

/// Same episode logits but with precomputed (constant) per-way class
/// features and a query batch already on the tape; used where gradients
/// must flow through the query pixels only.
template <typename T>
int query_logits_graph(Tape<T>& tape, const FewShotModel& model, const std::vector<Tensor>& way_features,
                       int query_batch_var);

struct TrainEntry {
    int episode;
    double loss;
    std::optional<double> val_accuracy;
};

struct TrainLog {
    std::vector<TrainEntry> entries;
    double best_val_accuracy = 0;
    int best_episode = -1;
};

struct TrainOptions {
    int k_way = 5;
    int n_shot = 5;
    int n_query = 15;
    int val_every = 100;
    int val_episodes = 60;
};

/// Episodic training with cross-entropy on query logits; keeps the best
/// validation checkpoint. Aborts with the episode index on divergence.
TrainLog train_fewshot(FewShotModel& model, const Dataset& ds, int episodes, OptimizerConfig opt,
                       RngStream& rng, const TrainOptions& topt = {});

struct AccuracyResult {
    double mean = 0;
    double ci95 = 0; // half-width, normal approximation
    int episodes = 0;
};

AccuracyResult eval_accuracy(const FewShotModel& model, const Dataset& ds, Split split, int n_episodes,
                             RngStream& rng, int k_way = 5, int n_shot = 5, int n_query = 15);

void save_model(const FewShotModel& model, const std::string& dir);
FewShotModel load_model(const std::string& dir);

} // namespace fssentry
