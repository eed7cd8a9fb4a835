#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fssentry/attacks.hpp"
#include "fssentry/config.hpp"
#include "fssentry/detection.hpp"
#include "fssentry/fewshot.hpp"
#include "fssentry/filters.hpp"

namespace fssentry {

// ---- AUROC ----

/// Rank-based AUROC: P(adversarial scores as more-adversarial than clean)
/// plus half the tie mass, with the flagging direction applied.
double auroc(const std::vector<double>& clean_scores, const std::vector<double>& adv_scores,
             Direction direction);

/// Threshold-sweep trapezoid AUROC; independent route kept for validation.
double auroc_sweep(const std::vector<double>& clean_scores, const std::vector<double>& adv_scores,
                   Direction direction);

// ---- ASR ----

enum class Scenario { fixed_supports, new_supports };

const char* scenario_name(Scenario s);

struct AsrResult {
    double mean = 0; // fraction of target-class queries misclassified
    double sd = 0;   // across episodes
    int episodes = 0;
};

/// Scenario (i) keeps the stored poisoned support fixed; scenario (ii)
/// re-applies the stored deltas to freshly drawn supports. Both redraw the
/// other ways and the queries every episode.
AsrResult asr(const FewShotModel& model, const AdvSupportSet& adv_set, const Dataset& ds,
              Scenario scenario, int n_episodes, RngStream& rng);

// ---- self-similarity ----

/// Leave-one-out auxiliary accuracy of a support set with no filtering.
double self_similarity_accuracy(const FewShotModel& model,
                                const std::vector<std::vector<Tensor>>& context_support,
                                const std::vector<Tensor>& support_set);

struct SelfSimRow {
    std::string population; // clean | pgd | cw_sgd
    std::string strength;
    double mean_accuracy = 0;
    int n_sets = 0;
};

// ---- report ----

struct AurocCell {
    std::string attack;
    std::string strength;
    std::string filter;    // filter name or baseline name
    std::string statistic; // u_adv | u_adv_avg | u_adv_prime | odin | iforest
    double value = 0;
    int n_clean = 0;
    int n_adv = 0;
};

struct AsrRow {
    std::string attack;
    std::string strength;
    std::string scenario;
    double mean = 0;
    double sd = 0; // across sets
    int n_sets = 0;
};

struct ScoreRow {
    std::string set_id;
    int class_id = 0;
    bool is_adversarial = false;
    std::string attack;
    std::string strength;
    std::string filter;
    std::string statistic;
    double value = 0;
};

struct EvalReport {
    std::string config_hash;
    uint64_t master_seed = 0;
    std::string model_name;
    std::string dataset_name;
    double baseline_accuracy = 0;
    double baseline_ci95 = 0;
    double ae_val_rmse = 0;
    double ae_feature_error_standard = 0;
    double ae_feature_error_fpa = 0;
    std::vector<AurocCell> auroc_cells;
    std::vector<AsrRow> asr_rows;
    std::vector<ScoreRow> score_rows;
    std::vector<SelfSimRow> selfsim_rows;
    // single-sample ablation (strong pgd): n_attacked=1 vs full
    std::optional<double> ablation_asr_full, ablation_asr_single;
    std::optional<double> ablation_auroc_full, ablation_auroc_single;
    double wall_seconds = 0;

    const AurocCell* find_auroc(const std::string& attack, const std::string& strength,
                                const std::string& filter, const std::string& statistic) const;
    const AsrRow* find_asr(const std::string& attack, const std::string& strength,
                           const std::string& scenario) const;
};

/// Full pipeline: data -> training -> attack grid -> detection grid ->
/// ASR/self-similarity -> report rows. Stages persist under cfg.out_dir and
/// are reloaded when present, so completed work is never redone.
EvalReport run_experiment(const ExperimentConfig& cfg);

/// auroc.csv, asr.csv, scores.csv, selfsim.csv and summary.txt under dir.
void report_write(const EvalReport& report, const std::string& dir);

// RFC-4180 field quoting
std::string csv_escape(const std::string& field);
std::vector<std::vector<std::string>> csv_parse(const std::string& text);

} // namespace fssentry
