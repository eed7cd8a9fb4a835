#pragma once

#include <string>
#include <vector>

#include "fssentry/dataset.hpp"
#include "fssentry/fewshot.hpp"
#include "fssentry/rng.hpp"
#include "fssentry/tensor.hpp"

namespace fssentry {

enum class AttackMethod { pgd, cw_sgd };

const char* attack_name(AttackMethod m);
AttackMethod attack_parse(const std::string& s);

struct AttackConfig {
    AttackMethod method = AttackMethod::pgd;
    double eps_inf = 12.0 / 255.0; // l-inf budget (pgd); init scale when > 0 for cw
    double eta = 0.05;             // step size
    int iterations = 75;
    double kappa = 0.1;            // cw margin
    double cw_const = 1.0;         // cw trade-off weight
    int n_attacked = 5;            // leading support slots to perturb
    int k_way = 5;
    int n_shot = 5;
    int n_qt = 8;                  // target queries per redraw
    uint64_t seed = 0;

    void validate() const;
    std::string strength_label() const;
};

/// Per-class perturbation bundle for one attack run. Unattacked slots keep
/// delta exactly zero. `poisoned()` is the support the victim would draw.
struct AdvSupportSet {
    int target_class = -1;
    std::vector<size_t> base_ids;
    std::vector<Tensor> base_support; // clean n_shot images
    std::vector<Tensor> delta;        // n_shot perturbations
    AttackConfig config;
    std::string run_id;
    size_t budget_violations = 0; // pgd in-loop budget/domain check failures

    std::vector<Tensor> poisoned() const;
    double delta_l2() const;
};

AdvSupportSet pgd_support_attack(const FewShotModel& model, const Dataset& ds, int target_class,
                                 const std::vector<size_t>& base_ids, const AttackConfig& cfg,
                                 RngStream& rng);

AdvSupportSet cw_sgd_support_attack(const FewShotModel& model, const Dataset& ds, int target_class,
                                    const std::vector<size_t>& base_ids, const AttackConfig& cfg,
                                    RngStream& rng);

AdvSupportSet run_support_attack(const FewShotModel& model, const Dataset& ds, int target_class,
                                 const std::vector<size_t>& base_ids, const AttackConfig& cfg,
                                 RngStream& rng);

struct AttackBatchResult {
    std::vector<AdvSupportSet> sets;
    std::vector<std::string> failures;
};

/// runs_per_class independent attacks per class (fresh base support and
/// stream each run); per-run errors are recorded and the batch continues.
/// When archive_dir is non-empty every set is persisted under it.
AttackBatchResult attack_batch(const FewShotModel& model, const Dataset& ds, const AttackConfig& cfg,
                               const std::vector<int>& classes, int runs_per_class, RngStream& rng,
                               const std::string& archive_dir = "");

void save_adv_set(const AdvSupportSet& set, const std::string& dir);
AdvSupportSet load_adv_set(const std::string& dir, const Dataset& ds);

} // namespace fssentry
