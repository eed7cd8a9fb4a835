#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fssentry/detection.hpp"
#include "fssentry/filters.hpp"

namespace fssentry {

/// Minimal TOML reader covering what experiment configs use: [sections],
/// key = value with strings, numbers, booleans and flat arrays, # comments.
struct TomlValue {
    enum class Kind { string, number, boolean, array };
    Kind kind = Kind::string;
    std::string str;
    double num = 0;
    bool boolean = false;
    std::vector<TomlValue> items;
};

class TomlTable {
public:
    // sections[""] holds root-level keys
    std::map<std::string, std::map<std::string, TomlValue>> sections;

    bool has(const std::string& section, const std::string& key) const;
    const TomlValue& at(const std::string& section, const std::string& key) const;
};

TomlTable toml_parse(const std::string& text);
TomlTable toml_parse_file(const std::string& path);
TomlValue toml_scalar_parse(const std::string& token);

/// Accepts "12/255" style fractions as well as plain decimals.
double parse_fraction(const std::string& s);

struct ExperimentConfig {
    uint64_t master_seed = 42;
    int threads = 0; // 0 = hardware concurrency
    std::string out_dir = "out";

    // dataset
    int n_classes = 24;
    int per_class = 40;
    std::array<double, 3> ratios{14.0 / 24, 4.0 / 24, 6.0 / 24};
    std::string data_dir; // non-empty: load instead of generating

    // few-shot model
    std::string head = "prototypical";
    int k_way = 5;
    int n_shot = 5;
    int n_query = 15;
    int episodes = 1500;
    double lr = 1e-3;
    double weight_decay = 0;
    int val_every = 100;
    int val_episodes = 50;

    // autoencoder
    int ae_epochs = 20;
    double ae_lr = 1e-4;
    double ae_weight_decay = 1e-4;
    int ae_decay_step = 10;
    double ae_gamma = 0.1;
    int ae_batch = 32;
    int fpa_epochs = 10;
    bool train_fpa_prime_ae = true;
    int fpa_prime_epochs = 8;

    // attack grid
    std::vector<std::string> methods{"pgd", "cw_sgd"};
    std::vector<double> pgd_eps{3.0 / 255, 6.0 / 255, 12.0 / 255};
    double pgd_eta = 0.05;
    int pgd_iters = 75;
    std::vector<double> cw_kappa{0.0, 0.0, 0.1};
    std::vector<double> cw_eta{25.0, 50.0, 50.0};
    int cw_iters = 150;
    double cw_const = 1.0;
    int n_attacked = 5;
    int n_qt = 8;
    int seeds = 5;
    int sets_per_seed = 6;
    std::string classes = "all"; // or comma-separated ids

    // filters & detection
    std::vector<std::string> filters{"noise", "feats", "bitr", "tvm", "fpa", "fpa_prime"};
    int bitr_r = 6;
    TvmParams tvm;
    std::vector<std::string> statistics{"u_adv", "u_adv_prime"};
    bool averaged_u_adv = false;
    OdinConfig odin;
    int iforest_subsample = 256;
    std::vector<int> iforest_tree_grid{4, 16, 64, 256, 1000};
    double baseline_val_fraction = 0.1; // share of sets used to tune iforest

    // evaluation
    int asr_episodes = 30;
    int eval_episodes = 300;
    bool ablation_single_sample = true;

    void apply_toml(const TomlTable& t);
    /// "section.key=value" override (CLI flags funnel through this).
    void apply_override(const std::string& dotted_key, const std::string& value);
    /// Canonical text dump; stable across runs, used for hashing.
    std::string canonical() const;
    std::string hash() const; // FNV-1a 64-bit hex of canonical()
    void validate() const;
};

/// defaults -> optional TOML file -> overrides -> FSSENTRY_SEED env var.
ExperimentConfig load_experiment_config(const std::string& toml_path,
                                        const std::vector<std::string>& overrides);

uint64_t fnv1a64(const std::string& data);

} // namespace fssentry
