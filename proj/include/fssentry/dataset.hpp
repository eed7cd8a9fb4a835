#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "fssentry/rng.hpp"
#include "fssentry/tensor.hpp"

namespace fssentry {

inline constexpr size_t kImageC = 3;
inline constexpr size_t kImageH = 16;
inline constexpr size_t kImageW = 16;

enum class Split { train, val, test };

const char* split_name(Split s);
Split split_parse(const std::string& s);

/// Labeled image pool with a class-disjoint train/val/test partition.
/// Images are 3x16x16 float32 in [0, 1].
struct Dataset {
    std::map<int, std::vector<Tensor>> classes;
    std::map<int, Split> split;
    std::string generator_desc;

    std::vector<int> classes_of(Split s) const;
    const Tensor& image(int class_id, size_t index) const;
};

/// One K-way N-shot task. Support/query samples within an episode are
/// distinct draws from the same classes.
struct Episode {
    std::vector<int> way_classes;                 // K class ids
    std::vector<std::vector<Tensor>> support;     // K x N
    std::vector<std::vector<size_t>> support_ids; // source indices per way
    std::vector<Tensor> query;
    std::vector<int> query_way;                   // way index per query
    std::vector<size_t> query_ids;
    int k_way = 0;
    int n_shot = 0;
};

/// Attack-time episode: the target support stays fixed while everything
/// else is redrawn each optimisation step.
struct AttackEpisode {
    int target_class = -1;
    std::vector<int> other_classes;                    // K-1 ids, never contains target
    std::vector<std::vector<Tensor>> other_support;    // (K-1) x N
    std::vector<std::vector<size_t>> other_support_ids;
    std::vector<Tensor> other_query;                   // one per non-target class
    std::vector<size_t> other_query_ids;
    std::vector<Tensor> target_queries;                // n_qt samples of the target class
    std::vector<size_t> target_query_ids;
};

/// Procedural striped-texture dataset. Every class is a distinct
/// (hue, stripe orientation in {0,45,90,135} deg, stripe frequency in {2,3,4})
/// tuple; samples add sigma=0.05 Gaussian pixel noise and a +-2 pixel
/// translation, all deterministic in the seed.
Dataset synth_generate(int n_classes, int per_class, uint64_t seed);

/// Disjoint class partition with largest-remainder rounding; ratios must sum to 1.
void split_classes(Dataset& ds, const std::array<double, 3>& ratios, uint64_t seed);

Episode sample_episode(const Dataset& ds, Split split, int k_way, int n_shot, int n_query,
                       RngStream& rng);

AttackEpisode sample_attack_episode(const Dataset& ds, int target_class,
                                    const std::vector<size_t>& fixed_support_ids, int k_way,
                                    int n_shot, int n_qt, RngStream& rng);

/// On-disk layout: one FSTN tensor per sample plus manifest.txt with one
/// "class_id,split,relative-path" line per sample ('#' lines are metadata).
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

} // namespace fssentry
