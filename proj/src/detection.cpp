#include "fssentry/detection.hpp"

#include <algorithm>
#include <cmath>

#include "fssentry/errors.hpp"

namespace fssentry {

AuxSplit aux_split(size_t n_shot, RngStream& rng) {
    if (n_shot < 2) throw ConfigError("aux_split: n_shot must be >= 2");
    AuxSplit s;
    s.aux_query = rng.uniform_int(n_shot);
    for (size_t i = 0; i < n_shot; ++i)
        if (i != s.aux_query) s.aux_support.push_back(i);
    s.split_index = static_cast<int>(s.aux_query);
    return s;
}

std::vector<AuxSplit> aux_partitions(size_t n_shot) {
    if (n_shot < 2) throw ConfigError("aux_partitions: n_shot must be >= 2");
    std::vector<AuxSplit> out;
    for (size_t q = 0; q < n_shot; ++q) {
        AuxSplit s;
        s.aux_query = q;
        s.split_index = static_cast<int>(q);
        for (size_t i = 0; i < n_shot; ++i)
            if (i != q) s.aux_support.push_back(i);
        out.push_back(std::move(s));
    }
    return out;
}

const char* stat_name(StatKind k) {
    switch (k) {
        case StatKind::u_adv: return "u_adv";
        case StatKind::u_adv_avg: return "u_adv_avg";
        case StatKind::u_adv_prime: return "u_adv_prime";
        case StatKind::odin: return "odin";
        case StatKind::iforest: return "iforest";
    }
    return "?";
}

StatKind stat_parse(const std::string& s) {
    if (s == "u_adv") return StatKind::u_adv;
    if (s == "u_adv_avg") return StatKind::u_adv_avg;
    if (s == "u_adv_prime") return StatKind::u_adv_prime;
    if (s == "odin") return StatKind::odin;
    if (s == "iforest") return StatKind::iforest;
    throw ConfigError("unknown detection statistic: " + s);
}

Direction filter_direction(FilterKind kind) {
    return kind == FilterKind::bitr ? Direction::flag_if_below : Direction::flag_if_above;
}

namespace {

std::vector<Tensor> pick(const std::vector<Tensor>& images, const std::vector<size_t>& idx) {
    std::vector<Tensor> out;
    for (size_t i : idx) out.push_back(images[i]);
    return out;
}

std::vector<Tensor> context_features(const FewShotModel& model,
                                     const std::vector<std::vector<Tensor>>& context) {
    std::vector<Tensor> out;
    for (const auto& ctx : context) out.push_back(class_feature(model.encoder, ctx));
    return out;
}

// K-way logits of the aux query given a way-0 class feature and fixed
// context features
Tensor aux_logits(const FewShotModel& model, Tensor way0_feature, const std::vector<Tensor>& ctx_feats,
                  const Tensor& aux_query) {
    std::vector<Tensor> ways;
    ways.push_back(std::move(way0_feature));
    for (const auto& f : ctx_feats) ways.push_back(f);
    return query_logits(model, ways, {aux_query});
}

} // namespace

DetectionScore u_adv(const FewShotModel& model, const FilterSpec& filter,
                     const std::vector<std::vector<Tensor>>& context_support,
                     const std::vector<Tensor>& support_set, const AuxSplit& split, RngStream& rng) {
    filter.validate();
    std::vector<Tensor> aux = pick(support_set, split.aux_support);
    const Tensor& query = support_set[split.aux_query];
    std::vector<Tensor> ctx_feats = context_features(model, context_support);

    Tensor raw = aux_logits(model, class_feature(model.encoder, aux), ctx_feats, query);
    std::vector<Tensor> filtered = apply_filter(filter, aux, rng);
    Tensor flt = aux_logits(model, class_feature(model.encoder, filtered), ctx_feats, query);

    double l1 = 0;
    for (size_t j = 0; j < raw.numel(); ++j) l1 += std::abs(flt.get(j) - raw.get(j));
    return DetectionScore{StatKind::u_adv, l1, filter_direction(filter.kind)};
}

DetectionScore u_adv_averaged(const FewShotModel& model, const FilterSpec& filter,
                              const std::vector<std::vector<Tensor>>& context_support,
                              const std::vector<Tensor>& support_set, RngStream& rng) {
    auto splits = aux_partitions(support_set.size());
    double acc = 0;
    for (const auto& s : splits) {
        RngStream sr = rng.fork(static_cast<uint64_t>(s.split_index));
        acc += u_adv(model, filter, context_support, support_set, s, sr).value;
    }
    return DetectionScore{StatKind::u_adv_avg, acc / static_cast<double>(splits.size()),
                          filter_direction(filter.kind)};
}

DetectionScore u_adv_prime(const FewShotModel& model, const FilterSpec& filter,
                           const std::vector<std::vector<Tensor>>& context_support,
                           const std::vector<Tensor>& support_set, RngStream& rng) {
    filter.validate();
    auto splits = aux_partitions(support_set.size());
    std::vector<Tensor> ctx_feats = context_features(model, context_support);
    int miss = 0;
    for (const auto& s : splits) {
        RngStream sr = rng.fork(static_cast<uint64_t>(s.split_index));
        std::vector<Tensor> aux = pick(support_set, s.aux_support);
        std::vector<Tensor> filtered = apply_filter(filter, aux, sr);
        Tensor logits = aux_logits(model, class_feature(model.encoder, filtered), ctx_feats,
                                   support_set[s.aux_query]);
        if (argmax_row(logits, 0) != 0) ++miss; // way 0 is the inspected class
    }
    return DetectionScore{StatKind::u_adv_prime,
                          static_cast<double>(miss) / static_cast<double>(splits.size()),
                          Direction::flag_if_above};
}

namespace {

double max_scaled_softmax(const Tensor& logits, double temperature) {
    size_t k = logits.numel();
    double m = -std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < k; ++j) m = std::max(m, logits.get(j) / temperature);
    double denom = 0;
    for (size_t j = 0; j < k; ++j) denom += std::exp(logits.get(j) / temperature - m);
    double best = 0;
    for (size_t j = 0; j < k; ++j)
        best = std::max(best, std::exp(logits.get(j) / temperature - m) / denom);
    return best;
}

} // namespace

DetectionScore odin_score(const FewShotModel& model,
                          const std::vector<std::vector<Tensor>>& context_support,
                          const std::vector<Tensor>& support_set, const OdinConfig& cfg,
                          RngStream& rng) {
    if (cfg.temperature <= 0) throw ConfigError("odin: temperature must be positive");
    AuxSplit split = aux_split(support_set.size(), rng);
    std::vector<Tensor> aux = pick(support_set, split.aux_support);
    const Tensor& query = support_set[split.aux_query];

    std::vector<Tensor> way_feats;
    way_feats.push_back(class_feature(model.encoder, aux));
    for (const auto& ctx : context_support) way_feats.push_back(class_feature(model.encoder, ctx));

    Tensor raw = query_logits(model, way_feats, {query});
    int yhat = argmax_row(raw, 0);

    // one descent step on -log softmax_yhat(x, T) wrt the query pixels
    Tape<float> tape;
    Tensor qbatch = Tensor::zeros({1, kImageC, kImageH, kImageW});
    {
        auto qb = qbatch.f32();
        auto qp = query.f32();
        std::copy(qp.begin(), qp.end(), qb.begin());
    }
    auto qvar = tape.leaf(qbatch);
    auto logits = query_logits_graph(tape, model, way_feats, qvar);
    auto scaled = tape.scale(logits, 1.0 / cfg.temperature);
    auto loss = tape.softmax_xent(scaled, {yhat});
    tape.backward(loss);
    const auto& g = tape.grad(qvar);

    Tensor tilde = query;
    auto tp = tilde.f32();
    for (size_t j = 0; j < tp.size(); ++j) {
        float s = g[j] > 0.f ? 1.f : (g[j] < 0.f ? -1.f : 0.f);
        tp[j] -= static_cast<float>(cfg.eps) * s;
    }

    Tensor after = query_logits(model, way_feats, {tilde});
    double value = max_scaled_softmax(after, cfg.temperature);
    return DetectionScore{StatKind::odin, value, Direction::flag_if_below};
}

// ---- isolation forest ----

double iforest_c(int n) {
    if (n <= 1) return 0.0;
    if (n == 2) return 1.0;
    double harmonic = 0;
    for (int i = 1; i <= n - 1; ++i) harmonic += 1.0 / static_cast<double>(i);
    return 2.0 * harmonic - 2.0 * static_cast<double>(n - 1) / static_cast<double>(n);
}

namespace {

int build_iso_node(IsoTree& tree, const std::vector<std::vector<float>>& feats,
                   std::vector<size_t>& idx, int depth, int height_limit, size_t dim, RngStream& rng) {
    int node_id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back(IsoNode{});
    tree.nodes[node_id].size = static_cast<int>(idx.size());
    if (idx.size() <= 1 || depth >= height_limit) return node_id;

    size_t q = rng.uniform_int(dim);
    float lo = feats[idx[0]][q], hi = lo;
    for (size_t i : idx) {
        lo = std::min(lo, feats[i][q]);
        hi = std::max(hi, feats[i][q]);
    }
    if (lo == hi) return node_id; // constant feature, no split possible

    float split = static_cast<float>(rng.uniform(lo, hi));
    std::vector<size_t> left, right;
    for (size_t i : idx)
        (feats[i][q] < split ? left : right).push_back(i);
    if (left.empty() || right.empty()) return node_id;

    tree.nodes[node_id].feature = static_cast<int>(q);
    tree.nodes[node_id].split = split;
    int l = build_iso_node(tree, feats, left, depth + 1, height_limit, dim, rng);
    tree.nodes[node_id].left = l;
    int r = build_iso_node(tree, feats, right, depth + 1, height_limit, dim, rng);
    tree.nodes[node_id].right = r;
    return node_id;
}

} // namespace

IsolationForestModel iforest_fit(const std::vector<std::vector<float>>& features, int n_trees, int M,
                                 RngStream& rng) {
    if (M < 2) throw ConfigError("iforest_fit: subsample size M must be >= 2");
    if (features.empty()) throw ConfigError("iforest_fit: empty feature set");
    size_t m = std::min(static_cast<size_t>(M), features.size());
    IsolationForestModel model;
    model.n_trees = n_trees;
    model.subsample = static_cast<int>(m);
    model.dim = features[0].size();
    int height_limit = static_cast<int>(std::ceil(std::log2(static_cast<double>(m))));

    for (int t = 0; t < n_trees; ++t) {
        RngStream tr = rng.fork(static_cast<uint64_t>(t));
        auto idx = tr.sample_without_replacement(features.size(), m);
        IsoTree tree;
        build_iso_node(tree, features, idx, 0, height_limit, model.dim, tr);
        model.trees.push_back(std::move(tree));
    }
    return model;
}

double iforest_path_length(const IsoTree& tree, std::span<const float> x) {
    int node = 0;
    int depth = 0;
    while (tree.nodes[node].feature >= 0) {
        const IsoNode& n = tree.nodes[node];
        node = x[static_cast<size_t>(n.feature)] < n.split ? n.left : n.right;
        ++depth;
    }
    // truncated leaves extend by the average unsuccessful-search depth
    return static_cast<double>(depth) + iforest_c(tree.nodes[node].size);
}

double iforest_expected_height(const IsolationForestModel& model, std::span<const float> x) {
    double acc = 0;
    for (const auto& tree : model.trees) acc += iforest_path_length(tree, x);
    return acc / static_cast<double>(model.trees.size());
}

DetectionScore iforest_score(const IsolationForestModel& model, std::span<const float> x) {
    double e = iforest_expected_height(model, x);
    double value = std::pow(2.0, -e / iforest_c(model.subsample));
    return DetectionScore{StatKind::iforest, value, Direction::flag_if_above};
}

std::vector<float> encoder_embedding(const Network& encoder, const Tensor& image) {
    Tensor batch = Tensor::zeros({1, kImageC, kImageH, kImageW});
    auto bp = batch.f32();
    auto ip = image.f32();
    std::copy(ip.begin(), ip.end(), bp.begin());
    Tensor f = encoder.forward(batch);
    auto fp = f.f32();
    return std::vector<float>(fp.begin(), fp.end());
}

DetectionScore iforest_set_score(const IsolationForestModel& model, const Network& encoder,
                                 const std::vector<Tensor>& support_set) {
    double acc = 0;
    for (const auto& img : support_set) {
        auto emb = encoder_embedding(encoder, img);
        acc += iforest_score(model, emb).value;
    }
    return DetectionScore{StatKind::iforest, acc / static_cast<double>(support_set.size()),
                          Direction::flag_if_above};
}

bool verdict(const DetectionScore& score, double threshold) {
    return score.direction == Direction::flag_if_above ? score.value > threshold
                                                       : score.value < threshold;
}

} // namespace fssentry
