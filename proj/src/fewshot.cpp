#include "fssentry/fewshot.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "fssentry/errors.hpp"

namespace fssentry {

const char* head_name(HeadKind h) { return h == HeadKind::prototypical ? "prototypical" : "relation"; }

HeadKind head_parse(const std::string& s) {
    if (s == "prototypical" || s == "proto") return HeadKind::prototypical;
    if (s == "relation") return HeadKind::relation;
    throw ConfigError("unknown head kind: " + s);
}

std::vector<Tensor*> FewShotModel::param_list() {
    std::vector<Tensor*> out = encoder.param_list();
    if (head == HeadKind::relation) {
        auto hp = relation_head.param_list();
        out.insert(out.end(), hp.begin(), hp.end());
    }
    return out;
}

std::vector<const Tensor*> FewShotModel::param_list() const {
    std::vector<const Tensor*> out = encoder.param_list();
    if (head == HeadKind::relation) {
        auto hp = relation_head.param_list();
        out.insert(out.end(), hp.begin(), hp.end());
    }
    return out;
}

FewShotModel make_fewshot_model(HeadKind head, RngStream& rng) {
    FewShotModel m;
    m.encoder = make_desk_encoder(rng);
    m.head = head;
    if (head == HeadKind::relation) m.relation_head = make_relation_head(64, 64, rng);
    return m;
}

namespace {

Tensor stack_images(const std::vector<Tensor>& images) {
    if (images.empty()) throw ShapeError("stack_images: empty batch");
    const auto& s0 = images[0].shape();
    Tensor out = Tensor::zeros({images.size(), s0[0], s0[1], s0[2]});
    auto dst = out.f32();
    size_t per = images[0].numel();
    for (size_t i = 0; i < images.size(); ++i) {
        if (images[i].shape() != s0) throw ShapeError("stack_images: inconsistent image shapes");
        auto src = images[i].f32();
        std::copy(src.begin(), src.end(), dst.begin() + i * per);
    }
    return out;
}

} // namespace

Tensor class_feature(const Network& encoder, const std::vector<Tensor>& support_of_class) {
    if (support_of_class.empty()) throw ShapeError("class_feature: empty support");
    Tensor feats = encoder.forward(stack_images(support_of_class));
    const auto& fs = feats.shape(); // N x C x H x W
    size_t n = fs[0], per = feats.numel() / n;
    Tensor mean = Tensor::zeros({fs[1], fs[2], fs[3]});
    auto m = mean.f32();
    auto f = feats.f32();
    for (size_t i = 0; i < n; ++i)
        for (size_t d = 0; d < per; ++d) m[d] += f[i * per + d];
    for (auto& v : m) v /= static_cast<float>(n);
    return mean;
}

namespace {

Tensor proto_logits_from(const FewShotModel& model, const std::vector<Tensor>& way_feats,
                         const Tensor& query_feats) {
    size_t k = way_feats.size();
    size_t nq = query_feats.shape()[0];
    size_t d = query_feats.numel() / nq;
    Tensor logits = Tensor::zeros({nq, k});
    auto lv = logits.f32();
    auto qf = query_feats.f32();
    for (size_t i = 0; i < nq; ++i) {
        for (size_t j = 0; j < k; ++j) {
            auto pf = way_feats[j].f32();
            float acc = 0;
            for (size_t dd = 0; dd < d; ++dd) {
                float diff = qf[i * d + dd] - pf[dd];
                acc += diff * diff;
            }
            lv[i * k + j] = -acc;
        }
    }
    return logits;
}

Tensor pool_spatial(const Tensor& featmap) { // C x H x W -> C
    const auto& s = featmap.shape();
    size_t c = s[0], hw = s[1] * s[2];
    Tensor out = Tensor::zeros({c});
    auto o = out.f32();
    auto f = featmap.f32();
    for (size_t ci = 0; ci < c; ++ci) {
        float acc = 0;
        for (size_t i = 0; i < hw; ++i) acc += f[ci * hw + i];
        o[ci] = acc / static_cast<float>(hw);
    }
    return out;
}

Tensor relation_logits_from(const FewShotModel& model, const std::vector<Tensor>& way_feats,
                            const Tensor& query_feats) {
    size_t k = way_feats.size();
    size_t nq = query_feats.shape()[0];
    const auto& qs = query_feats.shape(); // nq x C x H x W
    size_t c = qs[1], hw = qs[2] * qs[3];

    std::vector<Tensor> way_pooled;
    for (const auto& wf : way_feats) way_pooled.push_back(pool_spatial(wf));

    Tensor pairs = Tensor::zeros({nq * k, 2 * c});
    auto pv = pairs.f32();
    auto qf = query_feats.f32();
    for (size_t i = 0; i < nq; ++i) {
        for (size_t ci = 0; ci < c; ++ci) {
            float acc = 0;
            for (size_t s = 0; s < hw; ++s) acc += qf[(i * c + ci) * hw + s];
            float qp = acc / static_cast<float>(hw);
            for (size_t j = 0; j < k; ++j) pv[(i * k + j) * 2 * c + ci] = qp;
        }
        for (size_t j = 0; j < k; ++j) {
            auto wp = way_pooled[j].f32();
            for (size_t ci = 0; ci < c; ++ci) pv[(i * k + j) * 2 * c + c + ci] = wp[ci];
        }
    }
    Tensor scores = model.relation_head.forward(pairs); // (nq*k) x 1
    Tensor logits = Tensor::zeros({nq, k});
    auto lv = logits.f32();
    auto sv = scores.f32();
    for (size_t i = 0; i < nq * k; ++i) lv[i] = sv[i];
    return logits;
}

} // namespace

Tensor episode_logits(const FewShotModel& model, const std::vector<std::vector<Tensor>>& support_per_way,
                      const std::vector<Tensor>& queries) {
    if (support_per_way.empty() || queries.empty())
        throw ShapeError("episode_logits: empty support or query set");
    std::vector<Tensor> way_feats;
    for (const auto& sup : support_per_way) way_feats.push_back(class_feature(model.encoder, sup));
    Tensor qf = model.encoder.forward(stack_images(queries));
    if (model.head == HeadKind::prototypical) {
        size_t nq = queries.size();
        Tensor flat = Tensor::from_f32({nq, qf.numel() / nq}, std::vector<float>(qf.f32().begin(), qf.f32().end()));
        return proto_logits_from(model, way_feats, flat);
    }
    return relation_logits_from(model, way_feats, qf);
}

Tensor proto_logits(const FewShotModel& model, const std::vector<std::vector<Tensor>>& support_per_way,
                    const std::vector<Tensor>& queries) {
    if (model.head != HeadKind::prototypical) throw ConfigError("proto_logits: model head is not prototypical");
    return episode_logits(model, support_per_way, queries);
}

Tensor relation_logits(const FewShotModel& model, const std::vector<std::vector<Tensor>>& support_per_way,
                       const std::vector<Tensor>& queries) {
    if (model.head != HeadKind::relation) throw ConfigError("relation_logits: model head is not relation");
    return episode_logits(model, support_per_way, queries);
}

Tensor query_logits(const FewShotModel& model, const std::vector<Tensor>& way_features,
                    const std::vector<Tensor>& queries) {
    Tensor qf = model.encoder.forward(stack_images(queries));
    if (model.head == HeadKind::prototypical) {
        size_t nq = queries.size();
        Tensor flat = Tensor::from_f32({nq, qf.numel() / nq},
                                       std::vector<float>(qf.f32().begin(), qf.f32().end()));
        return proto_logits_from(model, way_features, flat);
    }
    return relation_logits_from(model, way_features, qf);
}

int argmax_row(const Tensor& logits, size_t row) {
    const auto& s = logits.shape();
    size_t k = s[1];
    auto lv = logits.f32();
    int best = 0;
    float bv = lv[row * k];
    for (size_t j = 1; j < k; ++j) {
        if (lv[row * k + j] > bv) {
            bv = lv[row * k + j];
            best = static_cast<int>(j);
        }
    }
    return best;
}

template <typename T>
int episode_logits_on_batch(Tape<T>& tape, const FewShotModel& model, int batch_var,
                            const std::vector<size_t>& way_begin, const std::vector<size_t>& way_end,
                            size_t support_rows, size_t n_queries, std::vector<int>* encoder_params,
                            std::vector<int>* head_params) {
    auto feats = net_forward(tape, model.encoder, batch_var, encoder_params);
    size_t n = tape.shape(feats)[0];
    size_t k = way_begin.size();

    if (model.head == HeadKind::prototypical) {
        auto flat = tape.reshape(feats, {n, tape.numel(feats) / n});
        std::vector<int> protos;
        for (size_t w = 0; w < k; ++w)
            protos.push_back(tape.mean0(tape.slice_rows(flat, way_begin[w], way_end[w])));
        auto proto_mat = tape.concat0(protos);
        auto qrows = tape.slice_rows(flat, support_rows, support_rows + n_queries);
        return tape.pairwise_neg_sqdist(qrows, proto_mat);
    }
    auto pooled = tape.gap(feats); // n x C
    std::vector<int> ways;
    for (size_t w = 0; w < k; ++w)
        ways.push_back(tape.mean0(tape.slice_rows(pooled, way_begin[w], way_end[w])));
    auto way_mat = tape.concat0(ways);
    auto qrows = tape.slice_rows(pooled, support_rows, support_rows + n_queries);
    auto pairs = tape.pair_concat(qrows, way_mat);
    auto scores = net_forward(tape, model.relation_head, pairs, head_params);
    return tape.reshape(scores, {n_queries, k});
}

template int episode_logits_on_batch<float>(Tape<float>&, const FewShotModel&, int,
                                            const std::vector<size_t>&, const std::vector<size_t>&,
                                            size_t, size_t, std::vector<int>*, std::vector<int>*);
template int episode_logits_on_batch<double>(Tape<double>&, const FewShotModel&, int,
                                             const std::vector<size_t>&, const std::vector<size_t>&,
                                             size_t, size_t, std::vector<int>*, std::vector<int>*);

template <typename T>
EpisodeGraph build_episode_graph(Tape<T>& tape, const FewShotModel& model,
                                 const std::vector<std::vector<Tensor>>& support_per_way,
                                 const std::vector<Tensor>& queries) {
    EpisodeGraph g;
    std::vector<Tensor> all;
    for (const auto& sup : support_per_way) {
        g.way_begin.push_back(all.size());
        for (const auto& img : sup) all.push_back(img);
        g.way_end.push_back(all.size());
    }
    g.support_rows = all.size();
    for (const auto& q : queries) all.push_back(q);

    g.batch = tape.leaf(stack_images(all));
    g.logits = episode_logits_on_batch(tape, model, g.batch, g.way_begin, g.way_end, g.support_rows,
                                       queries.size(), &g.encoder_params, &g.head_params);
    return g;
}

template EpisodeGraph build_episode_graph<float>(Tape<float>&, const FewShotModel&,
                                                 const std::vector<std::vector<Tensor>>&,
                                                 const std::vector<Tensor>&);
template EpisodeGraph build_episode_graph<double>(Tape<double>&, const FewShotModel&,
                                                  const std::vector<std::vector<Tensor>>&,
                                                  const std::vector<Tensor>&);

template <typename T>
int query_logits_graph(Tape<T>& tape, const FewShotModel& model, const std::vector<Tensor>& way_features,
                       int query_batch_var) {
    auto feats = net_forward(tape, model.encoder, query_batch_var);
    size_t nq = tape.shape(feats)[0];
    size_t k = way_features.size();

    if (model.head == HeadKind::prototypical) {
        std::vector<int> protos;
        for (const auto& wf : way_features) {
            auto v = tape.leaf(wf);
            protos.push_back(tape.reshape(v, {1, wf.numel()}));
        }
        auto proto_mat = tape.concat0(protos);
        auto flat = tape.reshape(feats, {nq, tape.numel(feats) / nq});
        return tape.pairwise_neg_sqdist(flat, proto_mat);
    }
    std::vector<int> ways;
    for (const auto& wf : way_features) {
        Tensor pooled = pool_spatial(wf);
        auto v = tape.leaf(pooled);
        ways.push_back(tape.reshape(v, {1, pooled.numel()}));
    }
    auto way_mat = tape.concat0(ways);
    auto qp = tape.gap(feats);
    auto pairs = tape.pair_concat(qp, way_mat);
    auto scores = net_forward(tape, model.relation_head, pairs);
    return tape.reshape(scores, {nq, k});
}

template int query_logits_graph<float>(Tape<float>&, const FewShotModel&, const std::vector<Tensor>&, int);
template int query_logits_graph<double>(Tape<double>&, const FewShotModel&, const std::vector<Tensor>&, int);

namespace {

std::vector<Tensor> snapshot_params(const FewShotModel& model) {
    std::vector<Tensor> out;
    for (const Tensor* p : model.param_list()) out.push_back(*p);
    return out;
}

void restore_params(FewShotModel& model, const std::vector<Tensor>& snap) {
    auto ps = model.param_list();
    for (size_t i = 0; i < ps.size(); ++i) *ps[i] = snap[i];
}

} // namespace

TrainLog train_fewshot(FewShotModel& model, const Dataset& ds, int episodes, OptimizerConfig opt,
                       RngStream& rng, const TrainOptions& topt) {
    TrainLog log;
    OptimizerState state(opt);
    RngStream val_rng = rng.fork(0xE7A1ull);
    std::vector<Tensor> best = snapshot_params(model);
    log.best_val_accuracy = -1;

    for (int e = 0; e < episodes; ++e) {
        Episode ep = sample_episode(ds, Split::train, topt.k_way, topt.n_shot, topt.n_query, rng);
        Tape<float> tape;
        EpisodeGraph g = build_episode_graph(tape, model, ep.support, ep.query);
        auto loss = tape.softmax_xent(g.logits, ep.query_way);
        double lv = tape.val(loss)[0];
        if (!std::isfinite(lv))
            throw NumericError("train_fewshot: non-finite loss at episode " + std::to_string(e));
        tape.backward(loss);

        std::vector<Tensor> grads;
        for (int pv : g.encoder_params) grads.push_back(tape.grad_tensor(pv));
        for (int pv : g.head_params) grads.push_back(tape.grad_tensor(pv));
        state.step(model.param_list(), grads);

        TrainEntry entry{e, lv, std::nullopt};
        if (topt.val_every > 0 && ((e + 1) % topt.val_every == 0 || e + 1 == episodes)) {
            RngStream er = val_rng.fork(static_cast<uint64_t>(e));
            auto acc = eval_accuracy(model, ds, Split::val, topt.val_episodes, er, topt.k_way,
                                     topt.n_shot, topt.n_query);
            entry.val_accuracy = acc.mean;
            if (acc.mean > log.best_val_accuracy) {
                log.best_val_accuracy = acc.mean;
                log.best_episode = e;
                best = snapshot_params(model);
            }
        }
        log.entries.push_back(entry);
    }
    if (log.best_episode >= 0) restore_params(model, best);
    return log;
}

AccuracyResult eval_accuracy(const FewShotModel& model, const Dataset& ds, Split split, int n_episodes,
                             RngStream& rng, int k_way, int n_shot, int n_query) {
    std::vector<double> accs;
    accs.reserve(n_episodes);
    for (int e = 0; e < n_episodes; ++e) {
        Episode ep = sample_episode(ds, split, k_way, n_shot, n_query, rng);
        Tensor logits = episode_logits(model, ep.support, ep.query);
        int correct = 0;
        for (size_t q = 0; q < ep.query.size(); ++q)
            if (argmax_row(logits, q) == ep.query_way[q]) ++correct;
        accs.push_back(static_cast<double>(correct) / static_cast<double>(ep.query.size()));
    }
    AccuracyResult res;
    res.episodes = n_episodes;
    double mean = 0;
    for (double a : accs) mean += a;
    mean /= accs.empty() ? 1 : accs.size();
    res.mean = mean;
    if (accs.size() > 1) {
        double var = 0;
        for (double a : accs) var += (a - mean) * (a - mean);
        var /= static_cast<double>(accs.size() - 1);
        res.ci95 = 1.96 * std::sqrt(var / static_cast<double>(accs.size()));
    }
    return res;
}

void save_model(const FewShotModel& model, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream mf(dir + "/model.txt");
    if (!mf) throw IoError("cannot write model manifest in " + dir);
    mf << "head " << head_name(model.head) << "\n";
    mf << "k_way " << model.k_way << "\n";
    mf << "n_shot " << model.n_shot << "\n";
    save_network(model.encoder, dir, "encoder");
    if (model.head == HeadKind::relation) save_network(model.relation_head, dir, "head");
}

FewShotModel load_model(const std::string& dir) {
    std::ifstream mf(dir + "/model.txt");
    if (!mf) throw IoError("cannot read model manifest " + dir + "/model.txt");
    FewShotModel m;
    std::string key;
    while (mf >> key) {
        if (key == "head") {
            std::string v;
            mf >> v;
            m.head = head_parse(v);
        } else if (key == "k_way") {
            mf >> m.k_way;
        } else if (key == "n_shot") {
            mf >> m.n_shot;
        }
    }
    m.encoder = load_network(dir, "encoder");
    if (m.head == HeadKind::relation) m.relation_head = load_network(dir, "head");
    return m;
}

} // namespace fssentry
