#include "fssentry/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "fssentry/errors.hpp"
#include "fssentry/parallel.hpp"

namespace fssentry {

// ---- AUROC ----

namespace {

// orient so that larger means "more adversarial"
std::vector<double> orient(const std::vector<double>& scores, Direction dir) {
    std::vector<double> out = scores;
    if (dir == Direction::flag_if_below)
        for (auto& v : out) v = -v;
    return out;
}

} // namespace

double auroc(const std::vector<double>& clean_scores, const std::vector<double>& adv_scores,
             Direction direction) {
    if (clean_scores.empty() || adv_scores.empty())
        throw ConfigError("auroc: both score lists must be non-empty");
    auto clean = orient(clean_scores, direction);
    auto adv = orient(adv_scores, direction);

    struct Item {
        double v;
        bool is_adv;
    };
    std::vector<Item> all;
    for (double v : clean) all.push_back({v, false});
    for (double v : adv) all.push_back({v, true});
    std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.v < b.v; });

    // average ranks over tie blocks
    double rank_sum_adv = 0;
    size_t i = 0;
    while (i < all.size()) {
        size_t j = i;
        while (j < all.size() && all[j].v == all[i].v) ++j;
        double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j)); // 1-based
        for (size_t k = i; k < j; ++k)
            if (all[k].is_adv) rank_sum_adv += avg_rank;
        i = j;
    }
    double na = static_cast<double>(adv.size());
    double nc = static_cast<double>(clean.size());
    double u = rank_sum_adv - na * (na + 1) / 2.0;
    return u / (na * nc);
}

double auroc_sweep(const std::vector<double>& clean_scores, const std::vector<double>& adv_scores,
                   Direction direction) {
    if (clean_scores.empty() || adv_scores.empty())
        throw ConfigError("auroc_sweep: both score lists must be non-empty");
    auto clean = orient(clean_scores, direction);
    auto adv = orient(adv_scores, direction);

    std::vector<double> thresholds;
    thresholds.insert(thresholds.end(), clean.begin(), clean.end());
    thresholds.insert(thresholds.end(), adv.begin(), adv.end());
    std::sort(thresholds.begin(), thresholds.end(), std::greater<double>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

    std::sort(clean.begin(), clean.end(), std::greater<double>());
    std::sort(adv.begin(), adv.end(), std::greater<double>());

    double area = 0;
    double prev_fpr = 0, prev_tpr = 0;
    size_t ci = 0, ai = 0;
    for (double t : thresholds) {
        while (ai < adv.size() && adv[ai] >= t) ++ai;
        while (ci < clean.size() && clean[ci] >= t) ++ci;
        double tpr = static_cast<double>(ai) / static_cast<double>(adv.size());
        double fpr = static_cast<double>(ci) / static_cast<double>(clean.size());
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    area += (1.0 - prev_fpr) * (1.0 + prev_tpr) / 2.0;
    return area;
}

// ---- ASR ----

const char* scenario_name(Scenario s) {
    return s == Scenario::fixed_supports ? "fixed_supports" : "new_supports";
}

AsrResult asr(const FewShotModel& model, const AdvSupportSet& adv_set, const Dataset& ds,
              Scenario scenario, int n_episodes, RngStream& rng) {
    const AttackConfig& acfg = adv_set.config;
    int t = adv_set.target_class;
    std::vector<Tensor> fixed_poisoned = adv_set.poisoned();

    std::vector<double> per_episode;
    per_episode.reserve(n_episodes);
    for (int e = 0; e < n_episodes; ++e) {
        std::vector<Tensor> support0;
        std::vector<size_t> excluded;
        if (scenario == Scenario::fixed_supports) {
            support0 = fixed_poisoned;
            excluded = adv_set.base_ids;
        } else {
            const auto& imgs = ds.classes.at(t);
            auto ids = rng.sample_without_replacement(imgs.size(), adv_set.base_support.size());
            for (size_t i = 0; i < ids.size(); ++i) {
                Tensor img = imgs[ids[i]];
                auto px = img.f32();
                auto dv = adv_set.delta[i].f32();
                for (size_t j = 0; j < px.size(); ++j) px[j] = std::clamp(px[j] + dv[j], 0.f, 1.f);
                support0.push_back(std::move(img));
            }
            excluded = ids;
        }
        AttackEpisode ae = sample_attack_episode(ds, t, excluded, acfg.k_way,
                                                 static_cast<int>(support0.size()), acfg.n_qt, rng);
        std::vector<std::vector<Tensor>> support;
        support.push_back(std::move(support0));
        for (auto& s : ae.other_support) support.push_back(std::move(s));
        Tensor logits = episode_logits(model, support, ae.target_queries);
        int miss = 0;
        for (size_t q = 0; q < ae.target_queries.size(); ++q)
            if (argmax_row(logits, q) != 0) ++miss;
        per_episode.push_back(static_cast<double>(miss) / static_cast<double>(ae.target_queries.size()));
    }

    AsrResult res;
    res.episodes = n_episodes;
    for (double v : per_episode) res.mean += v;
    res.mean /= per_episode.empty() ? 1 : per_episode.size();
    if (per_episode.size() > 1) {
        double var = 0;
        for (double v : per_episode) var += (v - res.mean) * (v - res.mean);
        res.sd = std::sqrt(var / static_cast<double>(per_episode.size() - 1));
    }
    return res;
}

// ---- self-similarity ----

double self_similarity_accuracy(const FewShotModel& model,
                                const std::vector<std::vector<Tensor>>& context_support,
                                const std::vector<Tensor>& support_set) {
    auto splits = aux_partitions(support_set.size());
    std::vector<Tensor> ctx_feats;
    for (const auto& ctx : context_support) ctx_feats.push_back(class_feature(model.encoder, ctx));
    int correct = 0;
    for (const auto& s : splits) {
        std::vector<Tensor> aux;
        for (size_t i : s.aux_support) aux.push_back(support_set[i]);
        std::vector<Tensor> ways;
        ways.push_back(class_feature(model.encoder, aux));
        for (const auto& f : ctx_feats) ways.push_back(f);
        Tensor logits = query_logits(model, ways, {support_set[s.aux_query]});
        if (argmax_row(logits, 0) == 0) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(splits.size());
}

// ---- report lookups ----

const AurocCell* EvalReport::find_auroc(const std::string& attack, const std::string& strength,
                                        const std::string& filter, const std::string& statistic) const {
    for (const auto& c : auroc_cells)
        if (c.attack == attack && c.strength == strength && c.filter == filter &&
            c.statistic == statistic)
            return &c;
    return nullptr;
}

const AsrRow* EvalReport::find_asr(const std::string& attack, const std::string& strength,
                                   const std::string& scenario) const {
    for (const auto& r : asr_rows)
        if (r.attack == attack && r.strength == strength && r.scenario == scenario) return &r;
    return nullptr;
}

// ---- experiment orchestration ----

namespace {

namespace fs = std::filesystem;

struct CellSpec {
    AttackMethod method;
    AttackConfig config;
    std::string attack;   // pgd | cw_sgd
    std::string strength; // eps12_255, k0.1_eta50, ...
    bool ablation = false;

    std::string label() const { return attack + "_" + strength; }
};

struct CellData {
    CellSpec spec;
    std::vector<AdvSupportSet> adv_sets;
    std::vector<std::vector<Tensor>> clean_sets; // paired, same class
    std::vector<int> set_class;
    std::vector<std::string> set_ids;
    std::vector<std::vector<std::vector<Tensor>>> contexts; // per set: K-1 ways
};

uint64_t key_hash(const std::string& tag, const std::string& cell, uint64_t j) {
    return hash_combine(fnv1a64(tag + "|" + cell), j);
}

std::vector<int> pick_classes(const Dataset& ds, const std::string& spec) {
    std::vector<int> test = ds.classes_of(Split::test);
    if (spec == "all" || spec.empty()) return test;
    std::vector<int> out;
    std::istringstream is(spec);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        int cid = std::stoi(tok);
        if (std::find(test.begin(), test.end(), cid) == test.end())
            throw ConfigError("attack.classes: class " + tok + " is not in the test split");
        out.push_back(cid);
    }
    if (out.empty()) throw ConfigError("attack.classes resolved to an empty list");
    return out;
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0;
    double m = mean_of(v);
    double var = 0;
    for (double x : v) var += (x - m) * (x - m);
    return std::sqrt(var / static_cast<double>(v.size() - 1));
}

} // namespace

EvalReport run_experiment(const ExperimentConfig& cfg) {
    auto t_start = std::chrono::steady_clock::now();
    cfg.validate();
    fs::create_directories(cfg.out_dir);

    EvalReport report;
    report.config_hash = cfg.hash();
    report.master_seed = cfg.master_seed;
    report.model_name = cfg.head;

    // ---- dataset ----
    Dataset ds;
    std::string data_dir = cfg.out_dir + "/data";
    if (!cfg.data_dir.empty()) {
        ds = load_dataset(cfg.data_dir);
        report.dataset_name = "external:" + cfg.data_dir;
    } else if (fs::exists(data_dir + "/manifest.txt")) {
        ds = load_dataset(data_dir);
        report.dataset_name = ds.generator_desc;
    } else {
        ds = synth_generate(cfg.n_classes, cfg.per_class, cfg.master_seed);
        split_classes(ds, cfg.ratios, cfg.master_seed);
        save_dataset(ds, data_dir);
        report.dataset_name = ds.generator_desc;
    }

    // ---- few-shot model ----
    FewShotModel model;
    std::string model_dir = cfg.out_dir + "/model";
    if (fs::exists(model_dir + "/model.txt")) {
        model = load_model(model_dir);
    } else {
        RngStream rng(cfg.master_seed, 0x0DE1ull);
        model = make_fewshot_model(head_parse(cfg.head), rng);
        model.k_way = cfg.k_way;
        model.n_shot = cfg.n_shot;
        OptimizerConfig opt;
        opt.kind = OptKind::adam;
        opt.lr = cfg.lr;
        opt.weight_decay = cfg.weight_decay;
        TrainOptions topt;
        topt.k_way = cfg.k_way;
        topt.n_shot = cfg.n_shot;
        topt.n_query = cfg.n_query;
        topt.val_every = cfg.val_every;
        topt.val_episodes = cfg.val_episodes;
        std::cout << "[run] training few-shot model (" << cfg.episodes << " episodes)\n";
        train_fewshot(model, ds, cfg.episodes, opt, rng, topt);
        save_model(model, model_dir);
    }
    {
        RngStream rng(cfg.master_seed, 0xBA5Eull);
        auto acc = eval_accuracy(model, ds, Split::test, cfg.eval_episodes, rng, cfg.k_way, cfg.n_shot,
                                 cfg.n_query);
        report.baseline_accuracy = acc.mean;
        report.baseline_ci95 = acc.ci95;
    }

    // ---- autoencoders ----
    bool want_fpa = std::find(cfg.filters.begin(), cfg.filters.end(), "fpa") != cfg.filters.end();
    bool want_fpa_prime =
        std::find(cfg.filters.begin(), cfg.filters.end(), "fpa_prime") != cfg.filters.end() ||
        cfg.train_fpa_prime_ae;
    AeModel ae_standard, ae_fpa, ae_fpa_prime;
    bool have_standard = false, have_fpa = false, have_fpa_prime = false;
    OptimizerConfig ae_opt;
    ae_opt.kind = OptKind::adam;
    ae_opt.lr = cfg.ae_lr;
    ae_opt.weight_decay = cfg.ae_weight_decay;
    ae_opt.decay_step = cfg.ae_decay_step;
    ae_opt.gamma = cfg.ae_gamma;

    if (want_fpa || want_fpa_prime) {
        std::string dir = cfg.out_dir + "/ae_standard";
        if (fs::exists(dir + "/ae.txt")) {
            ae_standard = load_ae(dir);
        } else {
            RngStream rng(cfg.master_seed, 0xAE00ull);
            std::cout << "[run] training standard autoencoder (" << cfg.ae_epochs << " epochs)\n";
            ae_standard = train_ae_standard(ds, ae_opt, cfg.ae_epochs, rng, cfg.ae_batch);
            save_ae(ae_standard, dir);
        }
        have_standard = true;
        report.ae_val_rmse = ae_rmse(ae_standard, ds, Split::val);
        report.ae_feature_error_standard = ae_feature_error(ae_standard, model.encoder, ds, Split::val);
    }
    if (want_fpa) {
        std::string dir = cfg.out_dir + "/ae_fpa";
        if (fs::exists(dir + "/ae.txt")) {
            ae_fpa = load_ae(dir);
        } else {
            RngStream rng(cfg.master_seed, 0xAE01ull);
            std::cout << "[run] fine-tuning feature-preserving autoencoder (" << cfg.fpa_epochs
                      << " epochs)\n";
            ae_fpa = finetune_fpa(ae_standard, model.encoder, ds, ae_opt, cfg.fpa_epochs, rng,
                                  cfg.ae_batch);
            save_ae(ae_fpa, dir);
        }
        have_fpa = true;
        report.ae_feature_error_fpa = ae_feature_error(ae_fpa, model.encoder, ds, Split::val);
    }
    if (want_fpa_prime) {
        std::string dir = cfg.out_dir + "/ae_fpa_prime";
        if (fs::exists(dir + "/ae.txt")) {
            ae_fpa_prime = load_ae(dir);
        } else {
            RngStream rng(cfg.master_seed, 0xAE02ull);
            std::cout << "[run] fine-tuning logits-regularised autoencoder (" << cfg.fpa_prime_epochs
                      << " epochs)\n";
            ae_fpa_prime = finetune_fpa_prime(ae_standard, model, ds, ae_opt, cfg.fpa_prime_epochs, rng,
                                              cfg.ae_batch);
            save_ae(ae_fpa_prime, dir);
        }
        have_fpa_prime = true;
    }
    (void)have_standard;

    // ---- attack grid ----
    std::vector<int> attack_classes = pick_classes(ds, cfg.classes);
    std::vector<CellSpec> cells;
    for (const auto& m : cfg.methods) {
        AttackMethod method = attack_parse(m);
        size_t n_strengths = method == AttackMethod::pgd ? cfg.pgd_eps.size() : cfg.cw_kappa.size();
        for (size_t s = 0; s < n_strengths; ++s) {
            CellSpec cell;
            cell.method = method;
            cell.attack = attack_name(method);
            AttackConfig ac;
            ac.method = method;
            ac.k_way = cfg.k_way;
            ac.n_shot = cfg.n_shot;
            ac.n_qt = cfg.n_qt;
            ac.n_attacked = cfg.n_attacked;
            ac.seed = cfg.master_seed;
            if (method == AttackMethod::pgd) {
                ac.eps_inf = cfg.pgd_eps[s];
                ac.eta = cfg.pgd_eta;
                ac.iterations = cfg.pgd_iters;
            } else {
                ac.eps_inf = 0;
                ac.kappa = cfg.cw_kappa[s];
                ac.eta = cfg.cw_eta[s];
                ac.iterations = cfg.cw_iters;
                ac.cw_const = cfg.cw_const;
            }
            cell.config = ac;
            cell.strength = ac.strength_label();
            cells.push_back(cell);
        }
    }
    if (cfg.ablation_single_sample) {
        // single-sample ablation at the strongest pgd setting
        CellSpec cell;
        cell.method = AttackMethod::pgd;
        cell.attack = "pgd";
        AttackConfig ac;
        ac.method = AttackMethod::pgd;
        ac.k_way = cfg.k_way;
        ac.n_shot = cfg.n_shot;
        ac.n_qt = cfg.n_qt;
        ac.n_attacked = 1;
        ac.seed = cfg.master_seed;
        ac.eps_inf = cfg.pgd_eps.back();
        ac.eta = cfg.pgd_eta;
        ac.iterations = cfg.pgd_iters;
        cell.config = ac;
        cell.strength = ac.strength_label() + "_n1";
        cell.ablation = true;
        cells.push_back(cell);
    }

    size_t sets_per_cell = static_cast<size_t>(cfg.seeds) * cfg.sets_per_seed;
    std::vector<CellData> data(cells.size());

    for (size_t ci = 0; ci < cells.size(); ++ci) {
        const CellSpec& cell = cells[ci];
        CellData& cd = data[ci];
        cd.spec = cell;
        cd.adv_sets.resize(sets_per_cell);
        cd.clean_sets.resize(sets_per_cell);
        cd.set_class.resize(sets_per_cell);
        cd.set_ids.resize(sets_per_cell);
        cd.contexts.resize(sets_per_cell);
        std::string arch_dir = cfg.out_dir + "/attacks/" + cell.label();
        std::cout << "[run] attacks for cell " << cell.label() << " (" << sets_per_cell << " sets)\n";

        parallel_for(sets_per_cell, [&](size_t j) {
            int cls = attack_classes[j % attack_classes.size()];
            cd.set_class[j] = cls;
            char sid[128];
            std::snprintf(sid, sizeof(sid), "%s_c%03d_j%03zu", cell.label().c_str(), cls, j);
            cd.set_ids[j] = sid;
            std::string run_dir = arch_dir + "/" + sid;

            if (fs::exists(run_dir + "/attack.txt")) {
                cd.adv_sets[j] = load_adv_set(run_dir, ds);
            } else {
                RngStream rng(cfg.master_seed, key_hash("attack", cell.label(), j));
                const auto& imgs = ds.classes.at(cls);
                auto ids = rng.sample_without_replacement(imgs.size(),
                                                          static_cast<size_t>(cfg.n_shot));
                AdvSupportSet set = run_support_attack(model, ds, cls, ids, cell.config, rng);
                set.run_id = sid;
                save_adv_set(set, run_dir);
                cd.adv_sets[j] = std::move(set);
            }
            {
                // paired clean support from the same class
                RngStream rng(cfg.master_seed, key_hash("clean", cell.label(), j));
                const auto& imgs = ds.classes.at(cls);
                auto ids = rng.sample_without_replacement(imgs.size(), static_cast<size_t>(cfg.n_shot));
                for (size_t id : ids) cd.clean_sets[j].push_back(imgs[id]);
            }
            {
                // defender-side context: K-1 clean ways from other test classes
                RngStream rng(cfg.master_seed, key_hash("ctx", cell.label(), j));
                std::vector<int> pool;
                for (int c : ds.classes_of(Split::test))
                    if (c != cls) pool.push_back(c);
                auto ways = rng.sample_without_replacement(pool.size(),
                                                           static_cast<size_t>(cfg.k_way - 1));
                for (size_t w : ways) {
                    const auto& imgs = ds.classes.at(pool[w]);
                    auto ids = rng.sample_without_replacement(imgs.size(),
                                                              static_cast<size_t>(cfg.n_shot));
                    std::vector<Tensor> way;
                    for (size_t id : ids) way.push_back(imgs[id]);
                    cd.contexts[j].push_back(std::move(way));
                }
            }
        }, cfg.threads);
    }

    // ---- detection grid ----
    std::vector<std::pair<std::string, FilterSpec>> filter_specs;
    for (const auto& fname : cfg.filters) {
        FilterSpec spec;
        spec.kind = filter_kind_parse(fname);
        spec.bitr_r = cfg.bitr_r;
        spec.tvm = cfg.tvm;
        if (spec.kind == FilterKind::fpa) spec.ae = &ae_fpa;
        if (spec.kind == FilterKind::fpa_prime) spec.ae = &ae_fpa_prime;
        if (spec.kind == FilterKind::fpa && !have_fpa)
            throw ConfigError("filter fpa requested but no fpa autoencoder is available");
        if (spec.kind == FilterKind::fpa_prime && !have_fpa_prime)
            throw ConfigError("filter fpa_prime requested but no fpa_prime autoencoder is available");
        filter_specs.emplace_back(fname, spec);
    }

    // isolation forest baseline: embeddings of the clean train split
    IsolationForestModel iforest;
    int iforest_trees = 0;
    {
        std::vector<std::vector<float>> feats;
        for (int cid : ds.classes_of(Split::train))
            for (const auto& img : ds.classes.at(cid))
                feats.push_back(encoder_embedding(model.encoder, img));
        size_t stride = cfg.baseline_val_fraction > 0
                            ? std::max<size_t>(1, static_cast<size_t>(std::llround(1.0 / cfg.baseline_val_fraction)))
                            : sets_per_cell + 1;

        // tune the tree count on the validation slice of the attack data
        double best_auc = -1;
        for (int cand : cfg.iforest_tree_grid) {
            RngStream rng(cfg.master_seed, key_hash("iforest", "fit", static_cast<uint64_t>(cand)));
            IsolationForestModel f = iforest_fit(feats, cand, cfg.iforest_subsample, rng);
            std::vector<double> val_clean, val_adv;
            for (const auto& cd : data) {
                if (cd.spec.ablation) continue;
                for (size_t j = 0; j < sets_per_cell; j += stride) {
                    val_adv.push_back(
                        iforest_set_score(f, model.encoder, cd.adv_sets[j].poisoned()).value);
                    val_clean.push_back(iforest_set_score(f, model.encoder, cd.clean_sets[j]).value);
                }
            }
            if (val_clean.empty() || val_adv.empty()) break;
            double a = auroc(val_clean, val_adv, Direction::flag_if_above);
            if (a > best_auc) {
                best_auc = a;
                iforest_trees = cand;
            }
        }
        if (iforest_trees == 0) iforest_trees = cfg.iforest_tree_grid.front();
        RngStream rng(cfg.master_seed, key_hash("iforest", "fit", static_cast<uint64_t>(iforest_trees)));
        iforest = iforest_fit(feats, iforest_trees, cfg.iforest_subsample, rng);
        std::cout << "[run] isolation forest tuned to " << iforest_trees << " trees\n";
    }
    size_t val_stride = cfg.baseline_val_fraction > 0
                            ? std::max<size_t>(1, static_cast<size_t>(std::llround(1.0 / cfg.baseline_val_fraction)))
                            : sets_per_cell + 1;

    bool use_averaged = cfg.averaged_u_adv;
    for (size_t ci = 0; ci < cells.size(); ++ci) {
        const CellSpec& cell = cells[ci];
        CellData& cd = data[ci];
        std::cout << "[run] detection for cell " << cell.label() << "\n";

        // per set, per filter, per statistic scores; [0]=clean, [1]=adv
        size_t nf = filter_specs.size();
        size_t ns = cfg.statistics.size();
        std::vector<std::vector<std::vector<std::array<double, 2>>>> scores(
            nf, std::vector<std::vector<std::array<double, 2>>>(ns,
                std::vector<std::array<double, 2>>(sets_per_cell)));
        std::vector<std::array<double, 2>> odin_scores(sets_per_cell);
        std::vector<std::array<double, 2>> iforest_scores(sets_per_cell);

        parallel_for(sets_per_cell, [&](size_t j) {
            std::vector<Tensor> poisoned = cd.adv_sets[j].poisoned();
            const std::vector<Tensor>& clean = cd.clean_sets[j];
            const auto& ctx = cd.contexts[j];
            for (size_t fi = 0; fi < nf; ++fi) {
                const FilterSpec& spec = filter_specs[fi].second;
                for (size_t si = 0; si < ns; ++si) {
                    StatKind stat = stat_parse(cfg.statistics[si]);
                    for (int side = 0; side < 2; ++side) {
                        const std::vector<Tensor>& set = side ? poisoned : clean;
                        RngStream rng(cfg.master_seed,
                                      key_hash("det" + std::to_string(side) + filter_specs[fi].first +
                                                   cfg.statistics[si],
                                               cell.label(), j));
                        double value = 0;
                        if (stat == StatKind::u_adv) {
                            if (use_averaged) {
                                value = u_adv_averaged(model, spec, ctx, set, rng).value;
                            } else {
                                AuxSplit split = aux_split(set.size(), rng);
                                value = u_adv(model, spec, ctx, set, split, rng).value;
                            }
                        } else if (stat == StatKind::u_adv_avg) {
                            value = u_adv_averaged(model, spec, ctx, set, rng).value;
                        } else if (stat == StatKind::u_adv_prime) {
                            value = u_adv_prime(model, spec, ctx, set, rng).value;
                        } else {
                            throw ConfigError("detection.statistics must be u_adv variants");
                        }
                        scores[fi][si][j][side] = value;
                    }
                }
            }
            for (int side = 0; side < 2; ++side) {
                const std::vector<Tensor>& set = side ? poisoned : clean;
                RngStream rng(cfg.master_seed, key_hash("odin" + std::to_string(side), cell.label(), j));
                odin_scores[j][side] = odin_score(model, ctx, set, cfg.odin, rng).value;
                iforest_scores[j][side] = iforest_set_score(iforest, model.encoder, set).value;
            }
        }, cfg.threads);

        // score rows + per-cell AUROC
        for (size_t fi = 0; fi < nf; ++fi) {
            Direction dir = filter_direction(filter_specs[fi].second.kind);
            for (size_t si = 0; si < ns; ++si) {
                StatKind stat = stat_parse(cfg.statistics[si]);
                Direction sdir = stat == StatKind::u_adv_prime ? Direction::flag_if_above : dir;
                std::vector<double> cl, ad;
                for (size_t j = 0; j < sets_per_cell; ++j) {
                    cl.push_back(scores[fi][si][j][0]);
                    ad.push_back(scores[fi][si][j][1]);
                    for (int side = 0; side < 2; ++side) {
                        ScoreRow row;
                        row.set_id = cd.set_ids[j] + (side ? "" : "_clean");
                        row.class_id = cd.set_class[j];
                        row.is_adversarial = side == 1;
                        row.attack = cell.attack;
                        row.strength = cell.strength;
                        row.filter = filter_specs[fi].first;
                        row.statistic = cfg.statistics[si];
                        row.value = scores[fi][si][j][side];
                        report.score_rows.push_back(std::move(row));
                    }
                }
                AurocCell ac;
                ac.attack = cell.attack;
                ac.strength = cell.strength;
                ac.filter = filter_specs[fi].first;
                ac.statistic = cfg.statistics[si];
                ac.value = auroc(cl, ad, sdir);
                ac.n_clean = static_cast<int>(cl.size());
                ac.n_adv = static_cast<int>(ad.size());
                report.auroc_cells.push_back(ac);
            }
        }
        // baselines: odin on everything, iforest on the non-validation slice
        {
            std::vector<double> cl, ad;
            for (size_t j = 0; j < sets_per_cell; ++j) {
                cl.push_back(odin_scores[j][0]);
                ad.push_back(odin_scores[j][1]);
                for (int side = 0; side < 2; ++side) {
                    ScoreRow row;
                    row.set_id = cd.set_ids[j] + (side ? "" : "_clean");
                    row.class_id = cd.set_class[j];
                    row.is_adversarial = side == 1;
                    row.attack = cell.attack;
                    row.strength = cell.strength;
                    row.filter = "odin";
                    row.statistic = "odin";
                    row.value = odin_scores[j][side];
                    report.score_rows.push_back(std::move(row));
                }
            }
            AurocCell ac;
            ac.attack = cell.attack;
            ac.strength = cell.strength;
            ac.filter = "odin";
            ac.statistic = "odin";
            ac.value = auroc(cl, ad, Direction::flag_if_below);
            ac.n_clean = static_cast<int>(cl.size());
            ac.n_adv = static_cast<int>(ad.size());
            report.auroc_cells.push_back(ac);
        }
        {
            std::vector<double> cl, ad;
            for (size_t j = 0; j < sets_per_cell; ++j) {
                bool is_val = (j % val_stride) == 0;
                for (int side = 0; side < 2; ++side) {
                    ScoreRow row;
                    row.set_id = cd.set_ids[j] + (side ? "" : "_clean");
                    row.class_id = cd.set_class[j];
                    row.is_adversarial = side == 1;
                    row.attack = cell.attack;
                    row.strength = cell.strength;
                    row.filter = "iforest";
                    row.statistic = "iforest";
                    row.value = iforest_scores[j][side];
                    report.score_rows.push_back(std::move(row));
                }
                if (!is_val) {
                    cl.push_back(iforest_scores[j][0]);
                    ad.push_back(iforest_scores[j][1]);
                }
            }
            if (!cl.empty()) {
                AurocCell ac;
                ac.attack = cell.attack;
                ac.strength = cell.strength;
                ac.filter = "iforest";
                ac.statistic = "iforest";
                ac.value = auroc(cl, ad, Direction::flag_if_above);
                ac.n_clean = static_cast<int>(cl.size());
                ac.n_adv = static_cast<int>(ad.size());
                report.auroc_cells.push_back(ac);
            }
        }
    }

    // ---- ASR ----
    for (size_t ci = 0; ci < cells.size(); ++ci) {
        const CellSpec& cell = cells[ci];
        CellData& cd = data[ci];
        std::cout << "[run] asr for cell " << cell.label() << "\n";
        for (Scenario scen : {Scenario::fixed_supports, Scenario::new_supports}) {
            std::vector<double> means(sets_per_cell);
            parallel_for(sets_per_cell, [&](size_t j) {
                RngStream rng(cfg.master_seed,
                              key_hash(std::string("asr") + scenario_name(scen), cell.label(), j));
                means[j] = asr(model, cd.adv_sets[j], ds, scen, cfg.asr_episodes, rng).mean;
            }, cfg.threads);
            AsrRow row;
            row.attack = cell.attack;
            row.strength = cell.strength;
            row.scenario = scenario_name(scen);
            row.mean = mean_of(means);
            row.sd = sd_of(means);
            row.n_sets = static_cast<int>(sets_per_cell);
            report.asr_rows.push_back(row);
        }
    }

    // ---- self-similarity on the strongest cells ----
    for (size_t ci = 0; ci < cells.size(); ++ci) {
        const CellSpec& cell = cells[ci];
        CellData& cd = data[ci];
        bool strongest = !cell.ablation &&
                         ((cell.method == AttackMethod::pgd && cell.config.eps_inf == cfg.pgd_eps.back()) ||
                          (cell.method == AttackMethod::cw_sgd && cell.config.kappa == cfg.cw_kappa.back() &&
                           cell.config.eta == cfg.cw_eta.back()));
        if (!strongest) continue;
        std::vector<double> adv_acc(sets_per_cell), clean_acc(sets_per_cell);
        parallel_for(sets_per_cell, [&](size_t j) {
            adv_acc[j] = self_similarity_accuracy(model, cd.contexts[j], cd.adv_sets[j].poisoned());
            clean_acc[j] = self_similarity_accuracy(model, cd.contexts[j], cd.clean_sets[j]);
        }, cfg.threads);
        SelfSimRow adv_row{cell.attack, cell.strength, mean_of(adv_acc),
                           static_cast<int>(sets_per_cell)};
        report.selfsim_rows.push_back(adv_row);
        if (cell.method == AttackMethod::pgd) {
            SelfSimRow clean_row{"clean", cell.strength, mean_of(clean_acc),
                                 static_cast<int>(sets_per_cell)};
            report.selfsim_rows.push_back(clean_row);
        }
    }

    // ---- single-sample ablation summary ----
    if (cfg.ablation_single_sample) {
        std::string strong = std::string("eps") +
                             [&] {
                                 char b[32];
                                 std::snprintf(b, sizeof(b), "%.0f_255", cfg.pgd_eps.back() * 255.0);
                                 return std::string(b);
                             }();
        const AsrRow* full = report.find_asr("pgd", strong, "fixed_supports");
        const AsrRow* single = report.find_asr("pgd", strong + "_n1", "fixed_supports");
        std::string det_filter = have_fpa ? "fpa" : cfg.filters.front();
        std::string det_stat = cfg.statistics.front();
        const AurocCell* afull = report.find_auroc("pgd", strong, det_filter, det_stat);
        const AurocCell* asingle = report.find_auroc("pgd", strong + "_n1", det_filter, det_stat);
        if (full && single && afull && asingle) {
            report.ablation_asr_full = full->mean;
            report.ablation_asr_single = single->mean;
            report.ablation_auroc_full = afull->value;
            report.ablation_auroc_single = asingle->value;
        }
    }

    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return report;
}

// ---- CSV / report output ----

std::string csv_escape(const std::string& field) {
    bool needs = field.find_first_of(",\"\r\n") != std::string::npos;
    if (!needs) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += "\"";
    return out;
}

std::vector<std::vector<std::string>> csv_parse(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool in_quotes = false;
    size_t i = 0;
    while (i < text.size()) {
        char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"') {
            in_quotes = true;
        } else if (c == ',') {
            row.push_back(field);
            field.clear();
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            row.push_back(field);
            field.clear();
            rows.push_back(row);
            row.clear();
        } else {
            field.push_back(c);
        }
        ++i;
    }
    if (!field.empty() || !row.empty()) {
        row.push_back(field);
        rows.push_back(row);
    }
    return rows;
}

namespace {

std::string fmt_num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

} // namespace

void report_write(const EvalReport& report, const std::string& dir) {
    fs::create_directories(dir);
    auto open = [&](const std::string& name) {
        std::ofstream f(dir + "/" + name, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write " + dir + "/" + name);
        return f;
    };

    {
        auto f = open("auroc.csv");
        f << "model,dataset,attack,strength,filter,statistic,auroc,n_clean,n_adv,seed,config_hash\r\n";
        for (const auto& c : report.auroc_cells)
            f << csv_escape(report.model_name) << "," << csv_escape(report.dataset_name) << ","
              << c.attack << "," << c.strength << "," << c.filter << "," << c.statistic << ","
              << fmt_num(c.value) << "," << c.n_clean << "," << c.n_adv << "," << report.master_seed
              << "," << report.config_hash << "\r\n";
    }
    {
        auto f = open("asr.csv");
        f << "model,dataset,attack,strength,scenario,asr_mean,asr_sd,n_sets,seed,config_hash\r\n";
        for (const auto& r : report.asr_rows)
            f << csv_escape(report.model_name) << "," << csv_escape(report.dataset_name) << ","
              << r.attack << "," << r.strength << "," << r.scenario << "," << fmt_num(r.mean) << ","
              << fmt_num(r.sd) << "," << r.n_sets << "," << report.master_seed << ","
              << report.config_hash << "\r\n";
    }
    {
        auto f = open("scores.csv");
        f << "set_id,class,is_adversarial,attack,strength,filter,statistic,value,seed,config_hash\r\n";
        for (const auto& r : report.score_rows)
            f << csv_escape(r.set_id) << "," << r.class_id << "," << (r.is_adversarial ? 1 : 0) << ","
              << r.attack << "," << r.strength << "," << r.filter << "," << r.statistic << ","
              << fmt_num(r.value) << "," << report.master_seed << "," << report.config_hash << "\r\n";
    }
    {
        auto f = open("selfsim.csv");
        f << "population,strength,mean_accuracy,n_sets,seed,config_hash\r\n";
        for (const auto& r : report.selfsim_rows)
            f << r.population << "," << r.strength << "," << fmt_num(r.mean_accuracy) << "," << r.n_sets
              << "," << report.master_seed << "," << report.config_hash << "\r\n";
    }
    {
        auto f = open("summary.txt");
        f << "config_hash: " << report.config_hash << "\n";
        f << "master_seed: " << report.master_seed << "\n";
        f << "model: " << report.model_name << "\n";
        f << "dataset: " << report.dataset_name << "\n";
        f << "baseline_accuracy: " << fmt_num(report.baseline_accuracy) << " +- "
          << fmt_num(report.baseline_ci95) << "\n";
        f << "ae_val_rmse: " << fmt_num(report.ae_val_rmse) << "\n";
        f << "ae_feature_error_standard: " << fmt_num(report.ae_feature_error_standard) << "\n";
        f << "ae_feature_error_fpa: " << fmt_num(report.ae_feature_error_fpa) << "\n";
        f << "wall_seconds: " << fmt_num(report.wall_seconds) << "\n";
        f << "\n[asr]\n";
        for (const auto& r : report.asr_rows)
            f << r.attack << " " << r.strength << " " << r.scenario << ": " << fmt_num(r.mean)
              << " (sd " << fmt_num(r.sd) << ", n " << r.n_sets << ")\n";
        f << "\n[auroc]\n";
        for (const auto& c : report.auroc_cells)
            f << c.attack << " " << c.strength << " " << c.filter << " " << c.statistic << ": "
              << fmt_num(c.value) << "\n";
        f << "\n[self_similarity]\n";
        for (const auto& r : report.selfsim_rows)
            f << r.population << " " << r.strength << ": " << fmt_num(r.mean_accuracy) << " (n "
              << r.n_sets << ")\n";
        if (report.ablation_asr_full) {
            f << "\n[single_sample_ablation]\n";
            f << "asr_full: " << fmt_num(*report.ablation_asr_full) << "\n";
            f << "asr_single: " << fmt_num(*report.ablation_asr_single) << "\n";
            f << "auroc_full: " << fmt_num(*report.ablation_auroc_full) << "\n";
            f << "auroc_single: " << fmt_num(*report.ablation_auroc_single) << "\n";
        }
    }
}

} // namespace fssentry
