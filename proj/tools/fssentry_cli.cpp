// Command-line front end: dataset generation, training, attacks, detection
// scoring, ASR evaluation and the full benchmark pipeline.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "fssentry/attacks.hpp"
#include "fssentry/config.hpp"
#include "fssentry/dataset.hpp"
#include "fssentry/detection.hpp"
#include "fssentry/eval.hpp"
#include "fssentry/fewshot.hpp"
#include "fssentry/filters.hpp"

using namespace fssentry;

namespace {

namespace fs = std::filesystem;

uint64_t seed_or_env(uint64_t seed) {
    if (const char* env = std::getenv("FSSENTRY_SEED")) return std::strtoull(env, nullptr, 10);
    return seed;
}

std::vector<int> parse_class_list(const Dataset& ds, const std::string& spec) {
    std::vector<int> test = ds.classes_of(Split::test);
    if (spec == "all") return test;
    std::vector<int> out;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    return out;
}

FilterSpec make_filter_spec(const std::string& kind, int bitr_r, const TvmParams& tvm,
                            const AeModel* ae) {
    FilterSpec spec;
    spec.kind = filter_kind_parse(kind);
    spec.bitr_r = bitr_r;
    spec.tvm = tvm;
    spec.ae = ae;
    return spec;
}

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"few-shot support-set poisoning workbench"};
    app.require_subcommand(1);

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic striped dataset");
    std::string gen_out = "data";
    int gen_classes = 24, gen_per_class = 40;
    uint64_t gen_seed = 42;
    std::vector<double> gen_ratios{14.0 / 24, 4.0 / 24, 6.0 / 24};
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--classes", gen_classes, "number of classes");
    gen->add_option("--per-class", gen_per_class, "samples per class");
    gen->add_option("--seed", gen_seed, "master seed");
    gen->add_option("--ratios", gen_ratios, "train/val/test class ratios")->expected(3);

    // ---- train-fewshot ----
    auto* tf = app.add_subcommand("train-fewshot", "episodic training of a few-shot classifier");
    std::string tf_data = "data", tf_out = "model", tf_head = "prototypical";
    int tf_episodes = 1500, tf_val_every = 100, tf_val_episodes = 50;
    double tf_lr = 1e-3;
    uint64_t tf_seed = 42;
    tf->add_option("--data", tf_data, "dataset directory");
    tf->add_option("--out", tf_out, "checkpoint directory");
    tf->add_option("--head", tf_head, "prototypical | relation");
    tf->add_option("--episodes", tf_episodes, "training episodes");
    tf->add_option("--lr", tf_lr, "learning rate");
    tf->add_option("--val-every", tf_val_every, "validation cadence");
    tf->add_option("--val-episodes", tf_val_episodes, "episodes per validation");
    tf->add_option("--seed", tf_seed, "master seed");

    // ---- train-ae ----
    auto* ta = app.add_subcommand("train-ae", "train or fine-tune the autoencoder filter");
    std::string ta_data = "data", ta_out = "ae", ta_stage = "standard", ta_from, ta_model;
    int ta_epochs = 20;
    double ta_lr = 1e-4;
    uint64_t ta_seed = 42;
    ta->add_option("--data", ta_data, "dataset directory");
    ta->add_option("--out", ta_out, "checkpoint directory");
    ta->add_option("--stage", ta_stage, "standard | fpa | fpa_prime");
    ta->add_option("--from", ta_from, "base autoencoder checkpoint (fpa stages)");
    ta->add_option("--model", ta_model, "few-shot model checkpoint (fpa stages)");
    ta->add_option("--epochs", ta_epochs, "training epochs");
    ta->add_option("--lr", ta_lr, "learning rate");
    ta->add_option("--seed", ta_seed, "master seed");

    // ---- attack ----
    auto* at = app.add_subcommand("attack", "craft adversarial support sets");
    std::string at_model = "model", at_data = "data", at_out = "attacks", at_method = "pgd",
                at_eps = "12/255", at_classes = "all";
    double at_eta = 0.05, at_kappa = 0.1, at_const = 1.0;
    int at_iters = 75, at_runs = 50, at_n_attacked = 5, at_nqt = 8;
    uint64_t at_seed = 42;
    at->add_option("--model", at_model, "few-shot model checkpoint");
    at->add_option("--data", at_data, "dataset directory");
    at->add_option("--out", at_out, "archive directory");
    at->add_option("--method", at_method, "pgd | cw_sgd");
    at->add_option("--eps", at_eps, "l-inf budget (accepts fractions like 12/255)");
    at->add_option("--eta", at_eta, "step size");
    at->add_option("--iters", at_iters, "iterations");
    at->add_option("--kappa", at_kappa, "cw margin");
    at->add_option("--const", at_const, "cw trade-off weight");
    at->add_option("--runs", at_runs, "runs per class");
    at->add_option("--classes", at_classes, "all or comma-separated class ids");
    at->add_option("--n-attacked", at_n_attacked, "support slots to perturb");
    at->add_option("--n-qt", at_nqt, "target queries per redraw");
    at->add_option("--seed", at_seed, "master seed");

    // ---- detect ----
    auto* de = app.add_subcommand("detect", "score archived support sets");
    std::string de_model = "model", de_data = "data", de_attacks = "attacks", de_out = "scores.csv",
                de_filter = "fpa", de_stat = "u_adv", de_ae;
    int de_bitr = 6;
    uint64_t de_seed = 42;
    de->add_option("--model", de_model, "few-shot model checkpoint");
    de->add_option("--data", de_data, "dataset directory");
    de->add_option("--attacks", de_attacks, "attack archive directory");
    de->add_option("--out", de_out, "output CSV path");
    de->add_option("--filter", de_filter, "noise | feats | bitr | tvm | fpa | fpa_prime | identity");
    de->add_option("--statistic", de_stat, "u_adv | u_adv_avg | u_adv_prime | odin | iforest");
    de->add_option("--ae", de_ae, "autoencoder checkpoint (fpa filters)");
    de->add_option("--bitr-r", de_bitr, "bit depth for bitr");
    de->add_option("--seed", de_seed, "master seed");

    // ---- eval-asr ----
    auto* ea = app.add_subcommand("eval-asr", "attack success rate of archived sets");
    std::string ea_model = "model", ea_data = "data", ea_attacks = "attacks", ea_out = "asr.csv",
                ea_scenario = "fixed";
    int ea_episodes = 30;
    uint64_t ea_seed = 42;
    ea->add_option("--model", ea_model, "few-shot model checkpoint");
    ea->add_option("--data", ea_data, "dataset directory");
    ea->add_option("--attacks", ea_attacks, "attack archive directory");
    ea->add_option("--out", ea_out, "output CSV path");
    ea->add_option("--scenario", ea_scenario, "fixed | new");
    ea->add_option("--episodes", ea_episodes, "episodes per set");
    ea->add_option("--seed", ea_seed, "master seed");

    // ---- report ----
    auto* re = app.add_subcommand("report", "rebuild report files from a finished run directory");
    std::string re_in = "out", re_out;
    std::string re_config;
    std::vector<std::string> re_overrides;
    re->add_option("--config", re_config, "experiment config (TOML)");
    re->add_option("--set", re_overrides, "config overrides (section.key=value)");
    re->add_option("--in", re_in, "run directory (overrides output.dir)");
    re->add_option("--out", re_out, "report directory (default <run>/report)");

    // ---- run ----
    auto* ru = app.add_subcommand("run", "full pipeline: train, attack, detect, report");
    std::string ru_config;
    std::vector<std::string> ru_overrides;
    std::string ru_out;
    ru->add_option("--config", ru_config, "experiment config (TOML)");
    ru->add_option("--set", ru_overrides, "config overrides (section.key=value)");
    ru->add_option("--out", ru_out, "output directory (overrides output.dir)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            Dataset ds = synth_generate(gen_classes, gen_per_class, seed_or_env(gen_seed));
            split_classes(ds, {gen_ratios[0], gen_ratios[1], gen_ratios[2]}, seed_or_env(gen_seed));
            save_dataset(ds, gen_out);
            std::cout << "wrote " << gen_out << " (" << ds.classes.size() << " classes)\n";
        } else if (*tf) {
            Dataset ds = load_dataset(tf_data);
            RngStream rng(seed_or_env(tf_seed), 0x0DE1ull);
            FewShotModel model = make_fewshot_model(head_parse(tf_head), rng);
            OptimizerConfig opt;
            opt.kind = OptKind::adam;
            opt.lr = tf_lr;
            TrainOptions topt;
            topt.val_every = tf_val_every;
            topt.val_episodes = tf_val_episodes;
            TrainLog log = train_fewshot(model, ds, tf_episodes, opt, rng, topt);
            save_model(model, tf_out);
            std::cout << "best validation accuracy " << fmt(log.best_val_accuracy) << " at episode "
                      << log.best_episode << "\n";
        } else if (*ta) {
            Dataset ds = load_dataset(ta_data);
            RngStream rng(seed_or_env(ta_seed), 0xAE00ull);
            OptimizerConfig opt;
            opt.kind = OptKind::adam;
            opt.lr = ta_lr;
            opt.weight_decay = 1e-4;
            opt.decay_step = 10;
            opt.gamma = 0.1;
            AeModel ae;
            if (ta_stage == "standard") {
                ae = train_ae_standard(ds, opt, ta_epochs, rng);
            } else {
                if (ta_from.empty() || ta_model.empty())
                    throw ConfigError("--from and --model are required for fpa stages");
                AeModel base = load_ae(ta_from);
                FewShotModel model = load_model(ta_model);
                if (ta_stage == "fpa")
                    ae = finetune_fpa(base, model.encoder, ds, opt, ta_epochs, rng);
                else if (ta_stage == "fpa_prime")
                    ae = finetune_fpa_prime(base, model, ds, opt, ta_epochs, rng);
                else
                    throw ConfigError("unknown stage: " + ta_stage);
            }
            save_ae(ae, ta_out);
            std::cout << "wrote " << ta_out << " (stage " << ae.stage << ", val rmse "
                      << fmt(ae_rmse(ae, ds, Split::val)) << ")\n";
        } else if (*at) {
            Dataset ds = load_dataset(at_data);
            FewShotModel model = load_model(at_model);
            AttackConfig cfg;
            cfg.method = attack_parse(at_method);
            cfg.eps_inf = cfg.method == AttackMethod::pgd ? parse_fraction(at_eps) : 0.0;
            cfg.eta = at_eta;
            cfg.iterations = at_iters;
            cfg.kappa = at_kappa;
            cfg.cw_const = at_const;
            cfg.n_attacked = at_n_attacked;
            cfg.k_way = model.k_way;
            cfg.n_shot = model.n_shot;
            cfg.n_qt = at_nqt;
            cfg.seed = seed_or_env(at_seed);
            RngStream rng(cfg.seed, 0xA77Aull);
            auto result = attack_batch(model, ds, cfg, parse_class_list(ds, at_classes), at_runs, rng,
                                       at_out);
            std::cout << "archived " << result.sets.size() << " sets under " << at_out << "\n";
            for (const auto& failmsg : result.failures) std::cerr << "failed: " << failmsg << "\n";
        } else if (*de) {
            Dataset ds = load_dataset(de_data);
            FewShotModel model = load_model(de_model);
            AeModel ae;
            bool have_ae = false;
            if (!de_ae.empty()) {
                ae = load_ae(de_ae);
                have_ae = true;
            }
            StatKind stat = stat_parse(de_stat);
            uint64_t seed = seed_or_env(de_seed);

            // iforest baseline needs the fitted forest
            IsolationForestModel forest;
            if (stat == StatKind::iforest) {
                std::vector<std::vector<float>> feats;
                for (int cid : ds.classes_of(Split::train))
                    for (const auto& img : ds.classes.at(cid))
                        feats.push_back(encoder_embedding(model.encoder, img));
                RngStream rng(seed, 0x1F02E57ull);
                forest = iforest_fit(feats, 100, 256, rng);
            }

            std::ofstream out(de_out, std::ios::binary | std::ios::trunc);
            if (!out) throw IoError("cannot write " + de_out);
            out << "set_id,class,is_adversarial,statistic,value\r\n";
            size_t n = 0;
            for (const auto& entry : fs::directory_iterator(de_attacks)) {
                if (!entry.is_directory() || !fs::exists(entry.path() / "attack.txt")) continue;
                AdvSupportSet set = load_adv_set(entry.path().string(), ds);
                uint64_t key = fnv1a64(set.run_id);
                for (int side = 0; side < 2; ++side) {
                    std::vector<Tensor> images;
                    if (side) {
                        images = set.poisoned();
                    } else {
                        RngStream rng(seed, hash_combine(key, 0xC1EA4ull));
                        const auto& imgs = ds.classes.at(set.target_class);
                        for (size_t id : rng.sample_without_replacement(imgs.size(), set.base_ids.size()))
                            images.push_back(imgs[id]);
                    }
                    RngStream ctx_rng(seed, hash_combine(key, 0xC0DEull));
                    std::vector<std::vector<Tensor>> context;
                    std::vector<int> pool;
                    for (int c : ds.classes_of(ds.split.at(set.target_class)))
                        if (c != set.target_class) pool.push_back(c);
                    for (size_t w : ctx_rng.sample_without_replacement(
                             pool.size(), static_cast<size_t>(set.config.k_way - 1))) {
                        const auto& imgs = ds.classes.at(pool[w]);
                        std::vector<Tensor> way;
                        for (size_t id : ctx_rng.sample_without_replacement(imgs.size(), images.size()))
                            way.push_back(imgs[id]);
                        context.push_back(std::move(way));
                    }
                    RngStream rng(seed, hash_combine(key, static_cast<uint64_t>(side)));
                    DetectionScore score;
                    if (stat == StatKind::u_adv) {
                        FilterSpec spec = make_filter_spec(de_filter, de_bitr, TvmParams{},
                                                           have_ae ? &ae : nullptr);
                        AuxSplit split = aux_split(images.size(), rng);
                        score = u_adv(model, spec, context, images, split, rng);
                    } else if (stat == StatKind::u_adv_avg) {
                        FilterSpec spec = make_filter_spec(de_filter, de_bitr, TvmParams{},
                                                           have_ae ? &ae : nullptr);
                        score = u_adv_averaged(model, spec, context, images, rng);
                    } else if (stat == StatKind::u_adv_prime) {
                        FilterSpec spec = make_filter_spec(de_filter, de_bitr, TvmParams{},
                                                           have_ae ? &ae : nullptr);
                        score = u_adv_prime(model, spec, context, images, rng);
                    } else if (stat == StatKind::odin) {
                        score = odin_score(model, context, images, OdinConfig{}, rng);
                    } else {
                        score = iforest_set_score(forest, model.encoder, images);
                    }
                    out << csv_escape(set.run_id + (side ? "" : "_clean")) << "," << set.target_class
                        << "," << side << "," << stat_name(stat) << "," << fmt(score.value) << "\r\n";
                }
                ++n;
            }
            std::cout << "scored " << n << " archived sets into " << de_out << "\n";
        } else if (*ea) {
            Dataset ds = load_dataset(ea_data);
            FewShotModel model = load_model(ea_model);
            Scenario scen = ea_scenario == "new" ? Scenario::new_supports : Scenario::fixed_supports;
            uint64_t seed = seed_or_env(ea_seed);
            std::ofstream out(ea_out, std::ios::binary | std::ios::trunc);
            if (!out) throw IoError("cannot write " + ea_out);
            out << "set_id,class,scenario,asr_mean,asr_sd,episodes\r\n";
            size_t n = 0;
            for (const auto& entry : fs::directory_iterator(ea_attacks)) {
                if (!entry.is_directory() || !fs::exists(entry.path() / "attack.txt")) continue;
                AdvSupportSet set = load_adv_set(entry.path().string(), ds);
                RngStream rng(seed, fnv1a64(set.run_id));
                AsrResult r = asr(model, set, ds, scen, ea_episodes, rng);
                out << csv_escape(set.run_id) << "," << set.target_class << "," << scenario_name(scen)
                    << "," << fmt(r.mean) << "," << fmt(r.sd) << "," << r.episodes << "\r\n";
                ++n;
            }
            std::cout << "evaluated " << n << " archived sets into " << ea_out << "\n";
        } else if (*re) {
            ExperimentConfig cfg = load_experiment_config(re_config, re_overrides);
            if (!re_in.empty()) cfg.out_dir = re_in;
            EvalReport report = run_experiment(cfg); // stages resume from artifacts
            std::string dir = re_out.empty() ? cfg.out_dir + "/report" : re_out;
            report_write(report, dir);
            std::cout << "report written to " << dir << "\n";
        } else if (*ru) {
            ExperimentConfig cfg = load_experiment_config(ru_config, ru_overrides);
            if (!ru_out.empty()) cfg.out_dir = ru_out;
            EvalReport report = run_experiment(cfg);
            report_write(report, cfg.out_dir + "/report");
            std::cout << "pipeline finished in " << fmt(report.wall_seconds) << " s; report under "
                      << cfg.out_dir << "/report\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
