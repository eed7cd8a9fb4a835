#include "fssentry/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fssentry/errors.hpp"

namespace fssentry {

const char* attack_name(AttackMethod m) { return m == AttackMethod::pgd ? "pgd" : "cw_sgd"; }

AttackMethod attack_parse(const std::string& s) {
    if (s == "pgd") return AttackMethod::pgd;
    if (s == "cw_sgd" || s == "cw") return AttackMethod::cw_sgd;
    throw ConfigError("unknown attack method: " + s);
}

void AttackConfig::validate() const {
    if (method == AttackMethod::pgd && eps_inf <= 0) throw ConfigError("pgd requires eps_inf > 0");
    if (kappa < 0) throw ConfigError("kappa must be >= 0");
    if (n_attacked < 1 || n_attacked > n_shot) throw ConfigError("n_attacked must be in [1, n_shot]");
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    if (k_way < 2) throw ConfigError("k_way must be >= 2");
    if (n_qt < 1) throw ConfigError("n_qt must be >= 1");
}

std::string AttackConfig::strength_label() const {
    char buf[64];
    if (method == AttackMethod::pgd) {
        std::snprintf(buf, sizeof(buf), "eps%.0f_255", eps_inf * 255.0);
    } else {
        std::snprintf(buf, sizeof(buf), "k%g_eta%g", kappa, eta);
    }
    return buf;
}

std::vector<Tensor> AdvSupportSet::poisoned() const {
    std::vector<Tensor> out;
    for (size_t i = 0; i < base_support.size(); ++i) {
        Tensor img = base_support[i];
        auto px = img.f32();
        auto dv = delta[i].f32();
        for (size_t j = 0; j < px.size(); ++j)
            px[j] = std::clamp(px[j] + dv[j], 0.f, 1.f);
        out.push_back(std::move(img));
    }
    return out;
}

double AdvSupportSet::delta_l2() const {
    double acc = 0;
    for (const auto& d : delta)
        for (float v : d.f32()) acc += static_cast<double>(v) * v;
    return std::sqrt(acc);
}

namespace {

std::vector<Tensor> fetch_support(const Dataset& ds, int cls, const std::vector<size_t>& ids) {
    std::vector<Tensor> out;
    for (size_t id : ids) out.push_back(ds.image(cls, id));
    return out;
}

// project delta onto the l-inf ball, then the image onto [0,1]; returns the
// consistent (x_adv, delta) pair
void project(Tensor& x_adv, Tensor& delta, const Tensor& base, double eps) {
    auto xa = x_adv.f32();
    auto dv = delta.f32();
    auto xb = base.f32();
    float e = static_cast<float>(eps);
    for (size_t j = 0; j < xa.size(); ++j) {
        float d = std::clamp(xa[j] - xb[j], -e, e);
        float v = std::clamp(xb[j] + d, 0.f, 1.f);
        xa[j] = v;
        dv[j] = v - xb[j];
    }
}

size_t check_budget(const Tensor& x_adv, const Tensor& delta, double eps) {
    size_t bad = 0;
    auto xa = x_adv.f32();
    auto dv = delta.f32();
    for (size_t j = 0; j < xa.size(); ++j) {
        if (std::abs(dv[j]) > eps + 1e-6) ++bad;
        if (xa[j] < 0.f || xa[j] > 1.f) ++bad;
    }
    return bad;
}

} // namespace

AdvSupportSet pgd_support_attack(const FewShotModel& model, const Dataset& ds, int target_class,
                                 const std::vector<size_t>& base_ids, const AttackConfig& cfg,
                                 RngStream& rng) {
    cfg.validate();
    AdvSupportSet set;
    set.target_class = target_class;
    set.base_ids = base_ids;
    set.base_support = fetch_support(ds, target_class, base_ids);
    set.config = cfg;

    std::vector<Tensor> x_adv = set.base_support;
    set.delta.assign(cfg.n_shot, Tensor::zeros({kImageC, kImageH, kImageW}));

    // x0 = x + Uniform([-eps, eps]) on attacked slots, clipped to the domain
    for (int i = 0; i < cfg.n_attacked; ++i) {
        auto dv = set.delta[i].f32();
        for (auto& v : dv) v = static_cast<float>(rng.uniform(-cfg.eps_inf, cfg.eps_inf));
        auto xa = x_adv[i].f32();
        auto xb = set.base_support[i].f32();
        for (size_t j = 0; j < xa.size(); ++j) xa[j] = xb[j] + dv[j];
        project(x_adv[i], set.delta[i], set.base_support[i], cfg.eps_inf);
        set.budget_violations += check_budget(x_adv[i], set.delta[i], cfg.eps_inf);
    }

    std::vector<int> labels(static_cast<size_t>(cfg.n_qt), 0); // way 0 is the target

    for (int it = 0; it < cfg.iterations; ++it) {
        AttackEpisode ae =
            sample_attack_episode(ds, target_class, base_ids, cfg.k_way, cfg.n_shot, cfg.n_qt, rng);

        std::vector<std::vector<Tensor>> support;
        support.push_back(x_adv);
        for (auto& s : ae.other_support) support.push_back(s);

        Tape<float> tape;
        EpisodeGraph g = build_episode_graph(tape, model, support, ae.target_queries);
        auto loss = tape.softmax_xent(g.logits, labels);
        if (!std::isfinite(static_cast<double>(tape.val(loss)[0])))
            throw NumericError("pgd_support_attack: non-finite loss at iteration " + std::to_string(it));
        tape.backward(loss);

        const auto& bg = tape.grad(g.batch);
        size_t per = kImageC * kImageH * kImageW;
        for (int i = 0; i < cfg.n_attacked; ++i) {
            const float* grad = bg.data() + i * per; // way 0 occupies the leading rows
            bool finite = true;
            for (size_t j = 0; j < per; ++j) finite &= std::isfinite(grad[j]);
            if (!finite)
                throw NumericError("pgd_support_attack: non-finite gradient at iteration " +
                                   std::to_string(it));
            auto xa = x_adv[i].f32();
            float step = static_cast<float>(cfg.eta);
            for (size_t j = 0; j < per; ++j) {
                float s = grad[j] > 0.f ? 1.f : (grad[j] < 0.f ? -1.f : 0.f);
                xa[j] += step * s; // ascend the loss
            }
            project(x_adv[i], set.delta[i], set.base_support[i], cfg.eps_inf);
            set.budget_violations += check_budget(x_adv[i], set.delta[i], cfg.eps_inf);
        }
    }
    return set;
}

AdvSupportSet cw_sgd_support_attack(const FewShotModel& model, const Dataset& ds, int target_class,
                                    const std::vector<size_t>& base_ids, const AttackConfig& cfg,
                                    RngStream& rng) {
    cfg.validate();
    AdvSupportSet set;
    set.target_class = target_class;
    set.base_ids = base_ids;
    set.base_support = fetch_support(ds, target_class, base_ids);
    set.config = cfg;
    set.delta.assign(cfg.n_shot, Tensor::zeros({kImageC, kImageH, kImageW}));

    size_t per = kImageC * kImageH * kImageW;
    size_t na = static_cast<size_t>(cfg.n_attacked);
    double init_scale = cfg.eps_inf > 0 ? cfg.eps_inf : 1e-3;
    std::vector<float> delta(na * per);
    for (auto& v : delta) v = static_cast<float>(rng.uniform(-init_scale, init_scale));

    std::vector<int> labels(static_cast<size_t>(cfg.n_qt), 0);

    for (int it = 0; it < cfg.iterations; ++it) {
        AttackEpisode ae =
            sample_attack_episode(ds, target_class, base_ids, cfg.k_way, cfg.n_shot, cfg.n_qt, rng);

        Tape<float> tape;
        auto dvar = tape.leaf(delta, {na, kImageC, kImageH, kImageW});

        // batch rows: target way slots (perturbed then untouched), other
        // ways' supports, then target queries
        std::vector<int> rows;
        for (size_t i = 0; i < na; ++i) {
            auto base = tape.leaf(set.base_support[i]);
            auto base_row = tape.reshape(base, {1, kImageC, kImageH, kImageW});
            rows.push_back(tape.add(base_row, tape.slice_rows(dvar, i, i + 1)));
        }
        for (int i = cfg.n_attacked; i < cfg.n_shot; ++i) {
            auto base = tape.leaf(set.base_support[i]);
            rows.push_back(tape.reshape(base, {1, kImageC, kImageH, kImageW}));
        }
        std::vector<size_t> way_begin{0}, way_end{static_cast<size_t>(cfg.n_shot)};
        size_t row_count = static_cast<size_t>(cfg.n_shot);
        for (const auto& sup : ae.other_support) {
            way_begin.push_back(row_count);
            for (const auto& img : sup) {
                auto v = tape.leaf(img);
                rows.push_back(tape.reshape(v, {1, kImageC, kImageH, kImageW}));
                ++row_count;
            }
            way_end.push_back(row_count);
        }
        size_t support_rows = row_count;
        for (const auto& q : ae.target_queries) {
            auto v = tape.leaf(q);
            rows.push_back(tape.reshape(v, {1, kImageC, kImageH, kImageW}));
        }
        auto batch = tape.concat0(rows);
        auto logits = episode_logits_on_batch(tape, model, batch, way_begin, way_end, support_rows,
                                              ae.target_queries.size());

        auto margin = tape.mean_all(tape.cw_margin(logits, 0, cfg.kappa));
        auto loss = tape.add(tape.l2norm(dvar), tape.scale(margin, cfg.cw_const));
        if (!std::isfinite(static_cast<double>(tape.val(loss)[0])))
            throw NumericError("cw_sgd_support_attack: non-finite loss at iteration " + std::to_string(it));
        tape.backward(loss);

        const auto& dg = tape.grad(dvar);
        for (size_t j = 0; j < delta.size(); ++j) {
            if (!std::isfinite(dg[j]))
                throw NumericError("cw_sgd_support_attack: non-finite gradient at iteration " +
                                   std::to_string(it));
            delta[j] -= static_cast<float>(cfg.eta) * dg[j];
        }
    }

    // single domain clip at the end; delta is whatever the clip kept
    for (size_t i = 0; i < na; ++i) {
        auto dv = set.delta[i].f32();
        auto xb = set.base_support[i].f32();
        for (size_t j = 0; j < per; ++j) {
            float v = std::clamp(xb[j] + delta[i * per + j], 0.f, 1.f);
            dv[j] = v - xb[j];
        }
    }
    return set;
}

AdvSupportSet run_support_attack(const FewShotModel& model, const Dataset& ds, int target_class,
                                 const std::vector<size_t>& base_ids, const AttackConfig& cfg,
                                 RngStream& rng) {
    return cfg.method == AttackMethod::pgd
               ? pgd_support_attack(model, ds, target_class, base_ids, cfg, rng)
               : cw_sgd_support_attack(model, ds, target_class, base_ids, cfg, rng);
}

AttackBatchResult attack_batch(const FewShotModel& model, const Dataset& ds, const AttackConfig& cfg,
                               const std::vector<int>& classes, int runs_per_class, RngStream& rng,
                               const std::string& archive_dir) {
    AttackBatchResult result;
    for (int cls : classes) {
        for (int r = 0; r < runs_per_class; ++r) {
            RngStream run_rng = rng.fork(hash_combine(static_cast<uint64_t>(cls), static_cast<uint64_t>(r)));
            try {
                const auto& imgs = ds.classes.at(cls);
                auto ids = run_rng.sample_without_replacement(imgs.size(), static_cast<size_t>(cfg.n_shot));
                AdvSupportSet set = run_support_attack(model, ds, cls, ids, cfg, run_rng);
                char rid[96];
                std::snprintf(rid, sizeof(rid), "%s_%s_c%03d_r%03d", attack_name(cfg.method),
                              cfg.strength_label().c_str(), cls, r);
                set.run_id = rid;
                if (!archive_dir.empty()) save_adv_set(set, archive_dir + "/" + set.run_id);
                result.sets.push_back(std::move(set));
            } catch (const std::exception& e) {
                std::ostringstream os;
                os << "class " << cls << " run " << r << ": " << e.what();
                result.failures.push_back(os.str());
            }
        }
    }
    return result;
}

void save_adv_set(const AdvSupportSet& set, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream mf(dir + "/attack.txt");
    if (!mf) throw IoError("cannot write attack manifest in " + dir);
    mf << "run_id " << set.run_id << "\n";
    mf << "target_class " << set.target_class << "\n";
    mf << "base_ids";
    for (size_t id : set.base_ids) mf << " " << id;
    mf << "\n";
    mf << "method " << attack_name(set.config.method) << "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", set.config.eps_inf);
    mf << "eps_inf " << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", set.config.eta);
    mf << "eta " << buf << "\n";
    mf << "iterations " << set.config.iterations << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", set.config.kappa);
    mf << "kappa " << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", set.config.cw_const);
    mf << "const " << buf << "\n";
    mf << "n_attacked " << set.config.n_attacked << "\n";
    mf << "k_way " << set.config.k_way << "\n";
    mf << "n_shot " << set.config.n_shot << "\n";
    mf << "n_qt " << set.config.n_qt << "\n";
    mf << "seed " << set.config.seed << "\n";
    mf << "budget_violations " << set.budget_violations << "\n";
    for (size_t i = 0; i < set.delta.size(); ++i)
        tensor_write(dir + "/delta_" + std::to_string(i) + ".fstn", set.delta[i]);
}

AdvSupportSet load_adv_set(const std::string& dir, const Dataset& ds) {
    std::ifstream mf(dir + "/attack.txt");
    if (!mf) throw IoError("cannot read attack manifest " + dir + "/attack.txt");
    AdvSupportSet set;
    std::string line;
    while (std::getline(mf, line)) {
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key == "run_id") is >> set.run_id;
        else if (key == "target_class") is >> set.target_class;
        else if (key == "base_ids") {
            size_t id;
            while (is >> id) set.base_ids.push_back(id);
        } else if (key == "method") {
            std::string v;
            is >> v;
            set.config.method = attack_parse(v);
        } else if (key == "eps_inf") is >> set.config.eps_inf;
        else if (key == "eta") is >> set.config.eta;
        else if (key == "iterations") is >> set.config.iterations;
        else if (key == "kappa") is >> set.config.kappa;
        else if (key == "const") is >> set.config.cw_const;
        else if (key == "n_attacked") is >> set.config.n_attacked;
        else if (key == "k_way") is >> set.config.k_way;
        else if (key == "n_shot") is >> set.config.n_shot;
        else if (key == "n_qt") is >> set.config.n_qt;
        else if (key == "seed") is >> set.config.seed;
        else if (key == "budget_violations") is >> set.budget_violations;
    }
    set.base_support = fetch_support(ds, set.target_class, set.base_ids);
    for (size_t i = 0; i < set.base_support.size(); ++i)
        set.delta.push_back(tensor_read(dir + "/delta_" + std::to_string(i) + ".fstn"));
    return set;
}

} // namespace fssentry
