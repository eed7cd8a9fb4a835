#include "fssentry/filters.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "fssentry/errors.hpp"
#include "fssentry/graph.hpp"

namespace fssentry {

const char* filter_kind_name(FilterKind k) {
    switch (k) {
        case FilterKind::identity: return "identity";
        case FilterKind::noise: return "noise";
        case FilterKind::feats: return "feats";
        case FilterKind::bitr: return "bitr";
        case FilterKind::tvm: return "tvm";
        case FilterKind::fpa: return "fpa";
        case FilterKind::fpa_prime: return "fpa_prime";
    }
    return "?";
}

FilterKind filter_kind_parse(const std::string& s) {
    if (s == "identity") return FilterKind::identity;
    if (s == "noise") return FilterKind::noise;
    if (s == "feats" || s == "median") return FilterKind::feats;
    if (s == "bitr") return FilterKind::bitr;
    if (s == "tvm") return FilterKind::tvm;
    if (s == "fpa") return FilterKind::fpa;
    if (s == "fpa_prime") return FilterKind::fpa_prime;
    throw ConfigError("unknown filter kind: " + s);
}

void FilterSpec::validate() const {
    if (kind == FilterKind::bitr && (bitr_r < 1 || bitr_r > 8))
        throw ConfigError("bitr: r must be in 1..8");
    if (kind == FilterKind::tvm && (tvm.p <= 0 || tvm.p > 1))
        throw ConfigError("tvm: keep probability must be in (0, 1]");
    if ((kind == FilterKind::fpa || kind == FilterKind::fpa_prime) && ae == nullptr)
        throw ConfigError(std::string(filter_kind_name(kind)) + ": no autoencoder checkpoint attached");
}

std::string FilterSpec::name() const { return filter_kind_name(kind); }

std::vector<Tensor> AeModel::apply(const std::vector<Tensor>& images) const {
    if (images.empty()) return {};
    Tensor batch = Tensor::zeros({images.size(), kImageC, kImageH, kImageW});
    auto bp = batch.f32();
    size_t per = images[0].numel();
    for (size_t i = 0; i < images.size(); ++i) {
        auto src = images[i].f32();
        std::copy(src.begin(), src.end(), bp.begin() + i * per);
    }
    Tensor recon = decoder.forward(encoder.forward(batch));
    std::vector<Tensor> out;
    auto rp = recon.f32();
    for (size_t i = 0; i < images.size(); ++i) {
        Tensor img = Tensor::zeros({kImageC, kImageH, kImageW});
        auto ip = img.f32();
        for (size_t j = 0; j < per; ++j) ip[j] = std::clamp(rp[i * per + j], 0.f, 1.f);
        out.push_back(std::move(img));
    }
    return out;
}

AeModel make_desk_ae(RngStream& rng) {
    AeModel ae;
    ae.encoder = make_desk_encoder(rng);
    ae.decoder = make_desk_decoder(rng);
    return ae;
}

void save_ae(const AeModel& ae, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream mf(dir + "/ae.txt");
    if (!mf) throw IoError("cannot write ae manifest in " + dir);
    mf << "stage " << ae.stage << "\n";
    save_network(ae.encoder, dir, "enc");
    save_network(ae.decoder, dir, "dec");
}

AeModel load_ae(const std::string& dir) {
    std::ifstream mf(dir + "/ae.txt");
    if (!mf) throw IoError("cannot read ae manifest " + dir + "/ae.txt");
    AeModel ae;
    std::string key;
    while (mf >> key)
        if (key == "stage") mf >> ae.stage;
    ae.encoder = load_network(dir, "enc");
    ae.decoder = load_network(dir, "dec");
    return ae;
}

std::vector<Tensor> filter_noise(const std::vector<Tensor>& images, RngStream& rng) {
    if (images.empty()) throw ShapeError("filter_noise: empty batch");
    // channel-wise empirical variance over the whole batch
    std::array<double, kImageC> mean{}, var{};
    size_t hw = kImageH * kImageW;
    size_t count = images.size() * hw;
    for (const auto& img : images) {
        auto px = img.f32();
        for (size_t c = 0; c < kImageC; ++c)
            for (size_t i = 0; i < hw; ++i) mean[c] += px[c * hw + i];
    }
    for (auto& m : mean) m /= static_cast<double>(count);
    for (const auto& img : images) {
        auto px = img.f32();
        for (size_t c = 0; c < kImageC; ++c)
            for (size_t i = 0; i < hw; ++i) {
                double d = px[c * hw + i] - mean[c];
                var[c] += d * d;
            }
    }
    for (auto& v : var) v /= static_cast<double>(count);

    std::vector<Tensor> out;
    for (const auto& img : images) {
        Tensor o = img;
        auto px = o.f32();
        for (size_t c = 0; c < kImageC; ++c) {
            double sd = std::sqrt(var[c]);
            for (size_t i = 0; i < hw; ++i) {
                double v = px[c * hw + i] + sd * rng.normal();
                px[c * hw + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
        out.push_back(std::move(o));
    }
    return out;
}

std::vector<Tensor> filter_feats_median(const std::vector<Tensor>& images) {
    std::vector<Tensor> out;
    for (const auto& img : images) {
        const auto& s = img.shape();
        size_t h = s[1], w = s[2];
        if (h < 2 || w < 2) throw ShapeError("filter_feats_median: image smaller than the 2x2 window");
        Tensor o = Tensor::zeros(s);
        auto src = img.f32();
        auto dst = o.f32();
        for (size_t c = 0; c < s[0]; ++c) {
            const float* xp = src.data() + c * h * w;
            float* yp = dst.data() + c * h * w;
            for (size_t i = 0; i < h; ++i) {
                size_t i1 = std::min(i + 1, h - 1); // bottom edge replicates
                for (size_t j = 0; j < w; ++j) {
                    size_t j1 = std::min(j + 1, w - 1);
                    float a = xp[i * w + j], b = xp[i * w + j1];
                    float cc = xp[i1 * w + j], d = xp[i1 * w + j1];
                    // median of 4 = mean of the two middle order statistics
                    float lo = std::min(std::min(a, b), std::min(cc, d));
                    float hi = std::max(std::max(a, b), std::max(cc, d));
                    yp[i * w + j] = (a + b + cc + d - lo - hi) * 0.5f;
                }
            }
        }
        out.push_back(std::move(o));
    }
    return out;
}

std::vector<Tensor> filter_bitr(const std::vector<Tensor>& images, int r) {
    if (r < 1 || r > 8) throw ConfigError("filter_bitr: r must be in 1..8");
    float levels = static_cast<float>((1 << r) - 1);
    std::vector<Tensor> out;
    for (const auto& img : images) {
        Tensor o = img;
        for (auto& v : o.f32()) v = std::floor(v * levels + 0.5f) / levels;
        out.push_back(std::move(o));
    }
    return out;
}

double tvm_objective(const Tensor& z, const Tensor& x, const std::vector<uint8_t>& mask, double lambda) {
    const auto& s = z.shape();
    size_t h = s[1], w = s[2];
    auto zp = z.f32();
    auto xp = x.f32();
    auto sab = [](double u) { return std::sqrt(u * u + 1e-6); };
    double obj = 0;
    for (size_t c = 0; c < s[0]; ++c) {
        for (size_t i = 0; i < h; ++i) {
            for (size_t j = 0; j < w; ++j) {
                size_t idx = (c * h + i) * w + j;
                if (mask[i * w + j]) {
                    double d = zp[idx] - xp[idx];
                    obj += d * d;
                }
                if (j > 0) obj += lambda * sab(zp[idx] - zp[idx - 1]);
                if (i > 0) obj += lambda * sab(zp[idx] - zp[idx - w]);
            }
        }
    }
    return obj;
}

Tensor tvm_solve(const Tensor& x, const std::vector<uint8_t>& mask, const TvmParams& params,
                 std::vector<double>* objective_trace) {
    const auto& s = x.shape();
    size_t h = s[1], w = s[2];
    Tensor z = x;
    std::vector<float> grad(z.numel());
    if (objective_trace) objective_trace->push_back(tvm_objective(z, x, mask, params.lambda));
    for (int it = 0; it < params.iters; ++it) {
        std::fill(grad.begin(), grad.end(), 0.f);
        auto zp = z.f32();
        auto xp = x.f32();
        for (size_t c = 0; c < s[0]; ++c) {
            for (size_t i = 0; i < h; ++i) {
                for (size_t j = 0; j < w; ++j) {
                    size_t idx = (c * h + i) * w + j;
                    if (mask[i * w + j]) grad[idx] += 2.f * (zp[idx] - xp[idx]);
                    if (j > 0) {
                        float u = zp[idx] - zp[idx - 1];
                        float g = static_cast<float>(params.lambda) * u /
                                  std::sqrt(u * u + 1e-6f);
                        grad[idx] += g;
                        grad[idx - 1] -= g;
                    }
                    if (i > 0) {
                        float u = zp[idx] - zp[idx - w];
                        float g = static_cast<float>(params.lambda) * u /
                                  std::sqrt(u * u + 1e-6f);
                        grad[idx] += g;
                        grad[idx - w] -= g;
                    }
                }
            }
        }
        bool finite = true;
        for (size_t i = 0; i < grad.size(); ++i) {
            zp[i] -= static_cast<float>(params.step) * grad[i];
            finite &= std::isfinite(zp[i]);
        }
        if (!finite) throw NumericError("tvm_solve: non-finite iterate at step " + std::to_string(it));
        if (objective_trace) objective_trace->push_back(tvm_objective(z, x, mask, params.lambda));
    }
    for (auto& v : z.f32()) v = std::clamp(v, 0.f, 1.f);
    return z;
}

std::vector<Tensor> filter_tvm(const std::vector<Tensor>& images, const TvmParams& params,
                               RngStream& rng) {
    if (params.p <= 0 || params.p > 1) throw ConfigError("filter_tvm: p must be in (0, 1]");
    std::vector<Tensor> out;
    for (const auto& img : images) {
        const auto& s = img.shape();
        std::vector<uint8_t> mask(s[1] * s[2]);
        for (auto& m : mask) m = rng.uniform() < params.p ? 1 : 0;
        out.push_back(tvm_solve(img, mask, params));
    }
    return out;
}

std::vector<Tensor> apply_filter(const FilterSpec& spec, const std::vector<Tensor>& images,
                                 RngStream& rng) {
    spec.validate();
    switch (spec.kind) {
        case FilterKind::identity: return images;
        case FilterKind::noise: return filter_noise(images, rng);
        case FilterKind::feats: return filter_feats_median(images);
        case FilterKind::bitr: return filter_bitr(images, spec.bitr_r);
        case FilterKind::tvm: return filter_tvm(images, spec.tvm, rng);
        case FilterKind::fpa:
        case FilterKind::fpa_prime: return spec.ae->apply(images);
    }
    throw ConfigError("apply_filter: unhandled kind");
}

// ---- autoencoder training ----

namespace {

Tensor stack(const std::vector<const Tensor*>& images) {
    Tensor out = Tensor::zeros({images.size(), kImageC, kImageH, kImageW});
    auto bp = out.f32();
    size_t per = images[0]->numel();
    for (size_t i = 0; i < images.size(); ++i) {
        auto src = images[i]->f32();
        std::copy(src.begin(), src.end(), bp.begin() + i * per);
    }
    return out;
}

std::vector<const Tensor*> split_images(const Dataset& ds, Split sp) {
    std::vector<const Tensor*> out;
    for (int cid : ds.classes_of(sp))
        for (const auto& img : ds.classes.at(cid)) out.push_back(&img);
    return out;
}

std::vector<Tensor*> ae_params(AeModel& ae) {
    auto out = ae.encoder.param_list();
    auto dec = ae.decoder.param_list();
    out.insert(out.end(), dec.begin(), dec.end());
    return out;
}

std::vector<Tensor> snapshot(const AeModel& ae) {
    std::vector<Tensor> out;
    for (const Tensor* p : ae.encoder.param_list()) out.push_back(*p);
    for (const Tensor* p : ae.decoder.param_list()) out.push_back(*p);
    return out;
}

void restore(AeModel& ae, const std::vector<Tensor>& snap) {
    auto ps = ae_params(ae);
    for (size_t i = 0; i < ps.size(); ++i) *ps[i] = snap[i];
}

double val_mse(const AeModel& ae, const std::vector<const Tensor*>& val) {
    if (val.empty()) return 0;
    double acc = 0;
    size_t n = 0;
    for (size_t i = 0; i < val.size(); i += 64) {
        std::vector<const Tensor*> chunk(val.begin() + i,
                                         val.begin() + std::min(val.size(), i + 64));
        Tensor batch = stack(chunk);
        Tensor recon = ae.decoder.forward(ae.encoder.forward(batch));
        auto rp = recon.f32();
        auto bp = batch.f32();
        for (size_t j = 0; j < rp.size(); ++j) {
            double d = rp[j] - bp[j];
            acc += d * d;
        }
        n += rp.size();
    }
    return acc / static_cast<double>(n);
}

constexpr double kImageDimRoot = 27.712812921102035; // sqrt(3*16*16)

} // namespace

AeModel train_ae_standard(const Dataset& ds, OptimizerConfig opt, int epochs, RngStream& rng,
                          int batch_size, AeTrainLog* log) {
    auto train = split_images(ds, Split::train);
    auto val = split_images(ds, Split::val);
    if (train.empty()) throw ConfigError("train_ae_standard: train split is empty");

    AeModel ae = make_desk_ae(rng);
    ae.stage = "standard";
    OptimizerState state(opt);
    std::vector<Tensor> best = snapshot(ae);
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = -1;

    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int e = 0; e < epochs; ++e) {
        state.set_epoch(e);
        rng.shuffle(order);
        double epoch_loss = 0;
        size_t batches = 0;
        for (size_t b = 0; b < order.size(); b += batch_size) {
            std::vector<const Tensor*> chunk;
            for (size_t i = b; i < std::min(order.size(), b + batch_size); ++i)
                chunk.push_back(train[order[i]]);
            Tensor batch = stack(chunk);

            Tape<float> tape;
            auto x = tape.leaf(batch);
            std::vector<int> pvars;
            auto latent = net_forward(tape, ae.encoder, x, &pvars);
            auto recon = net_forward(tape, ae.decoder, latent, &pvars);
            auto target = tape.leaf(batch);
            auto loss = tape.scale(tape.sumsq(tape.sub(recon, target)), 1.0 / batch.numel());
            double lv = tape.val(loss)[0];
            if (!std::isfinite(lv))
                throw NumericError("train_ae_standard: non-finite loss at epoch " + std::to_string(e));
            tape.backward(loss);
            std::vector<Tensor> grads;
            for (int pv : pvars) grads.push_back(tape.grad_tensor(pv));
            state.step(ae_params(ae), grads);
            epoch_loss += lv;
            ++batches;
        }
        double vm = val_mse(ae, val);
        if (log) {
            log->train_loss.push_back(epoch_loss / std::max<size_t>(1, batches));
            log->val_loss.push_back(vm);
        }
        if (vm < best_val) {
            best_val = vm;
            best_epoch = e;
            best = snapshot(ae);
        }
    }
    if (best_epoch >= 0) restore(ae, best);
    if (log) {
        log->best_epoch = best_epoch;
        log->best_val = best_val;
    }
    return ae;
}

namespace {

// shared fine-tuning loop; `logit_ways` non-empty switches on the fpa_prime
// logits term (refreshed by the caller each epoch via `refresh`)
AeModel finetune_common(const AeModel& base, const Network& fs_encoder, const FewShotModel* model,
                        const Dataset& ds, OptimizerConfig opt, int epochs, RngStream& rng,
                        int batch_size, AeTrainLog* log, bool with_logits) {
    auto train = split_images(ds, Split::train);
    auto val = split_images(ds, Split::val);
    if (train.empty()) throw ConfigError("finetune: train split is empty");

    AeModel ae = base;
    ae.stage = with_logits ? "fpa_prime" : "fpa";
    OptimizerState state(opt);

    size_t feat_dim = 0;
    {
        Tensor probe = fs_encoder.forward(Tensor::zeros({1, kImageC, kImageH, kImageW}));
        feat_dim = probe.numel();
    }
    double feat_root = std::sqrt(static_cast<double>(feat_dim));

    std::vector<Tensor> best = snapshot(ae);
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = -1;

    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    RngStream calib_rng = rng.fork(0xCA11Bull);

    auto batch_loss = [&](const Tensor& batch, const std::vector<Tensor>& logit_ways,
                          bool update) -> double {
        size_t bsz = batch.shape()[0];
        Tensor f = fs_encoder.forward(batch); // frozen target features

        Tape<float> tape;
        auto x = tape.leaf(batch);
        std::vector<int> pvars;
        auto latent = net_forward(tape, ae.encoder, x, &pvars);
        auto recon = net_forward(tape, ae.decoder, latent, &pvars);
        auto target = tape.leaf(batch);
        auto fhat = net_forward(tape, fs_encoder, recon);
        auto ftgt = tape.leaf(f);
        auto img_term = tape.scale(tape.sumsq(tape.sub(recon, target)),
                                   0.01 / (static_cast<double>(bsz) * kImageDimRoot));
        auto feat_term = tape.scale(tape.sumsq(tape.sub(fhat, ftgt)),
                                    1.0 / (static_cast<double>(bsz) * feat_root));
        auto loss = tape.add(img_term, feat_term);
        if (with_logits) {
            Tensor z;
            {
                // plain logits of the original images against the calibration ways
                std::vector<Tensor> qs;
                for (size_t i = 0; i < bsz; ++i) {
                    Tensor img = Tensor::zeros({kImageC, kImageH, kImageW});
                    auto ip = img.f32();
                    auto bp = batch.f32();
                    std::copy(bp.begin() + i * img.numel(), bp.begin() + (i + 1) * img.numel(), ip.begin());
                    qs.push_back(std::move(img));
                }
                z = query_logits(*model, logit_ways, qs);
            }
            auto zhat = query_logits_graph(tape, *model, logit_ways, recon);
            auto ztgt = tape.leaf(z);
            double k_root = std::sqrt(static_cast<double>(logit_ways.size()));
            auto logit_term = tape.scale(tape.sumsq(tape.sub(zhat, ztgt)),
                                         1.0 / (static_cast<double>(bsz) * k_root));
            loss = tape.add(loss, logit_term);
        }
        double lv = tape.val(loss)[0];
        if (update) {
            if (!std::isfinite(lv)) throw NumericError("finetune: non-finite loss");
            tape.backward(loss);
            std::vector<Tensor> grads;
            for (int pv : pvars) grads.push_back(tape.grad_tensor(pv));
            state.step(ae_params(ae), grads);
        }
        return lv;
    };

    for (int e = 0; e < epochs; ++e) {
        state.set_epoch(e);
        rng.shuffle(order);

        std::vector<Tensor> logit_ways;
        if (with_logits) {
            // fixed calibration support for this epoch
            Episode calib = sample_episode(ds, Split::train, model->k_way, model->n_shot, 0,
                                           calib_rng);
            for (const auto& sup : calib.support)
                logit_ways.push_back(class_feature(model->encoder, sup));
        }

        double epoch_loss = 0;
        size_t batches = 0;
        for (size_t b = 0; b < order.size(); b += batch_size) {
            std::vector<const Tensor*> chunk;
            for (size_t i = b; i < std::min(order.size(), b + batch_size); ++i)
                chunk.push_back(train[order[i]]);
            epoch_loss += batch_loss(stack(chunk), logit_ways, true);
            ++batches;
        }

        double vl = 0;
        size_t vb = 0;
        for (size_t b = 0; b < val.size(); b += 64) {
            std::vector<const Tensor*> chunk(val.begin() + b,
                                             val.begin() + std::min(val.size(), b + 64));
            vl += batch_loss(stack(chunk), logit_ways, false);
            ++vb;
        }
        vl /= std::max<size_t>(1, vb);
        if (log) {
            log->train_loss.push_back(epoch_loss / std::max<size_t>(1, batches));
            log->val_loss.push_back(vl);
        }
        if (vl < best_val) {
            best_val = vl;
            best_epoch = e;
            best = snapshot(ae);
        }
    }
    if (best_epoch >= 0) restore(ae, best);
    if (log) {
        log->best_epoch = best_epoch;
        log->best_val = best_val;
    }
    return ae;
}

} // namespace

AeModel finetune_fpa(const AeModel& ae, const Network& fewshot_encoder, const Dataset& ds,
                     OptimizerConfig opt, int epochs, RngStream& rng, int batch_size, AeTrainLog* log) {
    return finetune_common(ae, fewshot_encoder, nullptr, ds, opt, epochs, rng, batch_size, log, false);
}

AeModel finetune_fpa_prime(const AeModel& ae, const FewShotModel& model, const Dataset& ds,
                           OptimizerConfig opt, int epochs, RngStream& rng, int batch_size,
                           AeTrainLog* log) {
    return finetune_common(ae, model.encoder, &model, ds, opt, epochs, rng, batch_size, log, true);
}

double fpa_batch_loss(const AeModel& ae, const Network& fewshot_encoder,
                      const std::vector<Tensor>& images) {
    std::vector<const Tensor*> ptrs;
    for (const auto& img : images) ptrs.push_back(&img);
    Tensor batch = stack(ptrs);
    size_t bsz = images.size();
    Tensor f = fewshot_encoder.forward(batch);
    double feat_root = std::sqrt(static_cast<double>(f.numel() / bsz));

    Tape<float> tape;
    auto x = tape.leaf(batch);
    auto recon = net_forward(tape, ae.decoder, net_forward(tape, ae.encoder, x));
    auto fhat = net_forward(tape, fewshot_encoder, recon);
    auto img_term = tape.scale(tape.sumsq(tape.sub(recon, tape.leaf(batch))),
                               0.01 / (static_cast<double>(bsz) * kImageDimRoot));
    auto feat_term = tape.scale(tape.sumsq(tape.sub(fhat, tape.leaf(f))),
                                1.0 / (static_cast<double>(bsz) * feat_root));
    return tape.val(tape.add(img_term, feat_term))[0];
}

double fpa_prime_batch_loss(const AeModel& ae, const FewShotModel& model,
                            const std::vector<Tensor>& way_features, const std::vector<Tensor>& images) {
    std::vector<const Tensor*> ptrs;
    for (const auto& img : images) ptrs.push_back(&img);
    Tensor batch = stack(ptrs);
    size_t bsz = images.size();
    Tensor f = model.encoder.forward(batch);
    double feat_root = std::sqrt(static_cast<double>(f.numel() / bsz));
    Tensor z = query_logits(model, way_features, images);

    Tape<float> tape;
    auto x = tape.leaf(batch);
    auto recon = net_forward(tape, ae.decoder, net_forward(tape, ae.encoder, x));
    auto fhat = net_forward(tape, model.encoder, recon);
    auto zhat = query_logits_graph(tape, model, way_features, recon);
    auto img_term = tape.scale(tape.sumsq(tape.sub(recon, tape.leaf(batch))),
                               0.01 / (static_cast<double>(bsz) * kImageDimRoot));
    auto feat_term = tape.scale(tape.sumsq(tape.sub(fhat, tape.leaf(f))),
                                1.0 / (static_cast<double>(bsz) * feat_root));
    double k_root = std::sqrt(static_cast<double>(way_features.size()));
    auto logit_term = tape.scale(tape.sumsq(tape.sub(zhat, tape.leaf(z))),
                                 1.0 / (static_cast<double>(bsz) * k_root));
    return tape.val(tape.add(tape.add(img_term, feat_term), logit_term))[0];
}

double ae_rmse(const AeModel& ae, const Dataset& ds, Split split) {
    auto imgs = split_images(ds, split);
    return std::sqrt(val_mse(ae, imgs));
}

double ae_feature_error(const AeModel& ae, const Network& fewshot_encoder, const Dataset& ds,
                        Split split) {
    auto imgs = split_images(ds, split);
    if (imgs.empty()) return 0;
    double acc = 0;
    size_t n = 0;
    for (size_t i = 0; i < imgs.size(); i += 64) {
        std::vector<const Tensor*> chunk(imgs.begin() + i, imgs.begin() + std::min(imgs.size(), i + 64));
        Tensor batch = stack(chunk);
        Tensor recon = ae.decoder.forward(ae.encoder.forward(batch));
        Tensor f = fewshot_encoder.forward(batch);
        Tensor fhat = fewshot_encoder.forward(recon);
        size_t bsz = chunk.size();
        size_t fd = f.numel() / bsz;
        auto fp = f.f32();
        auto fh = fhat.f32();
        for (size_t b = 0; b < bsz; ++b) {
            double ss = 0;
            for (size_t d = 0; d < fd; ++d) {
                double diff = fp[b * fd + d] - fh[b * fd + d];
                ss += diff * diff;
            }
            acc += ss / std::sqrt(static_cast<double>(fd));
            ++n;
        }
    }
    return acc / static_cast<double>(n);
}

} // namespace fssentry
