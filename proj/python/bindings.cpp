// Python bindings for the main operations: tensor I/O, dataset generation,
// few-shot training/inference, attacks, filters, detection scores and the
// experiment pipeline.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fssentry/attacks.hpp"
#include "fssentry/config.hpp"
#include "fssentry/dataset.hpp"
#include "fssentry/detection.hpp"
#include "fssentry/eval.hpp"
#include "fssentry/fewshot.hpp"
#include "fssentry/filters.hpp"
#include "fssentry/graph.hpp"

namespace py = pybind11;
using namespace fssentry;

namespace {

Tensor array_to_tensor(const py::array& arr) {
    std::vector<size_t> shape(arr.ndim());
    for (ssize_t i = 0; i < arr.ndim(); ++i) shape[i] = static_cast<size_t>(arr.shape(i));
    if (py::isinstance<py::array_t<double>>(arr)) {
        auto a = py::array_t<double, py::array::c_style | py::array::forcecast>::ensure(arr);
        auto r = a.request();
        const double* p = static_cast<const double*>(r.ptr);
        return Tensor::from_f64(shape, std::vector<double>(p, p + shape_numel(shape)));
    }
    if (py::isinstance<py::array_t<uint8_t>>(arr)) {
        auto a = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>::ensure(arr);
        auto r = a.request();
        const uint8_t* p = static_cast<const uint8_t*>(r.ptr);
        return Tensor::from_u8(shape, std::vector<uint8_t>(p, p + shape_numel(shape)));
    }
    auto a = py::array_t<float, py::array::c_style | py::array::forcecast>::ensure(arr);
    auto r = a.request();
    const float* p = static_cast<const float*>(r.ptr);
    return Tensor::from_f32(shape, std::vector<float>(p, p + shape_numel(shape)));
}

py::array tensor_to_array(const Tensor& t) {
    std::vector<ssize_t> shape(t.shape().begin(), t.shape().end());
    switch (t.dtype()) {
        case DType::f32: {
            py::array_t<float> out(shape);
            std::copy(t.f32().begin(), t.f32().end(), static_cast<float*>(out.request().ptr));
            return out;
        }
        case DType::f64: {
            py::array_t<double> out(shape);
            std::copy(t.f64().begin(), t.f64().end(), static_cast<double*>(out.request().ptr));
            return out;
        }
        case DType::u8: {
            py::array_t<uint8_t> out(shape);
            std::copy(t.u8().begin(), t.u8().end(), static_cast<uint8_t*>(out.request().ptr));
            return out;
        }
    }
    throw std::runtime_error("unreachable");
}

std::vector<Tensor> images_from(const py::iterable& images) {
    std::vector<Tensor> out;
    for (py::handle h : images) {
        Tensor t = array_to_tensor(py::cast<py::array>(h));
        out.push_back(t.dtype() == DType::f32 ? t : t.astype(DType::f32));
    }
    return out;
}

py::list images_to(const std::vector<Tensor>& images) {
    py::list out;
    for (const auto& img : images) out.append(tensor_to_array(img));
    return out;
}

std::vector<std::vector<Tensor>> support_from(const py::iterable& support) {
    std::vector<std::vector<Tensor>> out;
    for (py::handle way : support) out.push_back(images_from(py::cast<py::iterable>(way)));
    return out;
}

FilterSpec spec_from(const std::string& kind, int bitr_r, const AeModel* ae, double tvm_p,
                     double tvm_lambda, int tvm_iters, double tvm_step) {
    FilterSpec spec;
    spec.kind = filter_kind_parse(kind);
    spec.bitr_r = bitr_r;
    spec.tvm = TvmParams{tvm_p, tvm_lambda, tvm_iters, tvm_step};
    spec.ae = ae;
    return spec;
}

} // namespace

PYBIND11_MODULE(_fssentry, m) {
    m.doc() = "few-shot support-set poisoning workbench (C++ core)";

    m.def("tensor_write", [](const std::string& path, const py::array& arr) {
        tensor_write(path, array_to_tensor(arr));
    });
    m.def("tensor_read", [](const std::string& path) { return tensor_to_array(tensor_read(path)); });

    py::class_<Dataset>(m, "Dataset")
        .def_static("generate",
                    [](int n_classes, int per_class, uint64_t seed, double train, double val,
                       double test) {
                        Dataset ds = synth_generate(n_classes, per_class, seed);
                        split_classes(ds, {train, val, test}, seed);
                        return ds;
                    },
                    py::arg("n_classes") = 24, py::arg("per_class") = 40, py::arg("seed") = 42,
                    py::arg("train") = 14.0 / 24, py::arg("val") = 4.0 / 24, py::arg("test") = 6.0 / 24)
        .def_static("load", &load_dataset)
        .def("save", &save_dataset)
        .def("classes_of",
             [](const Dataset& ds, const std::string& split) { return ds.classes_of(split_parse(split)); })
        .def("image",
             [](const Dataset& ds, int cid, size_t idx) { return tensor_to_array(ds.image(cid, idx)); })
        .def("class_size", [](const Dataset& ds, int cid) { return ds.classes.at(cid).size(); })
        .def_property_readonly("generator", [](const Dataset& ds) { return ds.generator_desc; });

    py::class_<FewShotModel>(m, "FewShotModel")
        .def_static("load", &load_model)
        .def("save", &save_model)
        .def_property_readonly("head", [](const FewShotModel& m_) { return std::string(head_name(m_.head)); })
        .def("episode_logits",
             [](const FewShotModel& model, const py::iterable& support, const py::iterable& queries) {
                 return tensor_to_array(episode_logits(model, support_from(support), images_from(queries)));
             })
        .def("accuracy",
             [](const FewShotModel& model, const Dataset& ds, const std::string& split, int episodes,
                uint64_t seed) {
                 RngStream rng(seed, 0xACCull);
                 auto r = eval_accuracy(model, ds, split_parse(split), episodes, rng);
                 return py::make_tuple(r.mean, r.ci95);
             },
             py::arg("dataset"), py::arg("split") = "test", py::arg("episodes") = 100,
             py::arg("seed") = 42);

    m.def("train_fewshot",
          [](const Dataset& ds, const std::string& head, int episodes, double lr, uint64_t seed,
             int val_every, int val_episodes) {
              RngStream rng(seed, 0x0DE1ull);
              FewShotModel model = make_fewshot_model(head_parse(head), rng);
              OptimizerConfig opt;
              opt.kind = OptKind::adam;
              opt.lr = lr;
              TrainOptions topt;
              topt.val_every = val_every;
              topt.val_episodes = val_episodes;
              TrainLog log = train_fewshot(model, ds, episodes, opt, rng, topt);
              return py::make_tuple(model, log.best_val_accuracy);
          },
          py::arg("dataset"), py::arg("head") = "prototypical", py::arg("episodes") = 500,
          py::arg("lr") = 1e-3, py::arg("seed") = 42, py::arg("val_every") = 100,
          py::arg("val_episodes") = 30);

    py::class_<AdvSupportSet>(m, "AdvSupportSet")
        .def_property_readonly("target_class", [](const AdvSupportSet& s) { return s.target_class; })
        .def_property_readonly("base_ids", [](const AdvSupportSet& s) { return s.base_ids; })
        .def_property_readonly("delta", [](const AdvSupportSet& s) { return images_to(s.delta); })
        .def_property_readonly("budget_violations",
                               [](const AdvSupportSet& s) { return s.budget_violations; })
        .def("poisoned", [](const AdvSupportSet& s) { return images_to(s.poisoned()); })
        .def("delta_l2", &AdvSupportSet::delta_l2)
        .def("save", &save_adv_set);

    m.def("support_attack",
          [](const FewShotModel& model, const Dataset& ds, int target_class,
             const std::vector<size_t>& base_ids, const std::string& method, double eps, double eta,
             int iterations, double kappa, double cw_const, int n_attacked, int n_qt, uint64_t seed) {
              AttackConfig cfg;
              cfg.method = attack_parse(method);
              cfg.eps_inf = eps;
              cfg.eta = eta;
              cfg.iterations = iterations;
              cfg.kappa = kappa;
              cfg.cw_const = cw_const;
              cfg.n_attacked = n_attacked;
              cfg.k_way = model.k_way;
              cfg.n_shot = model.n_shot;
              cfg.n_qt = n_qt;
              cfg.seed = seed;
              RngStream rng(seed, 0xA77Aull);
              return run_support_attack(model, ds, target_class, base_ids, cfg, rng);
          },
          py::arg("model"), py::arg("dataset"), py::arg("target_class"), py::arg("base_ids"),
          py::arg("method") = "pgd", py::arg("eps") = 12.0 / 255, py::arg("eta") = 0.05,
          py::arg("iterations") = 75, py::arg("kappa") = 0.1, py::arg("cw_const") = 1.0,
          py::arg("n_attacked") = 5, py::arg("n_qt") = 8, py::arg("seed") = 42);

    py::class_<AeModel>(m, "AeModel")
        .def_static("load", &load_ae)
        .def("save", &save_ae)
        .def_property_readonly("stage", [](const AeModel& ae) { return ae.stage; })
        .def("apply", [](const AeModel& ae, const py::iterable& images) {
            return images_to(ae.apply(images_from(images)));
        });

    m.def("train_ae",
          [](const Dataset& ds, int epochs, double lr, uint64_t seed) {
              OptimizerConfig opt;
              opt.kind = OptKind::adam;
              opt.lr = lr;
              opt.weight_decay = 1e-4;
              opt.decay_step = 10;
              opt.gamma = 0.1;
              RngStream rng(seed, 0xAE00ull);
              return train_ae_standard(ds, opt, epochs, rng);
          },
          py::arg("dataset"), py::arg("epochs") = 10, py::arg("lr") = 1e-4, py::arg("seed") = 42);

    m.def("finetune_fpa",
          [](const AeModel& ae, const FewShotModel& model, const Dataset& ds, int epochs, double lr,
             uint64_t seed) {
              OptimizerConfig opt;
              opt.kind = OptKind::adam;
              opt.lr = lr;
              opt.weight_decay = 1e-4;
              opt.decay_step = 10;
              opt.gamma = 0.1;
              RngStream rng(seed, 0xAE01ull);
              return finetune_fpa(ae, model.encoder, ds, opt, epochs, rng);
          },
          py::arg("ae"), py::arg("model"), py::arg("dataset"), py::arg("epochs") = 5,
          py::arg("lr") = 1e-4, py::arg("seed") = 42);

    m.def("median_filter",
          [](const py::iterable& images) { return images_to(filter_feats_median(images_from(images))); });
    m.def("bitr_filter", [](const py::iterable& images, int r) {
        return images_to(filter_bitr(images_from(images), r));
    }, py::arg("images"), py::arg("r") = 6);
    m.def("noise_filter", [](const py::iterable& images, uint64_t seed) {
        RngStream rng(seed, 0x01ull);
        return images_to(filter_noise(images_from(images), rng));
    }, py::arg("images"), py::arg("seed") = 42);
    m.def("tvm_filter",
          [](const py::iterable& images, double p, double lambda_, int iters, double step,
             uint64_t seed) {
              RngStream rng(seed, 0x7F1ull);
              return images_to(filter_tvm(images_from(images), TvmParams{p, lambda_, iters, step}, rng));
          },
          py::arg("images"), py::arg("p") = 0.5, py::arg("lambda_") = 0.03, py::arg("iters") = 50,
          py::arg("step") = 0.1, py::arg("seed") = 42);

    m.def("u_adv",
          [](const FewShotModel& model, const std::string& filter, const py::iterable& context,
             const py::iterable& support_set, const AeModel* ae, int bitr_r, uint64_t seed) {
              FilterSpec spec = spec_from(filter, bitr_r, ae, 0.5, 0.03, 50, 0.1);
              RngStream rng(seed, 0xDE7ull);
              auto images = images_from(support_set);
              AuxSplit split = aux_split(images.size(), rng);
              return u_adv(model, spec, support_from(context), images, split, rng).value;
          },
          py::arg("model"), py::arg("filter"), py::arg("context"), py::arg("support_set"),
          py::arg("ae") = nullptr, py::arg("bitr_r") = 6, py::arg("seed") = 42);

    m.def("u_adv_prime",
          [](const FewShotModel& model, const std::string& filter, const py::iterable& context,
             const py::iterable& support_set, const AeModel* ae, int bitr_r, uint64_t seed) {
              FilterSpec spec = spec_from(filter, bitr_r, ae, 0.5, 0.03, 50, 0.1);
              RngStream rng(seed, 0xDE8ull);
              return u_adv_prime(model, spec, support_from(context), images_from(support_set), rng).value;
          },
          py::arg("model"), py::arg("filter"), py::arg("context"), py::arg("support_set"),
          py::arg("ae") = nullptr, py::arg("bitr_r") = 6, py::arg("seed") = 42);

    m.def("auroc",
          [](const std::vector<double>& clean, const std::vector<double>& adv, bool flag_if_above) {
              return auroc(clean, adv,
                           flag_if_above ? Direction::flag_if_above : Direction::flag_if_below);
          },
          py::arg("clean"), py::arg("adv"), py::arg("flag_if_above") = true);

    m.def("run_experiment",
          [](const std::string& config_path, const std::vector<std::string>& overrides) {
              ExperimentConfig cfg = load_experiment_config(config_path, overrides);
              EvalReport report = run_experiment(cfg);
              report_write(report, cfg.out_dir + "/report");
              py::dict out;
              out["config_hash"] = report.config_hash;
              out["baseline_accuracy"] = report.baseline_accuracy;
              out["wall_seconds"] = report.wall_seconds;
              out["report_dir"] = cfg.out_dir + "/report";
              return out;
          },
          py::arg("config_path") = "", py::arg("overrides") = std::vector<std::string>{});

    m.attr("__version__") = "0.1.0";
}
