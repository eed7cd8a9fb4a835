#include "fssentry/net.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fssentry/errors.hpp"
#include "fssentry/kernels.hpp"

namespace fssentry {

LayerSpec LayerSpec::conv2d(size_t in_ch, size_t out_ch, size_t k) {
    return LayerSpec{LayerKind::conv, k, k / 2, in_ch, out_ch, ActKind::relu};
}
LayerSpec LayerSpec::fully_connected(size_t in_dim, size_t out_dim) {
    return LayerSpec{LayerKind::fc, 0, 0, in_dim, out_dim, ActKind::relu};
}
LayerSpec LayerSpec::activation(ActKind a) { return LayerSpec{LayerKind::act, 0, 0, 0, 0, a}; }
LayerSpec LayerSpec::downsample2() { return LayerSpec{LayerKind::down2, 0, 0, 0, 0, ActKind::relu}; }
LayerSpec LayerSpec::upsample2() { return LayerSpec{LayerKind::up2, 0, 0, 0, 0, ActKind::relu}; }

std::string LayerSpec::to_string() const {
    std::ostringstream os;
    switch (kind) {
        case LayerKind::conv: os << "conv k=" << k << " pad=" << pad << " in=" << in << " out=" << out; break;
        case LayerKind::fc: os << "fc in=" << in << " out=" << out; break;
        case LayerKind::act: os << "act " << (act == ActKind::relu ? "relu" : "sigmoid"); break;
        case LayerKind::down2: os << "down2"; break;
        case LayerKind::up2: os << "up2"; break;
    }
    return os.str();
}

LayerSpec LayerSpec::parse(const std::string& line) {
    std::istringstream is(line);
    std::string head;
    is >> head;
    auto kv = [&](const std::string& tok) -> size_t {
        auto eq = tok.find('=');
        if (eq == std::string::npos) throw FormatError("layer spec token: " + tok);
        return static_cast<size_t>(std::stoull(tok.substr(eq + 1)));
    };
    LayerSpec s{};
    if (head == "conv") {
        s.kind = LayerKind::conv;
        std::string tok;
        while (is >> tok) {
            if (tok.rfind("k=", 0) == 0) s.k = kv(tok);
            else if (tok.rfind("pad=", 0) == 0) s.pad = kv(tok);
            else if (tok.rfind("in=", 0) == 0) s.in = kv(tok);
            else if (tok.rfind("out=", 0) == 0) s.out = kv(tok);
        }
    } else if (head == "fc") {
        s.kind = LayerKind::fc;
        std::string tok;
        while (is >> tok) {
            if (tok.rfind("in=", 0) == 0) s.in = kv(tok);
            else if (tok.rfind("out=", 0) == 0) s.out = kv(tok);
        }
    } else if (head == "act") {
        s.kind = LayerKind::act;
        std::string a;
        is >> a;
        if (a == "relu") s.act = ActKind::relu;
        else if (a == "sigmoid") s.act = ActKind::sigmoid;
        else throw FormatError("unknown activation: " + a);
    } else if (head == "down2") {
        s.kind = LayerKind::down2;
    } else if (head == "up2") {
        s.kind = LayerKind::up2;
    } else {
        throw FormatError("unknown layer kind: " + head);
    }
    return s;
}

void Network::init_params(RngStream& rng) {
    params.assign(layers.size(), {});
    for (size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        if (l.kind == LayerKind::conv) {
            size_t fan_in = l.in * l.k * l.k;
            float std = std::sqrt(2.0f / static_cast<float>(fan_in));
            Tensor w = Tensor::zeros({l.out, l.in, l.k, l.k});
            for (auto& v : w.f32()) v = static_cast<float>(rng.normal()) * std;
            Tensor b = Tensor::zeros({l.out});
            params[i] = {std::move(w), std::move(b)};
        } else if (l.kind == LayerKind::fc) {
            float std = std::sqrt(2.0f / static_cast<float>(l.in));
            Tensor w = Tensor::zeros({l.out, l.in});
            for (auto& v : w.f32()) v = static_cast<float>(rng.normal()) * std;
            Tensor b = Tensor::zeros({l.out});
            params[i] = {std::move(w), std::move(b)};
        }
    }
}

std::vector<size_t> Network::out_shape(const std::vector<size_t>& in_shape) const {
    std::vector<size_t> s = in_shape;
    for (const LayerSpec& l : layers) {
        switch (l.kind) {
            case LayerKind::conv: {
                if (s.size() != 4)
                    throw ShapeError("conv expects NxCxHxW, got " + shape_str(s));
                if (s[1] != l.in)
                    throw ShapeError("conv expects " + std::to_string(l.in) + " input channels, got " +
                                     std::to_string(s[1]));
                if (s[2] + 2 * l.pad < l.k || s[3] + 2 * l.pad < l.k)
                    throw ShapeError("conv kernel larger than padded input " + shape_str(s));
                s = {s[0], l.out, s[2] + 2 * l.pad - l.k + 1, s[3] + 2 * l.pad - l.k + 1};
                break;
            }
            case LayerKind::fc: {
                size_t per = 1;
                for (size_t i = 1; i < s.size(); ++i) per *= s[i];
                if (per != l.in)
                    throw ShapeError("fc expects " + std::to_string(l.in) + " inputs per sample, got " +
                                     std::to_string(per) + " from " + shape_str(s));
                s = {s[0], l.out};
                break;
            }
            case LayerKind::act:
                break;
            case LayerKind::down2:
                if (s.size() != 4) throw ShapeError("down2 expects NxCxHxW, got " + shape_str(s));
                if (s[2] % 2 || s[3] % 2)
                    throw ShapeError("down2 needs even spatial dims, got " + shape_str(s));
                s = {s[0], s[1], s[2] / 2, s[3] / 2};
                break;
            case LayerKind::up2:
                if (s.size() != 4) throw ShapeError("up2 expects NxCxHxW, got " + shape_str(s));
                s = {s[0], s[1], s[2] * 2, s[3] * 2};
                break;
        }
    }
    return s;
}

Tensor Network::forward(const Tensor& batch) const {
    namespace K = kernels;
    std::vector<size_t> s = batch.shape();
    Tensor cur = batch.dtype() == DType::f32 ? batch : batch.astype(DType::f32);
    for (size_t li = 0; li < layers.size(); ++li) {
        const LayerSpec& l = layers[li];
        switch (l.kind) {
            case LayerKind::conv: {
                if (s.size() != 4 || s[1] != l.in)
                    throw ShapeError("conv layer " + std::to_string(li) + ": expected Nx" +
                                     std::to_string(l.in) + "xHxW, got " + shape_str(s));
                std::vector<size_t> os = {s[0], l.out, s[2] + 2 * l.pad - l.k + 1, s[3] + 2 * l.pad - l.k + 1};
                Tensor out = Tensor::zeros(os);
                K::conv2d_fwd(cur.f32().data(), params[li][0].f32().data(), params[li][1].f32().data(),
                              out.f32().data(), s[0], l.in, s[2], s[3], l.out, l.k, l.pad);
                cur = std::move(out);
                s = os;
                break;
            }
            case LayerKind::fc: {
                size_t per = cur.numel() / s[0];
                if (per != l.in)
                    throw ShapeError("fc layer " + std::to_string(li) + ": expected " + std::to_string(l.in) +
                                     " inputs per sample, got " + std::to_string(per));
                std::vector<size_t> os = {s[0], l.out};
                Tensor out = Tensor::zeros(os);
                K::fc_fwd(cur.f32().data(), params[li][0].f32().data(), params[li][1].f32().data(),
                          out.f32().data(), s[0], l.in, l.out);
                cur = std::move(out);
                s = os;
                break;
            }
            case LayerKind::act: {
                Tensor out = Tensor::zeros(s);
                if (l.act == ActKind::relu)
                    K::relu_fwd(cur.f32().data(), out.f32().data(), cur.numel());
                else
                    K::sigmoid_fwd(cur.f32().data(), out.f32().data(), cur.numel());
                cur = std::move(out);
                break;
            }
            case LayerKind::down2: {
                if (s.size() != 4 || s[2] % 2 || s[3] % 2)
                    throw ShapeError("down2 layer " + std::to_string(li) + ": bad shape " + shape_str(s));
                std::vector<size_t> os = {s[0], s[1], s[2] / 2, s[3] / 2};
                Tensor out = Tensor::zeros(os);
                K::avgpool2_fwd(cur.f32().data(), out.f32().data(), s[0] * s[1], s[2], s[3]);
                cur = std::move(out);
                s = os;
                break;
            }
            case LayerKind::up2: {
                if (s.size() != 4)
                    throw ShapeError("up2 layer " + std::to_string(li) + ": bad shape " + shape_str(s));
                std::vector<size_t> os = {s[0], s[1], s[2] * 2, s[3] * 2};
                Tensor out = Tensor::zeros(os);
                K::upsample2_fwd(cur.f32().data(), out.f32().data(), s[0] * s[1], s[2], s[3]);
                cur = std::move(out);
                s = os;
                break;
            }
        }
    }
    return cur;
}

size_t Network::param_count() const {
    size_t n = 0;
    for (const auto& ps : params)
        for (const auto& p : ps) n += p.numel();
    return n;
}

std::vector<Tensor*> Network::param_list() {
    std::vector<Tensor*> out;
    for (auto& ps : params)
        for (auto& p : ps) out.push_back(&p);
    return out;
}

std::vector<const Tensor*> Network::param_list() const {
    std::vector<const Tensor*> out;
    for (const auto& ps : params)
        for (const auto& p : ps) out.push_back(&p);
    return out;
}

Network make_desk_encoder(RngStream& rng) {
    Network net;
    net.topology = "encoder";
    net.layers = {
        LayerSpec::conv2d(3, 16, 3),  LayerSpec::activation(ActKind::relu), LayerSpec::downsample2(),
        LayerSpec::conv2d(16, 32, 3), LayerSpec::activation(ActKind::relu), LayerSpec::downsample2(),
        LayerSpec::conv2d(32, 64, 3), LayerSpec::activation(ActKind::relu), LayerSpec::downsample2(),
    };
    net.init_params(rng);
    return net;
}

Network make_desk_decoder(RngStream& rng) {
    Network net;
    net.topology = "decoder";
    net.layers = {
        LayerSpec::upsample2(), LayerSpec::conv2d(64, 32, 3), LayerSpec::activation(ActKind::relu),
        LayerSpec::upsample2(), LayerSpec::conv2d(32, 16, 3), LayerSpec::activation(ActKind::relu),
        LayerSpec::upsample2(), LayerSpec::conv2d(16, 3, 3),  LayerSpec::activation(ActKind::sigmoid),
    };
    net.init_params(rng);
    return net;
}

Network make_relation_head(size_t feat_dim, size_t hidden, RngStream& rng) {
    Network net;
    net.topology = "relation_head";
    net.layers = {
        LayerSpec::fully_connected(2 * feat_dim, hidden),
        LayerSpec::activation(ActKind::relu),
        LayerSpec::fully_connected(hidden, 1),
    };
    net.init_params(rng);
    return net;
}

void save_network(const Network& net, const std::string& dir, const std::string& prefix) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream mf(dir + "/" + prefix + "_layers.txt");
    if (!mf) throw IoError("cannot write network manifest in " + dir);
    mf << "topology " << net.topology << "\n";
    for (const auto& l : net.layers) mf << l.to_string() << "\n";
    for (size_t i = 0; i < net.layers.size(); ++i) {
        for (size_t j = 0; j < net.params[i].size(); ++j) {
            std::string name = dir + "/" + prefix + "_p" + std::to_string(i) + "_" + std::to_string(j) + ".fstn";
            tensor_write(name, net.params[i][j]);
        }
    }
}

Network load_network(const std::string& dir, const std::string& prefix) {
    std::ifstream mf(dir + "/" + prefix + "_layers.txt");
    if (!mf) throw IoError("cannot read network manifest " + dir + "/" + prefix + "_layers.txt");
    Network net;
    std::string line;
    if (!std::getline(mf, line) || line.rfind("topology ", 0) != 0)
        throw FormatError("network manifest missing topology line");
    net.topology = line.substr(9);
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        net.layers.push_back(LayerSpec::parse(line));
    }
    net.params.assign(net.layers.size(), {});
    for (size_t i = 0; i < net.layers.size(); ++i) {
        LayerKind k = net.layers[i].kind;
        size_t nparams = (k == LayerKind::conv || k == LayerKind::fc) ? 2 : 0;
        for (size_t j = 0; j < nparams; ++j) {
            std::string name = dir + "/" + prefix + "_p" + std::to_string(i) + "_" + std::to_string(j) + ".fstn";
            net.params[i].push_back(tensor_read(name));
        }
    }
    return net;
}

} // namespace fssentry
