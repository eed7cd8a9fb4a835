#include "fssentry/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fssentry/errors.hpp"

namespace fssentry {

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split split_parse(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw FormatError("unknown split name: " + s);
}

std::vector<int> Dataset::classes_of(Split s) const {
    std::vector<int> out;
    for (const auto& [cid, sp] : split)
        if (sp == s) out.push_back(cid);
    std::sort(out.begin(), out.end());
    return out;
}

const Tensor& Dataset::image(int class_id, size_t index) const {
    auto it = classes.find(class_id);
    if (it == classes.end()) throw SamplingError("unknown class id " + std::to_string(class_id));
    if (index >= it->second.size())
        throw SamplingError("sample index out of range for class " + std::to_string(class_id));
    return it->second[index];
}

namespace {

// hue in [0,1) -> rgb with s=0.85, v=1
std::array<float, 3> hue_to_rgb(double hue) {
    double s = 0.85, v = 1.0;
    double h6 = hue * 6.0;
    int i = static_cast<int>(h6) % 6;
    double f = h6 - std::floor(h6);
    double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
    double r, g, b;
    switch (i) {
        case 0: r = v, g = t, b = p; break;
        case 1: r = q, g = v, b = p; break;
        case 2: r = p, g = v, b = t; break;
        case 3: r = p, g = q, b = v; break;
        case 4: r = t, g = p, b = v; break;
        default: r = v, g = p, b = q; break;
    }
    return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

struct ClassParams {
    int hue_idx;    // 12 hues
    int orient_idx; // 0,45,90,135 degrees
    int freq;       // stripes per image: 2,3,4
};

constexpr int kHues = 12;
constexpr int kOrients = 4;
constexpr int kFreqs = 3;

Tensor render_sample(const ClassParams& cp, RngStream& rng) {
    auto rgb = hue_to_rgb(cp.hue_idx / static_cast<double>(kHues));
    double theta = cp.orient_idx * M_PI / 4.0;
    double ct = std::cos(theta), st = std::sin(theta);
    int dx = static_cast<int>(rng.uniform_int(5)) - 2;
    int dy = static_cast<int>(rng.uniform_int(5)) - 2;

    Tensor img = Tensor::zeros({kImageC, kImageH, kImageW});
    auto px = img.f32();
    for (size_t y = 0; y < kImageH; ++y) {
        for (size_t x = 0; x < kImageW; ++x) {
            // circular translation keeps the stripe pattern intact
            int sx = (static_cast<int>(x) + dx + static_cast<int>(kImageW)) % static_cast<int>(kImageW);
            int sy = (static_cast<int>(y) + dy + static_cast<int>(kImageH)) % static_cast<int>(kImageH);
            double u = sx * ct + sy * st;
            double stripe = 0.5 + 0.5 * std::sin(2.0 * M_PI * cp.freq * u / static_cast<double>(kImageW));
            double shade = 0.25 + 0.75 * stripe;
            for (size_t c = 0; c < kImageC; ++c)
                px[(c * kImageH + y) * kImageW + x] = rgb[c] * static_cast<float>(shade);
        }
    }
    for (auto& v : px) {
        double noisy = v + 0.05 * rng.normal();
        v = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
    }
    return img;
}

} // namespace

Dataset synth_generate(int n_classes, int per_class, uint64_t seed) {
    if (n_classes < 8) throw ConfigError("synth_generate: need at least 8 classes");
    if (per_class < 20) throw ConfigError("synth_generate: need at least 20 samples per class");
    int max_tuples = kHues * kOrients * kFreqs;
    if (n_classes > max_tuples)
        throw ConfigError("synth_generate: parameter space exhausted (" + std::to_string(n_classes) +
                          " classes > " + std::to_string(max_tuples) + " distinct parameter tuples)");

    RngStream base(seed, 0xDA7A5E7ull);
    std::vector<int> tuple_ids(max_tuples);
    for (int i = 0; i < max_tuples; ++i) tuple_ids[i] = i;
    base.shuffle(tuple_ids);

    Dataset ds;
    {
        std::ostringstream os;
        os << "synth-stripes n_classes=" << n_classes << " per_class=" << per_class << " seed=" << seed;
        ds.generator_desc = os.str();
    }
    for (int c = 0; c < n_classes; ++c) {
        int tid = tuple_ids[c];
        ClassParams cp{tid / (kOrients * kFreqs), (tid / kFreqs) % kOrients, 2 + tid % kFreqs};
        RngStream crng = base.fork(static_cast<uint64_t>(c) + 1);
        std::vector<Tensor> images;
        images.reserve(per_class);
        for (int i = 0; i < per_class; ++i) images.push_back(render_sample(cp, crng));
        ds.classes.emplace(c, std::move(images));
    }
    return ds;
}

void split_classes(Dataset& ds, const std::array<double, 3>& ratios, uint64_t seed) {
    double sum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split_classes: ratios must sum to 1");

    std::vector<int> ids;
    for (const auto& [cid, _] : ds.classes) ids.push_back(cid);
    std::sort(ids.begin(), ids.end());
    RngStream rng(seed, 0x5EC7104ull);
    rng.shuffle(ids);

    size_t n = ids.size();
    std::array<size_t, 3> counts{};
    std::array<double, 3> frac{};
    size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        double exact = ratios[i] * static_cast<double>(n);
        counts[i] = static_cast<size_t>(std::floor(exact));
        frac[i] = exact - std::floor(exact);
        assigned += counts[i];
    }
    // largest remainder gets the leftovers
    while (assigned < n) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (frac[i] > frac[best]) best = i;
        ++counts[best];
        frac[best] = -1;
        ++assigned;
    }
    if (counts[0] == 0 || counts[1] == 0 || counts[2] == 0)
        throw ConfigError("split_classes: every split must be non-empty");

    ds.split.clear();
    size_t k = 0;
    for (int s = 0; s < 3; ++s)
        for (size_t i = 0; i < counts[s]; ++i) ds.split[ids[k++]] = static_cast<Split>(s);
}

Episode sample_episode(const Dataset& ds, Split split, int k_way, int n_shot, int n_query,
                       RngStream& rng) {
    if (k_way <= 0 || n_shot <= 0 || n_query < 0) throw ConfigError("sample_episode: bad K/N/N_q");
    if (n_query % k_way != 0)
        throw ConfigError("sample_episode: n_query must be divisible by k_way");
    std::vector<int> pool = ds.classes_of(split);
    if (static_cast<int>(pool.size()) < k_way)
        throw SamplingError("sample_episode: split has " + std::to_string(pool.size()) + " classes, need " +
                            std::to_string(k_way));
    int per_way_q = n_query / k_way;

    auto picks = rng.sample_without_replacement(pool.size(), static_cast<size_t>(k_way));
    Episode ep;
    ep.k_way = k_way;
    ep.n_shot = n_shot;
    for (size_t w = 0; w < picks.size(); ++w) {
        int cid = pool[picks[w]];
        const auto& imgs = ds.classes.at(cid);
        size_t need = static_cast<size_t>(n_shot + per_way_q);
        if (imgs.size() < need)
            throw SamplingError("sample_episode: class " + std::to_string(cid) + " has " +
                                std::to_string(imgs.size()) + " samples, need " + std::to_string(need));
        auto idx = rng.sample_without_replacement(imgs.size(), need);
        ep.way_classes.push_back(cid);
        std::vector<Tensor> sup;
        std::vector<size_t> sup_ids;
        for (int i = 0; i < n_shot; ++i) {
            sup.push_back(imgs[idx[i]]);
            sup_ids.push_back(idx[i]);
        }
        ep.support.push_back(std::move(sup));
        ep.support_ids.push_back(std::move(sup_ids));
        for (int i = 0; i < per_way_q; ++i) {
            ep.query.push_back(imgs[idx[n_shot + i]]);
            ep.query_way.push_back(static_cast<int>(w));
            ep.query_ids.push_back(idx[n_shot + i]);
        }
    }
    return ep;
}

AttackEpisode sample_attack_episode(const Dataset& ds, int target_class,
                                    const std::vector<size_t>& fixed_support_ids, int k_way,
                                    int n_shot, int n_qt, RngStream& rng) {
    auto sp_it = ds.split.find(target_class);
    if (sp_it == ds.split.end()) throw SamplingError("sample_attack_episode: target class has no split");
    std::vector<int> pool = ds.classes_of(sp_it->second);
    std::vector<int> others;
    for (int cid : pool)
        if (cid != target_class) others.push_back(cid);
    if (static_cast<int>(others.size()) < k_way - 1)
        throw SamplingError("sample_attack_episode: not enough non-target classes");

    AttackEpisode ae;
    ae.target_class = target_class;
    auto picks = rng.sample_without_replacement(others.size(), static_cast<size_t>(k_way - 1));
    for (size_t p : picks) {
        int cid = others[p];
        const auto& imgs = ds.classes.at(cid);
        if (imgs.size() < static_cast<size_t>(n_shot + 1))
            throw SamplingError("sample_attack_episode: class " + std::to_string(cid) + " too small");
        auto idx = rng.sample_without_replacement(imgs.size(), static_cast<size_t>(n_shot + 1));
        ae.other_classes.push_back(cid);
        std::vector<Tensor> sup;
        std::vector<size_t> ids;
        for (int i = 0; i < n_shot; ++i) {
            sup.push_back(imgs[idx[i]]);
            ids.push_back(idx[i]);
        }
        ae.other_support.push_back(std::move(sup));
        ae.other_support_ids.push_back(std::move(ids));
        ae.other_query.push_back(imgs[idx[n_shot]]);
        ae.other_query_ids.push_back(idx[n_shot]);
    }

    const auto& timgs = ds.classes.at(target_class);
    std::vector<size_t> eligible;
    for (size_t i = 0; i < timgs.size(); ++i)
        if (std::find(fixed_support_ids.begin(), fixed_support_ids.end(), i) == fixed_support_ids.end())
            eligible.push_back(i);
    if (eligible.size() < static_cast<size_t>(n_qt))
        throw SamplingError("sample_attack_episode: class " + std::to_string(target_class) + " has " +
                            std::to_string(eligible.size()) + " non-support samples, need " +
                            std::to_string(n_qt));
    auto qidx = rng.sample_without_replacement(eligible.size(), static_cast<size_t>(n_qt));
    for (size_t qi : qidx) {
        ae.target_queries.push_back(timgs[eligible[qi]]);
        ae.target_query_ids.push_back(eligible[qi]);
    }
    return ae;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream mf(dir + "/manifest.txt");
    if (!mf) throw IoError("cannot write dataset manifest in " + dir);
    mf << "# generator: " << ds.generator_desc << "\n";
    char buf[64];
    for (const auto& [cid, imgs] : ds.classes) {
        std::snprintf(buf, sizeof(buf), "class_%04d", cid);
        fs::create_directories(dir + "/" + buf);
        Split sp = ds.split.count(cid) ? ds.split.at(cid) : Split::train;
        for (size_t i = 0; i < imgs.size(); ++i) {
            char name[64];
            std::snprintf(name, sizeof(name), "%s/img_%04zu.fstn", buf, i);
            tensor_write(dir + "/" + name, imgs[i]);
            mf << cid << "," << split_name(sp) << "," << name << "\n";
        }
    }
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.txt");
    if (!mf) throw IoError("cannot read dataset manifest " + dir + "/manifest.txt");
    Dataset ds;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (line.rfind("# generator: ", 0) == 0) ds.generator_desc = line.substr(13);
            continue;
        }
        auto c1 = line.find(',');
        auto c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos)
            throw FormatError("dataset manifest line: " + line);
        int cid = std::stoi(line.substr(0, c1));
        Split sp = split_parse(line.substr(c1 + 1, c2 - c1 - 1));
        std::string rel = line.substr(c2 + 1);
        Tensor img = tensor_read(dir + "/" + rel);
        if (img.dtype() == DType::u8) {
            // uint8 images rescale to [0,1] floats on load
            Tensor f = Tensor::zeros(img.shape());
            for (size_t i = 0; i < img.numel(); ++i) f.set(i, img.get(i) / 255.0);
            img = std::move(f);
        } else if (img.dtype() == DType::f64) {
            img = img.astype(DType::f32);
        }
        if (img.shape() != std::vector<size_t>{kImageC, kImageH, kImageW})
            throw FormatError("dataset image " + rel + " has shape " + shape_str(img.shape()));
        ds.classes[cid].push_back(std::move(img));
        ds.split[cid] = sp;
    }
    if (ds.classes.empty()) throw FormatError("dataset manifest is empty");
    return ds;
}

} // namespace fssentry
