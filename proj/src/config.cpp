#include "fssentry/config.hpp"

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "fssentry/errors.hpp"

namespace fssentry {

bool TomlTable::has(const std::string& section, const std::string& key) const {
    auto s = sections.find(section);
    return s != sections.end() && s->second.count(key) > 0;
}

const TomlValue& TomlTable::at(const std::string& section, const std::string& key) const {
    auto s = sections.find(section);
    if (s == sections.end()) throw ConfigError("missing config section [" + section + "]");
    auto k = s->second.find(key);
    if (k == s->second.end()) throw ConfigError("missing config key " + section + "." + key);
    return k->second;
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

// strips an unquoted trailing comment
std::string strip_comment(const std::string& line) {
    bool in_str = false;
    for (size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_str = !in_str;
        if (line[i] == '#' && !in_str) return line.substr(0, i);
    }
    return line;
}

std::vector<std::string> split_array_items(const std::string& body) {
    std::vector<std::string> out;
    std::string cur;
    bool in_str = false;
    for (char c : body) {
        if (c == '"') in_str = !in_str;
        if (c == ',' && !in_str) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    std::string last = trim(cur);
    if (!last.empty()) out.push_back(last);
    return out;
}

} // namespace

TomlValue toml_scalar_parse(const std::string& token) {
    TomlValue v;
    std::string t = trim(token);
    if (t.empty()) throw FormatError("toml: empty value");
    if (t.front() == '[') {
        if (t.back() != ']') throw FormatError("toml: unterminated array: " + t);
        v.kind = TomlValue::Kind::array;
        for (const auto& item : split_array_items(t.substr(1, t.size() - 2)))
            v.items.push_back(toml_scalar_parse(item));
        return v;
    }
    if (t.front() == '"') {
        if (t.size() < 2 || t.back() != '"') throw FormatError("toml: unterminated string: " + t);
        v.kind = TomlValue::Kind::string;
        v.str = t.substr(1, t.size() - 2);
        return v;
    }
    if (t == "true" || t == "false") {
        v.kind = TomlValue::Kind::boolean;
        v.boolean = t == "true";
        return v;
    }
    // number; fractions like 12/255 are accepted for attack strengths
    try {
        v.kind = TomlValue::Kind::number;
        v.num = parse_fraction(t);
        return v;
    } catch (const std::exception&) {
        throw FormatError("toml: cannot parse value: " + t);
    }
}

TomlTable toml_parse(const std::string& text) {
    TomlTable table;
    std::istringstream is(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw FormatError("toml line " + std::to_string(lineno) + ": bad section header");
            section = trim(line.substr(1, line.size() - 2));
            table.sections[section];
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("toml line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        table.sections[section][key] = toml_scalar_parse(val);
    }
    return table;
}

TomlTable toml_parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return toml_parse(text);
}

double parse_fraction(const std::string& s) {
    std::string t = trim(s);
    auto slash = t.find('/');
    size_t pos = 0;
    if (slash != std::string::npos) {
        double a = std::stod(t.substr(0, slash), &pos);
        std::string denom = trim(t.substr(slash + 1));
        size_t pos2 = 0;
        double b = std::stod(denom, &pos2);
        if (pos2 != denom.size() || b == 0) throw FormatError("bad fraction: " + s);
        return a / b;
    }
    double v = std::stod(t, &pos);
    if (pos != t.size()) throw FormatError("bad number: " + s);
    return v;
}

namespace {

double num_at(const TomlTable& t, const std::string& sec, const std::string& key, double fallback) {
    if (!t.has(sec, key)) return fallback;
    const auto& v = t.at(sec, key);
    if (v.kind != TomlValue::Kind::number) throw ConfigError(sec + "." + key + " must be a number");
    return v.num;
}

std::string str_at(const TomlTable& t, const std::string& sec, const std::string& key,
                   const std::string& fallback) {
    if (!t.has(sec, key)) return fallback;
    const auto& v = t.at(sec, key);
    if (v.kind != TomlValue::Kind::string) throw ConfigError(sec + "." + key + " must be a string");
    return v.str;
}

bool bool_at(const TomlTable& t, const std::string& sec, const std::string& key, bool fallback) {
    if (!t.has(sec, key)) return fallback;
    const auto& v = t.at(sec, key);
    if (v.kind != TomlValue::Kind::boolean) throw ConfigError(sec + "." + key + " must be a boolean");
    return v.boolean;
}

std::vector<double> nums_at(const TomlTable& t, const std::string& sec, const std::string& key,
                            std::vector<double> fallback) {
    if (!t.has(sec, key)) return fallback;
    const auto& v = t.at(sec, key);
    if (v.kind != TomlValue::Kind::array) throw ConfigError(sec + "." + key + " must be an array");
    std::vector<double> out;
    for (const auto& item : v.items) {
        if (item.kind != TomlValue::Kind::number)
            throw ConfigError(sec + "." + key + " must hold numbers");
        out.push_back(item.num);
    }
    return out;
}

std::vector<std::string> strs_at(const TomlTable& t, const std::string& sec, const std::string& key,
                                 std::vector<std::string> fallback) {
    if (!t.has(sec, key)) return fallback;
    const auto& v = t.at(sec, key);
    if (v.kind != TomlValue::Kind::array) throw ConfigError(sec + "." + key + " must be an array");
    std::vector<std::string> out;
    for (const auto& item : v.items) {
        if (item.kind != TomlValue::Kind::string)
            throw ConfigError(sec + "." + key + " must hold strings");
        out.push_back(item.str);
    }
    return out;
}

} // namespace

void ExperimentConfig::apply_toml(const TomlTable& t) {
    master_seed = static_cast<uint64_t>(num_at(t, "", "master_seed", static_cast<double>(master_seed)));
    threads = static_cast<int>(num_at(t, "", "threads", threads));
    out_dir = str_at(t, "output", "dir", out_dir);

    n_classes = static_cast<int>(num_at(t, "dataset", "n_classes", n_classes));
    per_class = static_cast<int>(num_at(t, "dataset", "per_class", per_class));
    data_dir = str_at(t, "dataset", "dir", data_dir);
    auto r = nums_at(t, "dataset", "ratios", {ratios[0], ratios[1], ratios[2]});
    if (r.size() != 3) throw ConfigError("dataset.ratios must have 3 entries");
    ratios = {r[0], r[1], r[2]};

    head = str_at(t, "model", "head", head);
    k_way = static_cast<int>(num_at(t, "model", "k_way", k_way));
    n_shot = static_cast<int>(num_at(t, "model", "n_shot", n_shot));
    n_query = static_cast<int>(num_at(t, "model", "n_query", n_query));
    episodes = static_cast<int>(num_at(t, "model", "episodes", episodes));
    lr = num_at(t, "model", "lr", lr);
    weight_decay = num_at(t, "model", "weight_decay", weight_decay);
    val_every = static_cast<int>(num_at(t, "model", "val_every", val_every));
    val_episodes = static_cast<int>(num_at(t, "model", "val_episodes", val_episodes));

    ae_epochs = static_cast<int>(num_at(t, "ae", "epochs", ae_epochs));
    ae_lr = num_at(t, "ae", "lr", ae_lr);
    ae_weight_decay = num_at(t, "ae", "weight_decay", ae_weight_decay);
    ae_decay_step = static_cast<int>(num_at(t, "ae", "decay_step", ae_decay_step));
    ae_gamma = num_at(t, "ae", "gamma", ae_gamma);
    ae_batch = static_cast<int>(num_at(t, "ae", "batch", ae_batch));
    fpa_epochs = static_cast<int>(num_at(t, "ae", "fpa_epochs", fpa_epochs));
    train_fpa_prime_ae = bool_at(t, "ae", "fpa_prime", train_fpa_prime_ae);
    fpa_prime_epochs = static_cast<int>(num_at(t, "ae", "fpa_prime_epochs", fpa_prime_epochs));

    methods = strs_at(t, "attack", "methods", methods);
    pgd_eps = nums_at(t, "attack", "pgd_eps", pgd_eps);
    pgd_eta = num_at(t, "attack", "pgd_eta", pgd_eta);
    pgd_iters = static_cast<int>(num_at(t, "attack", "pgd_iters", pgd_iters));
    cw_kappa = nums_at(t, "attack", "cw_kappa", cw_kappa);
    cw_eta = nums_at(t, "attack", "cw_eta", cw_eta);
    cw_iters = static_cast<int>(num_at(t, "attack", "cw_iters", cw_iters));
    cw_const = num_at(t, "attack", "cw_const", cw_const);
    n_attacked = static_cast<int>(num_at(t, "attack", "n_attacked", n_attacked));
    n_qt = static_cast<int>(num_at(t, "attack", "n_qt", n_qt));
    seeds = static_cast<int>(num_at(t, "attack", "seeds", seeds));
    sets_per_seed = static_cast<int>(num_at(t, "attack", "sets_per_seed", sets_per_seed));
    classes = str_at(t, "attack", "classes", classes);

    filters = strs_at(t, "filters", "kinds", filters);
    bitr_r = static_cast<int>(num_at(t, "filters", "bitr_r", bitr_r));
    tvm.p = num_at(t, "filters", "tvm_p", tvm.p);
    tvm.lambda = num_at(t, "filters", "tvm_lambda", tvm.lambda);
    tvm.iters = static_cast<int>(num_at(t, "filters", "tvm_iters", tvm.iters));
    tvm.step = num_at(t, "filters", "tvm_step", tvm.step);

    statistics = strs_at(t, "detection", "statistics", statistics);
    averaged_u_adv = bool_at(t, "detection", "averaged", averaged_u_adv);
    odin.temperature = num_at(t, "detection", "odin_temperature", odin.temperature);
    odin.eps = num_at(t, "detection", "odin_eps", odin.eps);
    iforest_subsample = static_cast<int>(num_at(t, "detection", "iforest_subsample", iforest_subsample));
    {
        std::vector<double> grid;
        for (int v : iforest_tree_grid) grid.push_back(v);
        grid = nums_at(t, "detection", "iforest_trees", grid);
        iforest_tree_grid.clear();
        for (double v : grid) iforest_tree_grid.push_back(static_cast<int>(v));
    }
    baseline_val_fraction = num_at(t, "detection", "val_fraction", baseline_val_fraction);

    asr_episodes = static_cast<int>(num_at(t, "eval", "asr_episodes", asr_episodes));
    eval_episodes = static_cast<int>(num_at(t, "eval", "eval_episodes", eval_episodes));
    ablation_single_sample = bool_at(t, "eval", "ablation_single_sample", ablation_single_sample);
}

void ExperimentConfig::apply_override(const std::string& dotted_key, const std::string& value) {
    auto dot = dotted_key.find('.');
    std::string section = dot == std::string::npos ? "" : dotted_key.substr(0, dot);
    std::string key = dot == std::string::npos ? dotted_key : dotted_key.substr(dot + 1);
    TomlTable t;
    t.sections[section][key] = toml_scalar_parse(value);
    apply_toml(t);
}

std::string ExperimentConfig::canonical() const {
    std::ostringstream os;
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    os << "master_seed=" << master_seed << "\n";
    os << "dataset=" << n_classes << "," << per_class << "," << num(ratios[0]) << "," << num(ratios[1])
       << "," << num(ratios[2]) << "," << data_dir << "\n";
    os << "model=" << head << "," << k_way << "," << n_shot << "," << n_query << "," << episodes << ","
       << num(lr) << "," << num(weight_decay) << "," << val_every << "," << val_episodes << "\n";
    os << "ae=" << ae_epochs << "," << num(ae_lr) << "," << num(ae_weight_decay) << "," << ae_decay_step
       << "," << num(ae_gamma) << "," << ae_batch << "," << fpa_epochs << "," << train_fpa_prime_ae
       << "," << fpa_prime_epochs << "\n";
    os << "attack_methods=";
    for (const auto& m : methods) os << m << ";";
    os << "\npgd=";
    for (double e : pgd_eps) os << num(e) << ";";
    os << num(pgd_eta) << "," << pgd_iters << "\n";
    os << "cw=";
    for (size_t i = 0; i < cw_kappa.size(); ++i) os << num(cw_kappa[i]) << "/" << num(cw_eta[i]) << ";";
    os << cw_iters << "," << num(cw_const) << "\n";
    os << "attack=" << n_attacked << "," << n_qt << "," << seeds << "," << sets_per_seed << ","
       << classes << "\n";
    os << "filters=";
    for (const auto& f : filters) os << f << ";";
    os << bitr_r << "," << num(tvm.p) << "," << num(tvm.lambda) << "," << tvm.iters << ","
       << num(tvm.step) << "\n";
    os << "detection=";
    for (const auto& s : statistics) os << s << ";";
    os << averaged_u_adv << "," << num(odin.temperature) << "," << num(odin.eps) << ","
       << iforest_subsample << ",";
    for (int v : iforest_tree_grid) os << v << ";";
    os << num(baseline_val_fraction) << "\n";
    os << "eval=" << asr_episodes << "," << eval_episodes << "," << ablation_single_sample << "\n";
    return os.str();
}

uint64_t fnv1a64(const std::string& data) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string ExperimentConfig::hash() const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(canonical())));
    return buf;
}

void ExperimentConfig::validate() const {
    if (methods.empty()) throw ConfigError("attack.methods must be non-empty");
    if (filters.empty()) throw ConfigError("filters.kinds must be non-empty");
    if (statistics.empty()) throw ConfigError("detection.statistics must be non-empty");
    if (pgd_eps.empty()) throw ConfigError("attack.pgd_eps must be non-empty");
    if (cw_kappa.size() != cw_eta.size())
        throw ConfigError("attack.cw_kappa and attack.cw_eta must have equal length");
    if (seeds < 1 || sets_per_seed < 1) throw ConfigError("attack.seeds and sets_per_seed must be >= 1");
    if (n_attacked < 1 || n_attacked > n_shot) throw ConfigError("attack.n_attacked out of range");
    for (const auto& m : methods) attack_parse(m);
    for (const auto& f : filters) filter_kind_parse(f);
    for (const auto& s : statistics) stat_parse(s);
    head_parse(head);
}

ExperimentConfig load_experiment_config(const std::string& toml_path,
                                        const std::vector<std::string>& overrides) {
    ExperimentConfig cfg;
    if (!toml_path.empty()) cfg.apply_toml(toml_parse_file(toml_path));
    for (const auto& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos) throw ConfigError("override must look like section.key=value: " + ov);
        cfg.apply_override(ov.substr(0, eq), ov.substr(eq + 1));
    }
    if (const char* env = std::getenv("FSSENTRY_SEED")) {
        cfg.master_seed = std::strtoull(env, nullptr, 10);
    }
    cfg.validate();
    return cfg;
}

} // namespace fssentry
