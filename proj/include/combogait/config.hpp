// Config file surface: sectioned key-value text ([model], [train], [loss],
// [data]) in which every training-scale default is present and
// overridable. Unknown sections or keys are errors, and COMBOGAIT_SEED in
// the environment overrides the configured seed.

#pragma once

#include <cstdlib>

#include "combogait/training.hpp"

namespace combogait {

struct FullConfig {
    ModelConfig model;
    TrainConfig train;
    LossWeights loss;
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline int64_t parse_int(const std::string& key, const std::string& value) {
    try {
        size_t idx = 0;
        const long long v = std::stoll(value, &idx);
        if (idx != value.size()) throw std::invalid_argument("trailing");
        return int64_t(v);
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' needs an integer, got '" + value + "'");
    }
}

inline uint64_t parse_uint(const std::string& key, const std::string& value) {
    try {
        size_t idx = 0;
        const unsigned long long v = std::stoull(value, &idx);
        if (idx != value.size() || value.empty() || value[0] == '-') {
            throw std::invalid_argument("trailing");
        }
        return uint64_t(v);
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' needs a non-negative integer, got '" +
                          value + "'");
    }
}

inline double parse_real(const std::string& key, const std::string& value) {
    try {
        size_t idx = 0;
        const double v = std::stod(value, &idx);
        if (idx != value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' needs a real number, got '" + value + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config: key '" + key + "' needs true/false, got '" + value + "'");
}

inline std::vector<int64_t> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<int64_t> out;
    std::string item;
    std::istringstream is(value);
    while (std::getline(is, item, ',')) out.push_back(parse_int(key, trim(item)));
    if (out.empty()) throw ConfigError("config: key '" + key + "' needs a list of integers");
    return out;
}

}  // namespace detail

// Text form carrying every default; parsing it back is the identity.
inline std::string default_config_text() {
    FullConfig d;
    std::ostringstream os;
    char buf[64];
    auto real = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    os << "[model]\n";
    os << "encoder = " << d.model.encoder.kind << "\n";
    os << "channels = ";
    for (size_t i = 0; i < d.model.encoder.channels.size(); ++i) {
        if (i) os << ",";
        os << d.model.encoder.channels[i];
    }
    os << "\n";
    os << "smpl_hidden1 = " << d.model.smpl_hidden1 << "\n";
    os << "smpl_hidden2 = " << d.model.smpl_hidden2 << "\n";
    os << "smpl_embed_dim = " << d.model.smpl_embed_dim << "\n";
    os << "dropout = " << real(d.model.dropout) << "\n";
    os << "token_dim = " << d.model.token_dim << "\n";
    os << "heads = " << d.model.heads << "\n";
    os << "blocks = " << d.model.blocks << "\n";
    os << "token_sigma = " << real(d.model.token_sigma) << "\n";
    os << "multitask_fusion = " << (d.model.multitask_fusion ? "true" : "false") << "\n";
    os << "self_attention = " << (d.model.self_attention ? "true" : "false") << "\n";
    os << "gait_embed_dim = " << d.model.gait_embed_dim << "\n";
    os << "\n[train]\n";
    os << "iterations = " << d.train.iterations << "\n";
    os << "lr = " << real(d.train.lr) << "\n";
    os << "momentum = " << real(d.train.momentum) << "\n";
    os << "weight_decay = " << real(d.train.weight_decay) << "\n";
    os << "batch_p = " << d.train.batch_p << "\n";
    os << "batch_k = " << d.train.batch_k << "\n";
    os << "frames = " << d.train.frames << "\n";
    os << "margin = " << real(d.train.margin) << "\n";
    os << "seed = " << d.train.seed << "\n";
    os << "checkpoint_every = " << d.train.checkpoint_every << "\n";
    os << "\n[loss]\n";
    os << "alpha1 = " << real(d.loss.alpha1) << "\n";
    os << "alpha2 = " << real(d.loss.alpha2) << "\n";
    os << "beta1 = " << real(d.loss.beta1) << "\n";
    os << "beta2 = " << real(d.loss.beta2) << "\n";
    os << "beta3 = " << real(d.loss.beta3) << "\n";
    os << "\n[data]\n";
    os << "input_h = " << d.model.encoder.input_h << "\n";
    os << "input_w = " << d.model.encoder.input_w << "\n";
    return os.str();
}

inline FullConfig parse_config(const std::string& text) {
    FullConfig cfg;
    std::istringstream is(text);
    std::string raw;
    std::string section;
    int64_t line_no = 0;
    while (std::getline(is, raw)) {
        ++line_no;
        std::string line = detail::trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError("config: malformed section header at line " +
                                  std::to_string(line_no));
            }
            section = line.substr(1, line.size() - 2);
            if (section != "model" && section != "train" && section != "loss" &&
                section != "data") {
                throw ConfigError("config: unknown section [" + section + "]");
            }
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: expected 'key = value' at line " +
                              std::to_string(line_no));
        }
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (section.empty()) {
            throw ConfigError("config: key '" + key + "' appears before any section");
        }

        using namespace detail;
        if (section == "model") {
            if (key == "encoder") cfg.model.encoder.kind = value;
            else if (key == "channels") cfg.model.encoder.channels = parse_int_list(key, value);
            else if (key == "smpl_hidden1") cfg.model.smpl_hidden1 = parse_int(key, value);
            else if (key == "smpl_hidden2") cfg.model.smpl_hidden2 = parse_int(key, value);
            else if (key == "smpl_embed_dim") cfg.model.smpl_embed_dim = parse_int(key, value);
            else if (key == "dropout") cfg.model.dropout = parse_real(key, value);
            else if (key == "token_dim") cfg.model.token_dim = parse_int(key, value);
            else if (key == "heads") cfg.model.heads = parse_int(key, value);
            else if (key == "blocks") cfg.model.blocks = parse_int(key, value);
            else if (key == "token_sigma") cfg.model.token_sigma = parse_real(key, value);
            else if (key == "multitask_fusion") cfg.model.multitask_fusion = parse_bool(key, value);
            else if (key == "self_attention") cfg.model.self_attention = parse_bool(key, value);
            else if (key == "gait_embed_dim") cfg.model.gait_embed_dim = parse_int(key, value);
            else throw ConfigError("config: unknown key '" + key + "' in section [model]");
        } else if (section == "train") {
            if (key == "iterations") cfg.train.iterations = parse_int(key, value);
            else if (key == "lr") cfg.train.lr = parse_real(key, value);
            else if (key == "momentum") cfg.train.momentum = parse_real(key, value);
            else if (key == "weight_decay") cfg.train.weight_decay = parse_real(key, value);
            else if (key == "batch_p") cfg.train.batch_p = parse_int(key, value);
            else if (key == "batch_k") cfg.train.batch_k = parse_int(key, value);
            else if (key == "frames") cfg.train.frames = parse_int(key, value);
            else if (key == "margin") cfg.train.margin = parse_real(key, value);
            else if (key == "seed") cfg.train.seed = parse_uint(key, value);
            else if (key == "checkpoint_every") cfg.train.checkpoint_every = parse_int(key, value);
            else throw ConfigError("config: unknown key '" + key + "' in section [train]");
        } else if (section == "loss") {
            if (key == "alpha1") cfg.loss.alpha1 = parse_real(key, value);
            else if (key == "alpha2") cfg.loss.alpha2 = parse_real(key, value);
            else if (key == "beta1") cfg.loss.beta1 = parse_real(key, value);
            else if (key == "beta2") cfg.loss.beta2 = parse_real(key, value);
            else if (key == "beta3") cfg.loss.beta3 = parse_real(key, value);
            else throw ConfigError("config: unknown key '" + key + "' in section [loss]");
        } else {  // data
            if (key == "input_h") cfg.model.encoder.input_h = parse_int(key, value);
            else if (key == "input_w") cfg.model.encoder.input_w = parse_int(key, value);
            else throw ConfigError("config: unknown key '" + key + "' in section [data]");
        }
    }
    return cfg;
}

inline FullConfig load_config(const std::string& path) {
    return parse_config(read_file_bytes(path));
}

// COMBOGAIT_SEED overrides the configured seed when set.
inline void apply_seed_env(FullConfig& cfg) {
    const char* env = std::getenv("COMBOGAIT_SEED");
    if (env == nullptr || *env == '\0') return;
    cfg.train.seed = detail::parse_uint("COMBOGAIT_SEED", env);
}

}  // namespace combogait
