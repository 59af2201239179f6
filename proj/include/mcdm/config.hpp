#pragma once

// Run configuration: `key = value` lines, '#' comments, overridable from
// the command line. Unknown keys fail loudly with the valid key list.

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mcdm/tensor.hpp"

namespace mcdm {

struct RunConfig {
    int64_t stage = 1;

    // dims
    int64_t T = 16;          // clip frames
    int64_t a = 16;          // archived window length
    int64_t m = 64;          // archived tokens per frame, (resolution/8)^2
    int64_t n = 16;          // frame-aligned query count
    int64_t d = 32;          // token embedding dim (archived + motion)
    int64_t L = 8;           // prior layer pairs
    int64_t N = 4;           // denoiser blocks
    int64_t d_model = 32;    // denoiser width
    int64_t resolution = 64;
    int64_t r_features = 64;

    // training
    double alpha = 0.1;
    double lr = 1e-5;
    double weight_decay = 0.01;
    int64_t steps = 2000;
    int64_t batch = 4;
    uint64_t seed = 0;
    double landmark_dropout = 0.5;

    // diffusion
    int64_t T_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int64_t sample_steps = 50;

    // dataset generation
    int64_t clips = 64;
    int64_t identities = 4;

    // rollout / evaluation
    int64_t total_frames = 512;
    int64_t fps = 25;
    std::string precision = "f32";

    // paths
    std::string data_dir = "data";
    std::string ckpt_dir = "ckpt";
    std::string out_dir = "out";
};

namespace detail {

struct ConfigKey {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::map<std::string, ConfigKey>& config_keys() {
    static const std::map<std::string, ConfigKey> keys = [] {
        std::map<std::string, ConfigKey> k;
        auto add_i64 = [&k](const std::string& name, int64_t RunConfig::*field) {
            k[name] = {[field, name](RunConfig& c, const std::string& v) {
                           try {
                               c.*field = std::stoll(v);
                           } catch (...) {
                               throw ConfigError("bad integer for " + name + ": '" + v + "'");
                           }
                       },
                       [field](const RunConfig& c) { return std::to_string(c.*field); }};
        };
        auto add_f64 = [&k](const std::string& name, double RunConfig::*field) {
            k[name] = {[field, name](RunConfig& c, const std::string& v) {
                           try {
                               c.*field = std::stod(v);
                           } catch (...) {
                               throw ConfigError("bad number for " + name + ": '" + v + "'");
                           }
                       },
                       [field](const RunConfig& c) {
                           std::ostringstream os;
                           os << (c.*field);
                           return os.str();
                       }};
        };
        auto add_str = [&k](const std::string& name, std::string RunConfig::*field) {
            k[name] = {[field](RunConfig& c, const std::string& v) { c.*field = v; },
                       [field](const RunConfig& c) { return c.*field; }};
        };
        add_i64("stage", &RunConfig::stage);
        add_i64("T", &RunConfig::T);
        add_i64("a", &RunConfig::a);
        add_i64("m", &RunConfig::m);
        add_i64("n", &RunConfig::n);
        add_i64("d", &RunConfig::d);
        add_i64("L", &RunConfig::L);
        add_i64("N", &RunConfig::N);
        add_i64("d_model", &RunConfig::d_model);
        add_i64("resolution", &RunConfig::resolution);
        add_i64("r_features", &RunConfig::r_features);
        add_f64("alpha", &RunConfig::alpha);
        add_f64("lr", &RunConfig::lr);
        add_f64("weight_decay", &RunConfig::weight_decay);
        add_i64("steps", &RunConfig::steps);
        add_i64("batch", &RunConfig::batch);
        k["seed"] = {[](RunConfig& c, const std::string& v) {
                         try {
                             c.seed = std::stoull(v);
                         } catch (...) {
                             throw ConfigError("bad integer for seed: '" + v + "'");
                         }
                     },
                     [](const RunConfig& c) { return std::to_string(c.seed); }};
        add_f64("landmark_dropout", &RunConfig::landmark_dropout);
        add_i64("T_steps", &RunConfig::T_steps);
        add_f64("beta_start", &RunConfig::beta_start);
        add_f64("beta_end", &RunConfig::beta_end);
        add_i64("sample_steps", &RunConfig::sample_steps);
        add_i64("clips", &RunConfig::clips);
        add_i64("identities", &RunConfig::identities);
        add_i64("total_frames", &RunConfig::total_frames);
        add_i64("fps", &RunConfig::fps);
        add_str("precision", &RunConfig::precision);
        add_str("data_dir", &RunConfig::data_dir);
        add_str("ckpt_dir", &RunConfig::ckpt_dir);
        add_str("out_dir", &RunConfig::out_dir);
        return k;
    }();
    return keys;
}

inline std::string valid_key_list() {
    std::string out;
    for (const auto& [name, _] : config_keys()) {
        if (!out.empty()) out += ", ";
        out += name;
    }
    return out;
}

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

inline void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
    auto it = detail::config_keys().find(key);
    if (it == detail::config_keys().end())
        throw ConfigError("unknown config key '" + key + "'; valid keys: " +
                          detail::valid_key_list());
    it->second.set(cfg, value);
}

// one `key=value` token, as passed to --set
inline void config_set_kv(RunConfig& cfg, const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
        throw ConfigError("--set expects key=value, got '" + kv + "'");
    config_set(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(path + ": cannot open config file");
    RunConfig cfg;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        config_set(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return cfg;
}

inline void validate_config(const RunConfig& c) {
    auto positive = [](int64_t v, const char* name) {
        if (v < 1) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(c.T, "T");
    positive(c.a, "a");
    positive(c.n, "n");
    positive(c.d, "d");
    positive(c.L, "L");
    positive(c.N, "N");
    positive(c.d_model, "d_model");
    positive(c.steps, "steps");
    positive(c.batch, "batch");
    positive(c.r_features, "r_features");
    if (c.stage < 1 || c.stage > 3) throw ConfigError("stage must be 1, 2 or 3");
    if (c.alpha < 0.0 || c.alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
    if (c.landmark_dropout < 0.0 || c.landmark_dropout > 1.0)
        throw ConfigError("landmark_dropout must lie in [0, 1]");
    if (c.resolution % 8 != 0 || c.resolution % 4 != 0)
        throw ConfigError("resolution must be divisible by 8");
    int64_t expect_m = (c.resolution / 8) * (c.resolution / 8);
    if (c.m != expect_m)
        throw ConfigError("m must equal (resolution/8)^2 = " + std::to_string(expect_m) +
                          " at resolution " + std::to_string(c.resolution));
    if (c.precision != "f32" && c.precision != "f64")
        throw ConfigError("precision must be f32 or f64");
    if (c.total_frames % c.T != 0)
        throw ConfigError("total_frames must be a multiple of T");
}

inline std::string echo_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& [name, key] : detail::config_keys())
        out += name + " = " + key.get(cfg) + "\n";
    return out;
}

}  // namespace mcdm
