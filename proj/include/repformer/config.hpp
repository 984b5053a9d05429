#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "repformer/data.hpp"
#include "repformer/errors.hpp"
#include "repformer/model.hpp"

namespace repformer {

/// Everything a run needs. Serialized as flat `key=value` lines.
struct TrainConfig {
    ModelConfig model;
    std::string variant = "full";  // baseline | pth | dlr | full

    std::size_t epochs = 60;
    std::size_t batch_size = 16;
    double lr = 1e-4;
    std::size_t lr_decay_epoch = 40;
    double lr_decay_factor = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;  // global gradient norm; 0 disables

    std::uint64_t seed = 42;
    std::size_t train_count = 2000;
    std::size_t val_count = 200;
    double noise = 0.03;  // upper bound of per-image gaussian noise stddev
    std::string train_list;
    std::string val_list;
    NormKind norm = NormKind::inter_ocular;
    std::size_t eye_left = 0;
    std::size_t eye_right = 1;

    std::size_t eval_every = 10;
    std::size_t threads = 0;  // 0 = hardware concurrency
    std::string precision = "f32";
    std::string out_dir = "run";
    std::string resume;

    std::string variants = "baseline,pth,dlr,full";
    std::string tau_sweep = "10,100,1000,10000";

    /// Applies `variant` to the model switches.
    void apply_variant() {
        if (variant == "full") model.pyramid = model.dlr = true;
        else if (variant == "baseline") model.pyramid = model.dlr = false;
        else if (variant == "pth") model.pyramid = true, model.dlr = false;
        else if (variant == "dlr") model.pyramid = false, model.dlr = true;
        else throw ConfigError("unknown variant '" + variant + "'");
    }

    SyntheticFaceSpec synthetic_spec(std::uint64_t stream_seed) const {
        SyntheticFaceSpec s;
        s.seed = stream_seed;
        s.landmarks = model.landmarks;
        s.image_size = model.image_size;
        s.noise = {0.0, noise};
        return s;
    }
};

namespace detail {

template <typename V>
V parse_number(const std::string& text, const std::string& key) {
    V v{};
    const char* b = text.data();
    const char* e = b + text.size();
    std::from_chars_result r;
    if constexpr (std::is_floating_point_v<V>) {
        // from_chars for double is available in libstdc++ 11+
        r = std::from_chars(b, e, v, std::chars_format::general);
    } else {
        r = std::from_chars(b, e, v);
    }
    if (r.ec != std::errc() || r.ptr != e) throw ConfigError("invalid value '" + text + "' for " + key);
    return v;
}

inline bool parse_bool(const std::string& text, const std::string& key) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("invalid boolean '" + text + "' for " + key);
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
    return os.str();
}

struct Field {
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

inline const std::map<std::string, Field>& config_fields() {
    static const std::map<std::string, Field> fields = [] {
        std::map<std::string, Field> f;
        auto size_field = [&](const char* key, std::size_t TrainConfig::*m) {
            f[key] = {[m](const TrainConfig& c) { return std::to_string(c.*m); },
                      [m, key](TrainConfig& c, const std::string& v) { c.*m = parse_number<std::size_t>(v, key); }};
        };
        auto model_size = [&](const char* key, std::size_t ModelConfig::*m) {
            f[key] = {[m](const TrainConfig& c) { return std::to_string(c.model.*m); },
                      [m, key](TrainConfig& c, const std::string& v) {
                          c.model.*m = parse_number<std::size_t>(v, key);
                      }};
        };
        auto dbl = [&](const char* key, double TrainConfig::*m) {
            f[key] = {[m](const TrainConfig& c) { return format_double(c.*m); },
                      [m, key](TrainConfig& c, const std::string& v) { c.*m = parse_number<double>(v, key); }};
        };
        auto str = [&](const char* key, std::string TrainConfig::*m) {
            f[key] = {[m](const TrainConfig& c) { return c.*m; },
                      [m](TrainConfig& c, const std::string& v) { c.*m = v; }};
        };
        model_size("image_size", &ModelConfig::image_size);
        model_size("in_channels", &ModelConfig::in_channels);
        model_size("levels", &ModelConfig::levels);
        model_size("stages", &ModelConfig::stages);
        model_size("landmarks", &ModelConfig::landmarks);
        model_size("d_model", &ModelConfig::d_model);
        model_size("n_heads", &ModelConfig::n_heads);
        model_size("d_ff", &ModelConfig::d_ff);
        model_size("backbone_width", &ModelConfig::backbone_width);
        f["tau"] = {[](const TrainConfig& c) { return format_double(c.model.tau); },
                    [](TrainConfig& c, const std::string& v) { c.model.tau = parse_number<double>(v, "tau"); }};
        f["decoder_pos"] = {[](const TrainConfig& c) { return std::string(c.model.decoder_pos ? "1" : "0"); },
                            [](TrainConfig& c, const std::string& v) {
                                c.model.decoder_pos = parse_bool(v, "decoder_pos");
                            }};
        str("variant", &TrainConfig::variant);
        size_field("epochs", &TrainConfig::epochs);
        size_field("batch_size", &TrainConfig::batch_size);
        dbl("lr", &TrainConfig::lr);
        size_field("lr_decay_epoch", &TrainConfig::lr_decay_epoch);
        dbl("lr_decay_factor", &TrainConfig::lr_decay_factor);
        dbl("beta1", &TrainConfig::beta1);
        dbl("beta2", &TrainConfig::beta2);
        dbl("adam_eps", &TrainConfig::adam_eps);
        dbl("clip_norm", &TrainConfig::clip_norm);
        f["seed"] = {[](const TrainConfig& c) { return std::to_string(c.seed); },
                     [](TrainConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>(v, "seed"); }};
        size_field("train_count", &TrainConfig::train_count);
        size_field("val_count", &TrainConfig::val_count);
        dbl("noise", &TrainConfig::noise);
        str("train_list", &TrainConfig::train_list);
        str("val_list", &TrainConfig::val_list);
        f["norm"] = {[](const TrainConfig& c) { return to_string(c.norm); },
                     [](TrainConfig& c, const std::string& v) {
                         if (v == "inter_ocular") c.norm = NormKind::inter_ocular;
                         else if (v == "image_size") c.norm = NormKind::image_size;
                         else throw ConfigError("invalid norm '" + v + "' (inter_ocular | image_size)");
                     }};
        size_field("eye_left", &TrainConfig::eye_left);
        size_field("eye_right", &TrainConfig::eye_right);
        size_field("eval_every", &TrainConfig::eval_every);
        size_field("threads", &TrainConfig::threads);
        f["precision"] = {[](const TrainConfig& c) { return c.precision; },
                          [](TrainConfig& c, const std::string& v) {
                              if (v != "f32" && v != "f64") throw ConfigError("precision must be f32 or f64");
                              c.precision = v;
                          }};
        str("out_dir", &TrainConfig::out_dir);
        str("resume", &TrainConfig::resume);
        str("variants", &TrainConfig::variants);
        str("tau_sweep", &TrainConfig::tau_sweep);
        return f;
    }();
    return fields;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

/// Sets one key; throws ConfigError for unknown keys or bad values.
inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
    const auto& fields = detail::config_fields();
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(cfg, value);
    if (key == "variant") cfg.apply_variant();
}

/// Parses `key = value` lines; '#' starts a comment.
inline TrainConfig parse_config(std::istream& is, TrainConfig cfg = {}) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value: " + line);
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        try {
            set_config_value(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what() + ": " + line);
        }
    }
    return cfg;
}

inline TrainConfig load_config(const std::string& path, TrainConfig cfg = {}) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file " + path);
    return parse_config(is, std::move(cfg));
}

/// Canonical text: every key, sorted, one per line.
inline std::string serialize_config(const TrainConfig& cfg) {
    std::string out;
    for (const auto& [key, field] : detail::config_fields()) out += key + "=" + field.get(cfg) + "\n";
    return out;
}

/// FNV-1a over the canonical text, excluding run-location and ablation-grid keys.
inline std::uint64_t config_digest(const TrainConfig& cfg) {
    TrainConfig c = cfg;
    c.out_dir.clear();
    c.resume.clear();
    c.threads = 0;
    c.variants = TrainConfig{}.variants;
    c.tau_sweep = TrainConfig{}.tau_sweep;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : serialize_config(c)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ',')) {
        item = detail::trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

}  // namespace repformer
