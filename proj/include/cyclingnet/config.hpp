#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "cyclingnet/errors.hpp"
#include "cyclingnet/network.hpp"
#include "cyclingnet/optical_flow.hpp"
#include "cyclingnet/trainer.hpp"

namespace cyclingnet {

/// Everything a run needs, resolved from defaults, then an optional config
/// file of flat dotted keys (`flow.window_size = 15`), then command-line
/// overrides. The resolved form is echoed for reproducibility.
struct RunConfig {
    FlowParams flow;
    ModelConfig model;
    TrainConfig train;
    std::string model_preset = "cyclingnet";  // cyclingnet | shrunken
    std::filesystem::path manifest;
    std::filesystem::path flow_cache = "flow_cache";
    std::filesystem::path weights;
    std::filesystem::path out_dir = "out";
    std::uint64_t seed = 42;
    int threads = 1;

    static RunConfig resolve(const std::filesystem::path* file,
                             const std::map<std::string, std::string>& overrides);

    std::string echo() const;
    void write_echo(const std::filesystem::path& dir) const;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::map<std::string, std::string> parse_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path.string() + ":" + std::to_string(line_no) +
                              ": expected key = value");
        const std::string key = trim(t.substr(0, eq));
        const std::string val = trim(t.substr(eq + 1));
        if (key.empty()) throw ConfigError(path.string() + ":" + std::to_string(line_no) +
                                           ": empty key");
        kv[key] = val;
    }
    return kv;
}

template <typename T>
T parse_number(const std::string& key, const std::string& val) {
    std::istringstream is(val);
    T out;
    is >> out;
    if (is.fail() || !is.eof())
        throw ConfigError("bad value for " + key + ": '" + val + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& val) {
    if (val == "true" || val == "1") return true;
    if (val == "false" || val == "0") return false;
    throw ConfigError("bad value for " + key + ": '" + val + "' (want true|false)");
}

}  // namespace detail

inline RunConfig RunConfig::resolve(const std::filesystem::path* file,
                                    const std::map<std::string, std::string>& overrides) {
    RunConfig cfg;
    std::map<std::string, std::string> kv;
    if (file) kv = detail::parse_config_file(*file);
    for (const auto& [k, v] : overrides) kv[k] = v;

    for (const auto& [key, val] : kv) {
        using detail::parse_bool;
        using detail::parse_number;
        if (key == "flow.pyramid_levels") cfg.flow.pyramid_levels = parse_number<int>(key, val);
        else if (key == "flow.pyramid_scale") cfg.flow.pyramid_scale = parse_number<double>(key, val);
        else if (key == "flow.window_size") cfg.flow.window_size = parse_number<int>(key, val);
        else if (key == "flow.iterations") cfg.flow.iterations = parse_number<int>(key, val);
        else if (key == "flow.poly_n") cfg.flow.poly_n = parse_number<int>(key, val);
        else if (key == "flow.poly_sigma") cfg.flow.poly_sigma = parse_number<double>(key, val);
        else if (key == "model.preset") cfg.model_preset = val;
        else if (key == "model.variant") cfg.model.variant = parse_variant(val);
        else if (key == "model.attention_mode") cfg.model.attention_mode = parse_attention_mode(val);
        else if (key == "model.lstm_candidate") cfg.model.lstm_candidate = parse_candidate(val);
        else if (key == "model.lstm_hidden") cfg.model.lstm_hidden = parse_number<std::size_t>(key, val);
        else if (key == "model.attention_units") cfg.model.attention_units = parse_number<std::size_t>(key, val);
        else if (key == "model.dense1") cfg.model.dense1 = parse_number<std::size_t>(key, val);
        else if (key == "model.dense2") cfg.model.dense2 = parse_number<std::size_t>(key, val);
        else if (key == "model.dropout") cfg.model.dropout = parse_number<double>(key, val);
        else if (key == "train.learning_rate") cfg.train.learning_rate = parse_number<float>(key, val);
        else if (key == "train.beta1") cfg.train.beta1 = parse_number<float>(key, val);
        else if (key == "train.beta2") cfg.train.beta2 = parse_number<float>(key, val);
        else if (key == "train.epsilon") cfg.train.epsilon_adam = parse_number<float>(key, val);
        else if (key == "train.max_epochs") cfg.train.max_epochs = parse_number<int>(key, val);
        else if (key == "train.patience") cfg.train.early_stop_patience = parse_number<int>(key, val);
        else if (key == "train.batch_size") cfg.train.batch_size = parse_number<std::size_t>(key, val);
        else if (key == "train.threshold") cfg.train.threshold = parse_number<float>(key, val);
        else if (key == "train.monitor") cfg.train.monitor = parse_monitor(val);
        else if (key == "train.positive_weight") cfg.train.positive_weight = parse_number<float>(key, val);
        else if (key == "train.augment_flip") cfg.train.augment_flip = parse_bool(key, val);
        else if (key == "train.augment_scale") cfg.train.augment_scale = parse_bool(key, val);
        else if (key == "paths.manifest") cfg.manifest = val;
        else if (key == "paths.flow_cache") cfg.flow_cache = val;
        else if (key == "paths.weights") cfg.weights = val;
        else if (key == "paths.out_dir") cfg.out_dir = val;
        else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, val);
        else if (key == "threads") cfg.threads = parse_number<int>(key, val);
        else throw ConfigError("unknown config key '" + key + "'");
    }

    if (cfg.model_preset == "shrunken") {
        const ModelConfig base = cfg.model;
        cfg.model = ModelConfig::shrunken(base.variant);
        // explicit overrides win over the preset's defaults
        for (const auto& [key, val] : kv) {
            if (key == "model.lstm_hidden") cfg.model.lstm_hidden = base.lstm_hidden;
            else if (key == "model.attention_units") cfg.model.attention_units = base.attention_units;
            else if (key == "model.dense1") cfg.model.dense1 = base.dense1;
            else if (key == "model.dense2") cfg.model.dense2 = base.dense2;
            else if (key == "model.dropout") cfg.model.dropout = base.dropout;
            else if (key == "model.attention_mode") cfg.model.attention_mode = base.attention_mode;
            else if (key == "model.lstm_candidate") cfg.model.lstm_candidate = base.lstm_candidate;
        }
    } else if (cfg.model_preset != "cyclingnet") {
        throw ConfigError("unknown model.preset '" + cfg.model_preset +
                          "' (want cyclingnet|shrunken)");
    }
    cfg.model.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
    cfg.flow.validate();
    if (cfg.weights.empty()) cfg.weights = cfg.out_dir / "model.cynw";
    return cfg;
}

inline std::string RunConfig::echo() const {
    std::ostringstream os;
    os << "flow.pyramid_levels = " << flow.pyramid_levels << "\n";
    os << "flow.pyramid_scale = " << flow.pyramid_scale << "\n";
    os << "flow.window_size = " << flow.window_size << "\n";
    os << "flow.iterations = " << flow.iterations << "\n";
    os << "flow.poly_n = " << flow.poly_n << "\n";
    os << "flow.poly_sigma = " << flow.poly_sigma << "\n";
    os << "model.preset = " << model_preset << "\n";
    os << "model.variant = " << variant_name(model.variant) << "\n";
    os << "model.attention_mode = " << attention_mode_name(model.attention_mode) << "\n";
    os << "model.lstm_candidate = " << candidate_name(model.lstm_candidate) << "\n";
    os << "model.lstm_hidden = " << model.lstm_hidden << "\n";
    os << "model.attention_units = " << model.attention_units << "\n";
    os << "model.dense1 = " << model.dense1 << "\n";
    os << "model.dense2 = " << model.dense2 << "\n";
    os << "model.dropout = " << model.dropout << "\n";
    os << "train.learning_rate = " << train.learning_rate << "\n";
    os << "train.beta1 = " << train.beta1 << "\n";
    os << "train.beta2 = " << train.beta2 << "\n";
    os << "train.epsilon = " << train.epsilon_adam << "\n";
    os << "train.max_epochs = " << train.max_epochs << "\n";
    os << "train.patience = " << train.early_stop_patience << "\n";
    os << "train.batch_size = " << train.batch_size << "\n";
    os << "train.threshold = " << train.threshold << "\n";
    os << "train.monitor = " << (train.monitor == Monitor::val ? "val" : "train") << "\n";
    os << "train.positive_weight = " << train.positive_weight << "\n";
    os << "train.augment_flip = " << (train.augment_flip ? "true" : "false") << "\n";
    os << "train.augment_scale = " << (train.augment_scale ? "true" : "false") << "\n";
    os << "paths.manifest = " << manifest.string() << "\n";
    os << "paths.flow_cache = " << flow_cache.string() << "\n";
    os << "paths.weights = " << weights.string() << "\n";
    os << "paths.out_dir = " << out_dir.string() << "\n";
    os << "seed = " << seed << "\n";
    os << "threads = " << threads << "\n";
    return os.str();
}

inline void RunConfig::write_echo(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "resolved_config.txt");
    if (!out) throw DataError("cannot write resolved config under " + dir.string());
    out << echo();
}

}  // namespace cyclingnet
