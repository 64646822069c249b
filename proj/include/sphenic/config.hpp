#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>

#include <json.hpp>

#include "error.hpp"
#include "io.hpp"
#include "pipeline.hpp"

namespace sphenic {

// full run settings: a TrainConfig plus artifact plumbing, mirrored one to
// one by the JSON sections preprocess / graph / topo / model / train / io
struct RunConfig {
    TrainConfig train;
    std::string out_dir = "out";

    void validate() const {
        train.validate();
        const TopoConfig& t = train.topo;
        if (t.resolution < 1) throw ConfigError("topo.resolution must be positive");
        if (train.topo_on && t.resolution < 3)
            throw ConfigError("topo.resolution must be at least 3 to feed the convolution");
        if (!(t.sigma > 0.0)) throw ConfigError("topo.sigma must be positive");
        if (!(t.weight_power >= 0.0)) throw ConfigError("topo.weight_power must be nonnegative");
        if (!(t.bound_hi > t.bound_lo)) throw ConfigError("topo.bound_hi must exceed topo.bound_lo");
        if (t.threads < 1) throw ConfigError("topo.threads must be positive");
        if (t.hop_cap < 0) throw ConfigError("topo.hop_cap must be nonnegative");
        if (!(t.radius >= 0.0)) throw ConfigError("topo.radius must be nonnegative");
        if (train.preprocess.n_hvg < 2) throw ConfigError("preprocess.n_hvg must be at least 2");
        if (!(train.preprocess.target_library >= 0.0))
            throw ConfigError("preprocess.target_library must be nonnegative");
        if (out_dir.empty()) throw ConfigError("io.out_dir must be nonempty");
    }
};

namespace detail {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

inline void check_keys(const json& obj, const std::string& where,
                       std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ConfigError("config: " + where + " must be a JSON object");
    for (const auto& item : obj.items()) {
        bool ok = false;
        for (const char* k : allowed)
            if (item.key() == k) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError("config: unknown key \"" + item.key() + "\" in " + where);
    }
}

inline void read_key(const json& obj, const char* key, double& out, const std::string& where) {
    if (!obj.contains(key)) return;
    if (!obj[key].is_number()) throw ConfigError("config: " + where + "." + key + " must be a number");
    out = obj[key].get<double>();
}

inline void read_key(const json& obj, const char* key, int& out, const std::string& where) {
    if (!obj.contains(key)) return;
    if (!obj[key].is_number_integer())
        throw ConfigError("config: " + where + "." + key + " must be an integer");
    out = obj[key].get<int>();
}

inline void read_key(const json& obj, const char* key, std::size_t& out, const std::string& where) {
    if (!obj.contains(key)) return;
    const auto& v = obj[key];
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0))
        throw ConfigError("config: " + where + "." + key + " must be a nonnegative integer");
    out = v.get<std::size_t>();
}

inline void read_key(const json& obj, const char* key, bool& out, const std::string& where) {
    if (!obj.contains(key)) return;
    if (!obj[key].is_boolean())
        throw ConfigError("config: " + where + "." + key + " must be a boolean");
    out = obj[key].get<bool>();
}

inline void read_key(const json& obj, const char* key, std::string& out, const std::string& where) {
    if (!obj.contains(key)) return;
    if (!obj[key].is_string()) throw ConfigError("config: " + where + "." + key + " must be a string");
    out = obj[key].get<std::string>();
}

} // namespace detail

inline detail::ordered_json config_to_json(const RunConfig& c) {
    detail::ordered_json j;
    j["preprocess"] = {{"n_hvg", c.train.preprocess.n_hvg},
                       {"target_library", c.train.preprocess.target_library},
                       {"log1p", c.train.preprocess.log1p}};
    j["graph"] = {{"k_spatial", c.train.k_spatial},
                  {"k_expression", c.train.k_expression},
                  {"pca_components", c.train.pca_components}};
    j["topo"] = {{"radius", c.train.topo.radius},
                 {"hop_cap", c.train.topo.hop_cap},
                 {"use_hops", c.train.topo.use_hops},
                 {"fill_triangles", c.train.topo.fill_triangles},
                 {"global_mode", c.train.topo.global_mode},
                 {"resolution", c.train.topo.resolution},
                 {"sigma", c.train.topo.sigma},
                 {"weight_power", c.train.topo.weight_power},
                 {"bound_lo", c.train.topo.bound_lo},
                 {"bound_hi", c.train.topo.bound_hi},
                 {"threads", c.train.topo.threads}};
    j["model"] = {{"hidden", c.train.hidden}, {"latent", c.train.latent}};
    j["train"] = {{"lambda1", c.train.lambda1},
                  {"lambda2", c.train.lambda2},
                  {"epochs", c.train.epochs},
                  {"lr", c.train.lr},
                  {"seed", c.train.seed},
                  {"k_clusters", c.train.k_clusters},
                  {"negatives_per_cell", c.train.negatives_per_cell},
                  {"topo_on", c.train.topo_on},
                  {"scdom_on", c.train.scdom_on}};
    j["io"] = {{"out_dir", c.out_dir}};
    return j;
}

inline std::string default_config_text() { return config_to_json(RunConfig{}).dump(2) + "\n"; }

inline RunConfig parse_config(const std::string& text) {
    detail::json j;
    try {
        j = detail::json::parse(text);
    } catch (const detail::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    detail::check_keys(j, "top level", {"preprocess", "graph", "topo", "model", "train", "io"});
    RunConfig c;
    using detail::read_key;
    if (j.contains("preprocess")) {
        const auto& s = j["preprocess"];
        detail::check_keys(s, "preprocess", {"n_hvg", "target_library", "log1p"});
        read_key(s, "n_hvg", c.train.preprocess.n_hvg, "preprocess");
        read_key(s, "target_library", c.train.preprocess.target_library, "preprocess");
        read_key(s, "log1p", c.train.preprocess.log1p, "preprocess");
    }
    if (j.contains("graph")) {
        const auto& s = j["graph"];
        detail::check_keys(s, "graph", {"k_spatial", "k_expression", "pca_components"});
        read_key(s, "k_spatial", c.train.k_spatial, "graph");
        read_key(s, "k_expression", c.train.k_expression, "graph");
        read_key(s, "pca_components", c.train.pca_components, "graph");
    }
    if (j.contains("topo")) {
        const auto& s = j["topo"];
        detail::check_keys(s, "topo",
                           {"radius", "hop_cap", "use_hops", "fill_triangles", "global_mode",
                            "resolution", "sigma", "weight_power", "bound_lo", "bound_hi",
                            "threads"});
        read_key(s, "radius", c.train.topo.radius, "topo");
        read_key(s, "hop_cap", c.train.topo.hop_cap, "topo");
        read_key(s, "use_hops", c.train.topo.use_hops, "topo");
        read_key(s, "fill_triangles", c.train.topo.fill_triangles, "topo");
        read_key(s, "global_mode", c.train.topo.global_mode, "topo");
        read_key(s, "resolution", c.train.topo.resolution, "topo");
        read_key(s, "sigma", c.train.topo.sigma, "topo");
        read_key(s, "weight_power", c.train.topo.weight_power, "topo");
        read_key(s, "bound_lo", c.train.topo.bound_lo, "topo");
        read_key(s, "bound_hi", c.train.topo.bound_hi, "topo");
        read_key(s, "threads", c.train.topo.threads, "topo");
    }
    if (j.contains("model")) {
        const auto& s = j["model"];
        detail::check_keys(s, "model", {"hidden", "latent"});
        read_key(s, "hidden", c.train.hidden, "model");
        read_key(s, "latent", c.train.latent, "model");
    }
    if (j.contains("train")) {
        const auto& s = j["train"];
        detail::check_keys(s, "train",
                           {"lambda1", "lambda2", "epochs", "lr", "seed", "k_clusters",
                            "negatives_per_cell", "topo_on", "scdom_on"});
        read_key(s, "lambda1", c.train.lambda1, "train");
        read_key(s, "lambda2", c.train.lambda2, "train");
        read_key(s, "epochs", c.train.epochs, "train");
        read_key(s, "lr", c.train.lr, "train");
        std::size_t seed = static_cast<std::size_t>(c.train.seed);
        read_key(s, "seed", seed, "train");
        c.train.seed = seed;
        read_key(s, "k_clusters", c.train.k_clusters, "train");
        read_key(s, "negatives_per_cell", c.train.negatives_per_cell, "train");
        read_key(s, "topo_on", c.train.topo_on, "train");
        read_key(s, "scdom_on", c.train.scdom_on, "train");
    }
    if (j.contains("io")) {
        const auto& s = j["io"];
        detail::check_keys(s, "io", {"out_dir"});
        read_key(s, "out_dir", c.out_dir, "io");
    }
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return parse_config(text);
}

} // namespace sphenic
