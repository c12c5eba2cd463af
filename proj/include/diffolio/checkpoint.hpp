#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffolio/dataset.hpp"
#include "diffolio/denoiser.hpp"
#include "diffolio/errors.hpp"
#include "diffolio/trainer.hpp"

// Checkpoint layout (little-endian):
//   char[8]  "DFCKPT01"
//   u32      format version (1)
//   u64      header length H
//   char[H]  UTF-8 JSON header (model config, tensor table, normalizers, Σ^train, step, ...)
//   f64[P]   parameters: tensors in table order, each column-major (rows × cols)
//   f64[P]   Adam first moments   } present when header.optimizer is true
//   f64[P]   Adam second moments  }
namespace diffolio {

inline constexpr std::uint32_t checkpoint_version = 1;

struct Checkpoint {
    DenoiserParams params;
    AdamState adam;
    int step = 0;
    int best_step = 0;
    double best_val_es = std::numeric_limits<double>::quiet_NaN();
    FittedNormalizers norms;
    Matrix train_cov;
    std::vector<std::string> assets, asset_features, sys_names;
    // schedule used in training
    int diffusion_steps = 1000;
    double beta_start = 1e-4, beta_end = 0.02;
    std::uint64_t seed = 0;
    double lambda_corr = 0.05;
    bool standardize_targets = true;

    NoiseSchedule schedule() const { return make_linear_schedule(diffusion_steps, beta_start, beta_end); }
};

namespace detail {

inline nlohmann::json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector json_vec(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline nlohmann::json norm_json(const Normalizer& n) { return {{"mean", vec_json(n.mean)}, {"std", vec_json(n.std)}}; }

inline Normalizer json_norm(const nlohmann::json& j) {
    Normalizer n;
    n.mean = json_vec(j.at("mean"));
    n.std = json_vec(j.at("std"));
    return n;
}

inline nlohmann::json config_json(const DenoiserConfig& c) {
    return {{"assets", c.assets},
            {"sys_covariates", c.sys_covariates},
            {"window", c.window},
            {"hidden", c.hidden},
            {"heads", c.heads},
            {"mlp_hidden", c.mlp_hidden},
            {"step_embed_dim", c.step_embed_dim},
            {"z_dim", c.z_dim},
            {"cross_depth", c.cross_depth},
            {"self_depth", c.self_depth},
            {"window_pos", c.window_pos},
            {"attention_reduce", c.attention_reduce == AttentionReduce::mean ? "mean" : "first_head"},
            {"layernorm_eps", c.layernorm_eps}};
}

inline DenoiserConfig json_config(const nlohmann::json& j) {
    DenoiserConfig c;
    c.assets = j.at("assets");
    c.sys_covariates = j.at("sys_covariates");
    c.window = j.at("window");
    c.hidden = j.at("hidden");
    c.heads = j.at("heads");
    c.mlp_hidden = j.at("mlp_hidden");
    c.step_embed_dim = j.at("step_embed_dim");
    c.z_dim = j.at("z_dim");
    c.cross_depth = j.at("cross_depth");
    c.self_depth = j.at("self_depth");
    c.window_pos = j.at("window_pos");
    c.attention_reduce = j.at("attention_reduce") == "mean" ? AttentionReduce::mean : AttentionReduce::first_head;
    c.layernorm_eps = j.at("layernorm_eps");
    return c;
}

inline void write_doubles(std::ofstream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * v.size()));
}

inline std::vector<double> read_doubles(std::ifstream& in, std::size_t n, const std::string& path) {
    std::vector<double> v(n);
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * n))) {
        throw DataError(path + ": truncated checkpoint payload");
    }
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck, bool with_optimizer = true) {
    nlohmann::json h;
    h["format"] = "diffolio-checkpoint";
    h["version"] = checkpoint_version;
    h["model"] = detail::config_json(ck.params.config);
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : ck.params.layout.tensors) {
        tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", t.offset}});
    }
    h["tensors"] = tensors;
    h["parameter_count"] = ck.params.values.size();
    h["step"] = ck.step;
    h["best_step"] = ck.best_step;
    h["best_val_es"] = std::isfinite(ck.best_val_es) ? nlohmann::json(ck.best_val_es) : nlohmann::json(nullptr);
    h["normalizers"] = {{"returns", detail::norm_json(ck.norms.returns)},
                        {"asset", detail::norm_json(ck.norms.asset)},
                        {"sys", detail::norm_json(ck.norms.sys)}};
    nlohmann::json cov = nlohmann::json::array();
    for (Eigen::Index r = 0; r < ck.train_cov.rows(); ++r) cov.push_back(detail::vec_json(ck.train_cov.row(r).transpose()));
    h["train_cov"] = cov;
    h["assets"] = ck.assets;
    h["asset_features"] = ck.asset_features;
    h["sys_names"] = ck.sys_names;
    h["schedule"] = {{"T", ck.diffusion_steps}, {"beta_start", ck.beta_start}, {"beta_end", ck.beta_end}};
    h["seed"] = ck.seed;
    h["lambda_corr"] = ck.lambda_corr;
    h["standardize_targets"] = ck.standardize_targets;
    const bool opt = with_optimizer && ck.adam.m.size() == ck.params.values.size();
    h["optimizer"] = opt;
    h["adam_step"] = ck.adam.step;
    const std::string header = h.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write("DFCKPT01", 8);
    const std::uint32_t version = checkpoint_version;
    const std::uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    detail::write_doubles(out, ck.params.values);
    if (opt) {
        detail::write_doubles(out, ck.adam.m);
        detail::write_doubles(out, ck.adam.v);
    }
    if (!out) throw DataError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    if (!in.read(magic, 8) || std::memcmp(magic, "DFCKPT01", 8) != 0) throw DataError(path + ": not a checkpoint");
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || version != checkpoint_version) throw DataError(path + ": unsupported checkpoint version");
    std::string header(len, '\0');
    if (!in.read(header.data(), static_cast<std::streamsize>(len))) throw DataError(path + ": truncated header");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": bad checkpoint header: " + e.what());
    }

    Checkpoint ck;
    try {
        ck.params = DenoiserParams::zeros(detail::json_config(h.at("model")));
        const auto& tensors = h.at("tensors");
        if (tensors.size() != ck.params.layout.tensors.size()) throw DataError(path + ": tensor table mismatch");
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            const auto& t = ck.params.layout.tensors[i];
            if (tensors[i].at("name") != t.name || tensors[i].at("rows") != t.rows || tensors[i].at("cols") != t.cols) {
                throw DataError(path + ": tensor '" + t.name + "' does not match the model layout");
            }
        }
        ck.step = h.at("step");
        ck.best_step = h.at("best_step");
        if (!h.at("best_val_es").is_null()) ck.best_val_es = h.at("best_val_es");
        ck.norms.returns = detail::json_norm(h.at("normalizers").at("returns"));
        ck.norms.asset = detail::json_norm(h.at("normalizers").at("asset"));
        ck.norms.sys = detail::json_norm(h.at("normalizers").at("sys"));
        const auto& cov = h.at("train_cov");
        ck.train_cov.resize(static_cast<Eigen::Index>(cov.size()), static_cast<Eigen::Index>(cov.size()));
        for (std::size_t r = 0; r < cov.size(); ++r) ck.train_cov.row(static_cast<Eigen::Index>(r)) = detail::json_vec(cov[r]).transpose();
        ck.assets = h.at("assets").get<std::vector<std::string>>();
        ck.asset_features = h.at("asset_features").get<std::vector<std::string>>();
        ck.sys_names = h.at("sys_names").get<std::vector<std::string>>();
        ck.diffusion_steps = h.at("schedule").at("T");
        ck.beta_start = h.at("schedule").at("beta_start");
        ck.beta_end = h.at("schedule").at("beta_end");
        ck.seed = h.at("seed");
        ck.lambda_corr = h.at("lambda_corr");
        ck.standardize_targets = h.at("standardize_targets");
        ck.adam.step = h.at("adam_step");
        const std::size_t p = ck.params.values.size();
        ck.params.values = detail::read_doubles(in, p, path);
        if (h.at("optimizer").get<bool>()) {
            ck.adam.m = detail::read_doubles(in, p, path);
            ck.adam.v = detail::read_doubles(in, p, path);
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": bad checkpoint header: " + e.what());
    }
    return ck;
}

}  // namespace diffolio
