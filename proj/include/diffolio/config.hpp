#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "diffolio/csv.hpp"
#include "diffolio/data_panel.hpp"
#include "diffolio/dataset.hpp"
#include "diffolio/denoiser.hpp"
#include "diffolio/diffusion.hpp"
#include "diffolio/errors.hpp"
#include "diffolio/trainer.hpp"

namespace diffolio {

// ---- TOML subset ------------------------------------------------------------------
// Tables `[name]`, `key = value` with strings, integers, floats, booleans and flat
// arrays of those, `#` comments. No inline tables, dotted keys or multi-line values.

namespace toml {

struct Value;
using Array = std::vector<Value>;

struct Value {
    std::variant<bool, std::int64_t, double, std::string, Array> v;
    std::size_t line = 0;
};

using Table = std::map<std::string, Value>;
using Document = std::map<std::string, Table>;  // "" holds keys before the first table

namespace detail {

[[noreturn]] inline void fail(const std::string& src, std::size_t line, const std::string& what) {
    throw ConfigError(src + ":" + std::to_string(line), what);
}

inline std::size_t skip_ws(std::string_view s, std::size_t i) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    return i;
}

inline Value parse_value(std::string_view s, std::size_t& i, const std::string& src, std::size_t line) {
    i = skip_ws(s, i);
    if (i >= s.size()) fail(src, line, "missing value");
    Value out;
    out.line = line;
    const char c = s[i];
    if (c == '"') {
        std::string str;
        for (++i; i < s.size() && s[i] != '"'; ++i) {
            if (s[i] == '\\') {
                if (++i >= s.size()) break;
                switch (s[i]) {
                    case 'n': str += '\n'; break;
                    case 't': str += '\t'; break;
                    case '"': str += '"'; break;
                    case '\\': str += '\\'; break;
                    default: fail(src, line, std::string("unsupported escape \\") + s[i]);
                }
            } else {
                str += s[i];
            }
        }
        if (i >= s.size()) fail(src, line, "unterminated string");
        ++i;
        out.v = std::move(str);
        return out;
    }
    if (c == '\'') {
        const auto end = s.find('\'', i + 1);
        if (end == std::string_view::npos) fail(src, line, "unterminated string");
        out.v = std::string(s.substr(i + 1, end - i - 1));
        i = end + 1;
        return out;
    }
    if (c == '[') {
        Array arr;
        ++i;
        while (true) {
            i = skip_ws(s, i);
            if (i < s.size() && s[i] == ']') {
                ++i;
                break;
            }
            arr.push_back(parse_value(s, i, src, line));
            i = skip_ws(s, i);
            if (i < s.size() && s[i] == ',') {
                ++i;
            } else if (i < s.size() && s[i] == ']') {
                ++i;
                break;
            } else {
                fail(src, line, "expected ',' or ']' in array");
            }
        }
        out.v = std::move(arr);
        return out;
    }
    std::size_t end = i;
    while (end < s.size() && s[end] != ',' && s[end] != ']' && s[end] != '#' && s[end] != ' ' && s[end] != '\t') ++end;
    std::string tok(s.substr(i, end - i));
    i = end;
    if (tok == "true" || tok == "false") {
        out.v = tok == "true";
        return out;
    }
    std::erase(tok, '_');
    const bool is_float = tok.find_first_of(".eE") != std::string::npos || tok == "inf" || tok == "nan";
    if (!is_float) {
        std::int64_t n = 0;
        const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), n);
        if (ec == std::errc() && p == tok.data() + tok.size()) {
            out.v = n;
            return out;
        }
    } else {
        double d = 0.0;
        const char* first = tok.data() + (tok.starts_with('+') ? 1 : 0);
        const auto [p, ec] = std::from_chars(first, tok.data() + tok.size(), d);
        if (ec == std::errc() && p == tok.data() + tok.size()) {
            out.v = d;
            return out;
        }
    }
    fail(src, line, "cannot parse value '" + tok + "'");
}

}  // namespace detail

inline Document parse(std::istream& in, const std::string& src) {
    Document doc;
    doc[""];
    std::string current;
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::string_view s(raw);
        if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
        std::size_t i = detail::skip_ws(s, 0);
        if (i >= s.size() || s[i] == '#') continue;
        if (s[i] == '[') {
            const auto close = s.find(']', i);
            if (close == std::string_view::npos) detail::fail(src, line, "unterminated table header");
            current = csv::trim(s.substr(i + 1, close - i - 1));
            if (current.empty()) detail::fail(src, line, "empty table name");
            if (doc.count(current) && current != "") detail::fail(src, line, "duplicate table [" + current + "]");
            doc[current];
            const auto rest = detail::skip_ws(s, close + 1);
            if (rest < s.size() && s[rest] != '#') detail::fail(src, line, "trailing characters after table header");
            continue;
        }
        const auto eq = s.find('=', i);
        if (eq == std::string_view::npos) detail::fail(src, line, "expected key = value");
        std::string key = csv::trim(s.substr(i, eq - i));
        if (key.size() >= 2 && key.front() == '"' && key.back() == '"') key = key.substr(1, key.size() - 2);
        if (key.empty()) detail::fail(src, line, "empty key");
        std::size_t j = eq + 1;
        Value v = detail::parse_value(s, j, src, line);
        j = detail::skip_ws(s, j);
        if (j < s.size() && s[j] != '#') detail::fail(src, line, "trailing characters after value");
        auto& table = doc[current];
        if (table.count(key)) detail::fail(src, line, "duplicate key '" + key + "'");
        table[key] = std::move(v);
    }
    return doc;
}

inline Document parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open " + path);
    return parse(in, path);
}

inline Document parse_string(const std::string& text, const std::string& src = "<string>") {
    std::istringstream in(text);
    return parse(in, src);
}

}  // namespace toml

// ---- run configuration -------------------------------------------------------------

struct DataPaths {
    std::string returns;
    std::string factors;
    std::string macro;
    std::string asset_covariates;  // optional, `<asset>.<name>` columns
    bool percent_is_error = false;
};

struct SampleConfig {
    int ddim_steps = 50;
    double eta = 0.0;
    int samples = 100;  // K
    std::optional<std::uint64_t> seed;  // defaults to the run seed
    std::string split = "test";
    int chain_block = 16;
    int max_dates = 0;  // 0: every anchor of the split
};

struct RunConfig {
    DataPaths data;
    SplitSpec split{{Date::from_ymd(1958, 1, 1), Date::from_ymd(1999, 12, 31)},
                    {Date::from_ymd(2000, 1, 1), Date::from_ymd(2004, 12, 31)},
                    {Date::from_ymd(2005, 1, 1), Date::from_ymd(2023, 12, 31)}};
    DenoiserConfig model;
    TrainConfig train;
    SampleConfig sample;
    FeatureOptions features;
    std::uint64_t seed = 0;
    std::string output_dir = "diffolio_out";
    int threads = 0;
    bool deterministic = false;

    std::uint64_t sample_seed() const { return sample.seed.value_or(seed); }

    SamplerSettings sampler_settings(const NoiseSchedule& sched) const {
        (void)sched;
        SamplerSettings s;
        s.plan = make_ddim_plan(train.diffusion_steps, sample.ddim_steps, sample.eta);
        s.samples = sample.samples;
        s.seed = sample_seed();
        s.chain_block = sample.chain_block;
        return s;
    }

    ParallelOptions parallel() const { return {threads, deterministic}; }

    void validate() const {
        model.validate();
        train.validate();
        try {
            split.validate();
        } catch (const DataError& e) {
            throw ConfigError("split", e.what());
        }
        if (sample.ddim_steps < 1 || sample.ddim_steps > train.diffusion_steps) {
            throw ConfigError("sample.ddim_steps", "must lie in [1, diffusion.T]");
        }
        if (!(sample.eta >= 0.0 && sample.eta <= 1.0)) throw ConfigError("sample.eta", "must lie in [0, 1]");
        if (sample.samples < 1) throw ConfigError("sample.K", "must be >= 1");
        if (sample.chain_block < 1) throw ConfigError("sample.chain_block", "must be >= 1");
        if (sample.max_dates < 0) throw ConfigError("sample.max_dates", "must be >= 0");
        if (sample.split != "train" && sample.split != "val" && sample.split != "test") {
            throw ConfigError("sample.split", "must be one of train, val, test");
        }
        if (threads < 0) throw ConfigError("run.threads", "must be >= 0");
        if (!features.use_characteristics && data.asset_covariates.empty()) {
            throw ConfigError("features.characteristics", "disabling characteristics requires data.asset_covariates");
        }
        const std::pair<const char*, const std::string*> paths[] = {{"data.returns", &data.returns},
                                                                     {"data.factors", &data.factors},
                                                                     {"data.macro", &data.macro},
                                                                     {"data.asset_covariates", &data.asset_covariates}};
        for (const auto& [field, p] : paths) {
            if (!p->empty() && !std::filesystem::exists(*p)) throw ConfigError(field, "file does not exist: " + *p);
        }
    }

    /// Input paths a data-reading command needs.
    void require_data_paths() const {
        if (data.returns.empty()) throw ConfigError("data.returns", "required");
        if (data.factors.empty()) throw ConfigError("data.factors", "required");
        if (data.macro.empty()) throw ConfigError("data.macro", "required");
    }
};

namespace detail {

class ConfigReader {
public:
    ConfigReader(const toml::Document& doc) : doc_(doc) {}

    template <class Fn>
    void section(const std::string& name, std::initializer_list<std::string> keys, Fn&& fn) {
        seen_.insert(name);
        const auto it = doc_.find(name);
        if (it == doc_.end()) return;
        const std::set<std::string> allowed(keys);
        for (const auto& [k, v] : it->second) {
            if (!allowed.count(k)) throw ConfigError(name + "." + k, "unknown key");
        }
        table_ = &it->second;
        prefix_ = name;
        fn(*this);
        table_ = nullptr;
    }

    void finish() const {
        for (const auto& [name, table] : doc_) {
            if (name.empty()) {
                if (!table.empty()) throw ConfigError(table.begin()->first, "unknown key outside of a [section]");
                continue;
            }
            if (!seen_.count(name)) throw ConfigError(name, "unknown section");
        }
    }

    void get(const std::string& key, int& out) const {
        if (const auto* v = find(key)) {
            const auto n = integer(key, *v);
            if (n < std::numeric_limits<int>::min() || n > std::numeric_limits<int>::max()) {
                throw ConfigError(field(key), "integer out of range");
            }
            out = static_cast<int>(n);
        }
    }
    void get(const std::string& key, std::uint64_t& out) const {
        if (const auto* v = find(key)) {
            const auto n = integer(key, *v);
            if (n < 0) throw ConfigError(field(key), "must be >= 0");
            out = static_cast<std::uint64_t>(n);
        }
    }
    void get(const std::string& key, std::optional<std::uint64_t>& out) const {
        if (find(key)) {
            std::uint64_t v = 0;
            get(key, v);
            out = v;
        }
    }
    void get(const std::string& key, double& out) const {
        if (const auto* v = find(key)) {
            if (const auto* d = std::get_if<double>(&v->v)) {
                out = *d;
            } else if (const auto* n = std::get_if<std::int64_t>(&v->v)) {
                out = static_cast<double>(*n);
            } else {
                throw ConfigError(field(key), "expected a number");
            }
        }
    }
    void get(const std::string& key, bool& out) const {
        if (const auto* v = find(key)) {
            const auto* b = std::get_if<bool>(&v->v);
            if (!b) throw ConfigError(field(key), "expected true or false");
            out = *b;
        }
    }
    void get(const std::string& key, std::string& out) const {
        if (const auto* v = find(key)) {
            const auto* s = std::get_if<std::string>(&v->v);
            if (!s) throw ConfigError(field(key), "expected a string");
            out = *s;
        }
    }
    void get(const std::string& key, Date& out) const {
        if (find(key)) {
            std::string s;
            get(key, s);
            const auto d = Date::parse(s);
            if (!d) throw ConfigError(field(key), "expected a YYYY-MM-DD date, got '" + s + "'");
            out = *d;
        }
    }
    void get(const std::string& key, std::vector<int>& out) const {
        if (const auto* v = find(key)) {
            const auto* arr = std::get_if<toml::Array>(&v->v);
            if (!arr) throw ConfigError(field(key), "expected an array of integers");
            out.clear();
            for (const auto& e : *arr) out.push_back(static_cast<int>(integer(key, e)));
        }
    }

private:
    const toml::Value* find(const std::string& key) const {
        const auto it = table_->find(key);
        return it == table_->end() ? nullptr : &it->second;
    }
    std::string field(const std::string& key) const { return prefix_ + "." + key; }
    std::int64_t integer(const std::string& key, const toml::Value& v) const {
        const auto* n = std::get_if<std::int64_t>(&v.v);
        if (!n) throw ConfigError(field(key), "expected an integer");
        return *n;
    }

    const toml::Document& doc_;
    const toml::Table* table_ = nullptr;
    std::string prefix_;
    std::set<std::string> seen_;
};

inline std::string resolve_path(const std::string& p, const std::filesystem::path& base) {
    if (p.empty()) return p;
    const std::filesystem::path path(p);
    return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

}  // namespace detail

/// Builds a RunConfig from a parsed document. Relative paths resolve against `base_dir`.
/// Path existence is not checked here; validate() does that.
inline RunConfig config_from_document(const toml::Document& doc, const std::filesystem::path& base_dir = {}) {
    RunConfig c;
    detail::ConfigReader r(doc);
    r.section("run", {"seed", "output_dir", "threads", "deterministic"}, [&](auto& s) {
        s.get("seed", c.seed);
        s.get("output_dir", c.output_dir);
        s.get("threads", c.threads);
        s.get("deterministic", c.deterministic);
    });
    r.section("data", {"returns", "factors", "macro", "asset_covariates", "percent_is_error"}, [&](auto& s) {
        s.get("returns", c.data.returns);
        s.get("factors", c.data.factors);
        s.get("macro", c.data.macro);
        s.get("asset_covariates", c.data.asset_covariates);
        s.get("percent_is_error", c.data.percent_is_error);
    });
    r.section("split", {"train_start", "train_end", "val_start", "val_end", "test_start", "test_end"}, [&](auto& s) {
        s.get("train_start", c.split.train.first);
        s.get("train_end", c.split.train.last);
        s.get("val_start", c.split.val.first);
        s.get("val_end", c.split.val.last);
        s.get("test_start", c.split.test.first);
        s.get("test_end", c.split.test.last);
    });
    r.section("model",
              {"window", "hidden", "heads", "mlp_hidden", "step_embed_dim", "cross_depth", "self_depth", "window_pos",
               "attention_reduce", "layernorm_eps"},
              [&](auto& s) {
                  s.get("window", c.model.window);
                  s.get("hidden", c.model.hidden);
                  c.model.mlp_hidden = 4 * c.model.hidden;  // unless given explicitly
                  s.get("heads", c.model.heads);
                  s.get("mlp_hidden", c.model.mlp_hidden);
                  s.get("step_embed_dim", c.model.step_embed_dim);
                  s.get("cross_depth", c.model.cross_depth);
                  s.get("self_depth", c.model.self_depth);
                  s.get("window_pos", c.model.window_pos);
                  std::string reduce = "mean";
                  s.get("attention_reduce", reduce);
                  if (reduce == "mean") {
                      c.model.attention_reduce = AttentionReduce::mean;
                  } else if (reduce == "first_head") {
                      c.model.attention_reduce = AttentionReduce::first_head;
                  } else {
                      throw ConfigError("model.attention_reduce", "must be \"mean\" or \"first_head\"");
                  }
                  s.get("layernorm_eps", c.model.layernorm_eps);
              });
    r.section("diffusion", {"T", "beta_start", "beta_end"}, [&](auto& s) {
        s.get("T", c.train.diffusion_steps);
        s.get("beta_start", c.train.beta_start);
        s.get("beta_end", c.train.beta_end);
    });
    r.section("train",
              {"steps", "batch", "lr", "warmup", "lambda_corr", "weight_decay", "clip_norm", "adam_beta1", "adam_beta2",
               "adam_eps", "shrinkage", "shrinkage_delta", "log_every", "val_every", "val_samples", "val_max_dates",
               "checkpoint_every", "probe_steps", "probe_size", "grad_chunks"},
              [&](auto& s) {
                  auto& t = c.train;
                  s.get("steps", t.steps);
                  s.get("batch", t.batch);
                  s.get("lr", t.lr_max);
                  s.get("warmup", t.warmup);
                  s.get("lambda_corr", t.lambda_corr);
                  s.get("weight_decay", t.weight_decay);
                  s.get("clip_norm", t.clip_norm);
                  s.get("adam_beta1", t.adam_beta1);
                  s.get("adam_beta2", t.adam_beta2);
                  s.get("adam_eps", t.adam_eps);
                  std::string mode = "analytic";
                  s.get("shrinkage", mode);
                  if (mode == "analytic") {
                      t.shrinkage = ShrinkageMode::analytic;
                  } else if (mode == "fixed") {
                      t.shrinkage = ShrinkageMode::fixed;
                  } else {
                      throw ConfigError("train.shrinkage", "must be \"analytic\" or \"fixed\"");
                  }
                  s.get("shrinkage_delta", t.shrinkage_delta);
                  s.get("log_every", t.log_every);
                  s.get("val_every", t.val_every);
                  s.get("val_samples", t.val_samples);
                  s.get("val_max_dates", t.val_max_dates);
                  s.get("checkpoint_every", t.checkpoint_every);
                  s.get("probe_steps", t.probe_steps);
                  s.get("probe_size", t.probe_size);
                  s.get("grad_chunks", t.grad_chunks);
              });
    r.section("sample", {"ddim_steps", "eta", "K", "seed", "split", "chain_block", "max_dates"}, [&](auto& s) {
        s.get("ddim_steps", c.sample.ddim_steps);
        s.get("eta", c.sample.eta);
        s.get("K", c.sample.samples);
        s.get("seed", c.sample.seed);
        s.get("split", c.sample.split);
        s.get("chain_block", c.sample.chain_block);
        s.get("max_dates", c.sample.max_dates);
    });
    r.section("features", {"characteristics", "standardize_targets", "zero_asset_covariates", "zero_sys_covariates"},
              [&](auto& s) {
                  s.get("characteristics", c.features.use_characteristics);
                  s.get("standardize_targets", c.features.standardize_targets);
                  s.get("zero_asset_covariates", c.features.zero_asset_covariates);
                  s.get("zero_sys_covariates", c.features.zero_sys_covariates);
              });
    r.finish();
    c.train.seed = c.seed;
    c.data.returns = detail::resolve_path(c.data.returns, base_dir);
    c.data.factors = detail::resolve_path(c.data.factors, base_dir);
    c.data.macro = detail::resolve_path(c.data.macro, base_dir);
    c.data.asset_covariates = detail::resolve_path(c.data.asset_covariates, base_dir);
    c.output_dir = detail::resolve_path(c.output_dir, base_dir);
    return c;
}

/// Parses, defaults and validates a config file.
inline RunConfig validate_config(const std::string& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config", "file does not exist: " + path);
    auto c = config_from_document(toml::parse_file(path), std::filesystem::path(path).parent_path());
    c.validate();
    return c;
}

/// Serializes the fields a config file can set; round-trips through validate_config.
inline std::string config_to_toml(const RunConfig& c) {
    std::ostringstream o;
    auto str = [](const std::string& s) {
        std::string q = "\"";
        for (char ch : s) {
            if (ch == '"' || ch == '\\') q += '\\';
            q += ch;
        }
        return q + "\"";
    };
    auto num = [](double v) { return csv::fmt(v).find_first_of(".eEn") == std::string::npos ? csv::fmt(v) + ".0" : csv::fmt(v); };
    o << "[run]\nseed = " << c.seed << "\noutput_dir = " << str(c.output_dir) << "\nthreads = " << c.threads
      << "\ndeterministic = " << (c.deterministic ? "true" : "false") << "\n\n";
    o << "[data]\nreturns = " << str(c.data.returns) << "\nfactors = " << str(c.data.factors)
      << "\nmacro = " << str(c.data.macro) << "\n";
    if (!c.data.asset_covariates.empty()) o << "asset_covariates = " << str(c.data.asset_covariates) << "\n";
    o << "\n[split]\ntrain_start = \"" << c.split.train.first.iso() << "\"\ntrain_end = \"" << c.split.train.last.iso()
      << "\"\nval_start = \"" << c.split.val.first.iso() << "\"\nval_end = \"" << c.split.val.last.iso()
      << "\"\ntest_start = \"" << c.split.test.first.iso() << "\"\ntest_end = \"" << c.split.test.last.iso() << "\"\n\n";
    const auto& m = c.model;
    o << "[model]\nwindow = " << m.window << "\nhidden = " << m.hidden << "\nheads = " << m.heads
      << "\nmlp_hidden = " << m.mlp_hidden << "\nstep_embed_dim = " << m.step_embed_dim
      << "\ncross_depth = " << m.cross_depth << "\nself_depth = " << m.self_depth
      << "\nwindow_pos = " << (m.window_pos ? "true" : "false") << "\nattention_reduce = \""
      << (m.attention_reduce == AttentionReduce::mean ? "mean" : "first_head") << "\"\n\n";
    const auto& t = c.train;
    o << "[diffusion]\nT = " << t.diffusion_steps << "\nbeta_start = " << num(t.beta_start)
      << "\nbeta_end = " << num(t.beta_end) << "\n\n";
    o << "[train]\nsteps = " << t.steps << "\nbatch = " << t.batch << "\nlr = " << num(t.lr_max)
      << "\nwarmup = " << t.warmup << "\nlambda_corr = " << num(t.lambda_corr)
      << "\nweight_decay = " << num(t.weight_decay) << "\nclip_norm = " << num(t.clip_norm)
      << "\nshrinkage = \"" << (t.shrinkage == ShrinkageMode::analytic ? "analytic" : "fixed") << "\""
      << "\nshrinkage_delta = " << num(t.shrinkage_delta) << "\nlog_every = " << t.log_every
      << "\nval_every = " << t.val_every << "\nval_samples = " << t.val_samples
      << "\nval_max_dates = " << t.val_max_dates << "\ncheckpoint_every = " << t.checkpoint_every << "\n";
    if (!t.probe_steps.empty()) {
        o << "probe_steps = [";
        for (std::size_t i = 0; i < t.probe_steps.size(); ++i) o << (i ? ", " : "") << t.probe_steps[i];
        o << "]\nprobe_size = " << t.probe_size << "\n";
    }
    o << "\n[sample]\nddim_steps = " << c.sample.ddim_steps << "\neta = " << num(c.sample.eta)
      << "\nK = " << c.sample.samples << "\nsplit = " << str(c.sample.split) << "\n";
    if (c.sample.seed) o << "seed = " << *c.sample.seed << "\n";
    if (c.sample.max_dates > 0) o << "max_dates = " << c.sample.max_dates << "\n";
    o << "\n[features]\ncharacteristics = " << (c.features.use_characteristics ? "true" : "false")
      << "\nstandardize_targets = " << (c.features.standardize_targets ? "true" : "false")
      << "\nzero_asset_covariates = " << (c.features.zero_asset_covariates ? "true" : "false")
      << "\nzero_sys_covariates = " << (c.features.zero_sys_covariates ? "true" : "false") << "\n";
    return o.str();
}

}  // namespace diffolio
