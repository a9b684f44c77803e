#pragma once

#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"
#include "methods.hpp"

namespace fedsim {

enum class ModelKind { logistic, mlp };
enum class DataSource { libsvm, synthetic };
enum class PartitionKind { even, dirichlet };

/// A fully resolved experiment description. Every run is a pure function of
/// this struct, including its seed.
struct ExperimentConfig {
    Method method = Method::fedavg;
    ModelKind model = ModelKind::logistic;
    std::vector<std::size_t> layer_dims;  // mlp only, input through output widths

    DataSource source = DataSource::synthetic;
    std::string data_path;                     // libsvm
    std::optional<std::size_t> dim_override;   // libsvm
    std::size_t synth_d = 0;                   // synthetic
    std::size_t synth_n = 0;
    double separation = 1.0;

    PartitionKind partition = PartitionKind::even;
    double alpha = 0.0;  // dirichlet concentration

    std::size_t clients = 0;
    std::size_t rounds = 0;
    std::size_t local_steps = 1;   // K for the convex methods
    std::size_t local_epochs = 1;  // mlp methods
    std::size_t batch_size = 32;   // mlp methods

    double lr = 0.0;
    double l2 = 1e-3;       // logistic regularization; must be 0 for mlp
    double damping = 1.0;   // rho
    FoofMode foof_mode = FoofMode::per_step;
    double init_sigma = 0.1;

    std::uint64_t seed = 1;
    std::vector<std::uint64_t> seeds;  // optional sweep; empty means {seed}
    std::string out = "out";

    std::vector<std::uint64_t> effective_seeds() const {
        return seeds.empty() ? std::vector<std::uint64_t>{seed} : seeds;
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

inline long long parse_int(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    long long v = 0;
    try {
        v = std::stoll(value, &pos);
    } catch (...) {
        throw TypeError(key + ": expected an integer, got '" + value + "'");
    }
    if (pos != value.size()) throw TypeError(key + ": expected an integer, got '" + value + "'");
    return v;
}

inline std::size_t parse_count(const std::string& key, const std::string& value,
                               long long minimum) {
    long long v = parse_int(key, value);
    if (v < minimum)
        throw TypeError(key + ": expected an integer >= " + std::to_string(minimum) + ", got '" +
                        value + "'");
    return static_cast<std::size_t>(v);
}

inline double parse_num(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &pos);
    } catch (...) {
        throw TypeError(key + ": expected a number, got '" + value + "'");
    }
    if (pos != value.size()) throw TypeError(key + ": expected a number, got '" + value + "'");
    return v;
}

inline double parse_nonneg(const std::string& key, const std::string& value) {
    double v = parse_num(key, value);
    if (!(v >= 0.0)) throw TypeError(key + ": expected a nonnegative number, got '" + value + "'");
    return v;
}

inline std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= value.size()) {
        std::size_t comma = value.find(',', start);
        if (comma == std::string::npos) comma = value.size();
        parts.push_back(trim(std::string_view(value).substr(start, comma - start)));
        start = comma + 1;
    }
    return parts;
}

}  // namespace detail

inline Method parse_method(const std::string& value) {
    for (Method m : {Method::psgd, Method::fedavg, Method::sogm, Method::local_newton,
                     Method::fedpm, Method::fedpm_foof, Method::sogm_multi})
        if (value == method_name(m)) return m;
    throw TypeError("method: unknown method '" + value + "'");
}

/// Parse the flat `key = value` config text. One pair per line, `#` comments,
/// dotted keys for nesting. Unknown keys are an error; omitted keys take the
/// documented defaults.
inline ExperimentConfig parse_config(std::string_view text) {
    ExperimentConfig cfg;
    bool saw_method = false, saw_model = false, saw_source = false, saw_clients = false,
         saw_rounds = false, saw_lr = false, saw_d = false, saw_n = false, saw_path = false,
         saw_layers = false, saw_alpha = false, saw_l2 = false, saw_dim_override = false,
         saw_separation = false, saw_local_steps = false, saw_local_epochs = false,
         saw_batch_size = false, saw_foof_mode = false;

    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string_view::npos) eol = text.size();
        std::string_view raw = text.substr(pos, eol - pos);
        bool at_end = eol == text.size();
        pos = eol + 1;
        ++line_no;

        std::size_t hash = raw.find('#');
        if (hash != std::string_view::npos) raw = raw.substr(0, hash);
        std::string line = detail::trim(raw);
        if (line.empty()) {
            if (at_end) break;
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw TypeError("line " + std::to_string(line_no) + ": expected 'key = value'");
        std::string key = detail::trim(std::string_view(line).substr(0, eq));
        std::string value = detail::trim(std::string_view(line).substr(eq + 1));
        if (key.empty() || value.empty())
            throw TypeError("line " + std::to_string(line_no) + ": expected 'key = value'");

        if (key == "method") {
            cfg.method = parse_method(value);
            saw_method = true;
        } else if (key == "model") {
            if (value == "logistic")
                cfg.model = ModelKind::logistic;
            else if (value == "mlp")
                cfg.model = ModelKind::mlp;
            else
                throw TypeError("model: expected logistic or mlp, got '" + value + "'");
            saw_model = true;
        } else if (key == "layer_dims") {
            cfg.layer_dims.clear();
            for (const std::string& p : detail::split_list(value))
                cfg.layer_dims.push_back(detail::parse_count("layer_dims", p, 1));
            if (cfg.layer_dims.size() < 2)
                throw TypeError("layer_dims: need at least input and output widths");
            saw_layers = true;
        } else if (key == "data.source") {
            if (value == "libsvm")
                cfg.source = DataSource::libsvm;
            else if (value == "synthetic")
                cfg.source = DataSource::synthetic;
            else
                throw TypeError("data.source: expected libsvm or synthetic, got '" + value + "'");
            saw_source = true;
        } else if (key == "data.path") {
            cfg.data_path = value;
            saw_path = true;
        } else if (key == "data.dim_override") {
            cfg.dim_override = detail::parse_count("data.dim_override", value, 1);
            saw_dim_override = true;
        } else if (key == "data.d") {
            cfg.synth_d = detail::parse_count("data.d", value, 1);
            saw_d = true;
        } else if (key == "data.n") {
            cfg.synth_n = detail::parse_count("data.n", value, 2);
            saw_n = true;
        } else if (key == "data.separation") {
            cfg.separation = detail::parse_nonneg("data.separation", value);
            saw_separation = true;
        } else if (key == "partition") {
            if (value == "even")
                cfg.partition = PartitionKind::even;
            else if (value == "dirichlet")
                cfg.partition = PartitionKind::dirichlet;
            else
                throw TypeError("partition: expected even or dirichlet, got '" + value + "'");
        } else if (key == "partition.alpha") {
            cfg.alpha = detail::parse_num("partition.alpha", value);
            if (!(cfg.alpha > 0.0))
                throw TypeError("partition.alpha: expected a positive number, got '" + value + "'");
            saw_alpha = true;
        } else if (key == "clients") {
            cfg.clients = detail::parse_count("clients", value, 1);
            saw_clients = true;
        } else if (key == "rounds") {
            cfg.rounds = detail::parse_count("rounds", value, 0);
            saw_rounds = true;
        } else if (key == "local_steps") {
            cfg.local_steps = detail::parse_count("local_steps", value, 1);
            saw_local_steps = true;
        } else if (key == "local_epochs") {
            cfg.local_epochs = detail::parse_count("local_epochs", value, 1);
            saw_local_epochs = true;
        } else if (key == "batch_size") {
            cfg.batch_size = detail::parse_count("batch_size", value, 1);
            saw_batch_size = true;
        } else if (key == "lr") {
            cfg.lr = detail::parse_num("lr", value);
            if (!(cfg.lr > 0.0))
                throw TypeError("lr: expected a positive number, got '" + value + "'");
            saw_lr = true;
        } else if (key == "l2") {
            cfg.l2 = detail::parse_nonneg("l2", value);
            saw_l2 = true;
        } else if (key == "damping") {
            cfg.damping = detail::parse_nonneg("damping", value);
        } else if (key == "foof_mode") {
            if (value == "per_step")
                cfg.foof_mode = FoofMode::per_step;
            else if (value == "end_of_round")
                cfg.foof_mode = FoofMode::end_of_round;
            else
                throw TypeError("foof_mode: expected per_step or end_of_round, got '" + value +
                                "'");
            saw_foof_mode = true;
        } else if (key == "init_sigma") {
            cfg.init_sigma = detail::parse_nonneg("init_sigma", value);
        } else if (key == "seed") {
            cfg.seed = static_cast<std::uint64_t>(detail::parse_count("seed", value, 0));
        } else if (key == "seeds") {
            cfg.seeds.clear();
            for (const std::string& p : detail::split_list(value))
                cfg.seeds.push_back(static_cast<std::uint64_t>(detail::parse_count("seeds", p, 0)));
            if (cfg.seeds.empty()) throw TypeError("seeds: expected a comma-separated list");
        } else if (key == "out") {
            cfg.out = value;
        } else {
            throw UnknownKey("unknown key '" + key + "' on line " + std::to_string(line_no));
        }
    }

    if (!saw_method) throw MissingKey("missing key 'method'");
    if (!saw_model) throw MissingKey("missing key 'model'");
    if (!saw_source) throw MissingKey("missing key 'data.source'");
    if (!saw_clients) throw MissingKey("missing key 'clients'");
    if (!saw_rounds) throw MissingKey("missing key 'rounds'");
    if (!saw_lr) throw MissingKey("missing key 'lr'");

    if (cfg.source == DataSource::libsvm && !saw_path)
        throw MissingKey("missing key 'data.path' (required for data.source = libsvm)");
    if (cfg.source == DataSource::synthetic) {
        if (!saw_d) throw MissingKey("missing key 'data.d' (required for data.source = synthetic)");
        if (!saw_n) throw MissingKey("missing key 'data.n' (required for data.source = synthetic)");
        if (saw_path) throw UnknownKey("data.path does not apply to synthetic data");
        if (saw_dim_override) throw UnknownKey("data.dim_override does not apply to synthetic data");
    } else {
        if (saw_d || saw_n || saw_separation)
            throw UnknownKey("data.d / data.n / data.separation apply only to synthetic data");
    }
    if (cfg.partition == PartitionKind::dirichlet && !saw_alpha)
        throw MissingKey("missing key 'partition.alpha' (required for partition = dirichlet)");
    if (cfg.partition == PartitionKind::even && saw_alpha)
        throw UnknownKey("partition.alpha applies only to partition = dirichlet");

    // Method/model compatibility, checked before any compute.
    const bool needs_full_hessian = cfg.method == Method::sogm ||
                                    cfg.method == Method::local_newton ||
                                    cfg.method == Method::fedpm || cfg.method == Method::sogm_multi;
    if (saw_foof_mode && cfg.method != Method::fedpm_foof)
        throw IncompatibleMethodModel("foof_mode applies only to method = fedpm_foof");
    if (cfg.model == ModelKind::logistic) {
        if (cfg.method == Method::fedpm_foof)
            throw IncompatibleMethodModel("fedpm_foof requires model = mlp");
        if (saw_layers) throw IncompatibleMethodModel("layer_dims applies only to model = mlp");
        if (saw_local_epochs || saw_batch_size)
            throw IncompatibleMethodModel(
                "local_epochs / batch_size apply only to model = mlp; use local_steps");
        if (!saw_l2) cfg.l2 = 1e-3;
    } else {
        if (needs_full_hessian)
            throw IncompatibleMethodModel(std::string(method_name(cfg.method)) +
                                          " needs a full-Hessian objective; use model = logistic");
        if (saw_local_steps)
            throw IncompatibleMethodModel(
                "local_steps applies only to model = logistic; use local_epochs");
        if (!saw_layers) throw MissingKey("missing key 'layer_dims' (required for model = mlp)");
        if (!saw_l2) cfg.l2 = 0.0;
        if (cfg.l2 != 0.0)
            throw IncompatibleMethodModel("the mlp objective has no L2 term; set l2 = 0");
        if (cfg.source == DataSource::synthetic && cfg.layer_dims.front() != cfg.synth_d)
            throw IncompatibleMethodModel("layer_dims input width must equal data.d");
    }
    return cfg;
}

/// Canonical `key = value` rendering of a resolved config. Parsing the
/// rendered text reproduces the config exactly.
inline std::string render_config(const ExperimentConfig& cfg) {
    std::string s;
    auto kv = [&s](const std::string& k, const std::string& v) { s += k + " = " + v + "\n"; };
    kv("method", method_name(cfg.method));
    kv("model", cfg.model == ModelKind::logistic ? "logistic" : "mlp");
    if (cfg.model == ModelKind::mlp) {
        std::string dims;
        for (std::size_t i = 0; i < cfg.layer_dims.size(); ++i) {
            if (i) dims += ",";
            dims += std::to_string(cfg.layer_dims[i]);
        }
        kv("layer_dims", dims);
    }
    kv("data.source", cfg.source == DataSource::libsvm ? "libsvm" : "synthetic");
    if (cfg.source == DataSource::libsvm) {
        kv("data.path", cfg.data_path);
        if (cfg.dim_override) kv("data.dim_override", std::to_string(*cfg.dim_override));
    } else {
        kv("data.d", std::to_string(cfg.synth_d));
        kv("data.n", std::to_string(cfg.synth_n));
        kv("data.separation", format_double(cfg.separation));
    }
    kv("partition", cfg.partition == PartitionKind::even ? "even" : "dirichlet");
    if (cfg.partition == PartitionKind::dirichlet) kv("partition.alpha", format_double(cfg.alpha));
    kv("clients", std::to_string(cfg.clients));
    kv("rounds", std::to_string(cfg.rounds));
    if (cfg.model == ModelKind::logistic) {
        kv("local_steps", std::to_string(cfg.local_steps));
    } else {
        kv("local_epochs", std::to_string(cfg.local_epochs));
        kv("batch_size", std::to_string(cfg.batch_size));
    }
    kv("lr", format_double(cfg.lr));
    kv("l2", format_double(cfg.l2));
    kv("damping", format_double(cfg.damping));
    if (cfg.method == Method::fedpm_foof)
        kv("foof_mode", cfg.foof_mode == FoofMode::per_step ? "per_step" : "end_of_round");
    kv("init_sigma", format_double(cfg.init_sigma));
    kv("seed", std::to_string(cfg.seed));
    if (!cfg.seeds.empty()) {
        std::string list;
        for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
            if (i) list += ",";
            list += std::to_string(cfg.seeds[i]);
        }
        kv("seeds", list);
    }
    kv("out", cfg.out);
    return s;
}

}  // namespace fedsim
