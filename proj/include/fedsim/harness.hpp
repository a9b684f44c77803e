#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "config.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "linalg.hpp"
#include "methods.hpp"
#include "objectives.hpp"
#include "partition.hpp"
#include "rng.hpp"

namespace fedsim {

/// The global objective f = (1/N) sum_i f_i over a client set; the quantity
/// every method optimizes and the oracle minimizes.
template <typename Obj>
class GlobalObjective {
public:
    explicit GlobalObjective(const std::vector<Obj>& clients) : clients_(&clients) {}

    std::size_t dim() const { return clients_->front().dim(); }

    double value(const Vec& theta) const {
        double s = 0.0;
        for (const Obj& c : *clients_) s += c.value(theta);
        return s / static_cast<double>(clients_->size());
    }

    Vec gradient(const Vec& theta) const {
        std::vector<Vec> gs;
        gs.reserve(clients_->size());
        for (const Obj& c : *clients_) gs.push_back(c.gradient(theta));
        return vec_mean(gs);
    }

    Matrix hessian(const Vec& theta) const {
        std::vector<Matrix> hs;
        hs.reserve(clients_->size());
        for (const Obj& c : *clients_) hs.push_back(c.hessian(theta));
        return matrix_mean(hs);
    }

private:
    const std::vector<Obj>* clients_;
};

/// Newton's method on the global objective from theta = 0; returns the
/// iterate after `iterations` undamped steps (rho = 0 by default). The
/// gradient norm at the result is reported through `grad_norm_out`.
template <typename Obj>
Vec newton_oracle(const std::vector<Obj>& clients, std::size_t iterations = 20, double rho = 0.0,
                  double* grad_norm_out = nullptr) {
    if (clients.empty()) throw EmptyList("newton_oracle: no objectives");
    GlobalObjective<Obj> global(clients);
    Vec theta(global.dim(), 0.0);
    for (std::size_t it = 0; it < iterations; ++it) {
        Matrix h = damp(global.hessian(theta), rho);
        theta = step(theta, 1.0, cholesky_solve(h, global.gradient(theta)));
    }
    ensure_finite(theta, "newton_oracle");
    if (grad_norm_out) *grad_norm_out = norm2(global.gradient(theta));
    return theta;
}

/// theta* + sigma * z with z standard normal per coordinate.
inline Vec init_near_optimum(const Vec& theta_star, double sigma, std::uint64_t seed) {
    Rng rng(seed, {0x1217});
    Vec theta = theta_star;
    for (double& x : theta) x += sigma * rng.normal();
    return theta;
}

/// Strong-convexity and Hessian-Lipschitz constants used by the convergence
/// checks. mu is the analytic lower bound (the L2 coefficient); the two
/// Lipschitz constants are sampled estimates and so mild underestimates.
struct ConvexityConstants {
    double mu = 0.0;
    double l_star = 0.0;  // spectral-norm Hessian Lipschitz estimate
    double l_f = 0.0;     // Frobenius-norm Hessian Lipschitz estimate
};

/// Estimates L_* and L_F as the largest ratio |H_i(a) - H_i(b)| / |a - b|
/// over random pairs within `radius` of theta*, maxed over clients. The
/// spectral norm is evaluated by power iteration to relative 1e-6.
template <typename Obj>
ConvexityConstants estimate_constants(const std::vector<Obj>& clients, const Vec& theta_star,
                                      std::size_t n_pairs, double radius, std::uint64_t seed) {
    if (clients.empty()) throw EmptyList("estimate_constants: no objectives");
    ConvexityConstants k;
    k.mu = clients.front().lambda();
    for (const Obj& c : clients) k.mu = std::min(k.mu, c.lambda());

    Rng rng(seed, {0xc0457});
    const std::size_t d = theta_star.size();
    auto sample_point = [&]() {
        Vec z(d);
        for (double& x : z) x = rng.normal();
        double nz = norm2(z);
        double r = d > 0 ? radius * std::pow(rng.uniform_open(), 1.0 / static_cast<double>(d)) : 0.0;
        Vec p = theta_star;
        if (nz > 0.0)
            for (std::size_t j = 0; j < d; ++j) p[j] += r * z[j] / nz;
        return p;
    };

    for (std::size_t pair = 0; pair < n_pairs; ++pair) {
        Vec a = sample_point();
        Vec b = sample_point();
        double dist = norm2(sub(a, b));
        if (dist < 1e-12) continue;
        for (const Obj& c : clients) {
            Matrix delta = matrix_sub(c.hessian(a), c.hessian(b));
            k.l_f = std::max(k.l_f, frobenius_norm(delta) / dist);
            k.l_star = std::max(k.l_star, spectral_norm_sym(delta, 1e-6, seed + pair) / dist);
        }
    }
    return k;
}

/// Result of evaluating the initial-parameter condition: the distance bound
/// min(mu / (2 sqrt(2) L_F), mu / (sqrt(2) L_*)) and the per-client Hessian
/// proximity bound mu / (2 sqrt(2)). Constants below 1e-12 make the distance
/// bound unbounded (the constant-Hessian case).
struct Condition1Report {
    bool holds = false;
    double dist = 0.0;
    double dist_bound = 0.0;
    double dist_slack = 0.0;
    double hess_diff_max = 0.0;
    double hess_bound = 0.0;
    double hess_slack = 0.0;
};

template <typename Obj>
Condition1Report check_condition1(const Vec& theta0, const Vec& theta_star,
                                  const ConvexityConstants& k, const std::vector<Obj>& clients) {
    const double inf = std::numeric_limits<double>::infinity();
    const double sqrt2 = std::sqrt(2.0);
    Condition1Report r;
    r.dist = norm2(sub(theta0, theta_star));
    double b1 = k.l_f > 1e-12 ? k.mu / (2.0 * sqrt2 * k.l_f) : inf;
    double b2 = k.l_star > 1e-12 ? k.mu / (sqrt2 * k.l_star) : inf;
    r.dist_bound = std::min(b1, b2);
    r.dist_slack = r.dist_bound - r.dist;

    r.hess_bound = k.mu / (2.0 * sqrt2);
    r.hess_diff_max = 0.0;
    for (const Obj& c : clients) {
        double diff = frobenius_norm(matrix_sub(c.hessian(theta0), c.hessian(theta_star)));
        r.hess_diff_max = std::max(r.hess_diff_max, diff);
    }
    r.hess_slack = r.hess_bound - r.hess_diff_max;
    r.holds = r.dist <= r.dist_bound && r.hess_diff_max <= r.hess_bound;
    return r;
}

/// Phi(t) = (1/N) sum_i |H_i(theta) - H_i(theta*)|_F^2 + 6 L_F^2 |theta - theta*|^2.
template <typename Obj>
double lyapunov(const Vec& theta, const Vec& theta_star, const std::vector<Obj>& clients,
                double l_f) {
    if (clients.empty()) throw EmptyList("lyapunov: no objectives");
    double h = 0.0;
    for (const Obj& c : clients) {
        double f = frobenius_norm(matrix_sub(c.hessian(theta), c.hessian(theta_star)));
        h += f * f;
    }
    h /= static_cast<double>(clients.size());
    double dist = norm2(sub(theta, theta_star));
    return h + 6.0 * l_f * l_f * dist * dist;
}

// ---------------------------------------------------------------------------
// Accuracy.

/// Binary accuracy of sign(x^T theta) against -1/+1 labels; sign(0) counts
/// as +1 so the metric is deterministic.
inline double binary_accuracy(const Dataset& ds, const Vec& theta) {
    if (ds.size() == 0) throw EmptyDataset("binary_accuracy: empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        int pred = dot(ds.features[i], theta) >= 0.0 ? 1 : -1;
        if (pred == ds.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

/// Multiclass accuracy by argmax of the network output (first maximum wins).
inline double mlp_accuracy(const MlpLayout& layout, const Vec& theta, const Dataset& ds) {
    if (ds.size() == 0) throw EmptyDataset("mlp_accuracy: empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Vec logits = mlp_logits(layout, theta, ds.features[i]);
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.size(); ++j)
            if (logits[j] > logits[best]) best = j;
        if (static_cast<int>(best) == ds.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// ---------------------------------------------------------------------------
// Experiment loop.

/// Metrics for one global iterate. Row t describes theta^(t); the metrics
/// that need the oracle solution are absent for MLP runs, and ratio is
/// absent at t = 0.
struct RoundRecord {
    std::size_t round = 0;
    std::optional<double> loss_gap;    // |f(theta) - f(theta*)|
    std::optional<double> param_dist;  // |theta - theta*|
    std::optional<double> ratio;       // param_dist(t) / param_dist(t-1)
    std::optional<double> lyapunov;
    double train_loss = 0.0;
    double accuracy = 0.0;
    long long floats_up = 0;
    long long floats_down = 0;
    double elapsed_ms = 0.0;
};

inline std::string csv_header() {
    return "round,loss_gap,param_dist,ratio,lyapunov,train_loss,accuracy,floats_up,floats_down,"
           "elapsed_ms";
}

inline std::string to_csv_row(const RoundRecord& r) {
    auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
    std::string row = std::to_string(r.round);
    row += ',' + opt(r.loss_gap);
    row += ',' + opt(r.param_dist);
    row += ',' + opt(r.ratio);
    row += ',' + opt(r.lyapunov);
    row += ',' + format_double(r.train_loss);
    row += ',' + format_double(r.accuracy);
    row += ',' + std::to_string(r.floats_up);
    row += ',' + std::to_string(r.floats_down);
    row += ',' + format_double(r.elapsed_ms);
    return row;
}

inline std::string to_csv(std::span<const RoundRecord> records) {
    std::string out = csv_header() + "\n";
    for (const RoundRecord& r : records) out += to_csv_row(r) + "\n";
    return out;
}

/// The materialized problem behind a config: data, shards, and per-client
/// objectives for whichever model the config names.
struct Problem {
    Dataset data;
    Partition partition;
    std::vector<LogisticL2Objective> logistic_clients;
    std::vector<MlpObjective> mlp_clients;
    MlpLayout layout;
};

inline std::string read_file(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open '" + path + "'");
    std::string text;
    char buf[1 << 16];
    std::size_t got;
    while ((got = std::fread(buf, 1, sizeof(buf), f)) > 0) text.append(buf, got);
    std::fclose(f);
    return text;
}

inline Problem build_problem(const ExperimentConfig& cfg, std::uint64_t seed) {
    Problem p;
    if (cfg.source == DataSource::libsvm) {
        p.data = parse_libsvm(read_file(cfg.data_path), cfg.dim_override.value_or(0));
        if (cfg.model == ModelKind::mlp) {
            // Binary LibSVM labels become classes 0 and 1.
            for (int& y : p.data.labels) y = y > 0 ? 1 : 0;
            p.data.classes = 2;
        }
    } else if (cfg.model == ModelKind::logistic) {
        p.data = synth_logistic(cfg.synth_d, cfg.synth_n, cfg.separation, seed);
    } else {
        p.data = synth_blobs(cfg.synth_d, cfg.synth_n, cfg.layer_dims.back(), cfg.separation, seed);
    }

    p.partition = cfg.partition == PartitionKind::even
                      ? partition_even(p.data, cfg.clients)
                      : partition_dirichlet(p.data, cfg.clients, cfg.alpha, seed);

    if (cfg.model == ModelKind::logistic) {
        for (const auto& shard : p.partition.shards)
            p.logistic_clients.push_back(LogisticL2Objective::from_shard(p.data, shard, cfg.l2));
    } else {
        if (cfg.layer_dims.front() != p.data.dim)
            throw IncompatibleMethodModel("layer_dims input width " +
                                          std::to_string(cfg.layer_dims.front()) +
                                          " does not match data dimension " +
                                          std::to_string(p.data.dim));
        if (cfg.layer_dims.back() < p.data.classes)
            throw IncompatibleMethodModel("layer_dims output width is smaller than the class count");
        p.layout.dims = cfg.layer_dims;
        for (const auto& shard : p.partition.shards)
            p.mlp_clients.push_back(MlpObjective::from_shard(p.data, shard, p.layout));
    }
    return p;
}

/// Gaussian MLP initialization scaled by 1/sqrt(fan_in) per layer, bias rows
/// zero. Deterministic in the seed.
inline Vec mlp_init(const MlpLayout& layout, std::uint64_t seed) {
    Rng rng(seed, {0x1217, 0x321});
    Vec theta(layout.flat_dim(), 0.0);
    for (std::size_t l = 0; l < layout.layers(); ++l) {
        const std::size_t in = layout.in_dim(l);
        const std::size_t out = layout.out_dim(l);
        double s = 1.0 / std::sqrt(static_cast<double>(layout.dims[l]));
        double* seg = theta.data() + layout.offset(l);
        for (std::size_t j = 0; j < out; ++j)
            for (std::size_t i = 0; i < in; ++i)
                seg[j * in + i] = (i + 1 == in) ? 0.0 : s * rng.normal();
    }
    return theta;
}

struct ExperimentResult {
    std::vector<RoundRecord> records;
    std::vector<Vec> trajectory;  // theta^(0) .. theta^(T)
    Vec theta_final;
    std::optional<Vec> theta_star;
    std::optional<ConvexityConstants> constants;
    std::optional<Condition1Report> condition1;
    double loss_at_star = 0.0;
    double oracle_grad_norm = 0.0;
};

namespace detail {

inline RoundOutput dispatch_round(const ExperimentConfig& cfg, const MethodConfig& mcfg,
                                  const Problem& p, const Vec& theta, std::uint64_t round_index,
                                  FoofState& foof_state) {
    if (cfg.model == ModelKind::logistic) {
        const auto& clients = p.logistic_clients;
        switch (cfg.method) {
            case Method::psgd: return round_psgd(theta, clients, mcfg);
            case Method::fedavg: return round_fedavg(theta, clients, mcfg);
            case Method::sogm: return round_sogm(theta, clients, mcfg);
            case Method::local_newton: return round_local_newton(theta, clients, mcfg);
            case Method::fedpm: return round_fedpm(theta, clients, mcfg);
            case Method::sogm_multi: return round_sogm_multi(theta, clients, mcfg);
            case Method::fedpm_foof: break;
        }
        throw IncompatibleMethodModel("fedpm_foof requires model = mlp");
    }
    const auto& clients = p.mlp_clients;
    switch (cfg.method) {
        case Method::psgd: return round_psgd(theta, clients, mcfg);
        case Method::fedavg: return round_fedavg_mlp(theta, clients, mcfg, round_index);
        case Method::fedpm_foof:
            return round_fedpm_foof(theta, clients, mcfg, round_index, foof_state);
        default:
            throw IncompatibleMethodModel(std::string(method_name(cfg.method)) +
                                          " needs a full-Hessian objective; use model = logistic");
    }
}

}  // namespace detail

/// Runs T rounds of the configured method and records metrics for every
/// global iterate theta^(0) .. theta^(T). T = 0 returns no records.
/// Numerical failures carry the failing round index.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    using clock = std::chrono::steady_clock;
    const std::uint64_t seed = cfg.seed;
    Problem p = build_problem(cfg, seed);

    MethodConfig mcfg;
    mcfg.method = cfg.method;
    mcfg.eta = cfg.lr;
    mcfg.local_steps = cfg.model == ModelKind::logistic ? cfg.local_steps : cfg.local_epochs;
    mcfg.damping = cfg.damping;
    mcfg.foof_mode = cfg.foof_mode;
    mcfg.batch_size = cfg.batch_size;
    mcfg.seed = seed;

    ExperimentResult result;
    Vec theta;

    const bool convex = cfg.model == ModelKind::logistic;
    GlobalObjective<LogisticL2Objective> global_logistic(p.logistic_clients);
    GlobalObjective<MlpObjective> global_mlp(p.mlp_clients);

    if (convex) {
        double grad_norm = 0.0;
        Vec star = newton_oracle(p.logistic_clients, 20, 0.0, &grad_norm);
        result.oracle_grad_norm = grad_norm;
        result.loss_at_star = global_logistic.value(star);
        result.constants = estimate_constants(p.logistic_clients, star, 40, 0.5, seed);
        theta = init_near_optimum(star, cfg.init_sigma, seed);
        result.condition1 = check_condition1(theta, star, *result.constants, p.logistic_clients);
        result.theta_star = std::move(star);
    } else {
        theta = mlp_init(p.layout, seed);
    }

    if (cfg.rounds == 0) {
        result.theta_final = theta;
        result.trajectory.push_back(theta);
        return result;
    }

    auto record_state = [&](std::size_t t, const Vec& th, const CommCost& cost, double elapsed,
                            std::optional<double> prev_dist) {
        RoundRecord r;
        r.round = t;
        if (convex) {
            const Vec& star = *result.theta_star;
            double loss = global_logistic.value(th);
            r.loss_gap = std::abs(loss - result.loss_at_star);
            double dist = norm2(sub(th, star));
            r.param_dist = dist;
            if (prev_dist && *prev_dist > 0.0) r.ratio = dist / *prev_dist;
            r.lyapunov = lyapunov(th, star, p.logistic_clients, result.constants->l_f);
            r.train_loss = loss;
            r.accuracy = binary_accuracy(p.data, th);
        } else {
            r.train_loss = global_mlp.value(th);
            r.accuracy = mlp_accuracy(p.layout, th, p.data);
        }
        r.floats_up = cost.floats_up;
        r.floats_down = cost.floats_down;
        r.elapsed_ms = elapsed;
        result.records.push_back(std::move(r));
    };

    FoofState foof_state;
    result.trajectory.push_back(theta);
    record_state(0, theta, CommCost{0, 0}, 0.0, std::nullopt);

    for (std::size_t t = 0; t < cfg.rounds; ++t) {
        std::optional<double> prev_dist = result.records.back().param_dist;
        auto started = clock::now();
        RoundOutput out;
        try {
            out = detail::dispatch_round(cfg, mcfg, p, theta, t, foof_state);
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::numeric) throw RoundError(t, e);
            throw;
        }
        double elapsed =
            std::chrono::duration<double, std::milli>(clock::now() - started).count();
        theta = std::move(out.theta);
        result.trajectory.push_back(theta);
        record_state(t + 1, theta, out.cost, elapsed, prev_dist);
    }
    result.theta_final = theta;
    return result;
}

}  // namespace fedsim
