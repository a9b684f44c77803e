#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "errors.hpp"
#include "linalg.hpp"
#include "objectives.hpp"
#include "rng.hpp"

namespace fedsim {

enum class Method { psgd, fedavg, sogm, local_newton, fedpm, fedpm_foof, sogm_multi };
enum class FoofMode { per_step, end_of_round };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::psgd: return "psgd";
        case Method::fedavg: return "fedavg";
        case Method::sogm: return "sogm";
        case Method::local_newton: return "local_newton";
        case Method::fedpm: return "fedpm";
        case Method::fedpm_foof: return "fedpm_foof";
        case Method::sogm_multi: return "sogm_multi";
    }
    return "?";
}

/// Per-round knobs shared by every method. `local_steps` counts exact
/// full-gradient (or damped-Newton) steps for the convex methods and local
/// epochs for the minibatch MLP methods.
struct MethodConfig {
    Method method = Method::fedavg;
    double eta = 1.0;           // learning rate
    std::size_t local_steps = 1;  // K
    double damping = 0.0;       // rho, added before every solve
    FoofMode foof_mode = FoofMode::per_step;
    std::size_t batch_size = 32;  // MLP minibatch size
    std::uint64_t seed = 1;       // keys the per-client shuffle streams
    unsigned threads = 1;         // client-side parallelism; result is order-independent
};

/// Per-client-per-round communication volume in 64-bit float counts.
struct CommCost {
    long long floats_up = 0;
    long long floats_down = 0;
};

struct RoundOutput {
    Vec theta;
    CommCost cost;
};

/// Upload float counts from the cost model: the server always broadcasts the
/// d global parameters; uploads depend on what the method transmits.
inline CommCost comm_cost(Method m, std::size_t d) {
    const long long dd = static_cast<long long>(d);
    switch (m) {
        case Method::psgd:
        case Method::fedavg:
        case Method::local_newton:
            return {dd, dd};
        case Method::sogm:
        case Method::fedpm:
        case Method::sogm_multi:
            return {dd + dd * dd, dd};
        case Method::fedpm_foof:
            throw ModelMismatch("comm_cost: fedpm_foof cost depends on the layer layout");
    }
    return {};
}

/// FOOF upload: the d parameters plus one (n_{l-1}+1)^2 block per layer.
inline CommCost comm_cost_foof(const MlpLayout& layout) {
    long long up = static_cast<long long>(layout.flat_dim());
    for (std::size_t l = 0; l < layout.layers(); ++l) {
        long long b = static_cast<long long>(layout.in_dim(l));
        up += b * b;
    }
    return {up, static_cast<long long>(layout.flat_dim())};
}

namespace detail {

/// Runs fn(0..n-1); with threads > 1 the iterations execute concurrently.
/// Each iteration writes only its own slots, so the observable result is
/// identical to the sequential order.
template <typename Fn>
void for_each_client(std::size_t n, unsigned threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    unsigned workers = std::min<unsigned>(threads, static_cast<unsigned>(n));
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

/// One damped-Newton step at theta.
template <typename Obj>
Vec newton_step(const Obj& obj, const Vec& theta, double eta, double rho) {
    Matrix h = damp(obj.hessian(theta), rho);
    Vec g = obj.gradient(theta);
    return step(theta, eta, cholesky_solve(h, g));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// First-order methods.

/// Parallel gradient descent: every client evaluates its full local gradient
/// at the broadcast parameter and the server applies the mixed step
/// theta - (eta/N) sum_i g_i. Computed through the same parameter-mixing
/// arithmetic as a K=1 FedAvg round, so the two coincide bit for bit.
template <typename Obj>
RoundOutput round_psgd(const Vec& theta, const std::vector<Obj>& clients,
                       const MethodConfig& cfg) {
    const std::size_t n = clients.size();
    if (n == 0) throw EmptyList("round_psgd: no clients");
    std::vector<Vec> locals(n);
    detail::for_each_client(n, cfg.threads, [&](std::size_t i) {
        locals[i] = step(theta, cfg.eta, clients[i].gradient(theta));
    });
    Vec next = vec_mean(locals);
    ensure_finite(next, "round_psgd");
    return {std::move(next), comm_cost(Method::psgd, theta.size())};
}

/// FedAvg: K full-gradient steps per client, then simple mixing.
template <typename Obj>
RoundOutput round_fedavg(const Vec& theta, const std::vector<Obj>& clients,
                         const MethodConfig& cfg) {
    const std::size_t n = clients.size();
    if (n == 0) throw EmptyList("round_fedavg: no clients");
    std::vector<Vec> locals(n);
    detail::for_each_client(n, cfg.threads, [&](std::size_t i) {
        Vec local = theta;
        for (std::size_t k = 0; k < cfg.local_steps; ++k)
            local = step(local, cfg.eta, clients[i].gradient(local));
        locals[i] = std::move(local);
    });
    Vec next = vec_mean(locals);
    ensure_finite(next, "round_fedavg");
    return {std::move(next), comm_cost(Method::fedavg, theta.size())};
}

// ---------------------------------------------------------------------------
// Second-order methods with full Hessians.

/// Gradient mixing with Hessian aggregation: clients upload g_i and P_i at
/// the broadcast parameter; the server solves the mixed damped system.
template <typename Obj>
RoundOutput round_sogm(const Vec& theta, const std::vector<Obj>& clients,
                       const MethodConfig& cfg) {
    const std::size_t n = clients.size();
    if (n == 0) throw EmptyList("round_sogm: no clients");
    std::vector<Vec> grads(n);
    std::vector<Matrix> hessians(n);
    detail::for_each_client(n, cfg.threads, [&](std::size_t i) {
        grads[i] = clients[i].gradient(theta);
        hessians[i] = clients[i].hessian(theta);
    });
    Matrix mixed = damp(matrix_mean(hessians), cfg.damping);
    Vec next = step(theta, cfg.eta, cholesky_solve(mixed, vec_mean(grads)));
    ensure_finite(next, "round_sogm");
    return {std::move(next), comm_cost(Method::sogm, theta.size())};
}

/// Local damped-Newton steps with simple parameter mixing on the server.
template <typename Obj>
RoundOutput round_local_newton(const Vec& theta, const std::vector<Obj>& clients,
                               const MethodConfig& cfg) {
    const std::size_t n = clients.size();
    if (n == 0) throw EmptyList("round_local_newton: no clients");
    std::vector<Vec> locals(n);
    detail::for_each_client(n, cfg.threads, [&](std::size_t i) {
        Vec local = theta;
        for (std::size_t k = 0; k < cfg.local_steps; ++k)
            local = detail::newton_step(clients[i], local, cfg.eta, cfg.damping);
        locals[i] = std::move(local);
    });
    Vec next = vec_mean(locals);
    ensure_finite(next, "round_local_newton");
    return {std::move(next), comm_cost(Method::local_newton, theta.size())};
}

/// Local trajectory recorded by round_fedpm when requested; index order is
/// [client][local step].
struct FedpmTrace {
    std::vector<std::vector<Vec>> thetas;      // K+1 iterates per client
    std::vector<std::vector<Vec>> gradients;   // K gradients per client
    std::vector<std::vector<Matrix>> hessians; // K undamped Hessians per client
};

/// Preconditioned parameter mixing. Clients run K damped-Newton steps and
/// upload the final parameter together with the last-step Hessian
/// P_i = hessian(theta_i at step K-1), undamped. The server solves
/// damp(mean P_i, rho) against each P_i theta_i and averages.
template <typename Obj>
RoundOutput round_fedpm(const Vec& theta, const std::vector<Obj>& clients,
                        const MethodConfig& cfg, FedpmTrace* trace = nullptr) {
    const std::size_t n = clients.size();
    if (n == 0) throw EmptyList("round_fedpm: no clients");
    if (cfg.local_steps == 0) throw DimensionMismatch("round_fedpm: K must be at least 1");

    std::vector<Vec> locals(n);
    std::vector<Matrix> last_hessians(n);
    if (trace) {
        trace->thetas.assign(n, {});
        trace->gradients.assign(n, {});
        trace->hessians.assign(n, {});
    }
    detail::for_each_client(n, cfg.threads, [&](std::size_t i) {
        Vec local = theta;
        Matrix last;
        for (std::size_t k = 0; k < cfg.local_steps; ++k) {
            Matrix h = clients[i].hessian(local);
            Vec g = clients[i].gradient(local);
            if (trace) {
                trace->thetas[i].push_back(local);
                trace->gradients[i].push_back(g);
                trace->hessians[i].push_back(h);
            }
            Vec dir = cholesky_solve(damp(h, cfg.damping), g);
            if (k + 1 == cfg.local_steps) last = std::move(h);
            local = step(local, cfg.eta, dir);
        }
        if (trace) trace->thetas[i].push_back(local);
        locals[i] = std::move(local);
        last_hessians[i] = std::move(last);
    });

    Cholesky mixed(damp(matrix_mean(last_hessians), cfg.damping));
    Vec acc(theta.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        Vec mixed_i = mixed.solve(matvec(last_hessians[i], locals[i]));
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += mixed_i[k];
    }
    for (double& x : acc) x /= static_cast<double>(n);
    ensure_finite(acc, "round_fedpm");
    return {std::move(acc), comm_cost(Method::fedpm, theta.size())};
}

/// K-1 local damped-Newton steps followed by one gradient-mixing update with
/// the averaged final local Hessians: the server computes
/// theta - eta * solve(damp(mean P_i, rho), mean grad_i(theta_i)).
/// The contrast method: unlike preconditioned mixing it discards the
/// intermediate local trajectory.
template <typename Obj>
RoundOutput round_sogm_multi(const Vec& theta, const std::vector<Obj>& clients,
                             const MethodConfig& cfg) {
    const std::size_t n = clients.size();
    if (n == 0) throw EmptyList("round_sogm_multi: no clients");
    if (cfg.local_steps == 0) throw DimensionMismatch("round_sogm_multi: K must be at least 1");

    std::vector<Vec> grads(n);
    std::vector<Matrix> hessians(n);
    detail::for_each_client(n, cfg.threads, [&](std::size_t i) {
        Vec local = theta;
        for (std::size_t k = 0; k + 1 < cfg.local_steps; ++k)
            local = detail::newton_step(clients[i], local, cfg.eta, cfg.damping);
        grads[i] = clients[i].gradient(local);
        hessians[i] = clients[i].hessian(local);
    });
    Matrix mixed = damp(matrix_mean(hessians), cfg.damping);
    Vec next = step(theta, cfg.eta, cholesky_solve(mixed, vec_mean(grads)));
    ensure_finite(next, "round_sogm_multi");
    return {std::move(next), comm_cost(Method::sogm_multi, theta.size())};
}

/// Evaluates the expanded form of the preconditioned-mixing update, i.e. the
/// mixing applied to theta minus the full weighted history of local updates,
/// using the recorded trajectory and the same damped matrices as the round
/// itself. Returns the L2 distance to the round_fedpm result; test-only.
template <typename Obj>
double fedpm_expanded_check(const Vec& theta, const std::vector<Obj>& clients,
                            const MethodConfig& cfg) {
    FedpmTrace trace;
    RoundOutput direct = round_fedpm(theta, clients, cfg, &trace);

    const std::size_t n = clients.size();
    const std::size_t k_steps = cfg.local_steps;
    Cholesky mixed(damp(matrix_mean(
                            [&] {
                                std::vector<Matrix> last;
                                for (std::size_t i = 0; i < n; ++i)
                                    last.push_back(trace.hessians[i][k_steps - 1]);
                                return last;
                            }()),
                        cfg.damping));

    Vec acc(theta.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        // sum_k (P_i^{(t,k)} + rho I)^{-1} grad_i(theta_i^{(t,k)})
        Vec history(theta.size(), 0.0);
        for (std::size_t k = 0; k < k_steps; ++k) {
            Vec u = cholesky_solve(damp(trace.hessians[i][k], cfg.damping), trace.gradients[i][k]);
            for (std::size_t j = 0; j < history.size(); ++j) history[j] += u[j];
        }
        const Matrix& last = trace.hessians[i][k_steps - 1];
        Vec base = mixed.solve(matvec(last, theta));
        Vec moved = mixed.solve(matvec(last, history));
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += base[j] - cfg.eta * moved[j];
    }
    for (double& x : acc) x /= static_cast<double>(n);
    return norm2(sub(acc, direct.theta));
}

// ---------------------------------------------------------------------------
// Minibatch MLP methods. K counts local epochs; every epoch reshuffles the
// shard with a stream keyed by (seed, client, round, epoch) so results do not
// depend on execution order.

namespace detail {

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t samples,
                                                           std::size_t batch_size,
                                                           std::uint64_t seed, std::size_t client,
                                                           std::uint64_t round, std::size_t epoch) {
    std::vector<std::size_t> order(samples);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed, {0xba7c4, client, round, epoch});
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < samples; start += batch_size) {
        std::size_t stop = std::min(samples, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    return batches;
}

}  // namespace detail

/// FedAvg for the MLP: K local epochs of minibatch gradient steps per client,
/// then simple mixing.
inline RoundOutput round_fedavg_mlp(const Vec& theta, const std::vector<MlpObjective>& clients,
                                    const MethodConfig& cfg, std::uint64_t round_index) {
    const std::size_t n = clients.size();
    if (n == 0) throw EmptyList("round_fedavg_mlp: no clients");
    std::vector<Vec> locals(n);
    detail::for_each_client(n, cfg.threads, [&](std::size_t i) {
        Vec local = theta;
        for (std::size_t e = 0; e < cfg.local_steps; ++e) {
            auto batches = detail::epoch_batches(clients[i].samples(), cfg.batch_size, cfg.seed, i,
                                                 round_index, e);
            for (const auto& batch : batches) {
                auto [loss, grad] = clients[i].loss_and_gradient(local, batch);
                (void)loss;
                local = step(local, cfg.eta, grad);
            }
        }
        locals[i] = std::move(local);
    });
    Vec next = vec_mean(locals);
    ensure_finite(next, "round_fedavg_mlp");
    return {std::move(next), comm_cost(Method::fedavg, theta.size())};
}

/// Persistent client state for end_of_round FOOF: the blocks computed at the
/// end of the previous round, which precondition this round's local steps.
struct FoofState {
    std::vector<FoofStats> previous;
};

/// Hook for substituting the FOOF statistics; used by tests to force
/// identity blocks. Empty means the real computation.
using FoofStatsFn = std::function<FoofStats(const MlpObjective&, const Vec&)>;

/// Server-side preconditioned mixing per layer:
/// theta'_l = vec(solve(damp(mean_i A_{i,l}, rho), mean_i A_{i,l} unvec(theta_{i,l}))).
inline Vec foof_mix(const MlpLayout& layout, const std::vector<FoofStats>& stats,
                    const std::vector<Vec>& locals, double rho) {
    const std::size_t n = locals.size();
    if (n == 0) throw EmptyList("foof_mix: no clients");
    if (stats.size() != n) throw ShapeMismatch("foof_mix: stats/parameter count mismatch");
    Vec out(layout.flat_dim(), 0.0);
    for (std::size_t l = 0; l < layout.layers(); ++l) {
        std::vector<Matrix> blocks;
        std::vector<Matrix> weighted(n);
        for (std::size_t i = 0; i < n; ++i) {
            blocks.push_back(stats[i].blocks[l]);
            std::span<const double> seg(locals[i].data() + layout.offset(l),
                                        layout.in_dim(l) * layout.out_dim(l));
            weighted[i] = matmul(stats[i].blocks[l],
                                 unvec_matrix(seg, layout.in_dim(l), layout.out_dim(l)));
        }
        Matrix numer = matrix_mean(weighted);
        Matrix solved = cholesky_solve(damp(matrix_mean(blocks), rho), numer);
        Vec flat = vec_matrix(solved);
        std::copy(flat.begin(), flat.end(), out.begin() + static_cast<std::ptrdiff_t>(layout.offset(l)));
    }
    return out;
}

/// FOOF-approximated preconditioned mixing for the MLP. Local minibatch steps
/// precondition each layer gradient with damp(A_{i,l}, rho); the uploaded
/// blocks are the ones used in the final local step (per_step mode) or the
/// blocks recomputed at the end of local training (end_of_round mode, where
/// the previous round's blocks precondition the local steps and round 0 uses
/// the identity).
inline RoundOutput round_fedpm_foof(const Vec& theta, const std::vector<MlpObjective>& clients,
                                    const MethodConfig& cfg, std::uint64_t round_index,
                                    FoofState& state, const FoofStatsFn& stats_fn = {}) {
    const std::size_t n = clients.size();
    if (n == 0) throw EmptyList("round_fedpm_foof: no clients");
    if (cfg.local_steps == 0) throw DimensionMismatch("round_fedpm_foof: K must be at least 1");
    const MlpLayout& layout = clients.front().layout();

    auto compute_stats = [&](const MlpObjective& obj, const Vec& at) {
        return stats_fn ? stats_fn(obj, at) : obj.foof_stats(at);
    };

    std::vector<Vec> locals(n);
    std::vector<FoofStats> uploads(n);
    detail::for_each_client(n, cfg.threads, [&](std::size_t i) {
        Vec local = theta;
        FoofStats stale;
        if (cfg.foof_mode == FoofMode::end_of_round)
            stale = i < state.previous.size() ? state.previous[i] : FoofStats::identity(layout);
        FoofStats used;
        for (std::size_t e = 0; e < cfg.local_steps; ++e) {
            auto batches = detail::epoch_batches(clients[i].samples(), cfg.batch_size, cfg.seed, i,
                                                 round_index, e);
            for (const auto& batch : batches) {
                const FoofStats& pre =
                    cfg.foof_mode == FoofMode::per_step ? (used = compute_stats(clients[i], local))
                                                        : stale;
                auto [loss, grad] = clients[i].loss_and_gradient(local, batch);
                (void)loss;
                Vec update(local.size());
                for (std::size_t l = 0; l < layout.layers(); ++l) {
                    std::span<const double> gseg(grad.data() + layout.offset(l),
                                                 layout.in_dim(l) * layout.out_dim(l));
                    Matrix g = unvec_matrix(gseg, layout.in_dim(l), layout.out_dim(l));
                    Matrix precond = cholesky_solve(damp(pre.blocks[l], cfg.damping), g);
                    Vec flat = vec_matrix(precond);
                    std::copy(flat.begin(), flat.end(),
                              update.begin() + static_cast<std::ptrdiff_t>(layout.offset(l)));
                }
                local = step(local, cfg.eta, update);
            }
        }
        uploads[i] = cfg.foof_mode == FoofMode::per_step ? used : compute_stats(clients[i], local);
        locals[i] = std::move(local);
    });

    if (cfg.foof_mode == FoofMode::end_of_round) state.previous = uploads;

    Vec next = foof_mix(layout, uploads, locals, cfg.damping);
    ensure_finite(next, "round_fedpm_foof");
    return {std::move(next), comm_cost_foof(layout)};
}

}  // namespace fedsim
