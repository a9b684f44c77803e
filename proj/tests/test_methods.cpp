#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fedsim/methods.hpp"
#include "support.hpp"

using namespace fedsim;
using testsupport::QuadraticObjective;
using testsupport::random_spd;
using testsupport::random_vec;

namespace {

std::vector<QuadraticObjective> random_quadratics(std::size_t n, std::size_t d,
                                                  std::uint64_t seed) {
    Rng rng(seed);
    std::vector<QuadraticObjective> clients;
    for (std::size_t i = 0; i < n; ++i)
        clients.emplace_back(random_spd(d, rng), random_vec(d, rng), 0.5);
    return clients;
}

std::vector<LogisticL2Objective> random_logistic_clients(std::size_t n, std::size_t d,
                                                         std::size_t m, double lambda,
                                                         std::uint64_t seed) {
    Rng rng(seed);
    std::vector<LogisticL2Objective> clients;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<Vec> xs;
        std::vector<int> ys;
        for (std::size_t j = 0; j < m; ++j) {
            xs.push_back(random_vec(d, rng));
            ys.push_back(rng.uniform() < 0.5 ? -1 : 1);
        }
        clients.emplace_back(std::move(xs), std::move(ys), lambda);
    }
    return clients;
}

MethodConfig basic(double eta, std::size_t k = 1, double rho = 0.0) {
    MethodConfig cfg;
    cfg.eta = eta;
    cfg.local_steps = k;
    cfg.damping = rho;
    return cfg;
}

}  // namespace

TEST_CASE("round_psgd") {
    SECTION("stationary point stays put") {
        auto clients = random_quadratics(3, 2, 1);
        // every gradient vanishes at its own center only; use a common center
        std::vector<QuadraticObjective> common;
        Rng rng(2);
        Vec c = random_vec(2, rng);
        for (int i = 0; i < 3; ++i) common.emplace_back(random_spd(2, rng), c, 0.5);
        RoundOutput out = round_psgd(c, common, basic(1.0));
        REQUIRE(norm2(sub(out.theta, c)) <= 1e-15);
    }
    SECTION("single client is plain gradient descent") {
        auto clients = random_quadratics(1, 3, 3);
        Vec theta0{0.3, -0.2, 1.1};
        RoundOutput out = round_psgd(theta0, clients, basic(0.5));
        Vec want = step(theta0, 0.5, clients[0].gradient(theta0));
        REQUIRE(testsupport::max_abs_diff(out.theta, want) == 0.0);
    }
    SECTION("hand-set gradients average") {
        // two quadratics with identity Hessian and centers so that the
        // gradients at 0 are (1, 0) and (0, 1)
        std::vector<QuadraticObjective> clients;
        clients.emplace_back(Matrix::identity(2), Vec{-1.0, 0.0}, 1.0);
        clients.emplace_back(Matrix::identity(2), Vec{0.0, -1.0}, 1.0);
        RoundOutput out = round_psgd(Vec{0.0, 0.0}, clients, basic(1.0));
        REQUIRE(out.theta[0] == Catch::Approx(-0.5).margin(1e-16));
        REQUIRE(out.theta[1] == Catch::Approx(-0.5).margin(1e-16));
    }
}

TEST_CASE("round_fedavg") {
    auto clients = random_logistic_clients(4, 3, 6, 0.1, 5);
    Rng rng(6);
    Vec theta0 = random_vec(3, rng);

    SECTION("K = 1 is bit-exact parallel gradient descent") {
        RoundOutput avg = round_fedavg(theta0, clients, basic(0.7, 1));
        RoundOutput ps = round_psgd(theta0, clients, basic(0.7));
        REQUIRE(avg.theta == ps.theta);
    }
    SECTION("identical shards follow the single-client trajectory") {
        std::vector<LogisticL2Objective> same(3, clients[0]);
        std::vector<LogisticL2Objective> one(1, clients[0]);
        RoundOutput a = round_fedavg(theta0, same, basic(0.5, 3));
        RoundOutput b = round_fedavg(theta0, one, basic(0.5, 3));
        REQUIRE(testsupport::max_abs_diff(a.theta, b.theta) <= 1e-15);
    }
    SECTION("K = 2 equals a manually unrolled loop") {
        RoundOutput out = round_fedavg(theta0, clients, basic(0.4, 2));
        std::vector<Vec> locals;
        for (const auto& c : clients) {
            Vec t = step(theta0, 0.4, c.gradient(theta0));
            t = step(t, 0.4, c.gradient(t));
            locals.push_back(std::move(t));
        }
        Vec want = vec_mean(locals);
        REQUIRE(out.theta == want);
    }
}

TEST_CASE("round_sogm") {
    SECTION("one client with eta 1 solves a quadratic in one round") {
        auto clients = random_quadratics(1, 4, 7);
        Rng rng(8);
        Vec theta0 = random_vec(4, rng);
        RoundOutput out = round_sogm(theta0, clients, basic(1.0));
        REQUIRE(norm2(sub(out.theta, clients[0].center())) <= 1e-12);
    }
    SECTION("identity preconditioners reduce to gradient mixing") {
        std::vector<QuadraticObjective> clients;
        Rng rng(9);
        for (int i = 0; i < 3; ++i)
            clients.emplace_back(Matrix::identity(3), random_vec(3, rng), 1.0);
        Vec theta0 = random_vec(3, rng);
        RoundOutput so = round_sogm(theta0, clients, basic(0.6));
        RoundOutput ps = round_psgd(theta0, clients, basic(0.6));
        REQUIRE(testsupport::max_abs_diff(so.theta, ps.theta) <= 1e-14);
    }
    SECTION("two distinct diagonal quadratics match the adjugate oracle") {
        Matrix a1(2, 2), a2(2, 2);
        a1(0, 0) = 2.0;
        a1(1, 1) = 1.0;
        a2(0, 0) = 1.0;
        a2(1, 1) = 3.0;
        std::vector<QuadraticObjective> clients;
        clients.emplace_back(a1, Vec{1.0, 0.0}, 1.0);
        clients.emplace_back(a2, Vec{0.0, 1.0}, 1.0);
        Vec theta0{0.0, 0.0};
        RoundOutput out = round_sogm(theta0, clients, basic(1.0));

        // oracle: g = mean((-2,0), (0,-3)) = (-1, -1.5); P = diag(1.5, 2)
        Matrix pbar(2, 2);
        pbar(0, 0) = 1.5;
        pbar(1, 1) = 2.0;
        Vec want = step(theta0, 1.0, matvec(testsupport::inverse2x2(pbar), Vec{-1.0, -1.5}));
        REQUIRE(out.theta[0] == Catch::Approx(want[0]).margin(1e-14));
        REQUIRE(out.theta[1] == Catch::Approx(want[1]).margin(1e-14));
    }
    SECTION("damping rescue: singular mean Hessian solves once damped") {
        Matrix rank1(2, 2);
        for (double& v : rank1.entries()) v = 1.0;
        std::vector<QuadraticObjective> clients{{rank1, Vec{0.0, 0.0}, 0.0}};
        Vec theta0{1.0, 2.0};
        REQUIRE_THROWS_AS(round_sogm(theta0, clients, basic(1.0, 1, 0.0)), NotPositiveDefinite);
        REQUIRE_NOTHROW(round_sogm(theta0, clients, basic(1.0, 1, 0.5)));
    }
}

TEST_CASE("round_local_newton") {
    auto clients = random_logistic_clients(3, 4, 8, 0.2, 11);
    Rng rng(12);
    Vec theta0 = random_vec(4, rng);

    SECTION("K = 1 equals the average of locally preconditioned gradients") {
        RoundOutput out = round_local_newton(theta0, clients, basic(0.8, 1));
        Vec acc(4, 0.0);
        for (const auto& c : clients) {
            Vec dir = cholesky_solve(c.hessian(theta0), c.gradient(theta0));
            for (std::size_t i = 0; i < 4; ++i) acc[i] += dir[i];
        }
        Vec want = step(theta0, 0.8 / 3.0, acc);
        REQUIRE(testsupport::max_abs_diff(out.theta, want) <= 1e-10);
    }
    SECTION("single client equals round_sogm") {
        std::vector<LogisticL2Objective> one(1, clients[0]);
        RoundOutput ln = round_local_newton(theta0, one, basic(1.0, 1));
        RoundOutput so = round_sogm(theta0, one, basic(1.0, 1));
        REQUIRE(testsupport::max_abs_diff(ln.theta, so.theta) <= 1e-12);
    }
    SECTION("homogeneous shards track round_sogm over several rounds") {
        std::vector<LogisticL2Objective> same(4, clients[0]);
        Vec a = theta0, b = theta0;
        for (int t = 0; t < 5; ++t) {
            a = round_local_newton(a, same, basic(1.0, 1)).theta;
            b = round_sogm(b, same, basic(1.0, 1)).theta;
            REQUIRE(norm2(sub(a, b)) <= 1e-10);
        }
    }
}

TEST_CASE("round_fedpm") {
    SECTION("fixed point of preconditioned mixing") {
        // all clients at the same parameter: mixing must return it unchanged
        Rng rng(13);
        for (int rep = 0; rep < 50; ++rep) {
            std::size_t d = 2 + rng.bounded(4);
            std::size_t n = 2 + rng.bounded(3);
            Vec common = random_vec(d, rng);
            std::vector<QuadraticObjective> clients;
            for (std::size_t i = 0; i < n; ++i)
                clients.emplace_back(random_spd(d, rng), common, 0.5);
            // local step from the centers' common minimum leaves theta there
            RoundOutput out = round_fedpm(common, clients, basic(1.0, 1));
            REQUIRE(norm2(sub(out.theta, common)) <= 1e-12 * std::max(1.0, norm2(common)));
        }
    }
    SECTION("K = 1 equals the ideal globally preconditioned update") {
        auto clients = random_logistic_clients(4, 3, 10, 0.3, 17);
        Rng rng(18);
        Vec theta0 = random_vec(3, rng);
        RoundOutput pm = round_fedpm(theta0, clients, basic(1.0, 1));

        std::vector<Matrix> hs;
        std::vector<Vec> gs;
        for (const auto& c : clients) {
            hs.push_back(c.hessian(theta0));
            gs.push_back(c.gradient(theta0));
        }
        Vec want = step(theta0, 1.0, cholesky_solve(matrix_mean(hs), vec_mean(gs)));
        REQUIRE(norm2(sub(pm.theta, want)) <= 1e-10);

        RoundOutput so = round_sogm(theta0, clients, basic(1.0, 1));
        REQUIRE(norm2(sub(pm.theta, so.theta)) <= 1e-10);
    }
    SECTION("equal preconditioners degenerate to simple mixing") {
        // identical quadratic curvature, different centers
        Rng rng(19);
        Matrix shared = random_spd(3, rng);
        std::vector<QuadraticObjective> clients;
        for (int i = 0; i < 3; ++i) clients.emplace_back(shared, random_vec(3, rng), 0.5);
        Vec theta0 = random_vec(3, rng);
        RoundOutput pm = round_fedpm(theta0, clients, basic(0.9, 2));
        RoundOutput ln = round_local_newton(theta0, clients, basic(0.9, 2));
        REQUIRE(norm2(sub(pm.theta, ln.theta)) <= 1e-11);
    }
}

TEST_CASE("round_sogm_multi") {
    auto clients = random_logistic_clients(3, 3, 9, 0.25, 23);
    Rng rng(24);
    Vec theta0 = random_vec(3, rng);

    SECTION("K = 1 equals round_sogm") {
        RoundOutput sm = round_sogm_multi(theta0, clients, basic(1.0, 1));
        RoundOutput so = round_sogm(theta0, clients, basic(1.0, 1));
        REQUIRE(norm2(sub(sm.theta, so.theta)) <= 1e-12);
    }
    SECTION("differs from preconditioned mixing on heterogeneous quadratics") {
        Matrix a1(2, 2), a2(2, 2);
        a1(0, 0) = 1.0;
        a1(1, 1) = 5.0;
        a2(0, 0) = 5.0;
        a2(1, 1) = 1.0;
        std::vector<QuadraticObjective> quads;
        quads.emplace_back(a1, Vec{2.0, 0.0}, 1.0);
        quads.emplace_back(a2, Vec{0.0, -2.0}, 1.0);
        Vec start{1.0, 1.0};
        RoundOutput pm = round_fedpm(start, quads, basic(1.0, 2));
        RoundOutput sm = round_sogm_multi(start, quads, basic(1.0, 2));
        REQUIRE(norm2(sub(pm.theta, sm.theta)) >= 1e-4);
    }
    SECTION("homogeneous shards coincide at the shared optimum") {
        // From a non-stationary start the two updates genuinely differ for
        // K > 1 (the lagged global step discards the local trajectory); at
        // the shared optimum both are fixed points and must agree exactly.
        Rng qrng(25);
        Matrix a = random_spd(3, qrng);
        Vec center = random_vec(3, qrng);
        std::vector<QuadraticObjective> same(3, QuadraticObjective(a, center, 0.5));
        RoundOutput pm = round_fedpm(center, same, basic(1.0, 2));
        RoundOutput sm = round_sogm_multi(center, same, basic(1.0, 2));
        REQUIRE(norm2(sub(pm.theta, center)) <= 1e-10);
        REQUIRE(norm2(sub(sm.theta, center)) <= 1e-10);
        REQUIRE(norm2(sub(pm.theta, sm.theta)) <= 1e-10);
    }
}

TEST_CASE("homogeneity collapse across all second-order methods") {
    auto clients = random_logistic_clients(1, 3, 12, 0.2, 29);
    std::vector<LogisticL2Objective> same(5, clients[0]);
    Rng rng(30);
    Vec theta0 = random_vec(3, rng);

    Vec a = theta0, b = theta0, c = theta0, d = theta0;
    for (int t = 0; t < 10; ++t) {
        a = round_fedpm(a, same, basic(1.0, 1)).theta;
        b = round_local_newton(b, same, basic(1.0, 1)).theta;
        c = round_sogm(c, same, basic(1.0, 1)).theta;
        d = round_sogm_multi(d, same, basic(1.0, 1)).theta;
        REQUIRE(norm2(sub(a, b)) <= 1e-9);
        REQUIRE(norm2(sub(a, c)) <= 1e-9);
        REQUIRE(norm2(sub(a, d)) <= 1e-9);
    }
}

TEST_CASE("expansion identity for the preconditioned-mixing update") {
    Rng rng(31);
    for (std::size_t k : {1, 2, 3, 5}) {
        for (int rep = 0; rep < 5; ++rep) {
            std::size_t d = 2 + rng.bounded(5);
            std::size_t n = 1 + rng.bounded(4);
            auto clients = random_quadratics(n, d, rng.next_u64());
            Vec theta0 = random_vec(d, rng);
            double rho = rep % 2 == 0 ? 0.0 : 0.2;
            double disc = fedpm_expanded_check(theta0, clients, basic(1.0, k, rho));
            REQUIRE(disc <= 1e-9);
        }
    }
}

TEST_CASE("client order and threading do not change results") {
    auto clients = random_logistic_clients(6, 3, 7, 0.15, 37);
    Rng rng(38);
    Vec theta0 = random_vec(3, rng);

    MethodConfig seq = basic(1.0, 2);
    MethodConfig par = seq;
    par.threads = 4;

    REQUIRE(round_fedpm(theta0, clients, seq).theta == round_fedpm(theta0, clients, par).theta);
    REQUIRE(round_fedavg(theta0, clients, seq).theta == round_fedavg(theta0, clients, par).theta);
    REQUIRE(round_local_newton(theta0, clients, seq).theta ==
            round_local_newton(theta0, clients, par).theta);
    REQUIRE(round_sogm(theta0, clients, seq).theta == round_sogm(theta0, clients, par).theta);
}

TEST_CASE("foof mixing against a hand-evaluated instance") {
    // one linear layer, one input plus bias: 2x1 weights, 2x2 blocks
    MlpLayout layout{{1, 1}};
    std::vector<FoofStats> stats(2);
    Matrix a1(2, 2), a2(2, 2);
    a1(0, 0) = 2.0;
    a1(1, 1) = 1.0;
    a2(0, 0) = 1.0;
    a2(1, 1) = 1.0;
    stats[0].blocks = {a1};
    stats[1].blocks = {a2};
    std::vector<Vec> locals{{1.0, 2.0}, {3.0, 4.0}};

    Vec mixed = foof_mix(layout, stats, locals, 0.0);
    // mean(A_i W_i) = ((2,2) + (3,4)) / 2 = (2.5, 3); mean A = diag(1.5, 1)
    REQUIRE(mixed[0] == Catch::Approx(2.5 / 1.5).margin(1e-14));
    REQUIRE(mixed[1] == Catch::Approx(3.0).margin(1e-14));
}

TEST_CASE("fedpm_foof") {
    Rng rng(41);
    MlpLayout layout{{3, 4, 2}};
    std::vector<MlpObjective> clients;
    for (int i = 0; i < 3; ++i) {
        std::vector<Vec> xs;
        std::vector<int> ys;
        for (int j = 0; j < 10; ++j) {
            xs.push_back(random_vec(3, rng));
            ys.push_back(static_cast<int>(rng.bounded(2)));
        }
        clients.emplace_back(layout, std::move(xs), std::move(ys));
    }
    Vec theta0 = random_vec(layout.flat_dim(), rng, 0.3);

    SECTION("identity blocks reduce to fedavg, bit for bit") {
        MethodConfig cfg = basic(0.1, 2, 0.0);
        cfg.batch_size = 4;
        FoofState state;
        FoofStatsFn identity = [&](const MlpObjective& obj, const Vec&) {
            return FoofStats::identity(obj.layout());
        };
        RoundOutput foof = round_fedpm_foof(theta0, clients, cfg, 3, state, identity);
        RoundOutput avg = round_fedavg_mlp(theta0, clients, cfg, 3);
        REQUIRE(foof.theta == avg.theta);
    }
    SECTION("single client makes mixing the identity") {
        // undamped: with rho > 0 the damped denominator no longer cancels
        // the undamped numerator and mixing is deliberately not the identity
        std::vector<MlpObjective> one(1, clients[0]);
        MethodConfig cfg = basic(0.05, 1, 0.0);
        cfg.batch_size = 5;
        FoofState state;
        RoundOutput out = round_fedpm_foof(theta0, one, cfg, 0, state);

        // replicate the local trajectory by hand: mixing of one client with
        // its own blocks must return exactly the local parameter
        const MlpObjective& c = one[0];
        Vec local = theta0;
        FoofStats used;
        auto batches = detail::epoch_batches(c.samples(), cfg.batch_size, cfg.seed, 0, 0, 0);
        for (const auto& batch : batches) {
            used = c.foof_stats(local);
            auto [loss, grad] = c.loss_and_gradient(local, batch);
            (void)loss;
            Vec update(local.size());
            for (std::size_t l = 0; l < layout.layers(); ++l) {
                std::span<const double> gs(grad.data() + layout.offset(l),
                                           layout.in_dim(l) * layout.out_dim(l));
                Matrix pre = cholesky_solve(damp(used.blocks[l], cfg.damping),
                                            unvec_matrix(gs, layout.in_dim(l), layout.out_dim(l)));
                Vec flat = vec_matrix(pre);
                std::copy(flat.begin(), flat.end(),
                          update.begin() + static_cast<std::ptrdiff_t>(layout.offset(l)));
            }
            local = step(local, cfg.eta, update);
        }
        REQUIRE(norm2(sub(out.theta, local)) <= 1e-10 * std::max(1.0, norm2(local)));
    }
    SECTION("end_of_round uses stale blocks and refreshes state") {
        MethodConfig cfg = basic(0.05, 1, 0.1);
        cfg.foof_mode = FoofMode::end_of_round;
        cfg.batch_size = 10;
        FoofState state;
        RoundOutput r0 = round_fedpm_foof(theta0, clients, cfg, 0, state);
        REQUIRE(state.previous.size() == clients.size());

        // round 0 local steps use identity blocks: with rho = 0 they are
        // plain gradient steps, so only the mixing differs from fedavg
        MethodConfig plain = cfg;
        plain.damping = 0.0;
        FoofState fresh;
        RoundOutput foof0 = round_fedpm_foof(theta0, clients, plain, 0, fresh);
        RoundOutput avg0 = round_fedavg_mlp(theta0, clients, plain, 0);
        REQUIRE(norm2(sub(foof0.theta, avg0.theta)) > 0.0);

        // second round now preconditions with the recorded blocks
        FoofState before = state;
        RoundOutput r1 = round_fedpm_foof(r0.theta, clients, cfg, 1, state);
        REQUIRE(norm2(sub(r1.theta, r0.theta)) > 0.0);
        REQUIRE(state.previous.size() == clients.size());
        bool changed = false;
        for (std::size_t i = 0; i < state.previous.size(); ++i)
            if (frobenius_norm(matrix_sub(state.previous[i].blocks[0],
                                          before.previous[i].blocks[0])) > 0.0)
                changed = true;
        REQUIRE(changed);
    }
}

TEST_CASE("communication cost accounting") {
    const std::size_t d = 7;
    REQUIRE(comm_cost(Method::psgd, d).floats_up == 7);
    REQUIRE(comm_cost(Method::fedavg, d).floats_up == 7);
    REQUIRE(comm_cost(Method::local_newton, d).floats_up == 7);
    REQUIRE(comm_cost(Method::sogm, d).floats_up == 7 + 49);
    REQUIRE(comm_cost(Method::fedpm, d).floats_up == 7 + 49);
    REQUIRE(comm_cost(Method::sogm_multi, d).floats_up == 7 + 49);
    REQUIRE(comm_cost(Method::fedpm, d).floats_down == 7);

    MlpLayout layout{{10, 16, 3}};
    CommCost foof = comm_cost_foof(layout);
    REQUIRE(foof.floats_up == static_cast<long long>(layout.flat_dim()) + 11 * 11 + 17 * 17);
    REQUIRE(foof.floats_down == static_cast<long long>(layout.flat_dim()));
}
