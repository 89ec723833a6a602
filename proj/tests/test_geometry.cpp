#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "chunkq/geometry.hpp"

using namespace chunkq;
using namespace chunkq::geometry;

namespace {

ActionChunk random_chunk(int h, int d_a, Rng& rng, double scale = 0.5) {
    ActionChunk c(h, d_a);
    for (int k = 0; k < h; ++k)
        for (int j = 0; j < d_a; ++j) c.at(k, j) = rng.uniform(-scale, scale);
    return c;
}

}  // namespace

TEST_CASE("weighted_distance basics") {
    ActionChunk a(2, 7), b(2, 7);
    MetricWeights w{{5, 5, 5, 1, 1, 1, 1}};
    CHECK(weighted_distance(a, b, w) == 0.0);

    // diff 0.1 in dim 0 on both steps: 5 * 0.01 per step, averaged -> 0.05
    for (int k = 0; k < 2; ++k) b.at(k, 0) = 0.1;
    CHECK(weighted_distance(a, b, w) == doctest::Approx(0.05).epsilon(1e-12));

    // all-ones weights reproduce the mean squared difference
    Rng rng(4);
    ActionChunk x = random_chunk(5, 3, rng);
    ActionChunk y = random_chunk(5, 3, rng);
    double naive = 0.0;
    for (int k = 0; k < 5; ++k)
        for (int j = 0; j < 3; ++j) {
            const double d = x.at(k, j) - y.at(k, j);
            naive += d * d;
        }
    naive /= 5.0;
    CHECK(weighted_distance(x, y, MetricWeights::ones(3)) == doctest::Approx(naive).epsilon(1e-12));
}

TEST_CASE("weighted_distance uses the joint mask and rejects empty overlap") {
    Rng rng(5);
    ActionChunk a = random_chunk(4, 2, rng);
    ActionChunk b = random_chunk(4, 2, rng);
    ActionChunk b_trunc = b;
    b_trunc.truncate(2);
    // distance over the first two steps only
    double manual = 0.0;
    for (int k = 0; k < 2; ++k)
        for (int j = 0; j < 2; ++j) {
            const double d = a.at(k, j) - b.at(k, j);
            manual += d * d;
        }
    manual /= 2.0;
    CHECK(weighted_distance(a, b_trunc, MetricWeights::ones(2)) == doctest::Approx(manual).epsilon(1e-12));

    // symmetry
    CHECK(weighted_distance(a, b, MetricWeights::ones(2)) ==
          weighted_distance(b, a, MetricWeights::ones(2)));

    MetricWeights bad{{0.0, 0.0}};
    CHECK_THROWS_AS(weighted_distance(a, b, bad), std::invalid_argument);
}

TEST_CASE("reference_surface arithmetic") {
    CHECK(reference_surface(0.7, 0.0, 5.0) == 0.7);
    CHECK(reference_surface(1.0, 0.1, 5.0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(reference_surface(0.3, 10.0, 0.0) == 0.3);
}

TEST_CASE("surface differential identity: Y_i - Y_j = beta (d_j - d_i)") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const double y = rng.uniform(-2, 2), beta = rng.uniform(0.1, 8);
        const double di = rng.uniform(0, 1), dj = rng.uniform(0, 1);
        CHECK(reference_surface(y, di, beta) - reference_surface(y, dj, beta) ==
              doctest::Approx(beta * (dj - di)).epsilon(1e-12));
    }
}

TEST_CASE("anchor_loss") {
    const double q1[] = {0.5};
    const double y1[] = {0.75};
    CHECK(anchor_loss(q1, y1) == doctest::Approx(0.0625).epsilon(1e-15));

    const double q2[] = {1.0, 2.0, 3.0};
    CHECK(anchor_loss(q2, q2) == 0.0);

    // quadratic homogeneity: scaling residuals by c scales the loss by c^2
    Rng rng(7);
    std::vector<double> q(5), y(5), y_scaled(5);
    for (size_t i = 0; i < 5; ++i) {
        q[i] = rng.uniform(-1, 1);
        const double resid = rng.uniform(-1, 1);
        y[i] = q[i] - resid;
        y_scaled[i] = q[i] - 3.0 * resid;
    }
    CHECK(anchor_loss(q, y_scaled) == doctest::Approx(9.0 * anchor_loss(q, y)).epsilon(1e-12));

    CHECK_THROWS_AS(anchor_loss({}, {}), std::invalid_argument);
}

TEST_CASE("rank_loss") {
    // satisfied pair: q_i - q_j = beta (d_j - d_i) = 5 * 0.3 = 1.5
    std::vector<std::pair<double, double>> qp{{2.0, 0.5}};
    std::vector<std::pair<double, double>> dp{{0.2, 0.5}};
    CHECK(rank_loss(qp, dp, 5.0) == doctest::Approx(0.0).epsilon(1e-15));

    // equal q on the same distances: residual -1.5, squared 2.25
    qp[0] = {1.0, 1.0};
    CHECK(rank_loss(qp, dp, 5.0) == doctest::Approx(2.25).epsilon(1e-12));

    // swapping a pair leaves the contribution unchanged
    std::vector<std::pair<double, double>> qps{{1.0, 1.0}};
    std::vector<std::pair<double, double>> dps{{0.5, 0.2}};
    CHECK(rank_loss(qps, dps, 5.0) == rank_loss(qp, dp, 5.0));
}

TEST_CASE("egr_loss composition matches a naive double loop") {
    Rng rng(8);
    const int m = 10;
    ActionChunk gt = random_chunk(6, 2, rng);
    std::vector<ActionChunk> oods;
    for (int i = 0; i < m; ++i) {
        ActionChunk c = gt;
        for (int k = 0; k < 6; ++k)
            for (int j = 0; j < 2; ++j) c.at(k, j) += rng.normal(0, 0.2);
        oods.push_back(c);
    }
    EGRConfig cfg;
    cfg.weights = MetricWeights::ones(2);
    cfg.beta = 5.0;
    cfg.eta = 1.0;
    const double y_t = 0.8;
    // a deterministic fake critic
    const QFn q_fn = [](const EnvState&, const ActionChunk& c) {
        double s = 0.0;
        for (double v : c.actions) s += std::sin(3.0 * v);
        return 0.3 * s;
    };
    EnvState state;
    state.proprio = {0, 0};
    state.goal = {0, 0};

    // all ordered-lower-triangle pairs
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < m; ++j) pairs.emplace_back(i, j);

    const EgrBreakdown out = egr_loss(state, gt, y_t, oods, q_fn, cfg, pairs);

    // independent naive recomputation
    double anchor = 0.0;
    std::vector<double> q(static_cast<size_t>(m)), d(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        d[static_cast<size_t>(i)] = weighted_distance(oods[static_cast<size_t>(i)], gt, cfg.weights);
        q[static_cast<size_t>(i)] = q_fn(state, oods[static_cast<size_t>(i)]);
        const double resid = q[static_cast<size_t>(i)] - (y_t - cfg.beta * d[static_cast<size_t>(i)]);
        anchor += resid * resid;
    }
    anchor /= m;
    double rank = 0.0;
    for (const auto& [i, j] : pairs) {
        const double resid = (q[static_cast<size_t>(i)] - q[static_cast<size_t>(j)]) -
                             cfg.beta * (d[static_cast<size_t>(j)] - d[static_cast<size_t>(i)]);
        rank += resid * resid;
    }
    rank /= static_cast<double>(pairs.size());

    CHECK(out.anchor == doctest::Approx(anchor).epsilon(1e-12));
    CHECK(out.rank == doctest::Approx(rank).epsilon(1e-12));
    CHECK(out.total == doctest::Approx(anchor + cfg.eta * rank).epsilon(1e-12));

    // component isolation: eta = 0 leaves only the anchor
    EGRConfig cfg0 = cfg;
    cfg0.eta = 0.0;
    const EgrBreakdown only_anchor = egr_loss(state, gt, y_t, oods, q_fn, cfg0, {});
    CHECK(only_anchor.total == doctest::Approx(anchor).epsilon(1e-12));

    // critic equal to the surface: total 0
    const QFn surface_fn = [&](const EnvState&, const ActionChunk& c) {
        return y_t - cfg.beta * weighted_distance(c, gt, cfg.weights);
    };
    const EgrBreakdown zero = egr_loss(state, gt, y_t, oods, surface_fn, cfg, pairs);
    CHECK(zero.total == doctest::Approx(0.0).epsilon(1e-18));
}

TEST_CASE("egr_grad_wrt_q matches finite differences of the loss") {
    Rng rng(11);
    const int m = 6;
    std::vector<double> q(m), surface(m), dist(m);
    for (int i = 0; i < m; ++i) {
        q[static_cast<size_t>(i)] = rng.uniform(-1, 1);
        dist[static_cast<size_t>(i)] = rng.uniform(0, 1);
        surface[static_cast<size_t>(i)] = rng.uniform(-1, 1);
    }
    const double beta = 4.0, eta = 0.7;
    auto pairs_rng = Rng(5);
    const auto pairs = sample_rank_pairs(m, 8, pairs_rng);
    const auto loss = [&](const std::vector<double>& qq) {
        const double a = anchor_loss(qq, surface);
        std::vector<std::pair<double, double>> qp, dp;
        for (const auto& [i, j] : pairs) {
            qp.emplace_back(qq[static_cast<size_t>(i)], qq[static_cast<size_t>(j)]);
            dp.emplace_back(dist[static_cast<size_t>(i)], dist[static_cast<size_t>(j)]);
        }
        return a + eta * rank_loss(qp, dp, beta);
    };
    const auto grad = egr_grad_wrt_q(q, surface, dist, beta, eta, pairs);
    for (int i = 0; i < m; ++i) {
        std::vector<double> qp = q, qm = q;
        qp[static_cast<size_t>(i)] += 1e-6;
        qm[static_cast<size_t>(i)] -= 1e-6;
        const double fd = (loss(qp) - loss(qm)) / 2e-6;
        CHECK(grad[static_cast<size_t>(i)] == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("check_bestofn_bound") {
    Rng rng(12);
    const MetricWeights w = MetricWeights::ones(2);
    ActionChunk gt = random_chunk(4, 2, rng);
    std::vector<ActionChunk> candidates;
    for (int i = 0; i < 8; ++i) {
        ActionChunk c = gt;
        for (int k = 0; k < 4; ++k)
            for (int j = 0; j < 2; ++j) c.at(k, j) += rng.normal(0, 0.3);
        candidates.push_back(c);
    }
    EnvState state;
    state.proprio = {0, 0};
    state.goal = {0, 0};
    const double y_t = 1.2, beta = 5.0;

    // critic exactly on the surface: eps_hat = 0, tight bound
    const QFn exact = [&](const EnvState&, const ActionChunk& c) {
        return y_t - beta * weighted_distance(c, gt, w);
    };
    const auto tight = check_bestofn_bound(exact, state, gt, y_t, candidates, beta, w);
    CHECK(tight.epsilon_hat == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(tight.bound_holds);

    // constant offset: eps_hat = 0.3
    const QFn offset = [&](const EnvState& s, const ActionChunk& c) { return exact(s, c) + 0.3; };
    const auto shifted = check_bestofn_bound(offset, state, gt, y_t, candidates, beta, w);
    CHECK(shifted.epsilon_hat == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(shifted.bound_holds);
}

TEST_CASE("bound holds on 1000 randomized envelope constructions") {
    Rng rng(13);
    const MetricWeights w = MetricWeights::ones(2);
    int violations = 0;
    for (int t = 0; t < 1000; ++t) {
        const int h = 2 + static_cast<int>(rng.integer(4));
        ActionChunk gt = random_chunk(h, 2, rng);
        const int m = 2 + static_cast<int>(rng.integer(12));
        std::vector<ActionChunk> candidates;
        for (int i = 0; i < m; ++i) {
            ActionChunk c = gt;
            for (int k = 0; k < h; ++k)
                for (int j = 0; j < 2; ++j) c.at(k, j) += rng.normal(0, 0.4);
            candidates.push_back(c);
        }
        const double y_t = rng.uniform(-2, 2);
        const double beta = rng.uniform(0.5, 8);
        const double eps = rng.uniform(0.0, 0.5);
        std::vector<double> residuals(static_cast<size_t>(m));
        for (double& r : residuals) r = std::min(eps, rng.uniform(-1.0, eps));
        const ActionChunk* base = candidates.data();
        const QFn q_fn = [&](const EnvState&, const ActionChunk& c) {
            const size_t idx = static_cast<size_t>(&c - base);
            return y_t - beta * weighted_distance(c, gt, w) + residuals[idx];
        };
        EnvState state;
        state.proprio = {0, 0};
        state.goal = {0, 0};
        const auto rep = check_bestofn_bound(q_fn, state, gt, y_t, candidates, beta, w);
        violations += rep.bound_holds ? 0 : 1;
        CHECK(rep.epsilon_hat <= eps + 1e-12);
    }
    CHECK(violations == 0);
}

TEST_CASE("sample_rank_pairs draws distinct unordered pairs") {
    Rng rng(14);
    const auto pairs = sample_rank_pairs(6, 10, rng);
    CHECK(pairs.size() == 10);
    for (size_t a = 0; a < pairs.size(); ++a) {
        CHECK(pairs[a].first < pairs[a].second);
        for (size_t b = a + 1; b < pairs.size(); ++b) CHECK(pairs[a] != pairs[b]);
    }
    // cap at the number of distinct pairs
    Rng rng2(15);
    CHECK(sample_rank_pairs(4, 100, rng2).size() == 6);
}
