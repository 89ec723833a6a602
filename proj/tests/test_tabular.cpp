#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "chunkq/tabular.hpp"

using namespace chunkq;
using namespace chunkq::tabular;

namespace {

Fixture one_state_fixture() {
    for (auto& f : fixture_suite())
        if (f.name == "one-state") return f;
    throw std::logic_error("missing fixture");
}

}  // namespace

TEST_CASE("expected_max_exact examples") {
    const double values[] = {0.0, 1.0, 2.0};
    const double probs[] = {0.2, 0.3, 0.5};
    CHECK(expected_max_exact(values, probs, 1) == doctest::Approx(1.3).epsilon(1e-14));
    // N=3 closed form: 1*(0.5^3 - 0.2^3) + 2*(1 - 0.5^3) = 0.117 + 1.75
    CHECK(expected_max_exact(values, probs, 3) == doctest::Approx(1.867).epsilon(1e-14));

    const double same[] = {0.7, 0.7, 0.7};
    const double p2[] = {0.1, 0.6, 0.3};
    for (int n : {1, 2, 5, 32}) CHECK(expected_max_exact(same, p2, n) == doctest::Approx(0.7).epsilon(1e-14));

    CHECK_THROWS_AS(expected_max_exact(values, probs, 0), std::invalid_argument);
    const double bad_p[] = {0.5, 0.2, 0.2};
    CHECK_THROWS_AS(expected_max_exact(values, bad_p, 1), std::invalid_argument);
}

TEST_CASE("expected_max_exact vs Monte Carlo on random distributions") {
    Rng rng(101);
    for (int trial = 0; trial < 5; ++trial) {
        const int k = 2 + static_cast<int>(rng.integer(5));
        std::vector<double> values(static_cast<size_t>(k)), probs(static_cast<size_t>(k));
        double sum = 0.0;
        for (int i = 0; i < k; ++i) {
            values[static_cast<size_t>(i)] = rng.uniform(-2, 2);
            probs[static_cast<size_t>(i)] = rng.uniform(0.05, 1.0);
            sum += probs[static_cast<size_t>(i)];
        }
        for (double& p : probs) p /= sum;
        std::vector<double> cdf(probs.size());
        std::partial_sum(probs.begin(), probs.end(), cdf.begin());
        for (int N : {1, 3, 8}) {
            const double exact = expected_max_exact(values, probs, N);
            const int draws = 200000;
            double mc = 0.0, mc2 = 0.0;
            for (int t = 0; t < draws; ++t) {
                double best = -1e300;
                for (int j = 0; j < N; ++j) {
                    const double u = rng.uniform();
                    size_t idx = static_cast<size_t>(
                        std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
                    best = std::max(best, values[std::min(idx, values.size() - 1)]);
                }
                mc += best;
                mc2 += best * best;
            }
            mc /= draws;
            const double var = std::max(mc2 / draws - mc * mc, 0.0);
            const double se = std::sqrt(var / draws);
            CHECK(std::abs(mc - exact) <= 3.0 * se + 1e-9);
        }
    }
}

TEST_CASE("expected_max_exact is non-decreasing in N and non-expansive") {
    Rng rng(102);
    for (int trial = 0; trial < 30; ++trial) {
        const int k = 2 + static_cast<int>(rng.integer(5));
        std::vector<double> u(static_cast<size_t>(k)), v(static_cast<size_t>(k)),
            probs(static_cast<size_t>(k));
        double sum = 0.0;
        double max_diff = 0.0;
        for (int i = 0; i < k; ++i) {
            u[static_cast<size_t>(i)] = rng.uniform(-3, 3);
            v[static_cast<size_t>(i)] = rng.uniform(-3, 3);
            max_diff = std::max(max_diff, std::abs(u[static_cast<size_t>(i)] - v[static_cast<size_t>(i)]));
            probs[static_cast<size_t>(i)] = rng.uniform(0.01, 1.0);
            sum += probs[static_cast<size_t>(i)];
        }
        for (double& p : probs) p /= sum;
        double prev = -1e300;
        for (int N : {1, 2, 4, 8, 16}) {
            const double cur = expected_max_exact(u, probs, N);
            CHECK(cur >= prev - 1e-12);
            prev = cur;
            // |Emax(u) - Emax(v)| <= ||u - v||_inf
            CHECK(std::abs(cur - expected_max_exact(v, probs, N)) <= max_diff + 1e-12);
        }
    }
}

TEST_CASE("selection_distribution examples and Monte-Carlo agreement") {
    // single candidate
    const double v1[] = {0.3};
    const double p1[] = {1.0};
    CHECK(selection_distribution(v1, p1, 5) == std::vector<double>{1.0});

    // two distinct values at 0.5/0.5, N=2: the four equiprobable pairs give (1/4, 3/4)
    const double v2[] = {0.0, 1.0};
    const double p2[] = {0.5, 0.5};
    const auto sel2 = selection_distribution(v2, p2, 2);
    CHECK(sel2[0] == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(sel2[1] == doctest::Approx(0.75).epsilon(1e-14));

    // tied values: proportional split for any N
    const double v3[] = {0.5, 0.5};
    const double p3[] = {0.3, 0.7};
    for (int n : {1, 2, 7}) {
        const auto sel = selection_distribution(v3, p3, n);
        CHECK(sel[0] == doctest::Approx(0.3).epsilon(1e-12));
        CHECK(sel[1] == doctest::Approx(0.7).epsilon(1e-12));
    }

    // sums to one and matches sampled argmax frequencies (earliest-draw tie rule)
    Rng rng(103);
    for (int trial = 0; trial < 3; ++trial) {
        const int k = 3 + static_cast<int>(rng.integer(3));
        std::vector<double> values(static_cast<size_t>(k)), probs(static_cast<size_t>(k));
        double sum = 0.0;
        for (int i = 0; i < k; ++i) {
            values[static_cast<size_t>(i)] = (i % 2) ? 1.0 : rng.uniform(-1, 1);  // force some ties
            probs[static_cast<size_t>(i)] = rng.uniform(0.05, 1.0);
            sum += probs[static_cast<size_t>(i)];
        }
        for (double& p : probs) p /= sum;
        const int N = 3;
        const auto sel = selection_distribution(values, probs, N);
        CHECK(std::accumulate(sel.begin(), sel.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));

        std::vector<double> cdf(probs.size());
        std::partial_sum(probs.begin(), probs.end(), cdf.begin());
        const int draws = 100000;
        std::vector<int> wins(static_cast<size_t>(k), 0);
        for (int t = 0; t < draws; ++t) {
            int best = -1;
            for (int j = 0; j < N; ++j) {
                const double u = rng.uniform();
                const int idx = static_cast<int>(
                    std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
                if (best < 0 || values[static_cast<size_t>(idx)] > values[static_cast<size_t>(best)])
                    best = idx;  // strict: earliest draw keeps ties
            }
            wins[static_cast<size_t>(best)]++;
        }
        for (int i = 0; i < k; ++i) {
            const double freq = static_cast<double>(wins[static_cast<size_t>(i)]) / draws;
            const double se = std::sqrt(std::max(sel[static_cast<size_t>(i)] *
                                                     (1 - sel[static_cast<size_t>(i)]) / draws,
                                                 1e-12));
            CHECK(std::abs(freq - sel[static_cast<size_t>(i)]) <= 4.0 * se + 1e-6);
        }
    }
}

TEST_CASE("apply_operator: myopic limit and first iteration") {
    Fixture f = one_state_fixture();
    // gamma_h -> 0 surrogate: tiny discount makes T Q ~ rewards
    Fixture myopic = f;
    myopic.smdp.gamma_h = 1e-12;
    const QTable q0 = QTable::zeros(myopic.smdp);
    const QTable tq = apply_operator(myopic.smdp, myopic.proposal, q0, 1);
    CHECK(tq.q[0][0] == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(tq.q[0][1] == doctest::Approx(1.0).epsilon(1e-10));

    // from zero, one application gives the reward table exactly
    const QTable first = apply_operator(f.smdp, f.proposal, QTable::zeros(f.smdp), 1);
    CHECK(first.q[0][0] == 0.0);
    CHECK(first.q[0][1] == 1.0);
}

TEST_CASE("one-state fixture: hand-solved fixed points") {
    const Fixture f = one_state_fixture();
    const QTable q1 = solve_fixed_point(f.smdp, f.proposal, 1, 1e-13).q;
    CHECK(q1.q[0][0] == doctest::Approx(0.5).epsilon(1e-10));
    CHECK(q1.q[0][1] == doctest::Approx(1.5).epsilon(1e-10));

    const QTable q2 = solve_fixed_point(f.smdp, f.proposal, 2, 1e-13).q;
    CHECK(q2.q[0][0] == doctest::Approx(0.75).epsilon(1e-10));
    CHECK(q2.q[0][1] == doctest::Approx(1.75).epsilon(1e-10));

    // N -> infinity surrogate at N = 64 approaches the support optimum (1, 2)
    const QTable q64 = solve_fixed_point(f.smdp, f.proposal, 64, 1e-13).q;
    CHECK(q64.q[0][0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(q64.q[0][1] == doctest::Approx(2.0).epsilon(1e-6));

    const QTable opt = support_optimal_q(f.smdp, f.proposal, 1e-13);
    CHECK(opt.q[0][0] == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(opt.q[0][1] == doctest::Approx(2.0).epsilon(1e-10));
}

TEST_CASE("solve_fixed_point: geometric decay, tolerance checks, errors") {
    const Fixture f = one_state_fixture();
    const FixedPointResult res = solve_fixed_point(f.smdp, f.proposal, 1, 1e-12);
    CHECK(res.report.converged);
    CHECK(res.report.iterations <= 45);  // delta halves per step at gamma_h = 0.5
    for (size_t i = 1; i < res.report.deltas.size(); ++i)
        CHECK(res.report.deltas[i] <= f.smdp.gamma_h * res.report.deltas[i - 1] + 1e-12);

    CHECK_THROWS_AS(solve_fixed_point(f.smdp, f.proposal, 1, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(solve_fixed_point(f.smdp, f.proposal, 1, 1e-12, 3), std::runtime_error);
}

TEST_CASE("fixed point is initialization-independent (uniqueness)") {
    for (const auto& f : fixture_suite()) {
        const double tol = 1e-12;
        const QTable from_zero = solve_fixed_point(f.smdp, f.proposal, 4, tol).q;
        // start from a far-away table and iterate manually
        QTable q = QTable::zeros(f.smdp);
        for (auto& row : q.q)
            for (double& v : row) v = 37.0;
        for (int it = 0; it < 100000; ++it) {
            const QTable next = apply_operator(f.smdp, f.proposal, q, 4);
            const double delta = next.sup_diff(q);
            q = next;
            if (delta <= tol) break;
        }
        CHECK(q.sup_diff(from_zero) <= 2 * tol / (1 - f.smdp.gamma_h));
    }
}

TEST_CASE("evaluate_induced_policy: Prop 1 check plus reductions") {
    for (const auto& f : fixture_suite()) {
        for (int n : {1, 2, 8}) {
            const QTable q = solve_fixed_point(f.smdp, f.proposal, n, 1e-13).q;
            const QTable q_pi = evaluate_induced_policy(f.smdp, f.proposal, q, n);
            CHECK(q.sup_diff(q_pi) <= 1e-8);
        }
    }

    // gamma_h ~ 0: policy value equals the rewards
    Fixture f = one_state_fixture();
    f.smdp.gamma_h = 1e-12;
    const QTable q = solve_fixed_point(f.smdp, f.proposal, 2, 1e-13).q;
    const QTable q_pi = evaluate_induced_policy(f.smdp, f.proposal, q, 2);
    CHECK(q_pi.q[0][0] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(q_pi.q[0][1] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("policy evaluation: iterative route matches the direct linear solve") {
    // force the iterative path by exceeding the 200-pair direct-solve cutoff
    Rng rng(104);
    const Fixture big = random_instance(10, 6, 0.9, rng);
    const Fixture small = random_instance(5, 3, 0.9, rng);
    for (const Fixture& f : {small, big}) {
        const QTable q = solve_fixed_point(f.smdp, f.proposal, 3, 1e-13).q;
        const QTable direct = evaluate_induced_policy(f.smdp, f.proposal, q, 3, 1e-13);
        CHECK(q.sup_diff(direct) <= 1e-8);
    }
}

TEST_CASE("verifier suite passes on fixtures and random instances") {
    Rng rng(105);
    for (const auto& f : fixture_suite()) {
        auto r1 = verify_contraction(f.smdp, f.proposal, 4, 10, rng);
        CHECK(r1.pass);
        auto r2 = verify_boundedness(f.smdp, f.proposal, 4, 10, rng);
        CHECK(r2.pass);
        const int ns[] = {1, 2, 4, 8, 16};
        auto r3 = verify_monotonicity(f.smdp, f.proposal, ns);
        CHECK(r3.pass);
        auto r4 = verify_limit(f.smdp, f.proposal, 128, 1e-3);
        CHECK(r4.pass);
        CHECK(r4.non_increasing);
    }
    for (int i = 0; i < 10; ++i) {
        const Fixture f = random_instance(8, 5, i % 2 ? 0.5 : 0.9, rng);
        CHECK(verify_contraction(f.smdp, f.proposal, 4, 5, rng).pass);
        CHECK(verify_boundedness(f.smdp, f.proposal, 4, 5, rng).pass);
    }
}

TEST_CASE("contraction ratio is exactly gamma_h for constant-offset pairs") {
    const Fixture f = one_state_fixture();
    QTable q1 = QTable::zeros(f.smdp);
    QTable q2 = q1;
    for (auto& row : q2.q)
        for (double& v : row) v += 2.5;
    const QTable t1 = apply_operator(f.smdp, f.proposal, q1, 4);
    const QTable t2 = apply_operator(f.smdp, f.proposal, q2, 4);
    CHECK(t1.sup_diff(t2) == doctest::Approx(f.smdp.gamma_h * 2.5).epsilon(1e-12));
}

TEST_CASE("monotonicity: single-candidate states give equality, Ns={1} vacuous") {
    Fixture f;
    f.smdp.n_states = 2;
    f.smdp.gamma_h = 0.7;
    f.smdp.reward = {{0.5}, {-0.25}};
    f.smdp.kernel = {{{0.5, 0.5}}, {{0.2, 0.8}}};
    f.proposal.probs = {{1.0}, {1.0}};
    const int all_ns[] = {1, 2, 4, 8};
    const auto rep = verify_monotonicity(f.smdp, f.proposal, all_ns);
    CHECK(rep.pass);
    CHECK(rep.min_slack == doctest::Approx(0.0).epsilon(1e-10));  // no choice, equality

    const int single[] = {1};
    CHECK(verify_monotonicity(f.smdp, f.proposal, single).pass);
}

TEST_CASE("limit report: deterministic proposal reaches gap 0 at N=1") {
    Fixture f;
    f.smdp.n_states = 1;
    f.smdp.gamma_h = 0.5;
    f.smdp.reward = {{1.0}};
    f.smdp.kernel = {{{1.0}}};
    f.proposal.probs = {{1.0}};
    const auto rep = verify_limit(f.smdp, f.proposal, 1, 1e-9);
    CHECK(rep.pass);
    CHECK(rep.gaps.size() == 1);
    CHECK(rep.final_gap <= 1e-9);
}

TEST_CASE("SMDP JSON round trip") {
    for (const auto& f : fixture_suite()) {
        const auto j = smdp_to_json(f.smdp);
        const TabularSMDP back = smdp_from_json(j);
        CHECK(back.n_states == f.smdp.n_states);
        CHECK(back.gamma_h == f.smdp.gamma_h);
        CHECK(back.reward == f.smdp.reward);
        CHECK(back.kernel == f.smdp.kernel);
        const TabularProposal p = proposal_from_json(proposal_to_json(f.proposal));
        CHECK(p.probs == f.proposal.probs);
    }
    // corrupted kernel row fails validation
    auto j = smdp_to_json(fixture_suite()[0].smdp);
    j["kernel"][0][0][0] = 0.7;
    CHECK_THROWS_AS(smdp_from_json(j), std::invalid_argument);
}

TEST_CASE("gridworld converts losslessly and the solver matches MC rollouts") {
    EnvConfig ec;
    ec.kind = EnvKind::Gridworld;
    ec.grid_size = 4;
    ec.max_episode_steps = 1000;  // conversion and rollouts are budget-free here
    const auto env = make_env(ec);
    const int n = ec.grid_size;
    const int h = 2;
    const double gamma = 0.8;

    // finite proposal: per cell, two candidate chunks (toward goal / random walk)
    std::vector<FiniteProposal::StateCandidates> table(static_cast<size_t>(n * n));
    Rng build_rng(106);
    for (int key = 0; key < n * n; ++key) {
        EnvState s;
        s.proprio = {static_cast<double>(key % n), static_cast<double>(key / n)};
        s.goal = {static_cast<double>(n - 1), static_cast<double>(n - 1)};
        ActionChunk expert(h, 2);
        EnvState cur = s;
        for (int k = 0; k < h; ++k) {
            const auto a = env->expert_action(cur);
            expert.at(k, 0) = a[0];
            expert.at(k, 1) = a[1];
            cur = env->step(cur, a).next_state;
        }
        ActionChunk detour(h, 2);
        for (int k = 0; k < h; ++k) {
            const int dir = static_cast<int>(build_rng.integer(4));
            detour.at(k, 0) = dir == 0 ? 1.0 : dir == 1 ? -1.0 : 0.0;
            detour.at(k, 1) = dir == 2 ? 1.0 : dir == 3 ? -1.0 : 0.0;
        }
        table[static_cast<size_t>(key)].chunks = {expert, detour};
        table[static_cast<size_t>(key)].probs = {0.6, 0.4};
    }
    const FiniteProposal proposal(table, [n](const EnvState& s) {
        return gridworld_state_key(s, n);
    });

    const GridworldTabular gt = tabular_from_gridworld(*env, proposal, gamma, h);
    CHECK(gt.smdp.n_states == n * n);

    const int N = 2;
    const QTable q = solve_fixed_point(gt.smdp, gt.proposal, N, 1e-12).q;
    const QTable q_pi = evaluate_induced_policy(gt.smdp, gt.proposal, q, N);
    CHECK(q.sup_diff(q_pi) <= 1e-8);

    // Monte-Carlo rollouts of the induced Best-of-N policy from a fixed start
    EnvState start;
    start.proprio = {0.0, 0.0};
    start.goal = {static_cast<double>(n - 1), static_cast<double>(n - 1)};
    const int start_key = gridworld_state_key(start, n);
    double v_expected = 0.0;
    {
        const auto sel = selection_distribution(q.q[static_cast<size_t>(start_key)],
                                                gt.proposal.probs[static_cast<size_t>(start_key)], N);
        for (size_t i = 0; i < sel.size(); ++i)
            v_expected += sel[i] * q_pi.q[static_cast<size_t>(start_key)][i];
    }

    const int episodes = 10000;
    const int max_chunks = 60;  // gamma_h^60 ~ 1.5e-6 tail truncation
    double mc = 0.0, mc2 = 0.0;
    Rng rng(107);
    const double gamma_h = std::pow(gamma, h);
    for (int e = 0; e < episodes; ++e) {
        EnvState cur = start;
        double ret = 0.0;
        double disc = 1.0;
        for (int c = 0; c < max_chunks; ++c) {
            if (env->at_goal(cur)) break;
            const int key = gridworld_state_key(cur, n);
            const auto& sc = proposal.at_key(key);
            int best = -1;
            for (int i = 0; i < N; ++i) {
                const double u = rng.uniform();
                int idx = u < sc.probs[0] ? 0 : 1;
                if (best < 0 || q.q[static_cast<size_t>(key)][static_cast<size_t>(idx)] >
                                    q.q[static_cast<size_t>(key)][static_cast<size_t>(best)])
                    best = idx;
            }
            // execute the full chunk through the real environment
            EnvState step_state = cur;
            double r_h = 0.0;
            double step_disc = 1.0;
            const ActionChunk& chunk = sc.chunks[static_cast<size_t>(best)];
            for (int k = 0; k < h; ++k) {
                if (env->at_goal(step_state)) break;
                const StepResult res = env->step(step_state, chunk.step(k));
                r_h += step_disc * res.reward;
                step_disc *= gamma;
                step_state = res.next_state;
            }
            ret += disc * r_h;
            disc *= gamma_h;
            cur = step_state;
            cur.step_index = 0;
        }
        mc += ret;
        mc2 += ret * ret;
    }
    mc /= episodes;
    const double se = std::sqrt(std::max(mc2 / episodes - mc * mc, 0.0) / episodes);
    CHECK(std::abs(mc - v_expected) <= 3.0 * se + 1e-6);
}
