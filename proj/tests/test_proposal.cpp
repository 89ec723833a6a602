#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "chunkq/proposal.hpp"

using namespace chunkq;

namespace {

ActionChunk constant_chunk(int h, int d_a, double value) {
    ActionChunk c(h, d_a);
    for (double& v : c.actions) v = value;
    return c;
}

EnvState state_at(double x, double y) {
    EnvState s;
    s.proprio = {x, y};
    s.goal = {0.6, 0.6};
    return s;
}

// a tiny dataset of two transitions with distinct states and chunks
OfflineDataset two_transition_dataset() {
    OfflineDataset ds;
    ds.h = 3;
    ds.gamma = 0.98;
    ds.action_dim = 2;
    for (int i = 0; i < 2; ++i) {
        ChunkTransition tr;
        tr.state = state_at(i == 0 ? -0.5 : 0.5, 0.0);
        tr.chunk = constant_chunk(3, 2, i == 0 ? 0.1 : -0.2);
        tr.rewards = {0, 0, 0};
        tr.next_state = tr.state;
        tr.terminal = true;
        ds.transitions.push_back(tr);
    }
    return ds;
}

}  // namespace

TEST_CASE("finite proposal: point mass and frequency convergence") {
    const auto key = [](const EnvState& s) { return s.proprio[0] < 0.0 ? 0 : 1; };
    FiniteProposal::StateCandidates sc0;
    sc0.chunks = {constant_chunk(2, 1, 0.0)};
    sc0.probs = {1.0};
    FiniteProposal::StateCandidates sc1;
    sc1.chunks = {constant_chunk(2, 1, 1.0), constant_chunk(2, 1, 2.0)};
    sc1.probs = {0.5, 0.5};
    const FiniteProposal policy({sc0, sc1}, key);

    // single candidate: N copies
    Rng rng(1);
    const auto copies = sample_candidates(policy, state_at(-1, 0), 3, rng);
    REQUIRE(copies.size() == 3);
    for (const auto& c : copies) CHECK(c == sc0.chunks[0]);

    // two candidates at 0.5/0.5: empirical frequency within a 3-sigma binomial CI
    const int draws = 100000;
    int first = 0;
    Rng rng2(2);
    for (int i = 0; i < draws; ++i)
        first += policy.sample(state_at(1, 0), rng2).actions[0] == 1.0;
    const double freq = static_cast<double>(first) / draws;
    CHECK(freq > 0.497);
    CHECK(freq < 0.503);
}

TEST_CASE("finite proposal chi-square fit at 1e5 draws") {
    const auto key = [](const EnvState&) { return 0; };
    FiniteProposal::StateCandidates sc;
    const std::vector<double> probs{0.1, 0.2, 0.3, 0.4};
    for (size_t i = 0; i < probs.size(); ++i)
        sc.chunks.push_back(constant_chunk(2, 1, static_cast<double>(i)));
    sc.probs = probs;
    const FiniteProposal policy({sc}, key);

    const int draws = 100000;
    std::vector<int> counts(probs.size(), 0);
    Rng rng(3);
    for (int i = 0; i < draws; ++i)
        counts[static_cast<size_t>(policy.sample(state_at(0, 0), rng).actions[0])]++;
    double chi2 = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        const double expected = draws * probs[i];
        chi2 += (counts[i] - expected) * (counts[i] - expected) / expected;
    }
    CHECK(chi2 < 16.266);  // chi-square(3 dof) 0.999 quantile
}

TEST_CASE("finite proposal rejects unsupported states and bad tables") {
    const auto key = [](const EnvState& s) { return static_cast<int>(s.proprio[0]); };
    FiniteProposal::StateCandidates sc;
    sc.chunks = {constant_chunk(2, 1, 0.0)};
    sc.probs = {1.0};
    const FiniteProposal policy({sc}, key);
    Rng rng(1);
    CHECK_THROWS_AS(policy.sample(state_at(5, 0), rng), std::invalid_argument);

    FiniteProposal::StateCandidates bad;
    bad.chunks = {constant_chunk(2, 1, 0.0)};
    bad.probs = {0.7};
    CHECK_THROWS_AS(FiniteProposal({bad}, key), std::invalid_argument);
}

TEST_CASE("demo-gaussian proposal: nearest neighbor, bias, tie-break") {
    const OfflineDataset ds = two_transition_dataset();
    Rng rng(4);

    // exact state, no noise/bias: the stored chunk
    const DemoGaussianProposal exact(ds, 0.0, {0.0, 0.0});
    CHECK(exact.sample(state_at(-0.5, 0.0), rng) == ds.transitions[0].chunk);
    CHECK(exact.sample(state_at(0.5, 0.0), rng) == ds.transitions[1].chunk);

    // equidistant query: lowest transition index wins
    CHECK(exact.sample(state_at(0.0, 0.0), rng) == ds.transitions[0].chunk);

    // bias shifts the mean of samples
    const DemoGaussianProposal biased(ds, 0.05, {0.1, 0.0});
    double mean0 = 0.0;
    const int draws = 20000;
    for (int i = 0; i < draws; ++i) mean0 += biased.sample(state_at(-0.5, 0.0), rng).at(0, 0);
    mean0 /= draws;
    CHECK(mean0 == doctest::Approx(0.1 + 0.1).epsilon(0.02));  // chunk value + bias

    CHECK_THROWS_AS(DemoGaussianProposal(OfflineDataset{}, 0.0, {}), std::invalid_argument);
}

TEST_CASE("sample_ood endpoints and support") {
    const OfflineDataset ds = two_transition_dataset();
    const auto policy = make_demo_proposal(ds, 0.3, {0.0, 0.0});
    const EnvState s = state_at(-0.5, 0.0);
    const ActionChunk& gt = ds.transitions[0].chunk;

    // pure interpolation with alpha pinned to 1 -> exactly the gt chunk
    OODSamplerConfig interp;
    interp.w_proposal = 0.0;
    interp.w_gt_noise = 0.0;
    interp.w_truncate = 0.0;
    interp.w_interpolate = 1.0;
    interp.alpha_lo = interp.alpha_hi = 1.0;
    Rng rng(5);
    CHECK(sample_ood(interp, s, gt, *policy, rng) == gt);

    // alpha = 0 -> exactly the policy proposal for that draw
    interp.alpha_lo = interp.alpha_hi = 0.0;
    OODSamplerConfig prop_only = interp;
    prop_only.w_interpolate = 0.0;
    prop_only.w_proposal = 1.0;
    Rng rng_a(77), rng_b(77);
    const ActionChunk via_interp = sample_ood(interp, s, gt, *policy, rng_a);
    // same stream: first uniform consumed by the mixture pick in both paths
    const ActionChunk direct = sample_ood(prop_only, s, gt, *policy, rng_b);
    CHECK(via_interp.actions == direct.actions);

    // mask contracts: gt+noise and interpolation keep the gt mask,
    // truncation yields a prefix of it
    OfflineDataset padded = ds;
    padded.transitions[0].chunk.truncate(2);
    const ActionChunk& gt2 = padded.transitions[0].chunk;
    OODSamplerConfig one_source;
    one_source.w_proposal = one_source.w_gt_noise = one_source.w_truncate =
        one_source.w_interpolate = 0.0;
    Rng rng2(6);
    for (int i = 0; i < 100; ++i) {
        OODSamplerConfig noise = one_source;
        noise.w_gt_noise = 1.0;
        CHECK(sample_ood(noise, s, gt2, *policy, rng2).mask == gt2.mask);
        OODSamplerConfig interp_src = one_source;
        interp_src.w_interpolate = 1.0;
        CHECK(sample_ood(interp_src, s, gt2, *policy, rng2).mask == gt2.mask);
        OODSamplerConfig trunc = one_source;
        trunc.w_truncate = 1.0;
        const ActionChunk t = sample_ood(trunc, s, gt2, *policy, rng2);
        CHECK(t.valid_steps() <= gt2.valid_steps());
        CHECK(t.valid_steps() >= 1);
    }

    OODSamplerConfig zero;
    zero.w_proposal = zero.w_gt_noise = zero.w_truncate = zero.w_interpolate = 0.0;
    Rng rng3(7);
    CHECK_THROWS_AS(sample_ood(zero, s, gt, *policy, rng3), std::invalid_argument);
}

TEST_CASE("gt+noise mean weighted distance matches the closed form") {
    const OfflineDataset ds = two_transition_dataset();
    const auto policy = make_demo_proposal(ds, 0.0, {0.0, 0.0});
    const EnvState s = state_at(-0.5, 0.0);
    const ActionChunk& gt = ds.transitions[0].chunk;

    OODSamplerConfig cfg;
    cfg.w_proposal = cfg.w_truncate = cfg.w_interpolate = 0.0;
    cfg.w_gt_noise = 1.0;
    cfg.noise_sigma = 0.1;
    const geometry::MetricWeights w{{2.0, 3.0}};

    Rng rng(8);
    double mean = 0.0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i)
        mean += geometry::weighted_distance(sample_ood(cfg, s, gt, *policy, rng), gt, w);
    mean /= draws;
    // E[d] = sigma^2 * sum_j w_j (the per-step average cancels the step count)
    const double expected = cfg.noise_sigma * cfg.noise_sigma * (2.0 + 3.0);
    CHECK(mean == doctest::Approx(expected).epsilon(0.02));
}

TEST_CASE("local recall: point mass, limiting cases, monotonicity in epsilon") {
    const OfflineDataset ds = two_transition_dataset();
    const geometry::MetricWeights w = geometry::MetricWeights::ones(2);

    // deterministic proposal at the data chunk: mass 1 for any eps > 0
    const auto exact = make_demo_proposal(ds, 0.0, {0.0, 0.0});
    Rng rng(9);
    const auto report = check_local_recall(*exact, ds, {1e-6, 0.99}, w, 100, rng);
    CHECK(report.pass);
    for (double m : report.per_state_mass) CHECK(m == 1.0);

    // sigma much larger than eps: mass near zero, fail
    const auto wide = make_demo_proposal(ds, 5.0, {0.0, 0.0});
    Rng rng2(10);
    const auto fail = check_local_recall(*wide, ds, {0.01, 0.5}, w, 200, rng2);
    CHECK(!fail.pass);

    // shared-sample monotonicity in epsilon
    const auto noisy = make_demo_proposal(ds, 0.1, {0.0, 0.0});
    const std::vector<double> eps{0.05, 0.1, 0.2, 0.4};
    Rng rng3(11);
    const auto masses = local_recall_masses(*noisy, ds, eps, w, 500, rng3);
    for (const auto& row : masses)
        for (size_t i = 1; i < row.size(); ++i) CHECK(row[i] >= row[i - 1]);
}

TEST_CASE("local recall on the default pointmass setup") {
    // sigma = 0.05 noisy proposal around data chunks, eps = 0.1 in rms units
    EnvConfig ec;
    ec.kind = EnvKind::Pointmass;
    const auto env = make_env(ec);
    Rng drng(12);
    const auto demos = generate_demos(*env, 5, 0.01, drng);
    std::vector<std::vector<double>> rewards;
    for (const auto& demo : demos) rewards.push_back(label_rewards(demo, 3, true));
    const OfflineDataset ds = build_dataset(demos, rewards, 8, 8, 0.98);

    const auto policy = make_demo_proposal(ds, 0.05, {0.0, 0.0});
    Rng rng(13);
    const auto report = check_local_recall(*policy, ds, {0.1, 0.5},
                                           geometry::MetricWeights::ones(2), 10000, rng);
    CHECK(report.pass);
    for (double m : report.per_state_mass) CHECK(m >= 0.5);
}
