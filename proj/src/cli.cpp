#include "chunkq/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include <CLI11.hpp>

#include "chunkq/io.hpp"
#include "chunkq/tabular.hpp"

namespace chunkq::cli {

using nlohmann::json;

std::string RunConfig::resolved_dataset_path() const {
    if (!dataset_path.empty()) return dataset_path;
    return out_dir + "/dataset.jsonl";
}

json builtin_defaults() {
    return json{
        {"seed", 0},
        {"out_dir", "out"},
        {"env",
         {{"kind", "pointmass"},
          {"grid_size", 5},
          {"bound", 1.0},
          {"goal_radius", 0.12},
          {"expert_speed", 0.1},
          {"goal", {0.6, 0.6}},
          {"start_lo", {-0.9, -0.9}},
          {"start_hi", {-0.4, -0.4}},
          {"max_episode_steps", 40}}},
        {"data",
         {{"demos", 5},
          {"demo_sigma", 0.01},
          {"h", 8},
          {"stride", 8},
          {"gamma", 0.98},
          {"label_window", 3},
          {"shifted_rewards", true},
          {"path", ""}}},
        {"proposal", {{"sigma", 0.05}, {"bias", {0.02, -0.02}}}},
        {"ood",
         {{"w_proposal", 0.4},
          {"w_gt_noise", 0.3},
          {"w_truncate", 0.15},
          {"w_interpolate", 0.15},
          {"noise_sigma", 0.1},
          {"alpha_lo", 0.0},
          {"alpha_hi", 1.0}}},
        {"egr",
         {{"lambda", 5.0},
          {"beta", 5.0},
          {"eta", 1.0},
          {"weights", json::array()},  // empty -> all-ones for the env action dim
          {"ood_per_state", 8},
          {"rank_pairs_per_state", 8}}},
        {"critic",
         {{"variant", "mlp"},
          {"d_model", 32},
          {"n_heads", 2},
          {"n_layers", 2},
          {"d_ff", 64},
          {"value_head", {64, 64}},
          {"mlp_hidden", {64, 64}},
          {"context_tokens", 4}}},
        {"train",
         {{"lr", 1e-4},
          {"warmup_steps", 1000},
          {"total_steps", 3000},
          {"batch_size", 32},
          {"grad_clip", 10.0},
          {"polyak_tau", 0.005},
          {"n_train", 8},
          {"baseline", "none"},
          {"cql_alpha", 5.0},
          {"cql_ood_per_state", 8},
          {"checkpoint_every", 1000},
          {"rank_eval_every", 500}}},
        {"eval",
         {{"N", 8}, {"n_exec", 5}, {"episodes", 50}, {"seeds", {1, 2, 3, 4, 5}}, {"heldout_states", 40}}},
        {"sweep", {{"Ns", {1, 2, 4, 8}}}},
        {"landscape",
         {{"axis_x", 0},
          {"axis_y", -1},
          {"x_lo", -0.2},
          {"x_hi", 0.2},
          {"nx", 21},
          {"y_lo", -0.2},
          {"y_hi", 0.2},
          {"ny", 21}}},
        {"verify",
         {{"random_instances", 100},
          {"trials", 5},
          {"n_limit", 128},
          {"limit_threshold", 1e-3}}}};
}

namespace {

void deep_merge(json& base, const json& overlay) {
    if (!overlay.is_object() || !base.is_object()) {
        base = overlay;
        return;
    }
    for (const auto& [key, value] : overlay.items()) {
        if (base.contains(key) && base[key].is_object() && value.is_object())
            deep_merge(base[key], value);
        else
            base[key] = value;
    }
}

json parse_override_value(const std::string& text) {
    const json parsed = json::parse(text, nullptr, false);
    if (!parsed.is_discarded()) return parsed;
    return json(text);  // bare string
}

void apply_override(json& config, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw std::invalid_argument("--set expects key=value, got: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const json value = parse_override_value(assignment.substr(eq + 1));
    json* node = &config;
    size_t start = 0;
    while (true) {
        const size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw std::invalid_argument("--set has an empty path segment: " + path);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

}  // namespace

RunConfig config_from_json(const json& merged) {
    RunConfig c;
    c.raw = merged;
    c.seed = merged.at("seed").get<uint64_t>();
    c.out_dir = merged.at("out_dir").get<std::string>();

    const json& env = merged.at("env");
    c.env.kind = parse_env_kind(env.at("kind").get<std::string>());
    c.env.grid_size = env.at("grid_size").get<int>();
    c.env.bound = env.at("bound").get<double>();
    c.env.goal_radius = env.at("goal_radius").get<double>();
    c.env.expert_speed = env.at("expert_speed").get<double>();
    c.env.goal = env.at("goal").get<std::vector<double>>();
    c.env.start_lo = env.at("start_lo").get<std::vector<double>>();
    c.env.start_hi = env.at("start_hi").get<std::vector<double>>();
    c.env.max_episode_steps = env.at("max_episode_steps").get<int>();

    const json& data = merged.at("data");
    c.demos = data.at("demos").get<int>();
    c.demo_sigma = data.at("demo_sigma").get<double>();
    c.h = data.at("h").get<int>();
    c.stride = data.at("stride").get<int>();
    c.gamma = data.at("gamma").get<double>();
    c.label_window = data.at("label_window").get<int>();
    c.shifted_rewards = data.at("shifted_rewards").get<bool>();
    c.dataset_path = data.at("path").get<std::string>();

    const json& prop = merged.at("proposal");
    c.proposal_sigma = prop.at("sigma").get<double>();
    c.proposal_bias = prop.at("bias").get<std::vector<double>>();

    const json& ood = merged.at("ood");
    c.train.ood.w_proposal = ood.at("w_proposal").get<double>();
    c.train.ood.w_gt_noise = ood.at("w_gt_noise").get<double>();
    c.train.ood.w_truncate = ood.at("w_truncate").get<double>();
    c.train.ood.w_interpolate = ood.at("w_interpolate").get<double>();
    c.train.ood.noise_sigma = ood.at("noise_sigma").get<double>();
    c.train.ood.alpha_lo = ood.at("alpha_lo").get<double>();
    c.train.ood.alpha_hi = ood.at("alpha_hi").get<double>();

    const int action_dim = 2;  // both toy environments
    const int proprio_dim = 2;

    const json& egr = merged.at("egr");
    c.train.egr.lambda = egr.at("lambda").get<double>();
    c.train.egr.beta = egr.at("beta").get<double>();
    c.train.egr.eta = egr.at("eta").get<double>();
    auto weights = egr.at("weights").get<std::vector<double>>();
    if (weights.empty()) weights.assign(static_cast<size_t>(action_dim), 1.0);
    c.train.egr.weights.w = std::move(weights);
    c.train.egr.ood_per_state = egr.at("ood_per_state").get<int>();
    c.train.egr.rank_pairs_per_state = egr.at("rank_pairs_per_state").get<int>();

    const json& crit = merged.at("critic");
    c.train.critic.variant =
        crit.at("variant").get<std::string>() == "mlp" ? critic::Variant::Mlp : critic::Variant::Fusion;
    c.train.critic.d_model = crit.at("d_model").get<int>();
    c.train.critic.n_heads = crit.at("n_heads").get<int>();
    c.train.critic.n_layers = crit.at("n_layers").get<int>();
    c.train.critic.d_ff = crit.at("d_ff").get<int>();
    c.train.critic.value_head = crit.at("value_head").get<std::vector<int>>();
    c.train.critic.mlp_hidden = crit.at("mlp_hidden").get<std::vector<int>>();
    c.train.critic.context_tokens = crit.at("context_tokens").get<int>();
    c.train.critic.proprio_dim = proprio_dim;
    c.train.critic.horizon = c.h;
    c.train.critic.action_dim = action_dim;

    const json& train = merged.at("train");
    c.train.lr = train.at("lr").get<double>();
    c.train.warmup_steps = train.at("warmup_steps").get<int>();
    c.train.total_steps = train.at("total_steps").get<int>();
    c.train.batch_size = train.at("batch_size").get<int>();
    c.train.grad_clip = train.at("grad_clip").get<double>();
    c.train.polyak_tau = train.at("polyak_tau").get<double>();
    c.train.n_train = train.at("n_train").get<int>();
    const std::string baseline = train.at("baseline").get<std::string>();
    if (baseline == "none")
        c.train.baseline = trainer::Baseline::None;
    else if (baseline == "cql")
        c.train.baseline = trainer::Baseline::Cql;
    else
        throw std::invalid_argument("unknown baseline: " + baseline);
    c.train.cql_alpha = train.at("cql_alpha").get<double>();
    c.train.cql_ood_per_state = train.at("cql_ood_per_state").get<int>();
    c.train.seed = c.seed;
    c.checkpoint_every = train.at("checkpoint_every").get<int>();
    c.rank_eval_every = train.at("rank_eval_every").get<int>();

    const json& ev = merged.at("eval");
    c.eval.N = ev.at("N").get<int>();
    c.eval.n_exec = ev.at("n_exec").get<int>();
    c.eval.episodes = ev.at("episodes").get<int>();
    c.eval.seeds = ev.at("seeds").get<std::vector<uint64_t>>();
    c.eval.gamma = c.gamma;
    c.heldout_states = ev.at("heldout_states").get<int>();

    c.sweep_ns = merged.at("sweep").at("Ns").get<std::vector<int>>();

    const json& land = merged.at("landscape");
    c.landscape_axis_x = land.at("axis_x").get<int>();
    c.landscape_axis_y = land.at("axis_y").get<int>();
    c.grid.x_lo = land.at("x_lo").get<double>();
    c.grid.x_hi = land.at("x_hi").get<double>();
    c.grid.nx = land.at("nx").get<int>();
    c.grid.y_lo = land.at("y_lo").get<double>();
    c.grid.y_hi = land.at("y_hi").get<double>();
    c.grid.ny = land.at("ny").get<int>();

    const json& ver = merged.at("verify");
    c.verify_random_instances = ver.at("random_instances").get<int>();
    c.verify_trials = ver.at("trials").get<int>();
    c.verify_n_limit = ver.at("n_limit").get<int>();
    c.verify_limit_threshold = ver.at("limit_threshold").get<double>();

    // validate everything up front
    c.train.validate();
    c.eval.validate();
    if (c.demos < 1) throw std::invalid_argument("data.demos must be >= 1");
    if (c.h < 1 || c.stride < 1) throw std::invalid_argument("data.h and data.stride must be >= 1");
    if (!(c.gamma > 0.0 && c.gamma < 1.0)) throw std::invalid_argument("data.gamma must be in (0,1)");
    if (c.label_window < 1) throw std::invalid_argument("data.label_window must be >= 1");
    if (c.heldout_states < 1) throw std::invalid_argument("eval.heldout_states must be >= 1");
    return c;
}

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides,
                         const std::string& out_dir_flag, const std::string& seed_flag) {
    json merged = builtin_defaults();
    if (!config_path.empty()) {
        const json file = json::parse(io::read_file(config_path));
        deep_merge(merged, file);
    }
    for (const auto& assignment : overrides) apply_override(merged, assignment);
    if (!out_dir_flag.empty()) merged["out_dir"] = out_dir_flag;
    if (!seed_flag.empty()) merged["seed"] = std::stoull(seed_flag);
    return config_from_json(merged);
}

namespace {

OfflineDataset generate_dataset(const RunConfig& config, const Env& env, uint64_t rng_tag) {
    Rng rng = Rng::stream(config.seed, rng_tag);
    const auto demos = generate_demos(env, config.demos, config.demo_sigma, rng);
    std::vector<std::vector<double>> rewards;
    rewards.reserve(demos.size());
    for (const auto& demo : demos)
        rewards.push_back(label_rewards(demo, config.label_window, config.shifted_rewards));
    return build_dataset(demos, rewards, config.h, config.stride, config.gamma);
}

std::vector<std::pair<EnvState, ActionChunk>> heldout_pairs(const RunConfig& config, const Env& env,
                                                            uint64_t rng_tag) {
    std::vector<std::pair<EnvState, ActionChunk>> pairs;
    Rng rng = Rng::stream(config.seed, rng_tag);
    while (static_cast<int>(pairs.size()) < config.heldout_states) {
        const auto demos = generate_demos(env, 1, config.demo_sigma, rng);
        std::vector<std::vector<double>> rewards{
            label_rewards(demos[0], config.label_window, config.shifted_rewards)};
        const OfflineDataset slice = build_dataset(demos, rewards, config.h, config.stride, config.gamma);
        for (const auto& tr : slice.transitions) {
            pairs.emplace_back(tr.state, tr.chunk);
            if (static_cast<int>(pairs.size()) == config.heldout_states) break;
        }
    }
    return pairs;
}

std::shared_ptr<Proposal> build_proposal(const RunConfig& config, const OfflineDataset& dataset) {
    return make_demo_proposal(dataset, config.proposal_sigma, config.proposal_bias);
}

}  // namespace

int cmd_gen_data(const RunConfig& config) {
    const auto env = make_env(config.env);
    Rng rng = Rng::stream(config.seed, 10);
    const auto demos = generate_demos(*env, config.demos, config.demo_sigma, rng);
    std::vector<std::vector<double>> rewards;
    for (const auto& demo : demos)
        rewards.push_back(label_rewards(demo, config.label_window, config.shifted_rewards));
    const OfflineDataset dataset =
        build_dataset(demos, rewards, config.h, config.stride, config.gamma);

    const std::string demo_path = config.out_dir + "/demos.jsonl";
    save_demos_jsonl(demos, demo_path);
    io::write_sidecar(demo_path, config.raw, config.seed, {{"count", demos.size()}});
    const std::string data_path = config.resolved_dataset_path();
    save_dataset_jsonl(dataset, data_path);
    io::write_sidecar(data_path, config.raw, config.seed,
                      {{"transitions", dataset.transitions.size()}});
    std::printf("gen-data: %zu demos, %zu transitions -> %s\n", demos.size(),
                dataset.transitions.size(), data_path.c_str());
    return kOk;
}

namespace {

json report_contraction(const tabular::ContractionReport& r) {
    return {{"max_ratio", r.max_ratio}, {"trials", r.trials}, {"pass", r.pass}};
}
json report_bound(const tabular::BoundednessReport& r) {
    return {{"max_excess", r.max_excess}, {"trials", r.trials}, {"pass", r.pass}};
}
json report_mono(const tabular::MonotonicityReport& r) {
    return {{"Ns", r.Ns}, {"min_slack", r.min_slack}, {"pass", r.pass}};
}
json report_limit(const tabular::LimitReport& r) {
    return {{"Ns", r.Ns},
            {"gaps", r.gaps},
            {"non_increasing", r.non_increasing},
            {"final_gap", r.final_gap},
            {"pass", r.pass}};
}

}  // namespace

int cmd_verify(const RunConfig& config) {
    using namespace tabular;
    json report;
    bool all_pass = true;
    const std::vector<int> mono_ns{1, 2, 4, 8, 16};

    // named fixtures: full verifier set per instance
    json fixtures_json = json::array();
    for (const auto& fixture : fixture_suite()) {
        json fj;
        fj["name"] = fixture.name;
        Rng rng = Rng::stream(config.seed, 20, io::fnv1a64(fixture.name));
        const auto contraction =
            verify_contraction(fixture.smdp, fixture.proposal, 4, config.verify_trials, rng);
        const auto bound = verify_boundedness(fixture.smdp, fixture.proposal, 4, config.verify_trials, rng);
        const auto mono = verify_monotonicity(fixture.smdp, fixture.proposal, mono_ns);
        const auto limit = verify_limit(fixture.smdp, fixture.proposal, config.verify_n_limit,
                                        config.verify_limit_threshold);
        // fixed point equals the value of the induced Best-of-N policy
        double prop1_gap = 0.0;
        for (int n : {1, 2, 8}) {
            const QTable q = solve_fixed_point(fixture.smdp, fixture.proposal, n, 1e-12).q;
            const QTable qpi = evaluate_induced_policy(fixture.smdp, fixture.proposal, q, n);
            prop1_gap = std::max(prop1_gap, q.sup_diff(qpi));
        }
        fj["contraction"] = report_contraction(contraction);
        fj["boundedness"] = report_bound(bound);
        fj["monotonicity"] = report_mono(mono);
        fj["limit"] = report_limit(limit);
        fj["fixed_point_vs_policy_value"] = {{"max_gap", prop1_gap}, {"pass", prop1_gap <= 1e-8}};
        const bool pass = contraction.pass && bound.pass && mono.pass && limit.pass && prop1_gap <= 1e-8;
        fj["pass"] = pass;
        all_pass &= pass;
        fixtures_json.push_back(fj);
        io::write_file(config.out_dir + "/fixtures/" + fixture.name + ".json",
                       json{{"smdp", smdp_to_json(fixture.smdp)},
                            {"proposal", proposal_to_json(fixture.proposal)}}
                               .dump(2) +
                           "\n");
    }
    report["fixtures"] = fixtures_json;

    // randomized instances across the gamma grid
    {
        const double gammas[] = {0.5, 0.9, 0.98};
        double max_ratio = 0.0;
        double max_excess = -1e300;
        double min_slack = 1e300;
        double prop1_gap = 0.0;
        bool pass = true;
        Rng rng = Rng::stream(config.seed, 21);
        for (int i = 0; i < config.verify_random_instances; ++i) {
            const double gamma_h = gammas[i % 3];
            const Fixture f = random_instance(10, 6, gamma_h, rng);
            const auto contraction = verify_contraction(f.smdp, f.proposal, 4, config.verify_trials, rng);
            const auto bound = verify_boundedness(f.smdp, f.proposal, 4, config.verify_trials, rng);
            max_ratio = std::max(max_ratio, contraction.max_ratio / f.smdp.gamma_h);
            max_excess = std::max(max_excess, bound.max_excess);
            pass &= contraction.pass && bound.pass;
            if (i % 10 == 0 && gamma_h < 0.98) {  // fixed-point heavy checks on a subset
                const auto mono = verify_monotonicity(f.smdp, f.proposal, mono_ns);
                min_slack = std::min(min_slack, mono.min_slack);
                const QTable q = solve_fixed_point(f.smdp, f.proposal, 4, 1e-12).q;
                const QTable qpi = evaluate_induced_policy(f.smdp, f.proposal, q, 4);
                prop1_gap = std::max(prop1_gap, q.sup_diff(qpi));
                pass &= mono.pass && prop1_gap <= 1e-8;
            }
        }
        report["random_instances"] = {{"instances", config.verify_random_instances},
                                      {"max_ratio_over_gamma_h", max_ratio},
                                      {"max_bound_excess", max_excess},
                                      {"min_monotonicity_slack", min_slack},
                                      {"max_fixed_point_vs_policy_gap", prop1_gap},
                                      {"pass", pass}};
        all_pass &= pass;
    }

    // expected-max closed form vs Monte Carlo
    {
        Rng rng = Rng::stream(config.seed, 22);
        double worst_z = 0.0;
        bool pass = true;
        constexpr int kDraws = 100000;
        for (int d = 0; d < 10; ++d) {
            const int k = 2 + static_cast<int>(rng.integer(6));
            std::vector<double> values(static_cast<size_t>(k)), probs(static_cast<size_t>(k));
            double sum = 0.0;
            for (int i = 0; i < k; ++i) {
                values[static_cast<size_t>(i)] = rng.uniform(-2.0, 2.0);
                probs[static_cast<size_t>(i)] = rng.uniform(0.05, 1.0);
                sum += probs[static_cast<size_t>(i)];
            }
            for (double& p : probs) p /= sum;
            std::vector<double> cdf(probs.size());
            std::partial_sum(probs.begin(), probs.end(), cdf.begin());
            for (int N : {1, 3, 8}) {
                const double exact = expected_max_exact(values, probs, N);
                double mc = 0.0, mc2 = 0.0;
                for (int t = 0; t < kDraws; ++t) {
                    double best = -1e300;
                    for (int j = 0; j < N; ++j) {
                        const double u = rng.uniform();
                        const size_t idx = static_cast<size_t>(
                            std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
                        best = std::max(best, values[std::min(idx, values.size() - 1)]);
                    }
                    mc += best;
                    mc2 += best * best;
                }
                mc /= kDraws;
                mc2 = mc2 / kDraws - mc * mc;
                const double se = std::sqrt(std::max(mc2, 1e-300) / kDraws);
                const double z = std::abs(mc - exact) / std::max(se, 1e-12);
                worst_z = std::max(worst_z, z);
                pass &= z <= 4.0;
            }
        }
        report["expected_max_mc"] = {{"worst_z", worst_z}, {"pass", pass}};
        all_pass &= pass;
    }

    // Best-of-N envelope bound on randomized constructions
    {
        Rng rng = Rng::stream(config.seed, 23);
        int violations = 0;
        const geometry::MetricWeights w = geometry::MetricWeights::ones(2);
        for (int t = 0; t < 1000; ++t) {
            const int h = 2 + static_cast<int>(rng.integer(4));
            ActionChunk gt(h, 2);
            for (int k = 0; k < h; ++k)
                for (int j = 0; j < 2; ++j) gt.at(k, j) = rng.uniform(-0.5, 0.5);
            const int m = 2 + static_cast<int>(rng.integer(15));
            std::vector<ActionChunk> candidates;
            for (int i = 0; i < m; ++i) {
                ActionChunk c = gt;
                for (int k = 0; k < h; ++k)
                    for (int j = 0; j < 2; ++j) c.at(k, j) += rng.normal(0.0, 0.3);
                candidates.push_back(std::move(c));
            }
            const double y_t = rng.uniform(-2.0, 2.0);
            const double beta = rng.uniform(0.5, 8.0);
            const double eps = rng.uniform(0.0, 0.5);
            std::vector<double> residuals(static_cast<size_t>(m));
            for (double& r : residuals) r = std::min(eps, rng.uniform(-1.0, eps));
            const ActionChunk* base = candidates.data();
            const geometry::QFn q_fn = [&](const EnvState&, const ActionChunk& c) {
                const size_t idx = static_cast<size_t>(&c - base);
                return y_t - beta * geometry::weighted_distance(c, gt, w) + residuals[idx];
            };
            EnvState state;
            state.proprio = {0.0, 0.0};
            state.goal = {0.0, 0.0};
            const auto rep =
                geometry::check_bestofn_bound(q_fn, state, gt, y_t, candidates, beta, w);
            violations += rep.bound_holds ? 0 : 1;
        }
        report["envelope_bound"] = {{"violations", violations}, {"pass", violations == 0}};
        all_pass &= violations == 0;
    }

    report["all_pass"] = all_pass;
    const std::string path = config.out_dir + "/verify_report.json";
    io::write_file(path, report.dump(2) + "\n");
    io::write_sidecar(path, config.raw, config.seed);
    std::printf("verify: %s -> %s\n", all_pass ? "all checks passed" : "FAILED", path.c_str());
    return all_pass ? kOk : kVerificationFailure;
}

int cmd_train(const RunConfig& config, const std::string& resume_path) {
    if (!std::filesystem::exists(config.resolved_dataset_path()))
        throw std::runtime_error("missing dataset file: " + config.resolved_dataset_path() +
                                 " (run gen-data first)");
    const OfflineDataset dataset = load_dataset_jsonl(config.resolved_dataset_path());
    const auto proposal = build_proposal(config, dataset);
    const auto env = make_env(config.env);
    const auto heldout = heldout_pairs(config, *env, 11);

    io::CsvWriter rank_log(config.out_dir + "/rank_log.csv", {"step", "top1_hit_rate", "spearman"});
    const trainer::EvalHook hook = [&](int64_t step, const trainer::TrainState& state) {
        if (config.rank_eval_every > 0 && (step % config.rank_eval_every == 0 ||
                                           step == config.train.total_steps)) {
            Rng rng = Rng::stream(config.seed, 14, static_cast<uint64_t>(step));
            const auto rank = eval::rank_eval(state.online, heldout, *proposal,
                                              std::max(config.eval.N, 2), config.train.egr.weights,
                                              rng, false);
            rank_log.row({rank_log.cell(static_cast<int64_t>(step)), rank_log.cell(rank.top1_hit_rate),
                          rank_log.cell(rank.mean_spearman)});
        }
        if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0 &&
            step < config.train.total_steps) {
            critic::save_params(state.online,
                                config.out_dir + "/checkpoint_step" + std::to_string(step) + ".bin");
            trainer::save_train_state(state, config.out_dir + "/train_state.bin");
        }
    };

    trainer::TrainResult result;
    const int hook_every =
        config.rank_eval_every > 0
            ? (config.checkpoint_every > 0 ? std::gcd(config.rank_eval_every, config.checkpoint_every)
                                           : config.rank_eval_every)
            : config.checkpoint_every;
    if (!resume_path.empty()) {
        trainer::TrainState state = trainer::load_train_state(resume_path);
        result = trainer::train_from(std::move(state), dataset, *proposal, config.train,
                                     ExecMode::Parallel, hook, hook_every);
    } else {
        result = trainer::train(dataset, *proposal, config.train, ExecMode::Parallel, hook, hook_every);
    }

    io::CsvWriter metrics(config.out_dir + "/metrics.csv",
                          {"step", "td_loss", "egr_anchor", "egr_rank", "cql", "grad_norm", "lr"});
    for (const auto& m : result.metrics)
        metrics.row({metrics.cell(m.step), metrics.cell(m.td_loss), metrics.cell(m.egr_anchor),
                     metrics.cell(m.egr_rank), metrics.cell(m.cql), metrics.cell(m.grad_norm),
                     metrics.cell(m.lr)});
    metrics.close();
    rank_log.close();
    io::write_sidecar(config.out_dir + "/metrics.csv", config.raw, config.seed,
                      {{"steps", result.metrics.size()}});
    io::write_sidecar(config.out_dir + "/rank_log.csv", config.raw, config.seed);

    critic::save_params(result.state.online, config.out_dir + "/checkpoint.bin");
    trainer::save_train_state(result.state, config.out_dir + "/train_state.bin");
    std::printf("train: %lld steps -> %s/checkpoint.bin (params checksum %s)\n",
                static_cast<long long>(result.state.step), config.out_dir.c_str(),
                io::hex64(critic::params_checksum(result.state.online)).c_str());
    return kOk;
}

int cmd_eval(const RunConfig& config, const std::string& checkpoint_path) {
    const critic::CriticParams params = critic::load_params(checkpoint_path);
    const OfflineDataset dataset = load_dataset_jsonl(config.resolved_dataset_path());
    const auto proposal = build_proposal(config, dataset);
    const auto env = make_env(config.env);

    const auto success = eval::success_rate(*env, params, *proposal, config.eval);
    io::CsvWriter success_csv(config.out_dir + "/success.csv", {"seed", "N", "success_rate"});
    for (const auto& row : success.rows)
        success_csv.row({success_csv.cell(static_cast<int64_t>(row.seed)),
                         success_csv.cell(static_cast<int64_t>(row.N)),
                         success_csv.cell(row.success_rate)});
    success_csv.close();
    io::write_sidecar(config.out_dir + "/success.csv", config.raw, config.seed,
                      {{"median_success", success.median_success}});

    if (config.eval.N >= 2) {
        const auto heldout = heldout_pairs(config, *env, 12);
        Rng rng = Rng::stream(config.seed, 15);
        const auto rank = eval::rank_eval(params, heldout, *proposal, config.eval.N,
                                          config.train.egr.weights, rng, false);
        io::CsvWriter rank_csv(config.out_dir + "/rank.csv", {"state_id", "hit", "spearman"});
        for (const auto& d : rank.per_state)
            rank_csv.row({rank_csv.cell(static_cast<int64_t>(d.state_id)),
                          rank_csv.cell(static_cast<int64_t>(d.hit ? 1 : 0)),
                          rank_csv.cell(d.spearman)});
        rank_csv.close();
        io::write_sidecar(config.out_dir + "/rank.csv", config.raw, config.seed,
                          {{"top1_hit_rate", rank.top1_hit_rate}, {"spearman", rank.mean_spearman}});
        std::printf("eval: median success %.3f, top1 %.3f, spearman %.3f\n", success.median_success,
                    rank.top1_hit_rate, rank.mean_spearman);
    } else {
        std::printf("eval: median success %.3f (rank report needs N >= 2)\n", success.median_success);
    }
    return kOk;
}

int cmd_sweep_n(const RunConfig& config, const std::string& checkpoint_path) {
    const critic::CriticParams params = critic::load_params(checkpoint_path);
    const OfflineDataset dataset = load_dataset_jsonl(config.resolved_dataset_path());
    const auto proposal = build_proposal(config, dataset);
    const auto env = make_env(config.env);

    io::CsvWriter csv(config.out_dir + "/sweep.csv", {"N", "seed", "success_rate"});
    json medians = json::array();
    for (int n : config.sweep_ns) {
        eval::EvalConfig cfg = config.eval;
        cfg.N = n;
        const auto report = eval::success_rate(*env, params, *proposal, cfg);
        for (const auto& row : report.rows)
            csv.row({csv.cell(static_cast<int64_t>(n)), csv.cell(static_cast<int64_t>(row.seed)),
                     csv.cell(row.success_rate)});
        medians.push_back({{"N", n}, {"median_success", report.median_success}});
    }
    csv.close();
    io::write_sidecar(config.out_dir + "/sweep.csv", config.raw, config.seed, {{"medians", medians}});
    std::printf("sweep-n: wrote %s/sweep.csv\n", config.out_dir.c_str());
    return kOk;
}

int cmd_landscape(const RunConfig& config, const std::string& checkpoint_path) {
    const critic::CriticParams params = critic::load_params(checkpoint_path);
    const OfflineDataset dataset = load_dataset_jsonl(config.resolved_dataset_path());
    const auto proposal = build_proposal(config, dataset);
    const auto env = make_env(config.env);

    // a fresh heldout state with its expert chunk as the landscape anchor
    RunConfig one = config;
    one.heldout_states = 1;
    const auto anchor = heldout_pairs(one, *env, 13).at(0);
    Rng rng = Rng::stream(config.seed, 16);
    const auto candidates = sample_candidates(*proposal, anchor.first, config.eval.N, rng);

    const int d_a = dataset.action_dim;
    const int axis_x = config.landscape_axis_x;
    const int axis_y = config.landscape_axis_y >= 0 ? config.landscape_axis_y : d_a;
    const auto landscape = eval::landscape_grid(params, anchor.first, anchor.second,
                                                {axis_x, axis_y}, config.grid, candidates);

    io::CsvWriter csv(config.out_dir + "/landscape.csv", {"x", "y", "q_norm", "marker"});
    for (const auto& p : landscape.points)
        csv.row({csv.cell(p.x), csv.cell(p.y), csv.cell(p.q_norm), p.marker});
    csv.close();
    io::write_sidecar(config.out_dir + "/landscape.csv", config.raw, config.seed,
                      {{"q_min", landscape.q_min},
                       {"q_max", landscape.q_max},
                       {"axis_x", axis_x},
                       {"axis_y", axis_y}});
    std::printf("landscape: wrote %s/landscape.csv\n", config.out_dir.c_str());
    return kOk;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"value-guided best-of-N selection over action chunks: data generation, "
                 "operator verification, critic training and evaluation"};
    app.require_subcommand(1);

    struct CommonFlags {
        std::string config_path;
        std::string out_dir;
        std::string seed;
        std::vector<std::string> sets;
        std::string checkpoint;
        std::string resume;
    };
    CommonFlags flags;

    const auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", flags.config_path, "JSON config file");
        cmd->add_option("--seed", flags.seed, "root seed (overrides config)");
        cmd->add_option("--out", flags.out_dir, "output directory (overrides config)");
        cmd->add_option("--set", flags.sets, "config override key=value, dot-separated path");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate demonstrations and the offline dataset");
    add_common(gen);
    CLI::App* verify = app.add_subcommand("verify", "run the operator/bound verification suite");
    add_common(verify);
    CLI::App* train = app.add_subcommand("train", "train the twin critics on the dataset");
    add_common(train);
    train->add_option("--resume", flags.resume, "resume from a train_state.bin file");
    CLI::App* evalc = app.add_subcommand("eval", "success-rate and ranking evaluation");
    add_common(evalc);
    evalc->add_option("--checkpoint", flags.checkpoint, "critic checkpoint (default <out>/checkpoint.bin)");
    CLI::App* sweep = app.add_subcommand("sweep-n", "success rate over an inference-budget sweep");
    add_common(sweep);
    sweep->add_option("--checkpoint", flags.checkpoint, "critic checkpoint (default <out>/checkpoint.bin)");
    CLI::App* land = app.add_subcommand("landscape", "export a value-landscape grid around an expert chunk");
    add_common(land);
    land->add_option("--checkpoint", flags.checkpoint, "critic checkpoint (default <out>/checkpoint.bin)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? kOk : kValidationError;
    }

    try {
        const RunConfig config =
            resolve_config(flags.config_path, flags.sets, flags.out_dir, flags.seed);
        const std::string checkpoint =
            flags.checkpoint.empty() ? config.out_dir + "/checkpoint.bin" : flags.checkpoint;
        if (gen->parsed()) return cmd_gen_data(config);
        if (verify->parsed()) return cmd_verify(config);
        if (train->parsed()) return cmd_train(config, flags.resume);
        if (evalc->parsed()) return cmd_eval(config, checkpoint);
        if (sweep->parsed()) return cmd_sweep_n(config, checkpoint);
        if (land->parsed()) return cmd_landscape(config, checkpoint);
        return kValidationError;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return kValidationError;
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kValidationError;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime failure: %s\n", e.what());
        return kRuntimeFailure;
    }
}

}  // namespace chunkq::cli
