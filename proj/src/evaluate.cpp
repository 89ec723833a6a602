#include "chunkq/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace chunkq::eval {

void EvalConfig::validate() const {
    if (N < 1) throw std::invalid_argument("EvalConfig: N must be >= 1");
    if (n_exec < 1) throw std::invalid_argument("EvalConfig: n_exec must be >= 1");
    if (episodes < 1) throw std::invalid_argument("EvalConfig: episodes must be >= 1");
    if (seeds.empty()) throw std::invalid_argument("EvalConfig: seeds must be non-empty");
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("EvalConfig: gamma must be in (0,1)");
}

SelectionResult best_of_n_select(const critic::CriticParams& params, const Proposal& proposal,
                                 const EnvState& state, int N, Rng& rng) {
    if (N < 1) throw std::invalid_argument("best_of_n_select: N must be >= 1");
    SelectionResult result;
    result.candidates = sample_candidates(proposal, state, N, rng);
    result.scores.resize(result.candidates.size());
    const critic::ContextFeatures ctx = critic::make_context(state, params.config);
    for (size_t i = 0; i < result.candidates.size(); ++i) {
        const critic::CriticInput input{&ctx, state.proprio, &result.candidates[i]};
        result.scores[i] =
            std::min(critic::forward(params, 0, input), critic::forward(params, 1, input));
    }
    result.chosen_index = 0;
    for (size_t i = 1; i < result.scores.size(); ++i)
        if (result.scores[i] > result.scores[static_cast<size_t>(result.chosen_index)])
            result.chosen_index = static_cast<int>(i);
    return result;
}

EpisodeResult run_episode(const Env& env, const critic::CriticParams& params,
                          const Proposal& proposal, const EvalConfig& config, Rng& rng) {
    config.validate();
    EpisodeResult result;
    EnvState cur = env.initial_state(rng);
    result.decision_states.push_back(cur);
    if (env.config().max_episode_steps <= 0) return result;  // no budget, immediate failure
    double discount = 1.0;
    bool terminal = env.at_goal(cur);
    while (!terminal) {
        const SelectionResult sel = best_of_n_select(params, proposal, cur, config.N, rng);
        const ActionChunk& chunk = sel.chosen();
        const int n_exec = std::min(config.n_exec, chunk.valid_steps());
        const ChunkTransition tr = step_chunk(env, cur, chunk, n_exec);
        for (int k = 0; k < tr.chunk.valid_steps(); ++k) {
            result.episode_return += discount * tr.rewards[static_cast<size_t>(k)];
            discount *= config.gamma;
            ++result.steps;
        }
        cur = tr.next_state;
        terminal = tr.terminal;
        result.decision_states.push_back(cur);
    }
    result.success = env.at_goal(cur);
    return result;
}

std::vector<EpisodeResult> run_episodes(const Env& env, const critic::CriticParams& params,
                                        const Proposal& proposal, const EvalConfig& config,
                                        uint64_t seed, int episodes, ExecMode mode) {
    std::vector<EpisodeResult> results(static_cast<size_t>(episodes));
    for_each_index(episodes, mode, [&](int e) {
        Rng rng = Rng::stream(seed, 7, static_cast<uint64_t>(e));
        results[static_cast<size_t>(e)] = run_episode(env, params, proposal, config, rng);
    });
    return results;
}

std::vector<EpisodeResult> run_episodes_reference(const Env& env,
                                                  const critic::CriticParams& params,
                                                  const Proposal& proposal,
                                                  const EvalConfig& config, uint64_t seed,
                                                  int episodes) {
    std::vector<EpisodeResult> results(static_cast<size_t>(episodes));
    for (int e = 0; e < episodes; ++e) {
        Rng rng = Rng::stream(seed, 7, static_cast<uint64_t>(e));
        results[static_cast<size_t>(e)] = run_episode(env, params, proposal, config, rng);
    }
    return results;
}

double median(std::vector<double> values) {
    if (values.empty()) throw std::invalid_argument("median: empty input");
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

SuccessReport success_rate(const Env& env, const critic::CriticParams& params,
                           const Proposal& proposal, const EvalConfig& config, ExecMode mode) {
    config.validate();
    SuccessReport report;
    std::vector<double> rates;
    std::vector<uint64_t> seeds = config.seeds;
    std::sort(seeds.begin(), seeds.end());
    for (uint64_t seed : seeds) {
        const auto episodes = run_episodes(env, params, proposal, config, seed, config.episodes, mode);
        double mean = 0.0;
        for (const auto& ep : episodes) mean += ep.success ? 1.0 : 0.0;
        mean /= static_cast<double>(episodes.size());
        report.rows.push_back({seed, config.N, mean});
        rates.push_back(mean);
    }
    report.median_success = median(rates);
    return report;
}

namespace {

std::vector<double> average_ranks(std::span<const double> xs) {
    const size_t n = xs.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size() || xs.size() < 2)
        throw std::invalid_argument("spearman: need two sequences of equal length >= 2");
    const std::vector<double> rx = average_ranks(xs);
    const std::vector<double> ry = average_ranks(ys);
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

RankReport rank_eval(const critic::CriticParams& params,
                     std::span<const std::pair<EnvState, ActionChunk>> heldout,
                     const Proposal& proposal, int N, const geometry::MetricWeights& w, Rng& rng,
                     bool include_expert) {
    if (N < 2) throw std::invalid_argument("rank_eval: N must be >= 2 for a ranking");
    if (heldout.empty()) throw std::invalid_argument("rank_eval: empty heldout set");
    RankReport report;
    for (size_t si = 0; si < heldout.size(); ++si) {
        const auto& [state, expert] = heldout[si];
        std::vector<ActionChunk> candidates = sample_candidates(proposal, state, N, rng);
        if (include_expert) candidates.push_back(expert);

        const critic::ContextFeatures ctx = critic::make_context(state, params.config);
        std::vector<double> scores(candidates.size());
        std::vector<double> neg_dist(candidates.size());
        for (size_t i = 0; i < candidates.size(); ++i) {
            const critic::CriticInput input{&ctx, state.proprio, &candidates[i]};
            scores[i] =
                std::min(critic::forward(params, 0, input), critic::forward(params, 1, input));
            neg_dist[i] = -geometry::weighted_distance(candidates[i], expert, w);
        }
        size_t best_score = 0, best_geom = 0;
        for (size_t i = 1; i < candidates.size(); ++i) {
            if (scores[i] > scores[best_score]) best_score = i;
            if (neg_dist[i] > neg_dist[best_geom]) best_geom = i;
        }
        RankDetail detail;
        detail.state_id = static_cast<int>(si);
        detail.hit = best_score == best_geom;
        detail.spearman = spearman(scores, neg_dist);
        report.per_state.push_back(detail);
        report.top1_hit_rate += detail.hit ? 1.0 : 0.0;
        report.mean_spearman += detail.spearman;
    }
    report.top1_hit_rate /= static_cast<double>(heldout.size());
    report.mean_spearman /= static_cast<double>(heldout.size());
    return report;
}

std::vector<SweepRow> sweep_n(const Env& env, const critic::CriticParams& params,
                              const Proposal& proposal, std::span<const int> Ns,
                              const EvalConfig& config, ExecMode mode) {
    std::vector<SweepRow> rows;
    for (int n : Ns) {
        EvalConfig cfg = config;  // shared seeds across N
        cfg.N = n;
        rows.push_back({n, success_rate(env, params, proposal, cfg, mode).median_success});
    }
    return rows;
}

Landscape landscape_grid(const critic::CriticParams& params, const EnvState& state,
                         const ActionChunk& gt_chunk, std::pair<int, int> axes,
                         const GridSpec& grid, std::span<const ActionChunk> candidates) {
    gt_chunk.validate();
    const int n_coords = gt_chunk.horizon * gt_chunk.action_dim;
    const auto [ax, ay] = axes;
    if (ax < 0 || ax >= n_coords || ay < 0 || ay >= n_coords || ax == ay)
        throw std::invalid_argument("landscape_grid: bad axis coordinates");
    if (grid.nx < 1 || grid.ny < 1) throw std::invalid_argument("landscape_grid: empty grid");
    // varied coordinates must be on valid steps
    if (!gt_chunk.mask[static_cast<size_t>(ax / gt_chunk.action_dim)] ||
        !gt_chunk.mask[static_cast<size_t>(ay / gt_chunk.action_dim)])
        throw std::invalid_argument("landscape_grid: axis on a masked step");

    const critic::ContextFeatures ctx = critic::make_context(state, params.config);
    const auto score = [&](const ActionChunk& c) {
        const critic::CriticInput input{&ctx, state.proprio, &c};
        return std::min(critic::forward(params, 0, input), critic::forward(params, 1, input));
    };

    Landscape out;
    std::vector<double> raw;
    raw.reserve(static_cast<size_t>(grid.nx) * grid.ny);
    ActionChunk varied = gt_chunk;
    for (int iy = 0; iy < grid.ny; ++iy) {
        const double y = grid.ny == 1 ? grid.y_lo
                                      : grid.y_lo + (grid.y_hi - grid.y_lo) * iy / (grid.ny - 1);
        for (int ix = 0; ix < grid.nx; ++ix) {
            const double x = grid.nx == 1 ? grid.x_lo
                                          : grid.x_lo + (grid.x_hi - grid.x_lo) * ix / (grid.nx - 1);
            varied.actions[static_cast<size_t>(ax)] = x;
            varied.actions[static_cast<size_t>(ay)] = y;
            raw.push_back(score(varied));
            out.points.push_back({x, y, 0.0, ""});
        }
    }
    out.q_min = *std::min_element(raw.begin(), raw.end());
    out.q_max = *std::max_element(raw.begin(), raw.end());
    const double range = out.q_max - out.q_min;
    const auto normalize = [&](double q) {
        return range > 0.0 ? 2.0 * (q - out.q_min) / range - 1.0 : 0.0;
    };
    for (size_t i = 0; i < raw.size(); ++i) out.points[i].q_norm = normalize(raw[i]);

    out.points.push_back({gt_chunk.actions[static_cast<size_t>(ax)],
                          gt_chunk.actions[static_cast<size_t>(ay)], normalize(score(gt_chunk)),
                          "gt"});
    for (const ActionChunk& cand : candidates)
        out.points.push_back({cand.actions[static_cast<size_t>(ax)],
                              cand.actions[static_cast<size_t>(ay)], normalize(score(cand)),
                              "cand"});
    return out;
}

}  // namespace chunkq::eval
