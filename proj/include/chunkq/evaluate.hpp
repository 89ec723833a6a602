#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chunkq/critic.hpp"
#include "chunkq/env.hpp"
#include "chunkq/geometry.hpp"
#include "chunkq/proposal.hpp"

namespace chunkq::eval {

struct EvalConfig {
    int N = 8;
    int n_exec = 5;  // steps executed per selected chunk (toy analog of 20/32)
    int episodes = 50;
    std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
    double gamma = 0.98;

    void validate() const;
};

struct SelectionResult {
    int chosen_index = 0;
    std::vector<ActionChunk> candidates;
    std::vector<double> scores;  // min over twins

    const ActionChunk& chosen() const { return candidates[static_cast<size_t>(chosen_index)]; }
};

// Samples N candidates, scores each with the min over the twin critics and
// returns the argmax (ties to the lowest index, i.e. the earliest draw).
SelectionResult best_of_n_select(const critic::CriticParams& params, const Proposal& proposal,
                                 const EnvState& state, int N, Rng& rng);

struct EpisodeResult {
    bool success = false;
    double episode_return = 0.0;  // discounted over primitive steps
    int steps = 0;
    std::vector<EnvState> decision_states;  // states at chunk boundaries + final
};

// Receding-horizon rollout: select a chunk, execute its first n_exec valid
// steps, repeat until the environment terminates.
EpisodeResult run_episode(const Env& env, const critic::CriticParams& params,
                          const Proposal& proposal, const EvalConfig& config, Rng& rng);

// Episode batch kernel (OpenMP) plus the serial reference; episode i uses
// the rng stream (seed, i), so both produce identical results.
std::vector<EpisodeResult> run_episodes(const Env& env, const critic::CriticParams& params,
                                        const Proposal& proposal, const EvalConfig& config,
                                        uint64_t seed, int episodes,
                                        ExecMode mode = ExecMode::Parallel);
std::vector<EpisodeResult> run_episodes_reference(const Env& env,
                                                  const critic::CriticParams& params,
                                                  const Proposal& proposal,
                                                  const EvalConfig& config, uint64_t seed,
                                                  int episodes);

struct SuccessRow {
    uint64_t seed = 0;
    int N = 0;
    double success_rate = 0.0;
};

struct SuccessReport {
    std::vector<SuccessRow> rows;  // sorted by seed
    double median_success = 0.0;   // across seeds
};

SuccessReport success_rate(const Env& env, const critic::CriticParams& params,
                           const Proposal& proposal, const EvalConfig& config,
                           ExecMode mode = ExecMode::Parallel);

double median(std::vector<double> values);

// Rank both sequences with average ranks for ties; Pearson correlation of
// the ranks. Zero-variance inputs give 0.
double spearman(std::span<const double> xs, std::span<const double> ys);

struct RankDetail {
    int state_id = 0;
    bool hit = false;
    double spearman = 0.0;
};

struct RankReport {
    double top1_hit_rate = 0.0;
    double mean_spearman = 0.0;
    std::vector<RankDetail> per_state;
};

// Ranking diagnostics on held-out (state, expert chunk) pairs: per state,
// sample N candidates (optionally appending the exact expert chunk), rank
// them by critic score and by geometric closeness to the expert; a hit means
// the critic argmax is the geometric argmin.
RankReport rank_eval(const critic::CriticParams& params,
                     std::span<const std::pair<EnvState, ActionChunk>> heldout,
                     const Proposal& proposal, int N, const geometry::MetricWeights& w, Rng& rng,
                     bool include_expert);

struct SweepRow {
    int N = 0;
    double median_success = 0.0;
};

// success_rate per N with shared seeds.
std::vector<SweepRow> sweep_n(const Env& env, const critic::CriticParams& params,
                              const Proposal& proposal, std::span<const int> Ns,
                              const EvalConfig& config, ExecMode mode = ExecMode::Parallel);

struct GridSpec {
    double x_lo = -0.2, x_hi = 0.2;
    int nx = 21;
    double y_lo = -0.2, y_hi = 0.2;
    int ny = 21;
};

struct LandscapePoint {
    double x = 0.0, y = 0.0;
    double q_norm = 0.0;
    std::string marker;  // "" grid, "gt", "cand"
};

struct Landscape {
    std::vector<LandscapePoint> points;
    double q_min = 0.0, q_max = 0.0;  // pre-normalization grid range
};

// Scores the expert chunk varied along two flat chunk coordinates
// (step * action_dim + dim); all other coordinates stay at the expert
// values. Grid scores are min-max normalized to [-1,1] (zero range -> 0);
// gt/candidate markers are normalized against the same range.
Landscape landscape_grid(const critic::CriticParams& params, const EnvState& state,
                         const ActionChunk& gt_chunk, std::pair<int, int> axes,
                         const GridSpec& grid, std::span<const ActionChunk> candidates);

}  // namespace chunkq::eval
