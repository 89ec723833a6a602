#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "chunkq/chunk.hpp"
#include "chunkq/env.hpp"
#include "chunkq/rng.hpp"

namespace chunkq::geometry {

struct MetricWeights {
    std::vector<double> w;  // one nonnegative weight per action dimension

    static MetricWeights ones(int action_dim) { return {std::vector<double>(action_dim, 1.0)}; }
    void validate(int action_dim) const;
};

struct EGRConfig {
    double lambda = 5.0;  // weight of the regularizer in the total objective
    double beta = 5.0;    // slope of the reference surface
    double eta = 1.0;     // ranking-loss weight
    MetricWeights weights;
    int ood_per_state = 8;
    int rank_pairs_per_state = 8;

    void validate(int action_dim) const;
};

// Masked, weighted squared distance, averaged over jointly valid steps:
//   (1 / sum_k m_k) * sum_k m_k * sum_j w_j (a_kj - b_kj)^2
// where m is the AND of both masks. Throws if the joint mask is empty.
double weighted_distance(const ActionChunk& a, const ActionChunk& b, const MetricWeights& w);

// Reference value surface around an expert chunk: y_t - beta * dist.
// y_t is a detached constant by contract; no gradient flows through it.
inline double reference_surface(double y_t, double dist, double beta) {
    return y_t - beta * dist;
}

// Mean squared error between critic values and surface values.
double anchor_loss(std::span<const double> q_values, std::span<const double> surfaces);

// Mean over pairs of ((q_i - q_j) - beta * (d_j - d_i))^2.
double rank_loss(std::span<const std::pair<double, double>> q_pairs,
                 std::span<const std::pair<double, double>> dist_pairs, double beta);

// Unordered index pairs drawn without replacement from {0..m-1} x {0..m-1},
// capped at the number of distinct pairs.
std::vector<std::pair<int, int>> sample_rank_pairs(int m, int count, Rng& rng);

using QFn = std::function<double(const EnvState&, const ActionChunk&)>;

struct EgrBreakdown {
    double total = 0.0;
    double anchor = 0.0;
    double rank = 0.0;
    std::vector<double> q;          // per OOD sample
    std::vector<double> dist;       // per OOD sample
    std::vector<double> surface;    // per OOD sample
    std::vector<std::pair<int, int>> pairs;
};

// Full regularizer for one (state, expert chunk) with its OOD sample set:
// anchor + eta * rank over the given pairs. Requires >= 2 OOD chunks when
// eta > 0 and pairs are requested.
EgrBreakdown egr_loss(const EnvState& state, const ActionChunk& gt_chunk, double y_t,
                      std::span<const ActionChunk> ood_chunks, const QFn& q_fn,
                      const EGRConfig& config, std::span<const std::pair<int, int>> pairs);

// d(anchor + eta*rank)/dq_i for each OOD sample, matching egr_loss.
std::vector<double> egr_grad_wrt_q(std::span<const double> q, std::span<const double> surface,
                                   std::span<const double> dist, double beta, double eta,
                                   std::span<const std::pair<int, int>> pairs);

struct EnvelopeReport {
    double epsilon_hat = 0.0;  // max_i (q_i - Y_i)
    bool bound_holds = false;
    int worst_candidate = -1;
};

// Checks max_i q_i <= y_t - beta * min_i d_i + eps_hat <= y_t + eps_hat
// with eps_hat = max_i (q_i - Y_i), to 1e-12.
EnvelopeReport check_bestofn_bound(const QFn& q_fn, const EnvState& state,
                                   const ActionChunk& gt_chunk, double y_t,
                                   std::span<const ActionChunk> candidates, double beta,
                                   const MetricWeights& w);

}  // namespace chunkq::geometry
