#pragma once

#include <functional>
#include <span>
#include <vector>

#include "chunkq/critic.hpp"
#include "chunkq/dataset.hpp"
#include "chunkq/geometry.hpp"
#include "chunkq/proposal.hpp"

namespace chunkq::trainer {

enum class Baseline { None, Cql };

struct TrainConfig {
    double lr = 1e-4;
    int warmup_steps = 1000;
    int total_steps = 12000;
    int batch_size = 32;
    double grad_clip = 10.0;
    double polyak_tau = 0.005;
    int n_train = 8;  // candidates per TD target
    geometry::EGRConfig egr;
    OODSamplerConfig ood;  // mixture feeding the regularizer
    Baseline baseline = Baseline::None;
    double cql_alpha = 5.0;
    int cql_ood_per_state = 8;
    uint64_t seed = 0;
    critic::CriticConfig critic;

    void validate() const;
};

struct TrainState {
    critic::CriticParams online;
    critic::CriticParams target;
    std::vector<double> adam_m;
    std::vector<double> adam_v;
    int64_t step = 0;
};

TrainState init_state(const TrainConfig& config);

struct StepMetrics {
    int64_t step = 0;
    double td_loss = 0.0;
    double egr_anchor = 0.0;
    double egr_rank = 0.0;
    double cql = 0.0;
    double grad_norm = 0.0;  // pre-clip global norm
    double lr = 0.0;         // effective (warmup-scaled) learning rate

    double total_loss(const TrainConfig& config) const {
        double t = td_loss;
        if (config.baseline == Baseline::Cql)
            t += cql;
        else
            t += config.egr.lambda * (egr_anchor + config.egr.eta * egr_rank);
        return t;
    }
};

// Best-of-N bootstrap target: y = R_h at terminal transitions, otherwise
// R_h + gamma^h * max over N proposal draws of min(target twin scores).
// Target values are constants; no gradient flows through them.
double td_target(const ChunkTransition& tr, const critic::CriticParams& target,
                 const Proposal& proposal, int N, double gamma, Rng& rng);

// Mean squared TD error summed over both twins. When `grad` is non-empty
// (size 2 * twin_stride) the loss gradient is accumulated into it.
double td_loss(const critic::CriticParams& online, std::span<const ChunkTransition> batch,
               std::span<const double> targets, std::span<double> grad,
               ExecMode mode = ExecMode::Parallel);

// Comparison regularizer (mean form): for each twin,
// alpha * mean_i [ mean_j Q(s_i, ood_ij) - Q(s_i, A_i) ], summed over twins.
double cql_penalty(const critic::CriticParams& online, std::span<const ChunkTransition> batch,
                   std::span<const std::vector<ActionChunk>> ood_sets, double alpha,
                   std::span<double> grad, ExecMode mode = ExecMode::Parallel);

// target <- (1 - tau) * target + tau * online, elementwise.
void polyak_update(critic::CriticParams& target, const critic::CriticParams& online, double tau);

struct OptimizerReport {
    double grad_norm = 0.0;
    double lr = 0.0;
};

// Global-norm clipping, linear warmup, adaptive-moment update with bias
// correction. Increments state.step.
OptimizerReport optimizer_step(TrainState& state, std::span<double> grad,
                               const TrainConfig& config);

// One minibatch step on explicit transition indices: TD targets, total loss
// gradient (TD + lambda*EGR or TD + CQL), optimizer and polyak updates.
StepMetrics train_step(TrainState& state, const OfflineDataset& dataset, const Proposal& proposal,
                       const TrainConfig& config, std::span<const int> indices,
                       ExecMode mode = ExecMode::Parallel);

using EvalHook = std::function<void(int64_t step, const TrainState& state)>;

struct TrainResult {
    TrainState state;
    std::vector<StepMetrics> metrics;
};

// Full loop: `total_steps` minibatch steps with per-step metrics. Pure
// function of (dataset, proposal, config); aborts with a diagnostic on
// non-finite losses. `hook_every` > 0 invokes the hook periodically and
// after the final step.
TrainResult train(const OfflineDataset& dataset, const Proposal& proposal,
                  const TrainConfig& config, ExecMode mode = ExecMode::Parallel,
                  const EvalHook& hook = nullptr, int hook_every = 0);

// Continues from a saved state until config.total_steps; rng streams are
// keyed by absolute step, so a resumed run matches an uninterrupted one.
TrainResult train_from(TrainState state, const OfflineDataset& dataset, const Proposal& proposal,
                       const TrainConfig& config, ExecMode mode = ExecMode::Parallel,
                       const EvalHook& hook = nullptr, int hook_every = 0);

// Full optimizer state (online, target, moments, step) for resumable runs.
void save_train_state(const TrainState& state, const std::string& path);
TrainState load_train_state(const std::string& path);

}  // namespace chunkq::trainer
