#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "chunkq/chunk.hpp"
#include "chunkq/dataset.hpp"
#include "chunkq/env.hpp"
#include "chunkq/geometry.hpp"
#include "chunkq/rng.hpp"

namespace chunkq {

// Candidate-chunk generator standing in for a frozen fine-tuned policy.
// Immutable after construction; sampling is pure given an rng, so concurrent
// sampling with independent streams is safe.
class Proposal {
public:
    virtual ~Proposal() = default;
    virtual ActionChunk sample(const EnvState& state, Rng& rng) const = 0;
    virtual int horizon() const = 0;
    virtual int action_dim() const = 0;
};

// Finite per-state candidate lists with explicit probabilities. States are
// mapped to integer keys by `state_key` (e.g. gridworld cell index).
class FiniteProposal final : public Proposal {
public:
    struct StateCandidates {
        std::vector<ActionChunk> chunks;
        std::vector<double> probs;  // nonnegative, sums to 1
    };

    FiniteProposal(std::vector<StateCandidates> table, std::function<int(const EnvState&)> state_key);

    ActionChunk sample(const EnvState& state, Rng& rng) const override;
    int horizon() const override { return h_; }
    int action_dim() const override { return d_a_; }

    int n_keys() const { return static_cast<int>(table_.size()); }
    const StateCandidates& at_key(int key) const;
    int key_of(const EnvState& state) const;

private:
    std::vector<StateCandidates> table_;
    std::function<int(const EnvState&)> state_key_;
    int h_ = 0;
    int d_a_ = 0;
};

// Nearest-demonstration lookup plus systematic bias plus Gaussian noise.
// Reference points come from dataset transitions; nearest is by Euclidean
// distance on proprio, ties broken by lowest transition index.
class DemoGaussianProposal final : public Proposal {
public:
    DemoGaussianProposal(const OfflineDataset& dataset, double sigma, std::vector<double> bias);

    ActionChunk sample(const EnvState& state, Rng& rng) const override;
    int horizon() const override { return h_; }
    int action_dim() const override { return d_a_; }

    // The noise-free, bias-free nearest chunk (exposed for tests/eval).
    const ActionChunk& nearest_chunk(const EnvState& state) const;

private:
    std::vector<std::vector<double>> ref_proprio_;
    std::vector<ActionChunk> ref_chunks_;
    double sigma_ = 0.0;
    std::vector<double> bias_;
    int h_ = 0;
    int d_a_ = 0;
};

std::shared_ptr<Proposal> make_demo_proposal(const OfflineDataset& dataset, double sigma,
                                             std::vector<double> bias);

// N i.i.d. draws from the proposal at `state`.
std::vector<ActionChunk> sample_candidates(const Proposal& policy, const EnvState& state, int N,
                                           Rng& rng);

struct RecallSpec {
    double epsilon = 0.1;  // radius, in sqrt(weighted-metric) units
    double p0 = 0.5;       // required mass in (0,1]
};

struct RecallReport {
    std::vector<double> per_state_mass;
    bool pass = false;
};

// Monte-Carlo estimate of the proposal mass within epsilon of each dataset
// chunk, one shared sample set per state: mass_i = P(sqrt(d_W(A, A_i)) <= eps).
RecallReport check_local_recall(const Proposal& policy, const OfflineDataset& dataset,
                                const RecallSpec& spec, const geometry::MetricWeights& w,
                                int samples_per_state, Rng& rng);

// Same sample set evaluated at several radii (monotone in epsilon by
// construction). Row i holds the masses for dataset transition i.
std::vector<std::vector<double>> local_recall_masses(const Proposal& policy,
                                                     const OfflineDataset& dataset,
                                                     std::span<const double> epsilons,
                                                     const geometry::MetricWeights& w,
                                                     int samples_per_state, Rng& rng);

// Off-demonstration candidate mixture: proposal draws, noisy copies of the
// expert chunk, prefix truncations, and expert/proposal interpolations.
struct OODSamplerConfig {
    double w_proposal = 0.4;
    double w_gt_noise = 0.3;
    double w_truncate = 0.15;
    double w_interpolate = 0.15;
    double noise_sigma = 0.1;
    double alpha_lo = 0.0;  // interpolation coefficient range
    double alpha_hi = 1.0;

    void validate() const;
};

ActionChunk sample_ood(const OODSamplerConfig& config, const EnvState& state,
                       const ActionChunk& gt_chunk, const Proposal& policy, Rng& rng);

}  // namespace chunkq
