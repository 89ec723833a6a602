#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "chunkq/env.hpp"
#include "chunkq/proposal.hpp"
#include "chunkq/rng.hpp"

namespace chunkq::tabular {

// Finite chunk-level decision process: per-state candidate chunks (by id),
// h-step kernel rows, chunk rewards and the effective discount gamma^h.
struct TabularSMDP {
    int n_states = 0;
    std::vector<std::vector<double>> reward;               // [s][cand]
    std::vector<std::vector<std::vector<double>>> kernel;  // [s][cand][s']
    double gamma_h = 0.0;

    int n_candidates(int s) const { return static_cast<int>(reward[static_cast<size_t>(s)].size()); }
    int total_pairs() const;
    double reward_max() const;  // max |R(s,cand)|
    void validate() const;
};

// Per-state sampling probabilities over that state's candidates.
struct TabularProposal {
    std::vector<std::vector<double>> probs;  // rows sum to 1

    void validate(const TabularSMDP& smdp) const;
};

// Value per (state, candidate-id), same ragged shape as the reward table.
struct QTable {
    std::vector<std::vector<double>> q;

    static QTable zeros(const TabularSMDP& smdp);
    double sup_norm() const;
    double sup_diff(const QTable& other) const;
};

// E[max of N i.i.d. draws] for a discrete value distribution, computed
// exactly: sort values, group ties, sum v_g * (F_g^N - F_{g-1}^N).
double expected_max_exact(std::span<const double> values, std::span<const double> probs, int N);

// Probability that each candidate is the Best-of-N pick when draws are
// scored by `values` and argmax ties go to the earliest draw: groups of
// equal value share the group max-event mass proportionally to their
// sampling probabilities.
std::vector<double> selection_distribution(std::span<const double> values,
                                           std::span<const double> probs, int N);

// One application of the chunked expected-max backup:
// (T Q)(s,A) = R(s,A) + gamma_h * sum_s' P(s'|s,A) * Emax_N(Q(s',.), probs(s')).
QTable apply_operator(const TabularSMDP& smdp, const TabularProposal& proposal, const QTable& q,
                      int N);

struct IterationReport {
    std::vector<double> deltas;  // per-iteration sup-norm changes
    int iterations = 0;
    bool converged = false;
};

struct FixedPointResult {
    QTable q;
    IterationReport report;
};

// Iterates apply_operator from Q = 0 until the sup-norm delta falls below
// tol. Throws std::runtime_error (carrying the last delta) at max_iter.
FixedPointResult solve_fixed_point(const TabularSMDP& smdp, const TabularProposal& proposal, int N,
                                   double tol, int max_iter = 100000);

// Exact policy evaluation of the induced Best-of-N selection policy derived
// from `q`: direct linear solve for instances with <= 200 (state,candidate)
// pairs, fixed-point iteration otherwise.
QTable evaluate_induced_policy(const TabularSMDP& smdp, const TabularProposal& proposal,
                               const QTable& q, int N, double tol = 1e-12);

// Optimality iteration with a hard max restricted to candidates the proposal
// gives positive probability.
QTable support_optimal_q(const TabularSMDP& smdp, const TabularProposal& proposal, double tol,
                         int max_iter = 100000);

struct ContractionReport {
    double max_ratio = 0.0;  // max ||TQ1-TQ2||_inf / ||Q1-Q2||_inf over trials
    int trials = 0;
    bool pass = false;
};

ContractionReport verify_contraction(const TabularSMDP& smdp, const TabularProposal& proposal,
                                     int N, int trials, Rng& rng);

struct MonotonicityReport {
    std::vector<int> Ns;
    double min_slack = 0.0;  // min over supported pairs of Q^{N'} - Q^{N}, N' > N
    bool pass = false;
};

MonotonicityReport verify_monotonicity(const TabularSMDP& smdp, const TabularProposal& proposal,
                                       std::span<const int> Ns, double tol = 1e-12);

struct LimitReport {
    std::vector<int> Ns;        // 1, 2, 4, ..., N_max
    std::vector<double> gaps;   // ||Q^N - Q*_supp||_inf
    bool non_increasing = false;
    double final_gap = 0.0;
    bool pass = false;          // non_increasing && final_gap <= threshold
};

LimitReport verify_limit(const TabularSMDP& smdp, const TabularProposal& proposal, int N_max,
                         double threshold = 1e-3, double tol = 1e-12);

struct BoundednessReport {
    double max_excess = 0.0;  // max over trials of ||TQ||_inf - (R_max + gamma_h ||Q||_inf)
    int trials = 0;
    bool pass = false;
};

BoundednessReport verify_boundedness(const TabularSMDP& smdp, const TabularProposal& proposal,
                                     int N, int trials, Rng& rng);

// JSON round trip so verification fixtures stay reviewable.
nlohmann::json smdp_to_json(const TabularSMDP& smdp);
TabularSMDP smdp_from_json(const nlohmann::json& j);
nlohmann::json proposal_to_json(const TabularProposal& proposal);
TabularProposal proposal_from_json(const nlohmann::json& j);

struct Fixture {
    std::string name;
    TabularSMDP smdp;
    TabularProposal proposal;
};

// Hand-built instances with known solutions, used by tests and `verify`.
std::vector<Fixture> fixture_suite();

// Random instance: <= max_states states, <= max_candidates candidates per
// state, rewards in [-1,1], dense stochastic kernel rows.
Fixture random_instance(int max_states, int max_candidates, double gamma_h, Rng& rng);

// Lossless conversion of a gridworld with a finite per-cell proposal into a
// tabular SMDP over full-chunk execution: state id = cell y*N+x, the goal
// cell absorbing with zero reward. Rewards are the discounted env rewards
// accumulated over each chunk; chunks shorter than `h` valid steps execute
// their valid prefix.
struct GridworldTabular {
    TabularSMDP smdp;
    TabularProposal proposal;
    int goal_state = 0;
};

GridworldTabular tabular_from_gridworld(const Env& env, const FiniteProposal& proposal,
                                        double gamma, int h);

int gridworld_state_key(const EnvState& state, int grid_size);

}  // namespace chunkq::tabular
