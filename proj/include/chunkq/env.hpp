#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "chunkq/chunk.hpp"
#include "chunkq/rng.hpp"

namespace chunkq {

struct EnvState {
    std::vector<double> proprio;  // positions (environment units)
    std::vector<double> goal;     // target position
    int step_index = 0;

    bool operator==(const EnvState&) const = default;
};

struct ChunkTransition {
    EnvState state;
    ActionChunk chunk;
    std::vector<double> rewards;  // length == chunk.horizon, zero beyond valid steps
    EnvState next_state;
    bool terminal = false;
};

struct Demonstration {
    std::vector<EnvState> states;               // length L+1
    std::vector<std::vector<double>> actions;   // length L
    bool success = false;
};

enum class EnvKind { Gridworld, Pointmass };

struct EnvConfig {
    EnvKind kind = EnvKind::Pointmass;
    // gridworld
    int grid_size = 5;
    // pointmass
    double bound = 1.0;          // positions clamped to [-bound, bound]^2
    double goal_radius = 0.12;
    double expert_speed = 0.1;   // expert step length
    std::vector<double> goal{0.6, 0.6};
    std::vector<double> start_lo{-0.9, -0.9};
    std::vector<double> start_hi{-0.4, -0.4};
    // shared
    int max_episode_steps = 40;
};

struct StepResult {
    EnvState next_state;
    double reward = 0.0;
    bool terminal = false;  // goal reached or step budget exhausted
};

// Deterministic toy environments. Dynamics are pure functions of
// (state, action); randomness enters only through initial states.
class Env {
public:
    virtual ~Env() = default;
    virtual EnvKind kind() const = 0;
    virtual int proprio_dim() const = 0;
    virtual int action_dim() const = 0;
    virtual const EnvConfig& config() const = 0;
    virtual EnvState initial_state(Rng& rng) const = 0;
    virtual StepResult step(const EnvState& state, std::span<const double> action) const = 0;
    virtual bool at_goal(const EnvState& state) const = 0;
    // Noiseless expert control at `state` (used for demo generation).
    virtual std::vector<double> expert_action(const EnvState& state) const = 0;
};

std::unique_ptr<Env> make_env(const EnvConfig& config);

EnvKind parse_env_kind(const std::string& name);
std::string env_kind_name(EnvKind kind);

// Executes the first n_exec valid steps of `chunk` from `state`. Stops early
// when the environment terminates; rewards beyond executed steps stay zero
// and the recorded chunk mask is trimmed to the executed prefix.
ChunkTransition step_chunk(const Env& env, const EnvState& state, const ActionChunk& chunk,
                           int n_exec);

// Noisy expert trajectories: straight line toward the goal for pointmass
// (Gaussian action noise, sigma), shortest path for gridworld (noise ignored).
// Throws if the noiseless expert cannot reach the goal within the budget.
std::vector<Demonstration> generate_demos(const Env& env, int count, double noise_sigma, Rng& rng);

// Sparse reward labeling: the last `window` steps of a successful demo get
// the high value, everything else the low value. shifted=true maps to {-1,+1},
// otherwise {0,1}. window is clamped to the demo length.
std::vector<double> label_rewards(const Demonstration& demo, int window, bool shifted);

}  // namespace chunkq
