#include "chunkq/env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace chunkq {

namespace {

class PointmassEnv final : public Env {
public:
    explicit PointmassEnv(EnvConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.goal.size() != 2 || cfg_.start_lo.size() != 2 || cfg_.start_hi.size() != 2)
            throw std::invalid_argument("pointmass: goal/start bounds must be 2-d");
        if (!(cfg_.goal_radius > 0.0)) throw std::invalid_argument("pointmass: goal_radius must be > 0");
    }

    EnvKind kind() const override { return EnvKind::Pointmass; }
    int proprio_dim() const override { return 2; }
    int action_dim() const override { return 2; }
    const EnvConfig& config() const override { return cfg_; }

    EnvState initial_state(Rng& rng) const override {
        EnvState s;
        s.proprio = {rng.uniform(cfg_.start_lo[0], cfg_.start_hi[0]),
                     rng.uniform(cfg_.start_lo[1], cfg_.start_hi[1])};
        s.goal = cfg_.goal;
        s.step_index = 0;
        return s;
    }

    StepResult step(const EnvState& state, std::span<const double> action) const override {
        if (action.size() != 2) throw std::invalid_argument("pointmass: action must be 2-d");
        StepResult out;
        out.next_state = state;
        for (int j = 0; j < 2; ++j) {
            double p = state.proprio[j] + action[j];
            out.next_state.proprio[j] = std::clamp(p, -cfg_.bound, cfg_.bound);
        }
        out.next_state.step_index = state.step_index + 1;
        const bool reached = at_goal(out.next_state);
        out.reward = reached ? 1.0 : 0.0;
        out.terminal = reached || out.next_state.step_index >= cfg_.max_episode_steps;
        return out;
    }

    bool at_goal(const EnvState& state) const override {
        const double dx = state.proprio[0] - state.goal[0];
        const double dy = state.proprio[1] - state.goal[1];
        return std::sqrt(dx * dx + dy * dy) <= cfg_.goal_radius;
    }

    std::vector<double> expert_action(const EnvState& state) const override {
        const double dx = state.goal[0] - state.proprio[0];
        const double dy = state.goal[1] - state.proprio[1];
        const double dist = std::sqrt(dx * dx + dy * dy);
        if (dist < 1e-12) return {0.0, 0.0};
        const double scale = std::min(cfg_.expert_speed, dist) / dist;
        return {dx * scale, dy * scale};
    }

private:
    EnvConfig cfg_;
};

// N x N grid. Cells are addressed by integer coordinates stored as doubles in
// proprio. Real-valued actions decode to one of five moves: the dominant axis
// with |component| >= 0.5 wins, x before y on ties, otherwise stay.
class GridworldEnv final : public Env {
public:
    explicit GridworldEnv(EnvConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.grid_size < 2) throw std::invalid_argument("gridworld: grid_size must be >= 2");
    }

    EnvKind kind() const override { return EnvKind::Gridworld; }
    int proprio_dim() const override { return 2; }
    int action_dim() const override { return 2; }
    const EnvConfig& config() const override { return cfg_; }

    EnvState initial_state(Rng& rng) const override {
        EnvState s;
        s.goal = {static_cast<double>(cfg_.grid_size - 1), static_cast<double>(cfg_.grid_size - 1)};
        // any non-goal cell
        while (true) {
            const int x = static_cast<int>(rng.integer(static_cast<uint64_t>(cfg_.grid_size)));
            const int y = static_cast<int>(rng.integer(static_cast<uint64_t>(cfg_.grid_size)));
            if (x == cfg_.grid_size - 1 && y == cfg_.grid_size - 1) continue;
            s.proprio = {static_cast<double>(x), static_cast<double>(y)};
            break;
        }
        s.step_index = 0;
        return s;
    }

    StepResult step(const EnvState& state, std::span<const double> action) const override {
        if (action.size() != 2) throw std::invalid_argument("gridworld: action must be 2-d");
        int dx = 0, dy = 0;
        const double ax = action[0], ay = action[1];
        if (std::abs(ax) >= 0.5 && std::abs(ax) >= std::abs(ay))
            dx = ax > 0 ? 1 : -1;
        else if (std::abs(ay) >= 0.5)
            dy = ay > 0 ? 1 : -1;
        StepResult out;
        out.next_state = state;
        const int nx = std::clamp(static_cast<int>(state.proprio[0]) + dx, 0, cfg_.grid_size - 1);
        const int ny = std::clamp(static_cast<int>(state.proprio[1]) + dy, 0, cfg_.grid_size - 1);
        out.next_state.proprio = {static_cast<double>(nx), static_cast<double>(ny)};
        out.next_state.step_index = state.step_index + 1;
        const bool reached = at_goal(out.next_state);
        out.reward = reached ? 1.0 : 0.0;
        out.terminal = reached || out.next_state.step_index >= cfg_.max_episode_steps;
        return out;
    }

    bool at_goal(const EnvState& state) const override {
        return state.proprio[0] == state.goal[0] && state.proprio[1] == state.goal[1];
    }

    std::vector<double> expert_action(const EnvState& state) const override {
        // shortest path: reduce x distance first, then y
        const double dx = state.goal[0] - state.proprio[0];
        const double dy = state.goal[1] - state.proprio[1];
        if (dx != 0.0) return {dx > 0 ? 1.0 : -1.0, 0.0};
        if (dy != 0.0) return {0.0, dy > 0 ? 1.0 : -1.0};
        return {0.0, 0.0};
    }

private:
    EnvConfig cfg_;
};

}  // namespace

std::unique_ptr<Env> make_env(const EnvConfig& config) {
    switch (config.kind) {
        case EnvKind::Gridworld: return std::make_unique<GridworldEnv>(config);
        case EnvKind::Pointmass: return std::make_unique<PointmassEnv>(config);
    }
    throw std::invalid_argument("make_env: unknown environment kind");
}

EnvKind parse_env_kind(const std::string& name) {
    if (name == "gridworld") return EnvKind::Gridworld;
    if (name == "pointmass") return EnvKind::Pointmass;
    throw std::invalid_argument("unknown environment kind: " + name);
}

std::string env_kind_name(EnvKind kind) {
    return kind == EnvKind::Gridworld ? "gridworld" : "pointmass";
}

ChunkTransition step_chunk(const Env& env, const EnvState& state, const ActionChunk& chunk,
                           int n_exec) {
    chunk.validate();
    const int valid = chunk.valid_steps();
    if (n_exec < 1 || n_exec > valid)
        throw std::invalid_argument("step_chunk: n_exec out of [1, valid_steps] range");

    ChunkTransition tr;
    tr.state = state;
    tr.chunk = chunk;
    tr.rewards.assign(static_cast<size_t>(chunk.horizon), 0.0);

    EnvState cur = state;
    int executed = 0;
    for (int k = 0; k < n_exec; ++k) {
        const StepResult res = env.step(cur, chunk.step(k));
        tr.rewards[static_cast<size_t>(k)] = res.reward;
        cur = res.next_state;
        ++executed;
        if (res.terminal) {
            tr.terminal = true;
            break;
        }
    }
    tr.chunk.truncate(executed);
    tr.next_state = cur;
    return tr;
}

std::vector<Demonstration> generate_demos(const Env& env, int count, double noise_sigma, Rng& rng) {
    if (count < 1) throw std::invalid_argument("generate_demos: count must be >= 1");
    if (noise_sigma < 0.0) throw std::invalid_argument("generate_demos: noise_sigma must be >= 0");

    std::vector<Demonstration> demos;
    demos.reserve(static_cast<size_t>(count));
    const bool noisy = env.kind() == EnvKind::Pointmass && noise_sigma > 0.0;

    for (int i = 0; i < count; ++i) {
        Demonstration demo;
        EnvState cur = env.initial_state(rng);
        demo.states.push_back(cur);
        bool done = env.at_goal(cur);
        while (!done) {
            std::vector<double> action = env.expert_action(cur);
            if (noisy)
                for (double& a : action) a += rng.normal(0.0, noise_sigma);
            const StepResult res = env.step(cur, action);
            demo.actions.push_back(std::move(action));
            demo.states.push_back(res.next_state);
            cur = res.next_state;
            done = res.terminal;
        }
        demo.success = env.at_goal(cur);
        if (!demo.success && noise_sigma == 0.0)
            throw std::runtime_error("generate_demos: noiseless expert failed to reach the goal");
        demos.push_back(std::move(demo));
    }
    return demos;
}

std::vector<double> label_rewards(const Demonstration& demo, int window, bool shifted) {
    if (window < 1) throw std::invalid_argument("label_rewards: window must be >= 1");
    const size_t n = demo.actions.size();
    const double lo = shifted ? -1.0 : 0.0;
    std::vector<double> rewards(n, lo);
    if (demo.success) {
        const size_t w = std::min<size_t>(static_cast<size_t>(window), n);
        for (size_t k = n - w; k < n; ++k) rewards[k] = 1.0;
    }
    return rewards;
}

}  // namespace chunkq
