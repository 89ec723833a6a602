#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "chunkq/dataset.hpp"
#include "chunkq/env.hpp"

using namespace chunkq;

namespace {

EnvConfig gridworld_config(int n = 5) {
    EnvConfig cfg;
    cfg.kind = EnvKind::Gridworld;
    cfg.grid_size = n;
    cfg.max_episode_steps = 50;
    return cfg;
}

EnvConfig pointmass_config() {
    EnvConfig cfg;
    cfg.kind = EnvKind::Pointmass;
    return cfg;
}

}  // namespace

TEST_CASE("make_env constructs both kinds and rejects bad configs") {
    CHECK(make_env(gridworld_config())->kind() == EnvKind::Gridworld);
    CHECK(make_env(pointmass_config())->kind() == EnvKind::Pointmass);
    EnvConfig bad = gridworld_config();
    bad.grid_size = 1;
    CHECK_THROWS_AS(make_env(bad), std::invalid_argument);
    CHECK_THROWS_AS(parse_env_kind("maze"), std::invalid_argument);
}

TEST_CASE("pointmass clamps to bounds and integrates linearly") {
    const auto env = make_env(pointmass_config());
    EnvState s;
    s.proprio = {0.0, 0.0};
    s.goal = {0.6, 0.6};
    ActionChunk chunk(6, 2);
    for (int k = 0; k < 6; ++k) chunk.at(k, 0) = 0.1;
    const ChunkTransition tr = step_chunk(*env, s, chunk, 4);
    CHECK(tr.next_state.proprio[0] == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(tr.next_state.proprio[1] == 0.0);
    CHECK(tr.next_state.step_index == 4);

    // clamping at the box boundary
    s.proprio = {0.95, 0.0};
    const StepResult res = env->step(s, std::vector<double>{0.2, 0.0});
    CHECK(res.next_state.proprio[0] == 1.0);
}

TEST_CASE("step_chunk with one zero action only advances the step index") {
    const auto env = make_env(pointmass_config());
    EnvState s;
    s.proprio = {-0.5, -0.5};
    s.goal = {0.6, 0.6};
    ActionChunk chunk(3, 2);
    const ChunkTransition tr = step_chunk(*env, s, chunk, 1);
    CHECK(tr.next_state.proprio == s.proprio);
    CHECK(tr.next_state.step_index == s.step_index + 1);
    CHECK(!tr.terminal);
}

TEST_CASE("step_chunk validates n_exec and is deterministic") {
    const auto env = make_env(pointmass_config());
    EnvState s;
    s.proprio = {0.0, 0.0};
    s.goal = {0.6, 0.6};
    ActionChunk chunk(4, 2);
    chunk.at(0, 0) = 0.1;
    chunk.truncate(2);
    CHECK_THROWS_AS(step_chunk(*env, s, chunk, 0), std::invalid_argument);
    CHECK_THROWS_AS(step_chunk(*env, s, chunk, 3), std::invalid_argument);
    const ChunkTransition a = step_chunk(*env, s, chunk, 2);
    const ChunkTransition b = step_chunk(*env, s, chunk, 2);
    CHECK(a.next_state == b.next_state);
    CHECK(a.rewards == b.rewards);
}

TEST_CASE("gridworld reaches the goal from an adjacent cell with positive reward") {
    const auto env = make_env(gridworld_config());
    EnvState s;
    s.proprio = {3.0, 4.0};  // goal at (4,4)
    s.goal = {4.0, 4.0};
    ActionChunk chunk(2, 2);
    chunk.at(0, 0) = 1.0;
    const ChunkTransition tr = step_chunk(*env, s, chunk, 2);
    CHECK(tr.terminal);
    CHECK(tr.rewards[0] == 1.0);
    CHECK(tr.chunk.valid_steps() == 1);  // stopped at the goal
    CHECK(tr.next_state.proprio == std::vector<double>{4.0, 4.0});
}

TEST_CASE("generate_demos: noiseless demos are identical and successful") {
    const auto env = make_env(pointmass_config());
    EnvConfig cfg = pointmass_config();
    cfg.start_lo = {-0.5, -0.5};
    cfg.start_hi = {-0.5, -0.5};  // fixed start
    const auto fixed_env = make_env(cfg);
    Rng rng(3);
    const auto demos = generate_demos(*fixed_env, 5, 0.0, rng);
    REQUIRE(demos.size() == 5);
    for (const auto& demo : demos) {
        CHECK(demo.success);
        CHECK(demo.actions.size() == demos[0].actions.size());
        CHECK(demo.states.size() == demo.actions.size() + 1);
        CHECK(demo.actions == demos[0].actions);
    }
    Rng rng2(3);
    CHECK_THROWS_AS(generate_demos(*fixed_env, 0, 0.0, rng2), std::invalid_argument);
}

TEST_CASE("generate_demos: noisy pointmass demos succeed at the default radius") {
    const auto env = make_env(pointmass_config());
    Rng rng(17);
    const auto demos = generate_demos(*env, 100, 0.05, rng);
    int successes = 0;
    for (const auto& demo : demos) successes += demo.success;
    CHECK(successes == 100);
}

TEST_CASE("generate_demos: gridworld shortest paths") {
    const auto env = make_env(gridworld_config());
    Rng rng(5);
    const auto demos = generate_demos(*env, 10, 0.0, rng);
    for (const auto& demo : demos) {
        CHECK(demo.success);
        const auto& start = demo.states.front().proprio;
        const int manhattan = static_cast<int>(std::abs(4.0 - start[0]) + std::abs(4.0 - start[1]));
        CHECK(static_cast<int>(demo.actions.size()) == manhattan);
    }
}

TEST_CASE("label_rewards follows the windowed labeling rule") {
    Demonstration demo;
    demo.success = true;
    demo.actions.assign(10, {0.0, 0.0});
    demo.states.assign(11, {});

    const auto shifted = label_rewards(demo, 3, true);
    REQUIRE(shifted.size() == 10);
    for (size_t i = 0; i < 7; ++i) CHECK(shifted[i] == -1.0);
    for (size_t i = 7; i < 10; ++i) CHECK(shifted[i] == 1.0);

    const auto unshifted = label_rewards(demo, 3, false);
    for (size_t i = 0; i < 7; ++i) CHECK(unshifted[i] == 0.0);
    for (size_t i = 7; i < 10; ++i) CHECK(unshifted[i] == 1.0);

    demo.success = false;
    const auto failed = label_rewards(demo, 3, true);
    for (double r : failed) CHECK(r == -1.0);

    demo.success = true;
    const auto clamped = label_rewards(demo, 99, true);  // window > length clamps
    for (double r : clamped) CHECK(r == 1.0);

    CHECK_THROWS_AS(label_rewards(demo, 0, true), std::invalid_argument);
}

TEST_CASE("build_dataset slices with padding and terminal flags") {
    Demonstration demo;
    demo.success = true;
    for (int t = 0; t < 10; ++t) demo.actions.push_back({0.1 * t, -0.1 * t});
    for (int t = 0; t < 11; ++t) {
        EnvState s;
        s.proprio = {static_cast<double>(t), 0.0};
        s.goal = {9.0, 0.0};
        s.step_index = t;
        demo.states.push_back(s);
    }
    const auto rewards = label_rewards(demo, 3, true);
    const OfflineDataset ds = build_dataset({demo}, {rewards}, 4, 4, 0.98);

    REQUIRE(ds.transitions.size() == 3);
    CHECK(ds.transitions[0].chunk.valid_steps() == 4);
    CHECK(ds.transitions[1].chunk.valid_steps() == 4);
    CHECK(ds.transitions[2].chunk.valid_steps() == 2);  // padded tail
    CHECK(!ds.transitions[0].terminal);
    CHECK(!ds.transitions[1].terminal);
    CHECK(ds.transitions[2].terminal);
    CHECK(ds.transitions[2].next_state.step_index == 10);
    // rewards beyond the valid prefix stay zero
    CHECK(ds.transitions[2].rewards[2] == 0.0);
    CHECK(ds.transitions[2].rewards[3] == 0.0);

    // h = 1: per-step transitions, all masks true
    const OfflineDataset per_step = build_dataset({demo}, {rewards}, 1, 1, 0.98);
    CHECK(per_step.transitions.size() == 10);
    for (const auto& tr : per_step.transitions) CHECK(tr.chunk.valid_steps() == 1);

    // aligned stride: no padding
    const OfflineDataset aligned = build_dataset({demo}, {rewards}, 5, 5, 0.98);
    CHECK(aligned.transitions.size() == 2);
    for (const auto& tr : aligned.transitions) CHECK(tr.chunk.valid_steps() == 5);

    // empty input is an empty dataset, not an error
    CHECK(build_dataset({}, {}, 4, 4, 0.98).transitions.empty());
}

TEST_CASE("build_dataset round trip reconstructs demo actions on valid steps") {
    const auto env = make_env(pointmass_config());
    Rng rng(21);
    const auto demos = generate_demos(*env, 3, 0.03, rng);
    std::vector<std::vector<double>> rewards;
    for (const auto& demo : demos) rewards.push_back(label_rewards(demo, 3, true));
    const OfflineDataset ds = build_dataset(demos, rewards, 4, 4, 0.98);

    size_t tr_idx = 0;
    for (const auto& demo : demos) {
        size_t t = 0;
        while (t < demo.actions.size()) {
            const ChunkTransition& tr = ds.transitions[tr_idx++];
            const int valid = tr.chunk.valid_steps();
            for (int k = 0; k < valid; ++k)
                for (int j = 0; j < 2; ++j)
                    CHECK(tr.chunk.at(k, j) == demo.actions[t + static_cast<size_t>(k)][static_cast<size_t>(j)]);
            t += static_cast<size_t>(valid);
        }
        CHECK(t == demo.actions.size());
    }
    CHECK(tr_idx == ds.transitions.size());
}

TEST_CASE("dataset JSONL round trip is exact") {
    const auto env = make_env(pointmass_config());
    Rng rng(33);
    const auto demos = generate_demos(*env, 2, 0.05, rng);
    std::vector<std::vector<double>> rewards;
    for (const auto& demo : demos) rewards.push_back(label_rewards(demo, 3, true));
    const OfflineDataset ds = build_dataset(demos, rewards, 4, 2, 0.98);

    const auto dir = std::filesystem::temp_directory_path();
    const std::string data_path = (dir / "chunkq_ds_test.jsonl").string();
    save_dataset_jsonl(ds, data_path);
    const OfflineDataset loaded = load_dataset_jsonl(data_path);
    REQUIRE(loaded.transitions.size() == ds.transitions.size());
    CHECK(loaded.h == ds.h);
    CHECK(loaded.gamma == ds.gamma);
    for (size_t i = 0; i < ds.transitions.size(); ++i) {
        CHECK(loaded.transitions[i].state == ds.transitions[i].state);
        CHECK(loaded.transitions[i].chunk == ds.transitions[i].chunk);
        CHECK(loaded.transitions[i].rewards == ds.transitions[i].rewards);
        CHECK(loaded.transitions[i].next_state == ds.transitions[i].next_state);
        CHECK(loaded.transitions[i].terminal == ds.transitions[i].terminal);
    }

    const std::string demo_path = (dir / "chunkq_demos_test.jsonl").string();
    save_demos_jsonl(demos, demo_path);
    const auto loaded_demos = load_demos_jsonl(demo_path);
    REQUIRE(loaded_demos.size() == demos.size());
    for (size_t i = 0; i < demos.size(); ++i) {
        CHECK(loaded_demos[i].states == demos[i].states);
        CHECK(loaded_demos[i].actions == demos[i].actions);
        CHECK(loaded_demos[i].success == demos[i].success);
    }
    std::filesystem::remove(data_path);
    std::filesystem::remove(demo_path);
}
