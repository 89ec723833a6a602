#pragma once

#include <string>
#include <vector>

#include "chunkq/env.hpp"

namespace chunkq {

struct OfflineDataset {
    std::vector<ChunkTransition> transitions;
    int h = 0;
    double gamma = 0.0;
    int action_dim = 0;

    double gamma_h() const;
    void validate() const;
};

// Slices demonstrations into chunk transitions at the given stride. Short
// tails keep their valid prefix: padded steps are masked out and the
// transition is marked terminal. `rewards` carries one per-step reward list
// per demo (see label_rewards), aligned with `demos`.
OfflineDataset build_dataset(const std::vector<Demonstration>& demos,
                             const std::vector<std::vector<double>>& rewards, int h, int stride,
                             double gamma);

// JSON Lines persistence. The first line is a meta record (h, gamma,
// action_dim); each following line is one transition with fields
// {state, chunk, mask, rewards, next_state, terminal}. Floating values are
// written with 17 significant digits.
void save_dataset_jsonl(const OfflineDataset& dataset, const std::string& path);
OfflineDataset load_dataset_jsonl(const std::string& path);

void save_demos_jsonl(const std::vector<Demonstration>& demos, const std::string& path);
std::vector<Demonstration> load_demos_jsonl(const std::string& path);

}  // namespace chunkq
