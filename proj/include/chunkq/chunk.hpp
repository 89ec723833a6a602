#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace chunkq {

// A temporally extended action: h steps of d_a-dimensional controls plus a
// per-step validity mask. Valid steps always form a prefix; entries of
// invalid steps are kept zeroed.
struct ActionChunk {
    int horizon = 0;
    int action_dim = 0;
    std::vector<double> actions;  // row-major horizon x action_dim
    std::vector<uint8_t> mask;    // 1 = valid step

    ActionChunk() = default;
    ActionChunk(int h, int d_a);

    double& at(int step, int dim) { return actions[static_cast<size_t>(step) * action_dim + dim]; }
    double at(int step, int dim) const {
        return actions[static_cast<size_t>(step) * action_dim + dim];
    }
    std::span<const double> step(int k) const {
        return {actions.data() + static_cast<size_t>(k) * action_dim,
                static_cast<size_t>(action_dim)};
    }

    int valid_steps() const;

    // Truncates validity to the first `steps` steps and zeroes the rest.
    void truncate(int steps);

    // Throws std::invalid_argument unless: >=1 valid step, mask is a prefix,
    // all entries finite, invalid steps zeroed.
    void validate() const;

    bool operator==(const ActionChunk&) const = default;
};

// Discounted return over a chunk: sum_j gamma^j * rewards[j].
double chunk_return(std::span<const double> rewards, double gamma);

}  // namespace chunkq
