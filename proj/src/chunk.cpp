#include "chunkq/chunk.hpp"

#include <cmath>
#include <stdexcept>

namespace chunkq {

ActionChunk::ActionChunk(int h, int d_a)
    : horizon(h),
      action_dim(d_a),
      actions(static_cast<size_t>(h) * static_cast<size_t>(d_a), 0.0),
      mask(static_cast<size_t>(h), 1) {
    if (h < 1 || d_a < 1) throw std::invalid_argument("ActionChunk: horizon and action_dim must be >= 1");
}

int ActionChunk::valid_steps() const {
    int n = 0;
    while (n < horizon && mask[n]) ++n;
    return n;
}

void ActionChunk::truncate(int steps) {
    if (steps < 1 || steps > horizon) throw std::invalid_argument("ActionChunk::truncate: bad step count");
    for (int k = steps; k < horizon; ++k) {
        mask[k] = 0;
        for (int j = 0; j < action_dim; ++j) at(k, j) = 0.0;
    }
}

void ActionChunk::validate() const {
    if (horizon < 1 || action_dim < 1) throw std::invalid_argument("ActionChunk: empty shape");
    if (static_cast<int>(mask.size()) != horizon ||
        actions.size() != static_cast<size_t>(horizon) * action_dim)
        throw std::invalid_argument("ActionChunk: inconsistent buffer sizes");
    const int n = valid_steps();
    if (n == 0) throw std::invalid_argument("ActionChunk: no valid steps");
    for (int k = n; k < horizon; ++k)
        if (mask[k]) throw std::invalid_argument("ActionChunk: mask is not a prefix");
    for (size_t i = 0; i < actions.size(); ++i)
        if (!std::isfinite(actions[i])) throw std::invalid_argument("ActionChunk: non-finite action");
    for (int k = n; k < horizon; ++k)
        for (int j = 0; j < action_dim; ++j)
            if (at(k, j) != 0.0) throw std::invalid_argument("ActionChunk: masked step not zeroed");
}

double chunk_return(std::span<const double> rewards, double gamma) {
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("chunk_return: gamma must be in (0,1)");
    double sum = 0.0;
    double w = 1.0;
    for (double r : rewards) {
        if (!std::isfinite(r)) throw std::invalid_argument("chunk_return: non-finite reward");
        sum += w * r;
        w *= gamma;
    }
    return sum;
}

}  // namespace chunkq
