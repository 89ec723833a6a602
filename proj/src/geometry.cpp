#include "chunkq/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace chunkq::geometry {

void MetricWeights::validate(int action_dim) const {
    if (static_cast<int>(w.size()) != action_dim)
        throw std::invalid_argument("MetricWeights: size must equal action_dim");
    bool any_positive = false;
    for (double wi : w) {
        if (wi < 0.0 || !std::isfinite(wi))
            throw std::invalid_argument("MetricWeights: weights must be finite and nonnegative");
        any_positive |= wi > 0.0;
    }
    if (!any_positive) throw std::invalid_argument("MetricWeights: at least one positive weight required");
}

void EGRConfig::validate(int action_dim) const {
    if (lambda < 0.0) throw std::invalid_argument("EGRConfig: lambda must be >= 0");
    if (!(beta > 0.0)) throw std::invalid_argument("EGRConfig: beta must be > 0");
    if (eta < 0.0) throw std::invalid_argument("EGRConfig: eta must be >= 0");
    if (ood_per_state < 1) throw std::invalid_argument("EGRConfig: ood_per_state must be >= 1");
    if (rank_pairs_per_state < 0) throw std::invalid_argument("EGRConfig: rank_pairs_per_state must be >= 0");
    weights.validate(action_dim);
}

double weighted_distance(const ActionChunk& a, const ActionChunk& b, const MetricWeights& w) {
    if (a.horizon != b.horizon || a.action_dim != b.action_dim)
        throw std::invalid_argument("weighted_distance: shape mismatch");
    w.validate(a.action_dim);
    double sum = 0.0;
    int valid = 0;
    for (int k = 0; k < a.horizon; ++k) {
        if (!(a.mask[static_cast<size_t>(k)] && b.mask[static_cast<size_t>(k)])) continue;
        ++valid;
        for (int j = 0; j < a.action_dim; ++j) {
            const double d = a.at(k, j) - b.at(k, j);
            sum += w.w[static_cast<size_t>(j)] * d * d;
        }
    }
    if (valid == 0) throw std::invalid_argument("weighted_distance: empty joint mask");
    return sum / valid;
}

double anchor_loss(std::span<const double> q_values, std::span<const double> surfaces) {
    if (q_values.empty()) throw std::invalid_argument("anchor_loss: empty sample set");
    if (q_values.size() != surfaces.size())
        throw std::invalid_argument("anchor_loss: size mismatch");
    double sum = 0.0;
    for (size_t i = 0; i < q_values.size(); ++i) {
        const double r = q_values[i] - surfaces[i];
        sum += r * r;
    }
    return sum / static_cast<double>(q_values.size());
}

double rank_loss(std::span<const std::pair<double, double>> q_pairs,
                 std::span<const std::pair<double, double>> dist_pairs, double beta) {
    if (q_pairs.size() != dist_pairs.size()) throw std::invalid_argument("rank_loss: size mismatch");
    if (q_pairs.empty()) return 0.0;
    double sum = 0.0;
    for (size_t p = 0; p < q_pairs.size(); ++p) {
        const double dq = q_pairs[p].first - q_pairs[p].second;
        const double target = beta * (dist_pairs[p].second - dist_pairs[p].first);
        const double r = dq - target;
        sum += r * r;
    }
    return sum / static_cast<double>(q_pairs.size());
}

std::vector<std::pair<int, int>> sample_rank_pairs(int m, int count, Rng& rng) {
    std::vector<std::pair<int, int>> all;
    for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < m; ++j) all.emplace_back(i, j);
    if (count >= static_cast<int>(all.size())) return all;
    // partial Fisher-Yates
    for (int k = 0; k < count; ++k) {
        const size_t pick = static_cast<size_t>(k) + rng.integer(all.size() - static_cast<size_t>(k));
        std::swap(all[static_cast<size_t>(k)], all[pick]);
    }
    all.resize(static_cast<size_t>(count));
    return all;
}

EgrBreakdown egr_loss(const EnvState& state, const ActionChunk& gt_chunk, double y_t,
                      std::span<const ActionChunk> ood_chunks, const QFn& q_fn,
                      const EGRConfig& config, std::span<const std::pair<int, int>> pairs) {
    config.validate(gt_chunk.action_dim);
    if (ood_chunks.empty()) throw std::invalid_argument("egr_loss: no OOD chunks");
    if (config.eta > 0.0 && !pairs.empty() && ood_chunks.size() < 2)
        throw std::invalid_argument("egr_loss: ranking requires >= 2 OOD chunks");

    EgrBreakdown out;
    out.q.reserve(ood_chunks.size());
    out.dist.reserve(ood_chunks.size());
    out.surface.reserve(ood_chunks.size());
    for (const ActionChunk& c : ood_chunks) {
        const double d = weighted_distance(c, gt_chunk, config.weights);
        out.dist.push_back(d);
        out.surface.push_back(reference_surface(y_t, d, config.beta));
        out.q.push_back(q_fn(state, c));
    }
    out.anchor = anchor_loss(out.q, out.surface);

    out.pairs.assign(pairs.begin(), pairs.end());
    if (config.eta > 0.0 && !out.pairs.empty()) {
        std::vector<std::pair<double, double>> q_pairs, d_pairs;
        q_pairs.reserve(out.pairs.size());
        d_pairs.reserve(out.pairs.size());
        for (const auto& [i, j] : out.pairs) {
            q_pairs.emplace_back(out.q[static_cast<size_t>(i)], out.q[static_cast<size_t>(j)]);
            d_pairs.emplace_back(out.dist[static_cast<size_t>(i)], out.dist[static_cast<size_t>(j)]);
        }
        out.rank = rank_loss(q_pairs, d_pairs, config.beta);
    }
    out.total = out.anchor + config.eta * out.rank;
    return out;
}

std::vector<double> egr_grad_wrt_q(std::span<const double> q, std::span<const double> surface,
                                   std::span<const double> dist, double beta, double eta,
                                   std::span<const std::pair<int, int>> pairs) {
    const size_t m = q.size();
    if (surface.size() != m || dist.size() != m)
        throw std::invalid_argument("egr_grad_wrt_q: size mismatch");
    std::vector<double> grad(m, 0.0);
    for (size_t i = 0; i < m; ++i) grad[i] = 2.0 * (q[i] - surface[i]) / static_cast<double>(m);
    if (eta > 0.0 && !pairs.empty()) {
        const double scale = 2.0 * eta / static_cast<double>(pairs.size());
        for (const auto& [i, j] : pairs) {
            const double resid = (q[static_cast<size_t>(i)] - q[static_cast<size_t>(j)]) -
                                 beta * (dist[static_cast<size_t>(j)] - dist[static_cast<size_t>(i)]);
            grad[static_cast<size_t>(i)] += scale * resid;
            grad[static_cast<size_t>(j)] -= scale * resid;
        }
    }
    return grad;
}

EnvelopeReport check_bestofn_bound(const QFn& q_fn, const EnvState& state,
                                   const ActionChunk& gt_chunk, double y_t,
                                   std::span<const ActionChunk> candidates, double beta,
                                   const MetricWeights& w) {
    if (candidates.empty()) throw std::invalid_argument("check_bestofn_bound: no candidates");
    EnvelopeReport report;
    double max_q = -std::numeric_limits<double>::infinity();
    double min_d = std::numeric_limits<double>::infinity();
    double eps_hat = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < candidates.size(); ++i) {
        const double d = weighted_distance(candidates[i], gt_chunk, w);
        const double qv = q_fn(state, candidates[i]);
        const double resid = qv - reference_surface(y_t, d, beta);
        max_q = std::max(max_q, qv);
        min_d = std::min(min_d, d);
        if (resid > eps_hat) {
            eps_hat = resid;
            report.worst_candidate = static_cast<int>(i);
        }
    }
    report.epsilon_hat = eps_hat;
    constexpr double kTol = 1e-12;
    report.bound_holds = (max_q <= y_t - beta * min_d + eps_hat + kTol) &&
                         (y_t - beta * min_d + eps_hat <= y_t + eps_hat + kTol);
    return report;
}

}  // namespace chunkq::geometry
