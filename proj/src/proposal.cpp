#include "chunkq/proposal.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace chunkq {

FiniteProposal::FiniteProposal(std::vector<StateCandidates> table,
                               std::function<int(const EnvState&)> state_key)
    : table_(std::move(table)), state_key_(std::move(state_key)) {
    if (table_.empty()) throw std::invalid_argument("FiniteProposal: empty table");
    for (const auto& sc : table_) {
        if (sc.chunks.empty() || sc.chunks.size() != sc.probs.size())
            throw std::invalid_argument("FiniteProposal: candidates/probs mismatch");
        double sum = 0.0;
        for (double p : sc.probs) {
            if (p < 0.0) throw std::invalid_argument("FiniteProposal: negative probability");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("FiniteProposal: probabilities must sum to 1");
        for (const auto& c : sc.chunks) c.validate();
    }
    h_ = table_[0].chunks[0].horizon;
    d_a_ = table_[0].chunks[0].action_dim;
}

int FiniteProposal::key_of(const EnvState& state) const {
    const int key = state_key_(state);
    if (key < 0 || key >= static_cast<int>(table_.size()))
        throw std::invalid_argument("FiniteProposal: state outside policy support");
    return key;
}

const FiniteProposal::StateCandidates& FiniteProposal::at_key(int key) const {
    return table_.at(static_cast<size_t>(key));
}

ActionChunk FiniteProposal::sample(const EnvState& state, Rng& rng) const {
    const StateCandidates& sc = table_[static_cast<size_t>(key_of(state))];
    const double u = rng.uniform();
    double cum = 0.0;
    for (size_t i = 0; i < sc.probs.size(); ++i) {
        cum += sc.probs[i];
        if (u < cum) return sc.chunks[i];
    }
    return sc.chunks.back();
}

DemoGaussianProposal::DemoGaussianProposal(const OfflineDataset& dataset, double sigma,
                                           std::vector<double> bias)
    : sigma_(sigma), bias_(std::move(bias)) {
    if (dataset.transitions.empty()) throw std::invalid_argument("DemoGaussianProposal: empty dataset");
    if (sigma < 0.0) throw std::invalid_argument("DemoGaussianProposal: sigma must be >= 0");
    h_ = dataset.h;
    d_a_ = dataset.action_dim;
    if (bias_.empty()) bias_.assign(static_cast<size_t>(d_a_), 0.0);
    if (static_cast<int>(bias_.size()) != d_a_)
        throw std::invalid_argument("DemoGaussianProposal: bias size must equal action_dim");
    for (const auto& tr : dataset.transitions) {
        ref_proprio_.push_back(tr.state.proprio);
        ref_chunks_.push_back(tr.chunk);
    }
}

const ActionChunk& DemoGaussianProposal::nearest_chunk(const EnvState& state) const {
    double best = std::numeric_limits<double>::infinity();
    size_t best_idx = 0;
    for (size_t i = 0; i < ref_proprio_.size(); ++i) {
        double d2 = 0.0;
        for (size_t j = 0; j < state.proprio.size(); ++j) {
            const double d = state.proprio[j] - ref_proprio_[i][j];
            d2 += d * d;
        }
        if (d2 < best) {  // strict: ties keep the lowest index
            best = d2;
            best_idx = i;
        }
    }
    return ref_chunks_[best_idx];
}

ActionChunk DemoGaussianProposal::sample(const EnvState& state, Rng& rng) const {
    ActionChunk chunk = nearest_chunk(state);
    const int valid = chunk.valid_steps();
    for (int k = 0; k < valid; ++k)
        for (int j = 0; j < d_a_; ++j) {
            double v = chunk.at(k, j) + bias_[static_cast<size_t>(j)];
            if (sigma_ > 0.0) v += rng.normal(0.0, sigma_);
            chunk.at(k, j) = v;
        }
    return chunk;
}

std::shared_ptr<Proposal> make_demo_proposal(const OfflineDataset& dataset, double sigma,
                                             std::vector<double> bias) {
    return std::make_shared<DemoGaussianProposal>(dataset, sigma, std::move(bias));
}

std::vector<ActionChunk> sample_candidates(const Proposal& policy, const EnvState& state, int N,
                                           Rng& rng) {
    if (N < 1) throw std::invalid_argument("sample_candidates: N must be >= 1");
    std::vector<ActionChunk> out;
    out.reserve(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) out.push_back(policy.sample(state, rng));
    return out;
}

std::vector<std::vector<double>> local_recall_masses(const Proposal& policy,
                                                     const OfflineDataset& dataset,
                                                     std::span<const double> epsilons,
                                                     const geometry::MetricWeights& w,
                                                     int samples_per_state, Rng& rng) {
    if (samples_per_state < 1)
        throw std::invalid_argument("local_recall_masses: samples_per_state must be >= 1");
    std::vector<std::vector<double>> masses;
    masses.reserve(dataset.transitions.size());
    for (const auto& tr : dataset.transitions) {
        std::vector<double> dists;
        dists.reserve(static_cast<size_t>(samples_per_state));
        for (int s = 0; s < samples_per_state; ++s) {
            const ActionChunk cand = policy.sample(tr.state, rng);
            dists.push_back(std::sqrt(geometry::weighted_distance(cand, tr.chunk, w)));
        }
        std::vector<double> row;
        row.reserve(epsilons.size());
        for (double eps : epsilons) {
            int hits = 0;
            for (double d : dists) hits += d <= eps;
            row.push_back(static_cast<double>(hits) / static_cast<double>(samples_per_state));
        }
        masses.push_back(std::move(row));
    }
    return masses;
}

RecallReport check_local_recall(const Proposal& policy, const OfflineDataset& dataset,
                                const RecallSpec& spec, const geometry::MetricWeights& w,
                                int samples_per_state, Rng& rng) {
    if (!(spec.p0 > 0.0 && spec.p0 <= 1.0))
        throw std::invalid_argument("check_local_recall: p0 must be in (0,1]");
    const double eps[] = {spec.epsilon};
    const auto masses = local_recall_masses(policy, dataset, eps, w, samples_per_state, rng);
    RecallReport report;
    report.pass = true;
    for (const auto& row : masses) {
        report.per_state_mass.push_back(row[0]);
        report.pass &= row[0] >= spec.p0;
    }
    return report;
}

void OODSamplerConfig::validate() const {
    const double ws[] = {w_proposal, w_gt_noise, w_truncate, w_interpolate};
    double sum = 0.0;
    for (double wi : ws) {
        if (wi < 0.0) throw std::invalid_argument("OODSamplerConfig: negative mixture weight");
        sum += wi;
    }
    if (sum <= 0.0) throw std::invalid_argument("OODSamplerConfig: all mixture weights are zero");
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("OODSamplerConfig: mixture weights must sum to 1");
    if (noise_sigma < 0.0) throw std::invalid_argument("OODSamplerConfig: noise_sigma must be >= 0");
    if (!(alpha_lo >= 0.0 && alpha_hi <= 1.0 && alpha_lo <= alpha_hi))
        throw std::invalid_argument("OODSamplerConfig: alpha range must be within [0,1]");
}

ActionChunk sample_ood(const OODSamplerConfig& config, const EnvState& state,
                       const ActionChunk& gt_chunk, const Proposal& policy, Rng& rng) {
    config.validate();
    gt_chunk.validate();
    const double u = rng.uniform();
    if (u < config.w_proposal) {
        return policy.sample(state, rng);
    }
    if (u < config.w_proposal + config.w_gt_noise) {
        ActionChunk out = gt_chunk;
        const int valid = out.valid_steps();
        for (int k = 0; k < valid; ++k)
            for (int j = 0; j < out.action_dim; ++j)
                out.at(k, j) += rng.normal(0.0, config.noise_sigma);
        return out;
    }
    if (u < config.w_proposal + config.w_gt_noise + config.w_truncate) {
        ActionChunk out = gt_chunk;
        const int valid = out.valid_steps();
        const int keep = 1 + static_cast<int>(rng.integer(static_cast<uint64_t>(valid)));
        out.truncate(keep);
        return out;
    }
    // interpolation: alpha * gt + (1 - alpha) * proposal, entrywise on the
    // gt mask (proposal entries beyond its own valid prefix are zeros)
    const ActionChunk prop = policy.sample(state, rng);
    if (prop.horizon != gt_chunk.horizon || prop.action_dim != gt_chunk.action_dim)
        throw std::invalid_argument("sample_ood: proposal/gt shape mismatch");
    const double alpha = rng.uniform(config.alpha_lo, config.alpha_hi);
    ActionChunk out = gt_chunk;
    const int valid = out.valid_steps();
    for (int k = 0; k < valid; ++k)
        for (int j = 0; j < out.action_dim; ++j)
            out.at(k, j) = alpha * gt_chunk.at(k, j) + (1.0 - alpha) * prop.at(k, j);
    return out;
}

}  // namespace chunkq
