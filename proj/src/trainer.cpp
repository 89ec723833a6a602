#include "chunkq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "chunkq/io.hpp"

namespace chunkq::trainer {

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
    if (warmup_steps < 1) throw std::invalid_argument("TrainConfig: warmup_steps must be >= 1");
    if (total_steps < 0) throw std::invalid_argument("TrainConfig: total_steps must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (!(grad_clip > 0.0)) throw std::invalid_argument("TrainConfig: grad_clip must be > 0");
    if (!(polyak_tau >= 0.0 && polyak_tau <= 1.0))
        throw std::invalid_argument("TrainConfig: polyak_tau must be in [0,1]");
    if (n_train < 1) throw std::invalid_argument("TrainConfig: n_train must be >= 1");
    if (cql_alpha < 0.0) throw std::invalid_argument("TrainConfig: cql_alpha must be >= 0");
    if (cql_ood_per_state < 1) throw std::invalid_argument("TrainConfig: cql_ood_per_state must be >= 1");
    critic.validate();
    egr.validate(critic.action_dim);
    ood.validate();
}

TrainState init_state(const TrainConfig& config) {
    config.validate();
    TrainState state;
    state.online = critic::init(config.critic, derive_seed(config.seed, 0xc1, 0));
    state.target = state.online;
    state.adam_m.assign(state.online.values.size(), 0.0);
    state.adam_v.assign(state.online.values.size(), 0.0);
    return state;
}

double td_target(const ChunkTransition& tr, const critic::CriticParams& target,
                 const Proposal& proposal, int N, double gamma, Rng& rng) {
    if (N < 1) throw std::invalid_argument("td_target: N must be >= 1");
    const double r_h = chunk_return(tr.rewards, gamma);
    if (tr.terminal) return r_h;
    const double gamma_h = std::pow(gamma, tr.chunk.horizon);
    const critic::ContextFeatures ctx = critic::make_context(tr.next_state, target.config);
    double best = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < N; ++i) {
        const ActionChunk cand = proposal.sample(tr.next_state, rng);
        const critic::CriticInput input{&ctx, tr.next_state.proprio, &cand};
        const double q = std::min(critic::forward(target, 0, input), critic::forward(target, 1, input));
        best = std::max(best, q);
    }
    return r_h + gamma_h * best;
}

namespace {

struct BatchInputs {
    std::vector<critic::ContextFeatures> contexts;
    std::vector<critic::CriticInput> inputs;
};

BatchInputs make_batch_inputs(const critic::CriticConfig& cfg,
                              std::span<const ChunkTransition> batch) {
    BatchInputs bi;
    bi.contexts.reserve(batch.size());
    bi.inputs.reserve(batch.size());
    for (const auto& tr : batch) bi.contexts.push_back(critic::make_context(tr.state, cfg));
    for (size_t i = 0; i < batch.size(); ++i)
        bi.inputs.push_back({&bi.contexts[i], batch[i].state.proprio, &batch[i].chunk});
    return bi;
}

}  // namespace

double td_loss(const critic::CriticParams& online, std::span<const ChunkTransition> batch,
               std::span<const double> targets, std::span<double> grad, ExecMode mode) {
    if (batch.empty()) throw std::invalid_argument("td_loss: empty batch");
    if (batch.size() != targets.size()) throw std::invalid_argument("td_loss: targets size mismatch");
    const BatchInputs bi = make_batch_inputs(online.config, batch);
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    double loss = 0.0;
    std::vector<critic::GradWorkItem> items;
    std::vector<double> q(batch.size());
    for (int twin = 0; twin < 2; ++twin) {
        critic::forward_batch(online, twin, bi.inputs, q, mode);
        for (size_t i = 0; i < batch.size(); ++i) {
            const double resid = q[i] - targets[i];
            loss += resid * resid * inv_b;
            if (!grad.empty())
                items.push_back({bi.inputs[i], twin, 2.0 * resid * inv_b});
        }
    }
    if (!grad.empty()) critic::accumulate_gradients(online, items, grad, mode);
    return loss;
}

double cql_penalty(const critic::CriticParams& online, std::span<const ChunkTransition> batch,
                   std::span<const std::vector<ActionChunk>> ood_sets, double alpha,
                   std::span<double> grad, ExecMode mode) {
    if (batch.empty()) throw std::invalid_argument("cql_penalty: empty batch");
    if (batch.size() != ood_sets.size())
        throw std::invalid_argument("cql_penalty: ood_sets size mismatch");
    const BatchInputs bi = make_batch_inputs(online.config, batch);
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    double penalty = 0.0;
    std::vector<critic::GradWorkItem> items;
    std::vector<double> q_data(batch.size());
    for (int twin = 0; twin < 2; ++twin) {
        critic::forward_batch(online, twin, bi.inputs, q_data, mode);
        for (size_t i = 0; i < batch.size(); ++i) {
            const auto& oods = ood_sets[i];
            if (oods.empty()) throw std::invalid_argument("cql_penalty: empty OOD set");
            std::vector<critic::CriticInput> ood_inputs;
            ood_inputs.reserve(oods.size());
            for (const auto& c : oods)
                ood_inputs.push_back({&bi.contexts[i], batch[i].state.proprio, &c});
            std::vector<double> q_ood(oods.size());
            critic::forward_batch(online, twin, ood_inputs, q_ood, mode);
            double mean_ood = 0.0;
            for (double v : q_ood) mean_ood += v;
            mean_ood /= static_cast<double>(oods.size());
            penalty += alpha * (mean_ood - q_data[i]) * inv_b;
            if (!grad.empty()) {
                const double up_ood = alpha * inv_b / static_cast<double>(oods.size());
                for (const auto& in : ood_inputs) items.push_back({in, twin, up_ood});
                items.push_back({bi.inputs[i], twin, -alpha * inv_b});
            }
        }
    }
    if (!grad.empty()) critic::accumulate_gradients(online, items, grad, mode);
    return penalty;
}

void polyak_update(critic::CriticParams& target, const critic::CriticParams& online, double tau) {
    if (target.values.size() != online.values.size())
        throw std::invalid_argument("polyak_update: size mismatch");
    if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("polyak_update: tau must be in [0,1]");
    for (size_t i = 0; i < target.values.size(); ++i)
        target.values[i] = (1.0 - tau) * target.values[i] + tau * online.values[i];
}

OptimizerReport optimizer_step(TrainState& state, std::span<double> grad,
                               const TrainConfig& config) {
    if (grad.size() != state.adam_m.size())
        throw std::invalid_argument("optimizer_step: gradient size mismatch");
    constexpr double kBeta1 = 0.9;
    constexpr double kBeta2 = 0.999;
    constexpr double kEps = 1e-8;

    OptimizerReport report;
    double norm_sq = 0.0;
    for (double g : grad) norm_sq += g * g;
    report.grad_norm = std::sqrt(norm_sq);
    if (report.grad_norm > config.grad_clip) {
        const double scale = config.grad_clip / report.grad_norm;
        for (double& g : grad) g *= scale;
    }

    state.step += 1;
    const double t = static_cast<double>(state.step);
    report.lr = config.lr * std::min(1.0, t / config.warmup_steps);
    const double bc1 = 1.0 - std::pow(kBeta1, t);
    const double bc2 = 1.0 - std::pow(kBeta2, t);
    for (size_t i = 0; i < grad.size(); ++i) {
        state.adam_m[i] = kBeta1 * state.adam_m[i] + (1.0 - kBeta1) * grad[i];
        state.adam_v[i] = kBeta2 * state.adam_v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
        const double m_hat = state.adam_m[i] / bc1;
        const double v_hat = state.adam_v[i] / bc2;
        state.online.values[i] -= report.lr * m_hat / (std::sqrt(v_hat) + kEps);
    }
    return report;
}

StepMetrics train_step(TrainState& state, const OfflineDataset& dataset, const Proposal& proposal,
                       const TrainConfig& config, std::span<const int> indices, ExecMode mode) {
    if (dataset.transitions.empty()) throw std::invalid_argument("train_step: empty dataset");
    const int64_t step_id = state.step;
    const size_t B = indices.size();
    const double inv_b = 1.0 / static_cast<double>(B);

    std::vector<const ChunkTransition*> batch(B);
    for (size_t i = 0; i < B; ++i) batch[i] = &dataset.transitions[static_cast<size_t>(indices[i])];

    // TD targets from the target twins (parallel over items, one rng stream each)
    std::vector<double> targets(B);
    for_each_index(static_cast<int>(B), mode, [&](int i) {
        Rng rng = Rng::stream(config.seed, 2, static_cast<uint64_t>(step_id), static_cast<uint64_t>(i));
        targets[static_cast<size_t>(i)] =
            td_target(*batch[static_cast<size_t>(i)], state.target, proposal, config.n_train,
                      dataset.gamma, rng);
    });

    // per-item contexts and data inputs
    std::vector<critic::ContextFeatures> contexts(B);
    for (size_t i = 0; i < B; ++i) contexts[i] = critic::make_context(batch[i]->state, config.critic);
    std::vector<critic::CriticInput> data_inputs(B);
    for (size_t i = 0; i < B; ++i)
        data_inputs[i] = {&contexts[i], batch[i]->state.proprio, &batch[i]->chunk};

    // regularizer sample sets
    const bool use_egr = config.baseline == Baseline::None && config.egr.lambda > 0.0;
    const bool use_cql = config.baseline == Baseline::Cql && config.cql_alpha > 0.0;
    std::vector<std::vector<ActionChunk>> ood_sets(B);
    std::vector<std::vector<std::pair<int, int>>> pair_sets(B);
    if (use_egr) {
        OODSamplerConfig ood_cfg = config.ood;
        for_each_index(static_cast<int>(B), mode, [&](int i) {
            Rng rng = Rng::stream(config.seed, 3, static_cast<uint64_t>(step_id), static_cast<uint64_t>(i));
            auto& set = ood_sets[static_cast<size_t>(i)];
            set.reserve(static_cast<size_t>(config.egr.ood_per_state));
            for (int j = 0; j < config.egr.ood_per_state; ++j)
                set.push_back(sample_ood(ood_cfg, batch[static_cast<size_t>(i)]->state,
                                         batch[static_cast<size_t>(i)]->chunk, proposal, rng));
            pair_sets[static_cast<size_t>(i)] = geometry::sample_rank_pairs(
                static_cast<int>(set.size()), config.egr.rank_pairs_per_state, rng);
        });
    } else if (use_cql) {
        for_each_index(static_cast<int>(B), mode, [&](int i) {
            Rng rng = Rng::stream(config.seed, 4, static_cast<uint64_t>(step_id), static_cast<uint64_t>(i));
            ood_sets[static_cast<size_t>(i)] = sample_candidates(
                proposal, batch[static_cast<size_t>(i)]->state, config.cql_ood_per_state, rng);
        });
    }

    StepMetrics metrics;
    metrics.step = step_id;
    std::vector<critic::GradWorkItem> items;
    std::vector<double> q_data(B);
    std::vector<double> q_ood;

    for (int twin = 0; twin < 2; ++twin) {
        critic::forward_batch(state.online, twin, data_inputs, q_data, mode);
        for (size_t i = 0; i < B; ++i) {
            const double resid = q_data[i] - targets[i];
            metrics.td_loss += resid * resid * inv_b;
            double upstream = 2.0 * resid * inv_b;
            if (use_cql) upstream -= config.cql_alpha * inv_b;
            items.push_back({data_inputs[i], twin, upstream});
        }
        if (use_egr) {
            for (size_t i = 0; i < B; ++i) {
                const auto& set = ood_sets[i];
                std::vector<critic::CriticInput> ood_inputs;
                ood_inputs.reserve(set.size());
                for (const auto& c : set)
                    ood_inputs.push_back({&contexts[i], batch[i]->state.proprio, &c});
                q_ood.assign(set.size(), 0.0);
                critic::forward_batch(state.online, twin, ood_inputs, q_ood, mode);
                std::vector<double> dist(set.size()), surface(set.size());
                for (size_t j = 0; j < set.size(); ++j) {
                    dist[j] = geometry::weighted_distance(set[j], batch[i]->chunk, config.egr.weights);
                    surface[j] = geometry::reference_surface(targets[i], dist[j], config.egr.beta);
                }
                metrics.egr_anchor += geometry::anchor_loss(q_ood, surface) * inv_b;
                if (!pair_sets[i].empty()) {
                    std::vector<std::pair<double, double>> qp, dp;
                    qp.reserve(pair_sets[i].size());
                    dp.reserve(pair_sets[i].size());
                    for (const auto& [a, b] : pair_sets[i]) {
                        qp.emplace_back(q_ood[static_cast<size_t>(a)], q_ood[static_cast<size_t>(b)]);
                        dp.emplace_back(dist[static_cast<size_t>(a)], dist[static_cast<size_t>(b)]);
                    }
                    metrics.egr_rank += geometry::rank_loss(qp, dp, config.egr.beta) * inv_b;
                }
                const std::vector<double> dq = geometry::egr_grad_wrt_q(
                    q_ood, surface, dist, config.egr.beta, config.egr.eta, pair_sets[i]);
                for (size_t j = 0; j < set.size(); ++j)
                    items.push_back({ood_inputs[j], twin, config.egr.lambda * inv_b * dq[j]});
            }
        } else if (use_cql) {
            for (size_t i = 0; i < B; ++i) {
                const auto& set = ood_sets[i];
                std::vector<critic::CriticInput> ood_inputs;
                ood_inputs.reserve(set.size());
                for (const auto& c : set)
                    ood_inputs.push_back({&contexts[i], batch[i]->state.proprio, &c});
                q_ood.assign(set.size(), 0.0);
                critic::forward_batch(state.online, twin, ood_inputs, q_ood, mode);
                double mean_ood = 0.0;
                for (double v : q_ood) mean_ood += v;
                mean_ood /= static_cast<double>(set.size());
                metrics.cql += config.cql_alpha * (mean_ood - q_data[i]) * inv_b;
                const double up = config.cql_alpha * inv_b / static_cast<double>(set.size());
                for (const auto& in : ood_inputs) items.push_back({in, twin, up});
            }
        }
    }

    if (!std::isfinite(metrics.td_loss) || !std::isfinite(metrics.egr_anchor) ||
        !std::isfinite(metrics.egr_rank) || !std::isfinite(metrics.cql))
        throw std::runtime_error(
            "train_step: non-finite loss at step " + std::to_string(step_id) +
            " (td=" + std::to_string(metrics.td_loss) + ", anchor=" + std::to_string(metrics.egr_anchor) +
            ", rank=" + std::to_string(metrics.egr_rank) + ", cql=" + std::to_string(metrics.cql) + ")");

    std::vector<double> grad(state.online.values.size(), 0.0);
    critic::accumulate_gradients(state.online, items, grad, mode);
    const OptimizerReport opt = optimizer_step(state, grad, config);
    metrics.grad_norm = opt.grad_norm;
    metrics.lr = opt.lr;
    polyak_update(state.target, state.online, config.polyak_tau);
    return metrics;
}

TrainResult train_from(TrainState state, const OfflineDataset& dataset, const Proposal& proposal,
                       const TrainConfig& config, ExecMode mode, const EvalHook& hook,
                       int hook_every) {
    config.validate();
    dataset.validate();
    if (dataset.transitions.empty()) throw std::invalid_argument("train: empty dataset");

    TrainResult result;
    result.state = std::move(state);
    std::vector<int> indices(static_cast<size_t>(config.batch_size));
    while (result.state.step < config.total_steps) {
        const int64_t step = result.state.step;
        Rng batch_rng = Rng::stream(config.seed, 1, static_cast<uint64_t>(step));
        for (int i = 0; i < config.batch_size; ++i)
            indices[static_cast<size_t>(i)] =
                static_cast<int>(batch_rng.integer(dataset.transitions.size()));
        result.metrics.push_back(train_step(result.state, dataset, proposal, config, indices, mode));
        if (hook && hook_every > 0 &&
            (result.state.step % hook_every == 0 || result.state.step == config.total_steps))
            hook(result.state.step, result.state);
    }
    return result;
}

TrainResult train(const OfflineDataset& dataset, const Proposal& proposal,
                  const TrainConfig& config, ExecMode mode, const EvalHook& hook, int hook_every) {
    config.validate();
    return train_from(init_state(config), dataset, proposal, config, mode, hook, hook_every);
}

void save_train_state(const TrainState& state, const std::string& path) {
    nlohmann::json header;
    header["config"] = critic::critic_config_to_json(state.online.config);
    header["step"] = state.step;
    header["count"] = state.online.values.size();
    std::vector<double> payload;
    payload.reserve(4 * state.online.values.size());
    payload.insert(payload.end(), state.online.values.begin(), state.online.values.end());
    payload.insert(payload.end(), state.target.values.begin(), state.target.values.end());
    payload.insert(payload.end(), state.adam_m.begin(), state.adam_m.end());
    payload.insert(payload.end(), state.adam_v.begin(), state.adam_v.end());
    header["checksum"] = io::hex64(io::fnv1a64(std::span<const unsigned char>(
        reinterpret_cast<const unsigned char*>(payload.data()), payload.size() * sizeof(double))));
    header["tool_version"] = io::kToolVersion;

    std::string out = "CQTRAIN1\n" + header.dump() + "\n";
    const size_t off = out.size();
    out.resize(off + payload.size() * sizeof(double));
    std::memcpy(out.data() + off, payload.data(), payload.size() * sizeof(double));
    io::write_file(path, out);
}

TrainState load_train_state(const std::string& path) {
    const std::string data = io::read_file(path);
    const size_t magic_end = data.find('\n');
    if (magic_end == std::string::npos || data.substr(0, magic_end) != "CQTRAIN1")
        throw std::runtime_error("load_train_state: bad magic in " + path);
    const size_t header_end = data.find('\n', magic_end + 1);
    if (header_end == std::string::npos)
        throw std::runtime_error("load_train_state: truncated header");
    const nlohmann::json header =
        nlohmann::json::parse(data.substr(magic_end + 1, header_end - magic_end - 1));

    TrainState state;
    const critic::CriticConfig cfg = critic::critic_config_from_json(header.at("config"));
    state.online.config = cfg;
    state.online.layout = critic::build_layout(cfg);
    const size_t count = header.at("count").get<size_t>();
    if (count != 2 * state.online.layout.total)
        throw std::runtime_error("load_train_state: parameter count mismatch");
    if (data.size() - header_end - 1 != 4 * count * sizeof(double))
        throw std::runtime_error("load_train_state: payload size mismatch");
    std::vector<double> payload(4 * count);
    std::memcpy(payload.data(), data.data() + header_end + 1, payload.size() * sizeof(double));
    if (io::hex64(io::fnv1a64(std::span<const unsigned char>(
            reinterpret_cast<const unsigned char*>(payload.data()),
            payload.size() * sizeof(double)))) != header.at("checksum").get<std::string>())
        throw std::runtime_error("load_train_state: checksum mismatch");

    state.online.values.assign(payload.begin(), payload.begin() + static_cast<long>(count));
    state.target = state.online;
    state.target.values.assign(payload.begin() + static_cast<long>(count),
                               payload.begin() + static_cast<long>(2 * count));
    state.adam_m.assign(payload.begin() + static_cast<long>(2 * count),
                        payload.begin() + static_cast<long>(3 * count));
    state.adam_v.assign(payload.begin() + static_cast<long>(3 * count), payload.end());
    state.step = header.at("step").get<int64_t>();
    return state;
}

}  // namespace chunkq::trainer
