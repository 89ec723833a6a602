#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "chunkq/chunk.hpp"
#include "chunkq/env.hpp"
#include "chunkq/parallel.hpp"
#include "chunkq/rng.hpp"

namespace chunkq::critic {

enum class Variant { Mlp, Fusion };

struct CriticConfig {
    Variant variant = Variant::Fusion;
    int d_model = 32;
    int n_heads = 2;
    int n_layers = 2;           // attention blocks (fusion)
    int d_ff = 64;              // attention-block MLP width
    std::vector<int> value_head{64, 64};
    std::vector<int> mlp_hidden{64, 64};
    int context_tokens = 4;
    int proprio_dim = 0;
    int horizon = 0;
    int action_dim = 0;

    void validate() const;
};

nlohmann::json critic_config_to_json(const CriticConfig& config);
CriticConfig critic_config_from_json(const nlohmann::json& j);

// Fixed (non-learned) environment featurizer: context_tokens rows of width
// d_model derived from goal, proprio and their offset. Stands in for frozen
// perceptual tokens.
struct ContextFeatures {
    int n_tokens = 0;
    int width = 0;
    std::vector<double> tokens;  // row-major n_tokens x width

    std::span<const double> row(int t) const {
        return {tokens.data() + static_cast<size_t>(t) * width, static_cast<size_t>(width)};
    }
};

ContextFeatures make_context(const EnvState& state, const CriticConfig& config);

struct TensorSpec {
    std::string name;
    int rows = 0;
    int cols = 0;
    size_t offset = 0;
    size_t size() const { return static_cast<size_t>(rows) * cols; }
};

struct ParamLayout {
    std::vector<TensorSpec> tensors;
    size_t total = 0;

    size_t add(const std::string& name, int rows, int cols);
    const TensorSpec& find(const std::string& name) const;
};

ParamLayout build_layout(const CriticConfig& config);

// Twin critics stored as one flat vector: [twin 0 | twin 1], each of
// layout.total parameters.
struct CriticParams {
    CriticConfig config;
    ParamLayout layout;
    std::vector<double> values;

    size_t twin_stride() const { return layout.total; }
    std::span<double> twin(int t) {
        return {values.data() + static_cast<size_t>(t) * layout.total, layout.total};
    }
    std::span<const double> twin(int t) const {
        return {values.data() + static_cast<size_t>(t) * layout.total, layout.total};
    }
};

// Small-uniform init scaled by 1/sqrt(fan_in); the two twins use
// independently derived seeds.
CriticParams init(const CriticConfig& config, uint64_t seed);

struct CriticInput {
    const ContextFeatures* context = nullptr;
    std::span<const double> proprio;
    const ActionChunk* chunk = nullptr;
};

// Forward/backward tape. Opaque to callers; reusable across calls.
struct Tape;
Tape* tape_new();
void tape_free(Tape* tape);

struct TapeHandle {
    Tape* t;
    TapeHandle() : t(tape_new()) {}
    ~TapeHandle() { tape_free(t); }
    TapeHandle(const TapeHandle&) = delete;
    TapeHandle& operator=(const TapeHandle&) = delete;
};

double forward(const CriticParams& params, int twin, const CriticInput& input);
double forward_cached(const CriticParams& params, int twin, const CriticInput& input, Tape& tape);

// Accumulates d(upstream * q)/d(theta_twin) into grad (size twin_stride).
void backward(const CriticParams& params, int twin, const Tape& tape, double upstream,
              std::span<double> grad);

// --- batch kernels (OpenMP) with serial reference implementations ---

void forward_batch(const CriticParams& params, int twin, std::span<const CriticInput> inputs,
                   std::span<double> out, ExecMode mode = ExecMode::Parallel);
void forward_batch_reference(const CriticParams& params, int twin,
                             std::span<const CriticInput> inputs, std::span<double> out);

struct GradWorkItem {
    CriticInput input;
    int twin = 0;
    double upstream = 0.0;
};

// Sums per-item gradients into grad (size 2 * twin_stride). Parallel items
// write private slabs that are reduced serially in item order, so results
// are bit-identical to the reference for any thread count.
void accumulate_gradients(const CriticParams& params, std::span<const GradWorkItem> items,
                          std::span<double> grad, ExecMode mode = ExecMode::Parallel);
void accumulate_gradients_reference(const CriticParams& params,
                                    std::span<const GradWorkItem> items, std::span<double> grad);

// Central-difference check of `backward` on a random subset of coordinates
// (>= min(n_coords, param count)). Returns the max relative error.
double finite_diff_check(const CriticParams& params, int twin, const CriticInput& input,
                         double fd_step, int n_coords, Rng& rng);

// Flat binary parameter file with a JSON header (config, layout, checksum).
void save_params(const CriticParams& params, const std::string& path);
CriticParams load_params(const std::string& path);
uint64_t params_checksum(const CriticParams& params);

}  // namespace chunkq::critic
