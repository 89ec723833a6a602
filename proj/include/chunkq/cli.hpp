#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "chunkq/dataset.hpp"
#include "chunkq/env.hpp"
#include "chunkq/evaluate.hpp"
#include "chunkq/trainer.hpp"

namespace chunkq::cli {

// exit codes
inline constexpr int kOk = 0;
inline constexpr int kValidationError = 1;
inline constexpr int kVerificationFailure = 2;
inline constexpr int kRuntimeFailure = 3;

// Fully resolved run configuration. `raw` is the merged JSON document
// (built-in defaults <- config file <- --set overrides); it is what gets
// hashed and embedded in output sidecars.
struct RunConfig {
    nlohmann::json raw;
    uint64_t seed = 0;
    std::string out_dir = "out";

    EnvConfig env;
    // data generation
    int demos = 5;
    double demo_sigma = 0.01;
    int h = 8;
    int stride = 8;
    double gamma = 0.98;
    int label_window = 3;
    bool shifted_rewards = true;
    std::string dataset_path;  // empty -> <out_dir>/dataset.jsonl
    // proposal
    double proposal_sigma = 0.05;
    std::vector<double> proposal_bias;
    // training
    trainer::TrainConfig train;
    int checkpoint_every = 1000;
    int rank_eval_every = 500;
    int heldout_states = 40;
    // evaluation
    eval::EvalConfig eval;
    std::vector<int> sweep_ns{1, 2, 4, 8};
    eval::GridSpec grid;
    int landscape_axis_x = 0;
    int landscape_axis_y = -1;  // -1 -> first action dim of step 1
    // verification
    int verify_random_instances = 100;
    int verify_trials = 5;
    int verify_n_limit = 128;
    double verify_limit_threshold = 1e-3;

    std::string resolved_dataset_path() const;
};

nlohmann::json builtin_defaults();

// defaults <- file (optional) <- key=value overrides (dot paths) <- seed/out
RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides,
                         const std::string& out_dir_flag, const std::string& seed_flag);

RunConfig config_from_json(const nlohmann::json& merged);

int cmd_gen_data(const RunConfig& config);
int cmd_verify(const RunConfig& config);
int cmd_train(const RunConfig& config, const std::string& resume_path = "");
int cmd_eval(const RunConfig& config, const std::string& checkpoint_path);
int cmd_sweep_n(const RunConfig& config, const std::string& checkpoint_path);
int cmd_landscape(const RunConfig& config, const std::string& checkpoint_path);

int run_cli(int argc, char** argv);

}  // namespace chunkq::cli
