#include "chunkq/dataset.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "chunkq/io.hpp"

namespace chunkq {

using nlohmann::json;

double OfflineDataset::gamma_h() const {
    return std::pow(gamma, h);
}

void OfflineDataset::validate() const {
    if (h < 1) throw std::invalid_argument("OfflineDataset: h must be >= 1");
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("OfflineDataset: gamma must be in (0,1)");
    for (const auto& tr : transitions) {
        if (tr.chunk.horizon != h) throw std::invalid_argument("OfflineDataset: mixed chunk horizons");
        if (tr.chunk.action_dim != action_dim)
            throw std::invalid_argument("OfflineDataset: mixed action dims");
        if (static_cast<int>(tr.rewards.size()) != h)
            throw std::invalid_argument("OfflineDataset: rewards length != h");
        tr.chunk.validate();
    }
}

OfflineDataset build_dataset(const std::vector<Demonstration>& demos,
                             const std::vector<std::vector<double>>& rewards, int h, int stride,
                             double gamma) {
    if (h < 1) throw std::invalid_argument("build_dataset: h must be >= 1");
    if (stride < 1) throw std::invalid_argument("build_dataset: stride must be >= 1");
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("build_dataset: gamma must be in (0,1)");
    if (rewards.size() != demos.size())
        throw std::invalid_argument("build_dataset: rewards/demos length mismatch");

    OfflineDataset ds;
    ds.h = h;
    ds.gamma = gamma;
    ds.action_dim = 0;

    for (size_t d = 0; d < demos.size(); ++d) {
        const Demonstration& demo = demos[d];
        const auto& demo_rewards = rewards[d];
        const int len = static_cast<int>(demo.actions.size());
        if (static_cast<int>(demo_rewards.size()) != len)
            throw std::invalid_argument("build_dataset: per-demo reward length mismatch");
        if (len == 0) continue;
        if (demo.states.size() != static_cast<size_t>(len) + 1)
            throw std::invalid_argument("build_dataset: demo states/actions length mismatch");
        const int d_a = static_cast<int>(demo.actions[0].size());
        if (ds.action_dim == 0) ds.action_dim = d_a;
        if (ds.action_dim != d_a) throw std::invalid_argument("build_dataset: mixed action dims");

        for (int t = 0; t < len; t += stride) {
            const int valid = std::min(h, len - t);
            ChunkTransition tr;
            tr.state = demo.states[static_cast<size_t>(t)];
            tr.chunk = ActionChunk(h, d_a);
            tr.rewards.assign(static_cast<size_t>(h), 0.0);
            for (int k = 0; k < valid; ++k) {
                for (int j = 0; j < d_a; ++j)
                    tr.chunk.at(k, j) = demo.actions[static_cast<size_t>(t + k)][static_cast<size_t>(j)];
                tr.rewards[static_cast<size_t>(k)] = demo_rewards[static_cast<size_t>(t + k)];
            }
            tr.chunk.truncate(valid);
            tr.next_state = demo.states[static_cast<size_t>(t + valid)];
            tr.terminal = (t + valid == len);
            ds.transitions.push_back(std::move(tr));
        }
    }
    return ds;
}

namespace {

// Serialize manually so floats carry 17 significant digits.
std::string vec_json(std::span<const double> v) {
    std::string out = "[";
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += io::format_double_full(v[i]);
    }
    out += ']';
    return out;
}

std::string state_json(const EnvState& s) {
    std::string out = "{\"proprio\":" + vec_json(s.proprio);
    out += ",\"goal\":" + vec_json(s.goal);
    out += ",\"step_index\":" + std::to_string(s.step_index) + "}";
    return out;
}

std::string chunk_rows_json(const ActionChunk& c) {
    std::string out = "[";
    for (int k = 0; k < c.horizon; ++k) {
        if (k) out += ',';
        out += vec_json(c.step(k));
    }
    out += ']';
    return out;
}

std::string mask_json(const ActionChunk& c) {
    std::string out = "[";
    for (int k = 0; k < c.horizon; ++k) {
        if (k) out += ',';
        out += c.mask[static_cast<size_t>(k)] ? '1' : '0';
    }
    out += ']';
    return out;
}

EnvState state_from_json(const json& j) {
    EnvState s;
    s.proprio = j.at("proprio").get<std::vector<double>>();
    s.goal = j.at("goal").get<std::vector<double>>();
    s.step_index = j.at("step_index").get<int>();
    return s;
}

ActionChunk chunk_from_json(const json& rows, const json& mask) {
    const int h = static_cast<int>(rows.size());
    const int d_a = static_cast<int>(rows.at(0).size());
    ActionChunk c(h, d_a);
    for (int k = 0; k < h; ++k) {
        c.mask[static_cast<size_t>(k)] = mask.at(static_cast<size_t>(k)).get<int>() ? 1 : 0;
        for (int j = 0; j < d_a; ++j) c.at(k, j) = rows.at(static_cast<size_t>(k)).at(static_cast<size_t>(j)).get<double>();
    }
    return c;
}

}  // namespace

void save_dataset_jsonl(const OfflineDataset& dataset, const std::string& path) {
    dataset.validate();
    std::string out;
    out += "{\"type\":\"meta\",\"h\":" + std::to_string(dataset.h) +
           ",\"gamma\":" + io::format_double_full(dataset.gamma) +
           ",\"action_dim\":" + std::to_string(dataset.action_dim) + "}\n";
    for (const auto& tr : dataset.transitions) {
        out += "{\"state\":" + state_json(tr.state);
        out += ",\"chunk\":" + chunk_rows_json(tr.chunk);
        out += ",\"mask\":" + mask_json(tr.chunk);
        out += ",\"rewards\":" + vec_json(tr.rewards);
        out += ",\"next_state\":" + state_json(tr.next_state);
        out += std::string(",\"terminal\":") + (tr.terminal ? "true" : "false") + "}\n";
    }
    io::write_file(path, out);
}

OfflineDataset load_dataset_jsonl(const std::string& path) {
    std::istringstream in(io::read_file(path));
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("dataset file is empty: " + path);
    const json meta = json::parse(line);
    if (meta.value("type", "") != "meta") throw std::runtime_error("dataset file missing meta record");

    OfflineDataset ds;
    ds.h = meta.at("h").get<int>();
    ds.gamma = meta.at("gamma").get<double>();
    ds.action_dim = meta.at("action_dim").get<int>();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        ChunkTransition tr;
        tr.state = state_from_json(j.at("state"));
        tr.chunk = chunk_from_json(j.at("chunk"), j.at("mask"));
        tr.rewards = j.at("rewards").get<std::vector<double>>();
        tr.next_state = state_from_json(j.at("next_state"));
        tr.terminal = j.at("terminal").get<bool>();
        ds.transitions.push_back(std::move(tr));
    }
    ds.validate();
    return ds;
}

void save_demos_jsonl(const std::vector<Demonstration>& demos, const std::string& path) {
    std::string out;
    out += "{\"type\":\"meta\",\"count\":" + std::to_string(demos.size()) + "}\n";
    for (const auto& demo : demos) {
        out += "{\"states\":[";
        for (size_t i = 0; i < demo.states.size(); ++i) {
            if (i) out += ',';
            out += state_json(demo.states[i]);
        }
        out += "],\"actions\":[";
        for (size_t i = 0; i < demo.actions.size(); ++i) {
            if (i) out += ',';
            out += vec_json(demo.actions[i]);
        }
        out += std::string("],\"success\":") + (demo.success ? "true" : "false") + "}\n";
    }
    io::write_file(path, out);
}

std::vector<Demonstration> load_demos_jsonl(const std::string& path) {
    std::istringstream in(io::read_file(path));
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("demo file is empty: " + path);
    std::vector<Demonstration> demos;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        Demonstration demo;
        for (const auto& js : j.at("states")) demo.states.push_back(state_from_json(js));
        for (const auto& ja : j.at("actions")) demo.actions.push_back(ja.get<std::vector<double>>());
        demo.success = j.at("success").get<bool>();
        demos.push_back(std::move(demo));
    }
    return demos;
}

}  // namespace chunkq
