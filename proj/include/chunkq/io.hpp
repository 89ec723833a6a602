#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace chunkq::io {

inline constexpr const char* kToolVersion = "chunkq 0.1.0";

// FNV-1a 64-bit, used for config hashes and checkpoint checksums.
uint64_t fnv1a64(std::span<const unsigned char> data);
uint64_t fnv1a64(const std::string& s);

std::string hex64(uint64_t v);

// Full-precision float formatting (17 significant digits) for JSONL records.
std::string format_double_full(double v);

// Shortest round-trip formatting for CSV bodies (std::to_chars).
std::string format_double(double v);

// Deterministic CSV emitter: fixed column order, '\n' line ends, doubles
// rendered with format_double so reruns produce byte-identical bodies.
class CsvWriter {
public:
    CsvWriter(std::string path, std::vector<std::string> columns);
    void row(const std::vector<std::string>& cells);
    std::string cell(double v) const { return format_double(v); }
    std::string cell(int64_t v) const { return std::to_string(v); }
    void close();
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::string buffer_;
    size_t n_columns_;
    bool closed_ = false;
};

// Writes `<path>.meta.json`: config hash, seed, tool version plus extras.
void write_sidecar(const std::string& path, const nlohmann::json& config, uint64_t seed,
                   nlohmann::json extras = nlohmann::json::object());

uint64_t config_hash(const nlohmann::json& config);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

}  // namespace chunkq::io
