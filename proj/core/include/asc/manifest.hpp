#pragma once

// Replay record written next to every tool output.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace asc {

inline constexpr const char* kToolVersion = "0.1.0";

struct RunManifest {
    std::string command;
    std::string config_json = "{}";  // resolved configuration, every default materialized
    std::uint64_t root_seed = 0;
    std::string tool_version = kToolVersion;
    std::map<std::string, std::string> input_digests;   // path -> digest
    std::map<std::string, std::string> output_digests;  // path -> digest
    std::string started_at;
    std::string finished_at;
    int exit_code = 0;

    std::string to_json() const;
    static RunManifest from_json(const std::string& text);
};

// UTC, ISO 8601 with seconds.
std::string utc_timestamp();

// Digest of a file, or of every regular file below a directory (sorted by relative path).
std::string path_digest(const std::filesystem::path& p);

}  // namespace asc
