#include "asc/manifest.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <vector>

#include "asc/errors.hpp"
#include "asc/io.hpp"
#include "asc/rng.hpp"
#include "json.hpp"

namespace asc {

using nlohmann::json;

std::string RunManifest::to_json() const {
    json j{{"command", command},
           {"config", json::parse(config_json)},
           {"root_seed", root_seed},
           {"tool_version", tool_version},
           {"input_digests", input_digests},
           {"output_digests", output_digests},
           {"started_at", started_at},
           {"finished_at", finished_at},
           {"exit_code", exit_code}};
    return j.dump(2);
}

RunManifest RunManifest::from_json(const std::string& text) {
    RunManifest m;
    try {
        const json j = json::parse(text);
        m.command = j.at("command").get<std::string>();
        m.config_json = j.at("config").dump();
        m.root_seed = j.at("root_seed").get<std::uint64_t>();
        m.tool_version = j.at("tool_version").get<std::string>();
        m.input_digests = j.at("input_digests").get<std::map<std::string, std::string>>();
        m.output_digests = j.value("output_digests", std::map<std::string, std::string>{});
        m.started_at = j.value("started_at", "");
        m.finished_at = j.value("finished_at", "");
        m.exit_code = j.value("exit_code", 0);
    } catch (const json::exception& e) {
        throw LoadError(std::string("run manifest: ") + e.what());
    }
    return m;
}

std::string utc_timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string path_digest(const std::filesystem::path& p) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(p)) return file_digest(p);
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), p));
    std::sort(files.begin(), files.end());
    std::uint64_t h = fnv1a64(std::string_view{});
    for (const auto& f : files) {
        h = fnv1a64(f.generic_string(), h);
        h = fnv1a64(read_file(p / f), h);
    }
    return hex64(h);
}

}  // namespace asc
