#pragma once

// Append-only JSON-lines log shared by every process of a run. Enabled by
// SPACEFARM_EVENT_LOG=<path>; a no-op otherwise.

#include <string>
#include <vector>

#include <json.hpp>

namespace spacefarm::events {

/// Overrides the environment; empty disables logging.
void set_path(const std::string& path);
bool enabled();

/// Writes {"t_ms", "pid", "source", "event", ...fields} as one line.
void log(const std::string& source, const std::string& event,
         nlohmann::json fields = nlohmann::json::object());

/// Unparseable lines are skipped.
std::vector<nlohmann::json> read_all(const std::string& path);

std::int64_t wall_ms();

}  // namespace spacefarm::events
