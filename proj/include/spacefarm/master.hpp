#pragma once

// The computing master: cuts the input, feeds parts and tasks under fresh
// transactions, collects results, replays aborted parts and assembles the
// output.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spacefarm/agents.hpp"
#include "spacefarm/entry.hpp"
#include "spacefarm/space_api.hpp"

namespace spacefarm {

struct CutStrategy {
  std::string name;
  nlohmann::json params = nlohmann::json::object();
};

struct CaseConfig {
  CaseId case_id{"-"};
  std::string space_address;
  std::string agent_id;
  std::string agent_version;
  AgentParams agent_params;
  std::filesystem::path input_path;
  std::filesystem::path output_path;
  CutStrategy cut_strategy;
  std::int64_t num_parts = 1;
  std::int64_t initial_workers = 1;
  std::chrono::milliseconds task_lease{30000};

  // Optional keys.
  int max_attempts = 5;
  std::chrono::milliseconds retry_backoff{1000};
  std::filesystem::path tmp_dir;      // default <system tmp>/spacefarm
  std::filesystem::path results_dir;  // default: directory of output_path
  std::chrono::milliseconds worker_grace{10000};
};

/// Throws Error{kConfigError} naming the offending key.
CaseConfig parse_case_config(const nlohmann::json& j);
CaseConfig load_case_config(const std::filesystem::path& path);

struct CaseReport {
  CaseId case_id{"-"};
  std::int64_t parts = 0;
  std::int64_t results = 0;
  std::int64_t replays = 0;
  std::int64_t elapsed_ms = 0;
  std::string output_path;
};
nlohmann::json to_json(const CaseReport& report);

// ---------------------------------------------------------------------------
// Cut strategies.

/// Validates the whole input up front, then produces parts on demand.
class Cutter {
 public:
  virtual ~Cutter() = default;
  virtual std::int64_t count() const = 0;
  virtual std::string part(std::int64_t index) const = 0;
};

/// byte_chunk{chunk_bytes?}, bbp_range{} or matrix_set{tasks_per_matrix?}.
/// Throws Error{kCutFailed}.
std::unique_ptr<Cutter> make_cutter(const CutStrategy& strategy, std::string input,
                                    std::int64_t num_parts);
std::vector<std::string> cut_strategy_names();

/// Combines result parts (in part order) into the case output.
std::string assemble_output(const CaseConfig& config, const std::vector<std::string>& results);

// ---------------------------------------------------------------------------

/// Runs one case to completion against `space`. Throws Error{kCutFailed},
/// Error{kMaxAttemptsExceeded}, or whatever the space raises.
CaseReport run_case(const CaseConfig& config, SpaceApi& space);

}  // namespace spacefarm
