#pragma once

// Multi-process scenario runner: boots a space server, workers and a
// master as separate processes, injects faults and checks the outcome.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spacefarm/worker.hpp"

namespace spacefarm::harness {

struct FaultSpec {
  // Exactly one of worker / txn targets is set.
  std::optional<int> worker;
  bool txn = false;
  std::optional<FaultPhase> trigger;           // phase hook inside the worker
  std::optional<std::chrono::milliseconds> at;  // or wall offset from start
  FaultAction action;
};

struct Scenario {
  std::string name;
  int workers = 1;
  std::vector<std::chrono::milliseconds> start_offsets;  // per worker, default 0
  std::vector<std::vector<std::string>> worker_agents;   // per worker, empty = all
  std::chrono::milliseconds master_offset{0};
  /// CaseConfig keys; space_address and file paths are filled in by the run.
  nlohmann::json case_config;
  std::optional<std::string> input_text;  // written to the artifacts dir
  std::vector<FaultSpec> faults;
  nlohmann::json assertions = nlohmann::json::array();
  std::chrono::milliseconds timeout{120000};
};

/// Throws Error{kConfigError}, e.g. for an unknown phase marker.
Scenario parse_scenario(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
Scenario load_scenario(const std::filesystem::path& path);

struct RunOptions {
  std::filesystem::path spacefarm_binary;
  std::filesystem::path artifacts_dir;
};

/// Tally of one case's events.
struct ExecutionTally {
  bool exactly_once = false;
  std::map<std::int64_t, int> commits;   // part -> committed results
  int aborted_attempts = 0;              // master-observed aborts
  std::map<std::string, int> executed_by_worker;
};

/// True iff every part in [0, num_parts) was committed exactly once.
ExecutionTally check_exactly_once(const std::vector<nlohmann::json>& events,
                                  const std::string& case_id, std::int64_t num_parts);

/// {"name","passed","master_exit","case_report","tally","assertions":[...],"artifacts"}.
/// Throws Error{kInternal} when the processes cannot be booted.
nlohmann::json run_scenario(const Scenario& scenario, const RunOptions& options);

}  // namespace spacefarm::harness
