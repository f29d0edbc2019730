#pragma once

// The computing worker: claims tasks from a case's SchedulerEntry, runs the
// case's agent on the part and hands the result back under the task's
// transaction.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stop_token>
#include <string>

#include "spacefarm/agents.hpp"
#include "spacefarm/entry.hpp"
#include "spacefarm/space_api.hpp"

namespace spacefarm {

/// Instrumented points inside execute_task.
enum class FaultPhase { kAfterClaim, kAfterFileRead, kBeforeResultWrite, kBeforeComputedMark };
std::string_view to_string(FaultPhase phase);
std::optional<FaultPhase> fault_phase_from_string(std::string_view text);

struct FaultAction {
  enum Kind { kKill, kPause, kAbortTxn } kind = kKill;
  std::chrono::milliseconds pause{0};
};

/// "phase:kill", "phase:pause:ms" or "phase:abort-txn". Throws
/// Error{kConfigError}.
std::pair<FaultPhase, FaultAction> parse_fault_spec(std::string_view text);

using FaultHook =
    std::function<std::optional<FaultAction>(FaultPhase phase, const ComputingTask& task)>;

/// Hook configured by SPACEFARM_FAULT, limited to one firing per run when
/// SPACEFARM_FAULT_ONCE names a marker file. Empty when unset.
FaultHook fault_hook_from_env();

/// Thrown out of the worker when a kill fault runs in-process. The worker
/// has then stopped touching the space, as a dead process would.
struct WorkerCrash : std::runtime_error {
  WorkerCrash() : std::runtime_error("worker crashed by fault injection") {}
};

struct WorkerOptions {
  std::filesystem::path scratch;
  AgentRegistry agents = builtin_agents();
  FaultHook fault;
  /// Kill faults throw WorkerCrash instead of killing the process.
  bool in_process_faults = false;
  std::string worker_id;  // generated when empty
  std::chrono::milliseconds poll{500};
  std::chrono::milliseconds file_timeout{2000};
};

class Worker {
 public:
  enum class Outcome { kComputed, kAborted, kLost };

  /// `control` carries scheduler and transaction traffic; `agent_space` is
  /// handed to agents. Both may be the same object for in-process use only
  /// when agents never block on the space.
  Worker(SpaceApi& control, SpaceApi& agent_space, WorkerOptions options);
  ~Worker();

  Worker(const Worker&) = delete;
  Worker& operator=(const Worker&) = delete;

  /// Takes the case's SchedulerEntry, marks its first waiting task
  /// ON_COMPUTING and puts the entry back. nullopt when nothing is waiting.
  std::optional<ComputingTask> claim_next(const CaseId& case_id,
                                          std::chrono::milliseconds wait = std::chrono::seconds(2));

  Outcome execute_task(const ComputingTask& task);

  /// Claim/execute loop across cases until `stop` is requested.
  void run(std::stop_token stop);

  WorkerState state() const { return state_.load(); }
  const std::string& id() const { return id_; }
  std::int64_t executed() const { return executed_.load(); }
  std::int64_t aborted() const { return aborted_.load(); }

 private:
  class Heartbeat;

  std::optional<ConfigurationEntry> configuration(const CaseId& case_id);
  std::optional<FaultAction> fault_at(FaultPhase phase, const ComputingTask& task);
  void abort_task(const ComputingTask& task, const std::string& reason);
  void forget_case(const CaseId& case_id);
  void log(const std::string& event, const ComputingTask& task,
           const std::string& reason = {}) const;

  SpaceApi& control_;
  SpaceApi& agent_space_;
  WorkerOptions options_;
  std::string id_;
  std::filesystem::path scratch_dir_;
  int lock_fd_ = -1;

  std::atomic<WorkerState> state_{WorkerState::kWaitForComputing};
  std::atomic<std::int64_t> executed_{0};
  std::atomic<std::int64_t> aborted_{0};

  std::map<std::string, ConfigurationEntry> configs_;
  std::set<std::string> unsupported_;

  // Filled by space callbacks, drained by run(). Shared so that callbacks
  // still queued after unsubscribe stay harmless.
  struct Wake;
  std::shared_ptr<Wake> wake_;
};

}  // namespace spacefarm
