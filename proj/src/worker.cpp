#include "spacefarm/worker.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/file.h>
#include <unistd.h>

#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <thread>

#include "spacefarm/error.hpp"
#include "spacefarm/event_log.hpp"

namespace spacefarm {

namespace fs = std::filesystem;
using namespace std::chrono_literals;

std::string_view to_string(FaultPhase phase) {
  switch (phase) {
    case FaultPhase::kAfterClaim:
      return "after-claim";
    case FaultPhase::kAfterFileRead:
      return "after-file-read";
    case FaultPhase::kBeforeResultWrite:
      return "before-result-write";
    case FaultPhase::kBeforeComputedMark:
      return "before-computed-mark";
  }
  return "?";
}

std::optional<FaultPhase> fault_phase_from_string(std::string_view text) {
  for (auto p : {FaultPhase::kAfterClaim, FaultPhase::kAfterFileRead,
                 FaultPhase::kBeforeResultWrite, FaultPhase::kBeforeComputedMark}) {
    if (to_string(p) == text) return p;
  }
  return std::nullopt;
}

std::pair<FaultPhase, FaultAction> parse_fault_spec(std::string_view text) {
  std::vector<std::string_view> f;
  while (true) {
    const auto c = text.find(':');
    f.push_back(text.substr(0, c));
    if (c == std::string_view::npos) break;
    text.remove_prefix(c + 1);
  }
  auto bad = [&](const std::string& why) -> std::pair<FaultPhase, FaultAction> {
    fail(ErrorCode::kConfigError, "fault spec: " + why);
  };
  if (f.size() < 2) return bad("expected phase:action");
  auto phase = fault_phase_from_string(f[0]);
  if (!phase) return bad("unknown phase '" + std::string(f[0]) + "'");
  FaultAction a;
  if (f[1] == "kill" && f.size() == 2) {
    a.kind = FaultAction::kKill;
  } else if (f[1] == "abort-txn" && f.size() == 2) {
    a.kind = FaultAction::kAbortTxn;
  } else if (f[1] == "pause" && f.size() == 3) {
    a.kind = FaultAction::kPause;
    try {
      a.pause = std::chrono::milliseconds(std::stoll(std::string(f[2])));
    } catch (const std::exception&) {
      return bad("bad pause duration");
    }
  } else {
    return bad("unknown action '" + std::string(f[1]) + "'");
  }
  return {*phase, a};
}

FaultHook fault_hook_from_env() {
  const char* spec = std::getenv("SPACEFARM_FAULT");
  if (!spec || !*spec) return {};
  auto [phase, action] = parse_fault_spec(spec);
  const char* once = std::getenv("SPACEFARM_FAULT_ONCE");
  std::string marker = once ? once : "";
  return [phase = phase, action = action, marker](FaultPhase at,
                                                  const ComputingTask&) -> std::optional<FaultAction> {
    if (at != phase) return std::nullopt;
    if (!marker.empty()) {
      const int fd = ::open(marker.c_str(), O_CREAT | O_EXCL | O_WRONLY | O_CLOEXEC, 0644);
      if (fd < 0) return std::nullopt;
      ::close(fd);
    }
    return action;
  };
}

// ---------------------------------------------------------------------------

struct Worker::Wake {
  std::mutex mu;
  std::condition_variable cv;
  std::set<std::string> hinted;
  std::set<std::string> stopped;

  void hint(const std::string& c) {
    {
      std::lock_guard lk(mu);
      hinted.insert(c);
    }
    cv.notify_all();
  }
  void stop(const std::string& c) {
    {
      std::lock_guard lk(mu);
      stopped.insert(c);
    }
    cv.notify_all();
  }
};

/// Keeps a task transaction alive at lease/3 until destroyed.
class Worker::Heartbeat {
 public:
  Heartbeat(SpaceApi& space, const TransactionId& txn, std::chrono::milliseconds lease)
      : space_(space), txn_(txn) {
    const auto period = std::max<std::chrono::milliseconds>(lease / 3, 10ms);
    thread_ = std::jthread([this, period](std::stop_token st) {
      std::unique_lock lk(mu_);
      while (!st.stop_requested()) {
        cv_.wait_for(lk, st, period, [] { return false; });
        if (st.stop_requested()) break;
        if (suspended_) continue;
        lk.unlock();
        try {
          space_.txn_renew(txn_, std::nullopt);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kSpaceUnavailable && e.code() != ErrorCode::kSessionClosed) {
            lost_ = true;
          }
        }
        lk.lock();
      }
    });
  }
  ~Heartbeat() { stop(); }

  void stop() {
    if (thread_.joinable()) {
      thread_.request_stop();
      thread_.join();
    }
  }
  void suspend(bool on) {
    std::lock_guard lk(mu_);
    suspended_ = on;
  }
  bool lost() const { return lost_.load(); }

 private:
  SpaceApi& space_;
  TransactionId txn_;
  std::mutex mu_;
  std::condition_variable_any cv_;
  bool suspended_ = false;
  std::atomic<bool> lost_{false};
  std::jthread thread_;
};

namespace {

bool txn_gone(const Error& e) {
  return e.code() == ErrorCode::kTxnNotOpen || e.code() == ErrorCode::kUnknownTxn;
}

bool has_waiting(const SchedulerEntry& s) { return s.first_waiting() != nullptr; }

}  // namespace

Worker::Worker(SpaceApi& control, SpaceApi& agent_space, WorkerOptions options)
    : control_(control),
      agent_space_(agent_space),
      options_(std::move(options)),
      wake_(std::make_shared<Wake>()) {
  id_ = options_.worker_id.empty() ? new_entry_id().str() : options_.worker_id;
  if (options_.scratch.empty()) options_.scratch = fs::temp_directory_path() / "spacefarm-scratch";
  fs::create_directories(options_.scratch);
  // Directories of dead workers are unlocked; remove them.
  for (const auto& dir : fs::directory_iterator(options_.scratch)) {
    if (!dir.is_directory()) continue;
    const auto lock = dir.path() / ".lock";
    const int fd = ::open(lock.c_str(), O_RDWR | O_CLOEXEC);
    if (fd < 0) continue;
    if (::flock(fd, LOCK_EX | LOCK_NB) == 0) {
      std::error_code ec;
      fs::remove_all(dir.path(), ec);
    }
    ::close(fd);
  }
  scratch_dir_ = options_.scratch / id_;
  fs::create_directories(scratch_dir_);
  const auto lock = scratch_dir_ / ".lock";
  lock_fd_ = ::open(lock.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (lock_fd_ < 0 || ::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    fail(ErrorCode::kInternal, "cannot lock scratch directory " + scratch_dir_.string());
  }
}

Worker::~Worker() {
  std::error_code ec;
  fs::remove_all(scratch_dir_, ec);
  if (lock_fd_ >= 0) ::close(lock_fd_);
}

void Worker::log(const std::string& event, const ComputingTask& task, const std::string& reason) const {
  nlohmann::json f{{"worker", id_},
                   {"case_id", task.case_id.str()},
                   {"part", task.part_index},
                   {"txn", task.txn_id.str()}};
  if (!reason.empty()) f["reason"] = reason;
  events::log("worker", event, std::move(f));
}

std::optional<ComputingTask> Worker::claim_next(const CaseId& case_id,
                                                std::chrono::milliseconds wait) {
  const auto tmpl = Template::of(EntryKind::kScheduler).where_case(case_id);
  auto found = control_.take(tmpl, std::nullopt, wait);
  const auto* taken = get_if<SchedulerEntry>(found);
  if (!taken) return std::nullopt;
  SchedulerEntry sched = *taken;
  std::optional<ComputingTask> claimed;
  if (auto* t = sched.first_waiting()) {
    t->state = transition(t->state, TaskState::kOnComputing);
    claimed = *t;
  }
  control_.write(sched, std::nullopt, Lease::forever());
  if (claimed) {
    state_ = WorkerState::kOnComputing;
    log("claimed", *claimed);
  }
  return claimed;
}

std::optional<ConfigurationEntry> Worker::configuration(const CaseId& case_id) {
  if (auto it = configs_.find(case_id.str()); it != configs_.end()) return it->second;
  auto found = control_.read(Template::of(EntryKind::kConfiguration).where_case(case_id),
                             std::nullopt, 2s);
  const auto* cfg = get_if<ConfigurationEntry>(found);
  if (!cfg) return std::nullopt;
  configs_[case_id.str()] = *cfg;
  return *cfg;
}

std::optional<FaultAction> Worker::fault_at(FaultPhase phase, const ComputingTask& task) {
  if (!options_.fault) return std::nullopt;
  auto action = options_.fault(phase, task);
  if (action) {
    events::log("worker", "fault",
                {{"worker", id_},
                 {"case_id", task.case_id.str()},
                 {"part", task.part_index},
                 {"txn", task.txn_id.str()},
                 {"phase", std::string(to_string(phase))},
                 {"action", action->kind == FaultAction::kKill    ? "kill"
                            : action->kind == FaultAction::kPause ? "pause"
                                                                  : "abort-txn"}});
  }
  return action;
}

void Worker::abort_task(const ComputingTask& task, const std::string& reason) {
  try {
    control_.txn_abort(task.txn_id);
  } catch (const Error& e) {
    if (!txn_gone(e)) throw;
  }
  ++aborted_;
  log("aborted", task, reason);
}

void Worker::forget_case(const CaseId& case_id) {
  configs_.erase(case_id.str());
  unsupported_.erase(case_id.str());
}

Worker::Outcome Worker::execute_task(const ComputingTask& task) {
  state_ = WorkerState::kOnComputing;
  struct Idle {
    std::atomic<WorkerState>& s;
    ~Idle() { s = WorkerState::kWaitForComputing; }
  } idle{state_};

  const auto scratch_case = scratch_dir_ / task.case_id.str();
  const auto scratch_file = scratch_case / ("part-" + std::to_string(task.part_index) + ".bin");
  std::optional<Heartbeat> heartbeat;

  // Returns the outcome to report, or nullopt to carry on.
  auto inject = [&](FaultPhase phase) -> std::optional<Outcome> {
    auto action = fault_at(phase, task);
    if (!action) return std::nullopt;
    switch (action->kind) {
      case FaultAction::kKill:
        if (options_.in_process_faults) {
          if (heartbeat) heartbeat->stop();
          throw WorkerCrash();
        }
        ::kill(::getpid(), SIGKILL);
        std::this_thread::sleep_for(1h);
        return Outcome::kLost;
      case FaultAction::kPause:
        if (heartbeat) heartbeat->suspend(true);
        std::this_thread::sleep_for(action->pause);
        if (heartbeat) heartbeat->suspend(false);
        return std::nullopt;
      case FaultAction::kAbortTxn:
        abort_task(task, "fault");
        return Outcome::kAborted;
    }
    return std::nullopt;
  };
  auto lost = [&](const std::string& why) {
    ++aborted_;
    log("lost", task, why);
    return Outcome::kLost;
  };

  try {
    TxnInfo info = control_.txn_status(task.txn_id);
    if (info.state != TxnState::kOpen) return lost("transaction already " + std::string(to_string(info.state)));
    heartbeat.emplace(control_, task.txn_id, info.lease);

    if (auto o = inject(FaultPhase::kAfterClaim)) return *o;

    const auto cfg = configuration(task.case_id);
    if (!cfg) {
      abort_task(task, "no configuration entry");
      return Outcome::kAborted;
    }
    const AgentDescriptor* agent = nullptr;
    try {
      agent = &options_.agents.resolve(cfg->agent_id, cfg->agent_version);
    } catch (const Error& e) {
      unsupported_.insert(task.case_id.str());
      abort_task(task, std::string(to_string(e.code())) + ": " + e.what());
      return Outcome::kAborted;
    }

    const auto file = control_.read(Template::of(EntryKind::kFile)
                                        .where_case(task.case_id)
                                        .where("part_index", task.part_index),
                                    task.txn_id, options_.file_timeout);
    const auto* fe = get_if<FileEntry>(file);
    if (!fe) {
      abort_task(task, std::string(to_string(ErrorCode::kFileEntryMissing)));
      return Outcome::kAborted;
    }
    if (auto o = inject(FaultPhase::kAfterFileRead)) return *o;

    fs::create_directories(scratch_case);
    {
      const auto bytes = decode_payload_to_string(fe->payload);
      std::ofstream out(scratch_file, std::ios::binary | std::ios::trunc);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    std::string input;
    {
      std::ifstream in(scratch_file, std::ios::binary);
      input.assign(std::istreambuf_iterator<char>(in), {});
    }

    std::string output;
    try {
      AgentContext ctx{&agent_space_, task.case_id, task.part_index};
      output = agent->execute(input, cfg->agent_params, ctx);
    } catch (const Error& e) {
      abort_task(task, std::string(to_string(e.code())) + ": " + e.what());
      return Outcome::kAborted;
    } catch (const std::exception& e) {
      abort_task(task, std::string("AGENT_FAILURE: ") + e.what());
      return Outcome::kAborted;
    }
    if (heartbeat->lost()) return lost("lease lapsed during execution");

    if (auto o = inject(FaultPhase::kBeforeResultWrite)) return *o;
    control_.write(ResultEntry{task.case_id, task.part_index, new_entry_id(), encode_payload(output)},
                   task.txn_id, Lease::forever());
    std::error_code ec;
    fs::remove(scratch_file, ec);

    if (auto o = inject(FaultPhase::kBeforeComputedMark)) return *o;
    const auto tmpl = Template::of(EntryKind::kScheduler).where_case(task.case_id);
    while (true) {
      auto found = control_.take(tmpl, std::nullopt, 2s);
      if (const auto* taken = get_if<SchedulerEntry>(found)) {
        SchedulerEntry sched = *taken;
        bool marked = false;
        for (auto& t : sched.tasks) {
          if (t.part_index == task.part_index && t.txn_id == task.txn_id &&
              t.state == TaskState::kOnComputing) {
            t.state = transition(t.state, TaskState::kComputed);
            marked = true;
          }
        }
        if (marked) {
          heartbeat->stop();
          ++executed_;
          log("executed", task);
        }
        control_.write(sched, std::nullopt, Lease::forever());
        if (!marked) return lost("task no longer held");
        break;
      }
      if (control_.txn_status(task.txn_id).state != TxnState::kOpen) {
        return lost("transaction ended before completion");
      }
    }
    return Outcome::kComputed;
  } catch (const Error& e) {
    if (txn_gone(e)) return lost(e.what());
    throw;
  }
}

void Worker::run(std::stop_token stop) {
  auto wake = wake_;
  const auto sched_sub =
      control_.subscribe(Template::of(EntryKind::kScheduler), std::nullopt, [wake](const SpaceEvent& ev) {
        if (auto* s = std::get_if<SchedulerEntry>(&ev.entry); s && has_waiting(*s)) {
          wake->hint(s->case_id.str());
        }
      });
  const auto stop_sub =
      control_.subscribe(Template::of(EntryKind::kStop), std::nullopt, [wake](const SpaceEvent& ev) {
        wake->stop(case_of(ev.entry).str());
      });
  std::stop_callback on_stop(stop, [wake] { wake->cv.notify_all(); });

  auto next_poll = std::chrono::steady_clock::now();
  try {
    while (!stop.stop_requested()) {
      std::optional<CaseId> candidate;
      {
        std::lock_guard lk(wake->mu);
        for (const auto& c : wake->stopped) {
          forget_case(CaseId(c));
          wake->hinted.erase(c);
        }
        wake->stopped.clear();
        while (!wake->hinted.empty() && !candidate) {
          auto c = *wake->hinted.begin();
          wake->hinted.erase(wake->hinted.begin());
          if (!unsupported_.count(c)) candidate = CaseId(c);
        }
      }
      const auto now = std::chrono::steady_clock::now();
      if (!candidate && now >= next_poll) {
        next_poll = now + options_.poll;
        auto found = control_.read(Template::of(EntryKind::kScheduler), std::nullopt, kNoWait);
        if (const auto* s = get_if<SchedulerEntry>(found);
            s && has_waiting(*s) && !unsupported_.count(s->case_id.str())) {
          candidate = s->case_id;
        }
      }
      if (candidate) {
        if (auto task = claim_next(*candidate)) {
          execute_task(*task);
          wake->hint(candidate->str());
        }
        continue;
      }
      std::unique_lock lk(wake->mu);
      wake->cv.wait_until(lk, next_poll, [&] {
        return stop.stop_requested() || !wake->hinted.empty() || !wake->stopped.empty();
      });
    }
  } catch (...) {
    try {
      control_.unsubscribe(sched_sub);
      control_.unsubscribe(stop_sub);
    } catch (const Error&) {
    }
    throw;
  }
  try {
    control_.unsubscribe(sched_sub);
    control_.unsubscribe(stop_sub);
  } catch (const Error&) {
  }
}

}  // namespace spacefarm
