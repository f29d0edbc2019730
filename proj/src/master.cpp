#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>

#include "spacefarm/error.hpp"
#include "spacefarm/event_log.hpp"
#include "spacefarm/master.hpp"

namespace spacefarm {

namespace fs = std::filesystem;
using WallClock = std::chrono::steady_clock;
using namespace std::chrono_literals;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kCutFailed, "cannot read " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kInternal, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::kInternal, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

struct PartRecord {
  fs::path path;
  std::optional<TransactionId> txn;
  int attempts = 0;
  bool fed = false;
  bool done = false;
  TaskState seen = TaskState::kWaitForComputing;
};

struct Event {
  enum Kind { kReady, kSnapshot, kAbort, kCutFailed } kind = kReady;
  std::int64_t part = 0;
  std::optional<SchedulerEntry> snapshot;
  std::optional<TransactionId> txn;
  std::string message;
};

// Outlives the run: space callbacks may still be queued after unsubscribe.
struct Inbox {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Event> events;

  void post(Event ev) {
    {
      std::lock_guard lk(mu);
      events.push_back(std::move(ev));
    }
    cv.notify_one();
  }
};

class CaseRun {
 public:
  CaseRun(const CaseConfig& config, SpaceApi& space) : cfg_(config), space_(space) {}
  CaseReport run();

 private:
  void post(Event ev) { inbox_->post(std::move(ev)); }

  Template tmpl(EntryKind kind) const { return Template::of(kind).where_case(cfg_.case_id); }
  Template part_tmpl(EntryKind kind, std::int64_t i) const {
    return tmpl(kind).where("part_index", i);
  }

  void log(const std::string& event, std::int64_t part, const std::optional<TransactionId>& txn,
           nlohmann::json extra = nlohmann::json::object()) {
    extra["case_id"] = cfg_.case_id.str();
    extra["part"] = part;
    if (txn) extra["txn"] = txn->str();
    events::log("master", event, std::move(extra));
  }

  void clear_stale_entries();
  void cutter_loop(std::stop_token st);
  void watcher_loop(std::stop_token st);
  void handle(const Event& ev);
  void feed(std::int64_t i);
  template <typename Fn>
  void modify_scheduler(Fn&& fn);
  void on_snapshot(const SchedulerEntry& s);
  void on_result(std::int64_t i);
  void on_abort(const TransactionId& txn);
  void renew_waiting();
  void finish();
  void abandon();

  const CaseConfig& cfg_;
  SpaceApi& space_;
  std::unique_ptr<Cutter> cutter_;
  fs::path parts_dir_;
  fs::path results_dir_;

  std::shared_ptr<Inbox> inbox_ = std::make_shared<Inbox>();

  std::vector<PartRecord> parts_;
  std::map<std::int64_t, WallClock::time_point> reissue_at_;
  std::uint64_t next_enqueue_ = 0;
  std::int64_t done_ = 0;
  std::int64_t replays_ = 0;
  std::optional<Error> failure_;
};

void CaseRun::clear_stale_entries() {
  for (auto kind : {EntryKind::kScheduler, EntryKind::kStop, EntryKind::kConfiguration,
                    EntryKind::kRow}) {
    while (space_.take(tmpl(kind), std::nullopt, kNoWait)) {
    }
  }
}

void CaseRun::cutter_loop(std::stop_token st) {
  try {
    for (std::int64_t i = 0; i < cutter_->count() && !st.stop_requested(); ++i) {
      write_file_atomic(parts_[static_cast<std::size_t>(i)].path, cutter_->part(i));
    }
  } catch (const std::exception& e) {
    post({Event::kCutFailed, 0, std::nullopt, std::nullopt, e.what()});
  }
}

void CaseRun::watcher_loop(std::stop_token st) {
  std::int64_t next = 0;
  while (next < cfg_.num_parts && !st.stop_requested()) {
    if (fs::exists(parts_[static_cast<std::size_t>(next)].path)) {
      post({Event::kReady, next++, std::nullopt, std::nullopt, {}});
    } else {
      std::this_thread::sleep_for(5ms);
    }
  }
}

template <typename Fn>
void CaseRun::modify_scheduler(Fn&& fn) {
  auto found = space_.take(tmpl(EntryKind::kScheduler), std::nullopt, 60s);
  auto* sched = get_if<SchedulerEntry>(found);
  if (!sched) fail(ErrorCode::kInternal, "scheduler entry of " + cfg_.case_id.str() + " unavailable");
  SchedulerEntry copy = *sched;
  fn(copy);
  space_.write(copy, std::nullopt, Lease::forever());
}

void CaseRun::feed(std::int64_t i) {
  auto& p = parts_[static_cast<std::size_t>(i)];
  const auto bytes = read_file(p.path);
  const auto txn = space_.txn_create(cfg_.task_lease, cfg_.case_id.str());
  p.txn = txn;
  p.fed = true;
  p.seen = TaskState::kWaitForComputing;
  ++p.attempts;
  try {
    space_.write(FileEntry{cfg_.case_id, i, new_entry_id(), encode_payload(bytes)}, txn,
                 Lease::forever());
    modify_scheduler([&](SchedulerEntry& s) {
      if (auto* t = s.find(i)) {
        t->txn_id = txn;
        t->state = TaskState::kWaitForComputing;
      } else {
        s.tasks.push_back({cfg_.case_id, i, txn, TaskState::kWaitForComputing, next_enqueue_++});
      }
    });
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kTxnNotOpen && e.code() != ErrorCode::kUnknownTxn) throw;
    on_abort(txn);
    return;
  }
  log(p.attempts == 1 ? "feed" : "reissue", i, txn, {{"attempt", p.attempts}});
}

void CaseRun::on_snapshot(const SchedulerEntry& s) {
  for (const auto& t : s.tasks) {
    if (t.part_index < 0 || t.part_index >= cfg_.num_parts) continue;
    auto& p = parts_[static_cast<std::size_t>(t.part_index)];
    if (p.done || !p.txn || *p.txn != t.txn_id) continue;
    p.seen = t.state;
    if (t.state == TaskState::kComputed) on_result(t.part_index);
  }
}

void CaseRun::on_result(std::int64_t i) {
  auto& p = parts_[static_cast<std::size_t>(i)];
  if (p.done || !p.txn) return;
  const auto txn = *p.txn;
  const auto final_path = results_dir_ / ("result-" + std::to_string(i) + ".bin");
  auto partial = final_path;
  partial += ".partial";
  try {
    const auto res = space_.take(part_tmpl(EntryKind::kResult, i), txn, 2s);
    const auto* result = get_if<ResultEntry>(res);
    if (!result) fail(ErrorCode::kFileEntryMissing, "no result for part " + std::to_string(i));
    if (!space_.take(part_tmpl(EntryKind::kFile, i), txn, 2s)) {
      fail(ErrorCode::kFileEntryMissing, "no file entry for part " + std::to_string(i));
    }
    const auto bytes = decode_payload_to_string(result->payload);
    {
      std::ofstream out(partial, std::ios::binary | std::ios::trunc);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!out) fail(ErrorCode::kInternal, "cannot write " + partial.string());
    }
    modify_scheduler([&](SchedulerEntry& s) {
      std::erase_if(s.tasks, [&](const ComputingTask& t) {
        return t.part_index == i && t.txn_id == txn;
      });
    });
    space_.txn_commit(txn);
    fs::rename(partial, final_path);
  } catch (const Error& e) {
    std::error_code ec;
    fs::remove(partial, ec);
    if (e.code() == ErrorCode::kSessionClosed || e.code() == ErrorCode::kSpaceUnavailable) throw;
    try {
      space_.txn_abort(txn);
    } catch (const Error&) {
    }
    on_abort(txn);
    return;
  }
  p.done = true;
  p.txn.reset();
  ++done_;
  log("committed", i, txn, {{"attempt", p.attempts}});
}

void CaseRun::on_abort(const TransactionId& txn) {
  auto it = std::find_if(parts_.begin(), parts_.end(),
                         [&](const PartRecord& p) { return !p.done && p.txn == txn; });
  if (it == parts_.end()) return;
  auto& p = *it;
  const auto i = static_cast<std::int64_t>(it - parts_.begin());
  p.txn.reset();
  log("abort", i, txn, {{"attempt", p.attempts}});
  if (p.attempts >= cfg_.max_attempts) {
    failure_ = Error(ErrorCode::kMaxAttemptsExceeded,
                     "part " + std::to_string(i) + " failed " + std::to_string(p.attempts) + " times");
    return;
  }
  const auto delay = cfg_.retry_backoff * (std::int64_t{1} << std::min(p.attempts - 1, 20));
  reissue_at_[i] = WallClock::now() + delay;
  ++replays_;
}

void CaseRun::renew_waiting() {
  for (auto& p : parts_) {
    if (p.done || !p.txn || p.seen == TaskState::kOnComputing) continue;
    try {
      space_.txn_renew(*p.txn, cfg_.task_lease);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kSessionClosed) throw;
    }
  }
}

void CaseRun::handle(const Event& ev) {
  switch (ev.kind) {
    case Event::kReady:
      if (!parts_[static_cast<std::size_t>(ev.part)].fed) feed(ev.part);
      break;
    case Event::kSnapshot:
      on_snapshot(*ev.snapshot);
      break;
    case Event::kAbort:
      on_abort(*ev.txn);
      break;
    case Event::kCutFailed:
      failure_ = Error(ErrorCode::kCutFailed, ev.message);
      break;
  }
}

void CaseRun::finish() {
  space_.write(StopEntry{cfg_.case_id}, std::nullopt, Lease::forever());
  space_.take(tmpl(EntryKind::kScheduler), std::nullopt, 10s);
  space_.take(tmpl(EntryKind::kConfiguration), std::nullopt, kNoWait);
  while (space_.take(tmpl(EntryKind::kRow), std::nullopt, kNoWait)) {
  }
  std::vector<std::string> results;
  for (std::int64_t i = 0; i < cfg_.num_parts; ++i) {
    results.push_back(read_file(results_dir_ / ("result-" + std::to_string(i) + ".bin")));
  }
  if (!cfg_.output_path.parent_path().empty()) fs::create_directories(cfg_.output_path.parent_path());
  write_file_atomic(cfg_.output_path, assemble_output(cfg_, results));
  events::log("master", "stop", {{"case_id", cfg_.case_id.str()}});
}

void CaseRun::abandon() {
  for (auto& p : parts_) {
    if (p.txn && !p.done) {
      try {
        space_.txn_abort(*p.txn);
      } catch (const Error&) {
      }
    }
  }
  try {
    space_.take(tmpl(EntryKind::kScheduler), std::nullopt, 5s);
    space_.take(tmpl(EntryKind::kConfiguration), std::nullopt, kNoWait);
    while (space_.take(tmpl(EntryKind::kRow), std::nullopt, kNoWait)) {
    }
  } catch (const Error&) {
  }
}

CaseReport CaseRun::run() {
  const auto started = WallClock::now();
  cutter_ = make_cutter(cfg_.cut_strategy, read_file(cfg_.input_path), cfg_.num_parts);
  if (cutter_->count() != cfg_.num_parts) {
    fail(ErrorCode::kCutFailed, "strategy produced " + std::to_string(cutter_->count()) + " parts");
  }

  parts_dir_ = cfg_.tmp_dir / cfg_.case_id.str();
  results_dir_ = cfg_.results_dir / cfg_.case_id.str();
  fs::remove_all(parts_dir_);
  fs::remove_all(results_dir_);
  fs::create_directories(parts_dir_);
  fs::create_directories(results_dir_);
  parts_.resize(static_cast<std::size_t>(cfg_.num_parts));
  for (std::int64_t i = 0; i < cfg_.num_parts; ++i) {
    parts_[static_cast<std::size_t>(i)].path = parts_dir_ / ("part-" + std::to_string(i) + ".bin");
  }

  clear_stale_entries();
  space_.write(SchedulerEntry{cfg_.case_id, {}, std::string(kFifoPolicy)}, std::nullopt,
               Lease::forever());
  space_.write(ConfigurationEntry{cfg_.case_id, cfg_.agent_id, cfg_.agent_version, cfg_.agent_params,
                                  cfg_.num_parts},
               std::nullopt, Lease::forever());

  const auto sched_sub = space_.subscribe(tmpl(EntryKind::kScheduler), std::nullopt,
                                          [inbox = inbox_](const SpaceEvent& ev) {
                                            if (auto* s = std::get_if<SchedulerEntry>(&ev.entry)) {
                                              inbox->post({Event::kSnapshot, 0, *s, std::nullopt, {}});
                                            }
                                          });
  const auto abort_sub =
      space_.subscribe_aborts(cfg_.case_id.str(), [inbox = inbox_](const TransactionId& t) {
        inbox->post({Event::kAbort, 0, std::nullopt, t, {}});
      });
  events::log("master", "start", {{"case_id", cfg_.case_id.str()}, {"parts", cfg_.num_parts}});

  std::jthread cutter([this](std::stop_token st) { cutter_loop(st); });
  std::jthread watcher([this](std::stop_token st) { watcher_loop(st); });

  const auto renew_period = std::max<std::chrono::milliseconds>(cfg_.task_lease / 3, 20ms);
  const auto poll_period = 250ms;
  auto next_renew = WallClock::now() + renew_period;
  auto next_poll = WallClock::now() + poll_period;
  auto grace_at = started + cfg_.worker_grace;
  bool grace_checked = false;

  auto cleanup = [&] {
    cutter.request_stop();
    watcher.request_stop();
    try {
      space_.unsubscribe(sched_sub);
      space_.unsubscribe(abort_sub);
    } catch (const Error&) {
    }
  };

  try {
    while (done_ < cfg_.num_parts && !failure_) {
      std::deque<Event> batch;
      {
        std::unique_lock lk(inbox_->mu);
        auto wake = std::min(next_renew, next_poll);
        if (!reissue_at_.empty()) {
          for (auto& [i, t] : reissue_at_) wake = std::min(wake, t);
        }
        if (!grace_checked) wake = std::min(wake, grace_at);
        inbox_->cv.wait_until(lk, wake, [&] { return !inbox_->events.empty(); });
        batch.swap(inbox_->events);
      }
      for (const auto& ev : batch) {
        if (failure_) break;
        handle(ev);
      }
      const auto now = WallClock::now();
      for (auto it = reissue_at_.begin(); it != reissue_at_.end() && !failure_;) {
        if (it->second <= now) {
          const auto i = it->first;
          it = reissue_at_.erase(it);
          feed(i);
        } else {
          ++it;
        }
      }
      if (now >= next_poll) {
        next_poll = now + poll_period;
        if (auto s = space_.read(tmpl(EntryKind::kScheduler), std::nullopt, kNoWait)) {
          if (auto* sched = std::get_if<SchedulerEntry>(&*s)) on_snapshot(*sched);
        }
      }
      if (now >= next_renew) {
        next_renew = now + renew_period;
        renew_waiting();
      }
      if (!grace_checked && now >= grace_at) {
        grace_checked = true;
        const auto status = space_.admin_status(std::nullopt);
        const auto workers = status.value("workers", std::int64_t{0});
        if (workers < cfg_.initial_workers) {
          std::cerr << "warning: " << workers << " worker(s) registered, configuration expects "
                    << cfg_.initial_workers << "\n";
        }
      }
    }
  } catch (...) {
    cleanup();
    abandon();
    throw;
  }

  cleanup();
  if (failure_) {
    abandon();
    events::log("master", "failed", {{"case_id", cfg_.case_id.str()}, {"error", failure_->what()}});
    throw *failure_;
  }
  finish();

  CaseReport report;
  report.case_id = cfg_.case_id;
  report.parts = cfg_.num_parts;
  report.results = done_;
  report.replays = replays_;
  report.elapsed_ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(WallClock::now() - started).count();
  report.output_path = cfg_.output_path.string();
  return report;
}

}  // namespace

CaseReport run_case(const CaseConfig& config, SpaceApi& space) {
  CaseRun run(config, space);
  return run.run();
}

}  // namespace spacefarm
