#include "spacefarm/harness.hpp"

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <regex>
#include <thread>

#include "spacefarm/error.hpp"
#include "spacefarm/event_log.hpp"
#include "spacefarm/wire.hpp"

extern char** environ;

namespace spacefarm::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace std::chrono_literals;
using SteadyClock = std::chrono::steady_clock;

namespace {

[[noreturn]] void bad(const std::string& msg) { fail(ErrorCode::kConfigError, "scenario: " + msg); }

FaultAction parse_action(const json& f) {
  const auto name = f.value("action", std::string{});
  FaultAction a;
  if (name == "kill") {
    a.kind = FaultAction::kKill;
  } else if (name == "pause") {
    a.kind = FaultAction::kPause;
    a.pause = std::chrono::milliseconds(f.value("ms", std::int64_t{1000}));
  } else if (name == "abort-txn") {
    a.kind = FaultAction::kAbortTxn;
  } else {
    bad("unknown fault action '" + name + "'");
  }
  return a;
}

std::string action_name(const FaultAction& a) {
  switch (a.kind) {
    case FaultAction::kKill:
      return "kill";
    case FaultAction::kPause:
      return "pause:" + std::to_string(a.pause.count());
    case FaultAction::kAbortTxn:
      return "abort-txn";
  }
  return "kill";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct Child {
  pid_t pid = -1;
  bool running = false;
  int status = 0;

  bool poll() {
    if (!running) return false;
    int st = 0;
    if (::waitpid(pid, &st, WNOHANG) == pid) {
      running = false;
      status = st;
    }
    return running;
  }
  int exit_code() const {
    if (WIFEXITED(status)) return WEXITSTATUS(status);
    return 128 + (WIFSIGNALED(status) ? WTERMSIG(status) : 0);
  }
  void signal(int sig) const {
    if (running) ::kill(pid, sig);
  }
  bool wait_for(std::chrono::milliseconds limit) {
    const auto until = SteadyClock::now() + limit;
    while (poll() && SteadyClock::now() < until) std::this_thread::sleep_for(10ms);
    return !running;
  }
  void terminate() {
    if (!running) return;
    signal(SIGTERM);
    if (!wait_for(3s)) {
      signal(SIGKILL);
      wait_for(5s);
    }
  }
};

Child spawn(const std::vector<std::string>& args, const std::map<std::string, std::string>& env,
            const fs::path& out, const fs::path& err) {
  std::vector<std::string> env_store;
  for (char** e = environ; *e; ++e) {
    std::string kv(*e);
    const auto key = kv.substr(0, kv.find('='));
    if (!env.count(key)) env_store.push_back(std::move(kv));
  }
  for (const auto& [k, v] : env) env_store.push_back(k + "=" + v);
  std::vector<char*> envp;
  for (auto& s : env_store) envp.push_back(s.data());
  envp.push_back(nullptr);
  std::vector<std::string> arg_store = args;
  std::vector<char*> argv;
  for (auto& s : arg_store) argv.push_back(s.data());
  argv.push_back(nullptr);

  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_addopen(&fa, 0, "/dev/null", O_RDONLY, 0);
  posix_spawn_file_actions_addopen(&fa, 1, out.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  posix_spawn_file_actions_addopen(&fa, 2, err.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  Child c;
  const int rc = posix_spawn(&c.pid, argv[0], &fa, nullptr, argv.data(), envp.data());
  posix_spawn_file_actions_destroy(&fa);
  if (rc != 0) fail(ErrorCode::kInternal, "cannot start " + args[0] + ": " + std::strerror(rc));
  c.running = true;
  return c;
}

std::int64_t event_time(const json& e) { return e.value("t_ms", std::int64_t{0}); }

}  // namespace

Scenario parse_scenario(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) bad("must be a JSON object");
  Scenario s;
  s.name = j.value("name", std::string("unnamed"));
  const auto topo = j.value("topology", json::object());
  s.workers = topo.value("workers", 1);
  if (s.workers < 0) bad("workers must be >= 0");
  const auto offsets = topo.value("start_offsets_ms", json::array());
  for (int i = 0; i < s.workers; ++i) {
    s.start_offsets.emplace_back(i < static_cast<int>(offsets.size()) ? offsets[i].get<std::int64_t>()
                                                                      : 0);
  }
  const auto agents = topo.value("agents", json::array());
  for (int i = 0; i < s.workers; ++i) {
    std::vector<std::string> list;
    if (i < static_cast<int>(agents.size()) && agents[i].is_array()) {
      for (const auto& a : agents[i]) list.push_back(a.get<std::string>());
    }
    s.worker_agents.push_back(std::move(list));
  }
  s.master_offset = std::chrono::milliseconds(j.value("master_offset_ms", std::int64_t{0}));
  if (!j.contains("case") || !j["case"].is_object()) bad("missing 'case' object");
  s.case_config = j["case"];
  if (auto it = s.case_config.find("input_text"); it != s.case_config.end()) {
    s.input_text = it->get<std::string>();
    s.case_config.erase("input_text");
  } else if (auto p = s.case_config.find("input_path"); p != s.case_config.end() && p->is_string()) {
    fs::path in = p->get<std::string>();
    if (in.is_relative() && !base_dir.empty()) *p = (base_dir / in).string();
  }
  for (const auto& f : j.value("faults", json::array())) {
    FaultSpec fs_;
    if (f.contains("target") && f["target"].is_number_integer()) {
      fs_.worker = f["target"].get<int>();
      if (*fs_.worker < 0 || *fs_.worker >= s.workers) bad("fault target out of range");
    } else if (f.value("target", std::string{}) == "txn") {
      fs_.txn = true;
    } else {
      bad("fault target must be a worker index or \"txn\"");
    }
    if (f.contains("trigger")) {
      const auto name = f["trigger"].get<std::string>();
      fs_.trigger = fault_phase_from_string(name);
      if (!fs_.trigger) bad("unknown phase marker '" + name + "'");
      if (fs_.txn) bad("phase triggers need a worker target");
    } else if (f.contains("at_ms")) {
      fs_.at = std::chrono::milliseconds(f["at_ms"].get<std::int64_t>());
    } else {
      bad("fault needs a trigger or at_ms");
    }
    fs_.action = parse_action(f);
    if (fs_.txn && fs_.action.kind != FaultAction::kAbortTxn) bad("txn faults only abort");
    s.faults.push_back(fs_);
  }
  if (j.contains("assertions")) s.assertions = j["assertions"];
  if (!s.assertions.is_array()) bad("assertions must be an array");
  s.timeout = std::chrono::milliseconds(j.value("timeout_ms", std::int64_t{120000}));
  return s;
}

Scenario load_scenario(const fs::path& path) {
  std::ifstream in(path);
  if (!in) bad("cannot read " + path.string());
  auto j = json::parse(in, nullptr, false);
  if (j.is_discarded()) bad(path.string() + " is not valid JSON");
  return parse_scenario(j, path.parent_path());
}

ExecutionTally check_exactly_once(const std::vector<json>& events, const std::string& case_id,
                                  std::int64_t num_parts) {
  ExecutionTally t;
  for (const auto& e : events) {
    if (e.value("case_id", std::string{}) != case_id) continue;
    const auto source = e.value("source", std::string{});
    const auto name = e.value("event", std::string{});
    if (source == "master" && name == "committed") {
      ++t.commits[e.value("part", std::int64_t{-1})];
    } else if (source == "master" && name == "abort") {
      ++t.aborted_attempts;
    } else if (source == "worker" && name == "executed") {
      ++t.executed_by_worker[std::to_string(e.value("pid", std::int64_t{0}))];
    }
  }
  t.exactly_once = static_cast<std::int64_t>(t.commits.size()) == num_parts;
  for (const auto& [part, n] : t.commits) {
    if (part < 0 || part >= num_parts || n != 1) t.exactly_once = false;
  }
  return t;
}

json run_scenario(const Scenario& sc, const RunOptions& opt) {
  const auto dir = fs::absolute(opt.artifacts_dir);
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto bin = fs::absolute(opt.spacefarm_binary).string();
  const auto event_log = (dir / "events.jsonl").string();

  Child server = spawn({bin, "serve", "--bind", "127.0.0.1:0"}, {}, dir / "server.out",
                       dir / "server.log");
  std::string address;
  {
    const std::regex re(R"(listening on (\S+))");
    const auto until = SteadyClock::now() + 10s;
    while (address.empty() && SteadyClock::now() < until && server.poll()) {
      std::smatch m;
      const auto text = slurp(dir / "server.log");
      if (std::regex_search(text, m, re)) address = m[1];
      else std::this_thread::sleep_for(10ms);
    }
    if (address.empty()) {
      server.terminate();
      fail(ErrorCode::kInternal, "space server did not start: " + slurp(dir / "server.log"));
    }
  }

  json cfg = sc.case_config;
  cfg["space_address"] = address;
  if (sc.input_text) {
    std::ofstream(dir / "input.txt", std::ios::binary) << *sc.input_text;
    cfg["input_path"] = (dir / "input.txt").string();
  }
  cfg["output_path"] = (dir / "output.bin").string();
  cfg["tmp_dir"] = (dir / "tmp").string();
  cfg["results_dir"] = (dir / "results").string();
  std::ofstream(dir / "case.json") << cfg.dump(2);
  const auto case_id = cfg.value("case_id", std::string{});
  const auto num_parts = cfg.value("num_parts", std::int64_t{0});
  const auto lease_ms = cfg.value("task_lease_ms", std::int64_t{0});

  std::vector<Child> workers(static_cast<std::size_t>(sc.workers));
  std::vector<bool> started(workers.size(), false);
  std::map<pid_t, int> worker_index;
  Child master;
  bool master_started = false;
  std::vector<bool> fault_done(sc.faults.size(), false);
  std::vector<std::pair<SteadyClock::time_point, int>> resume;  // pending SIGCONT
  std::unique_ptr<wire::RemoteSpace> probe;

  auto start_worker = [&](int i) {
    std::map<std::string, std::string> env{{"SPACEFARM_EVENT_LOG", event_log}};
    for (std::size_t k = 0; k < sc.faults.size(); ++k) {
      const auto& f = sc.faults[k];
      if (f.worker == i && f.trigger) {
        env["SPACEFARM_FAULT"] = std::string(to_string(*f.trigger)) + ":" + action_name(f.action);
        env["SPACEFARM_FAULT_ONCE"] = (dir / ("fault-" + std::to_string(k) + ".marker")).string();
      }
    }
    std::vector<std::string> args{bin, "worker", "--space", address, "--scratch",
                                  (dir / "scratch").string()};
    const auto& agents = sc.worker_agents[static_cast<std::size_t>(i)];
    if (!agents.empty()) {
      std::string list;
      for (const auto& a : agents) list += (list.empty() ? "" : ",") + a;
      args.insert(args.end(), {"--agents", list});
    }
    const auto tag = "worker-" + std::to_string(i);
    workers[static_cast<std::size_t>(i)] = spawn(args, env, dir / (tag + ".out"), dir / (tag + ".log"));
    worker_index[workers[static_cast<std::size_t>(i)].pid] = i;
    started[static_cast<std::size_t>(i)] = true;
  };

  auto harness_log = [&](const std::string& event, json fields) {
    fields["t_ms"] = events::wall_ms();
    fields["source"] = "harness";
    fields["event"] = event;
    fields["case_id"] = case_id;
    std::ofstream(event_log, std::ios::app) << fields.dump() << "\n";
  };

  auto apply_timed = [&](const FaultSpec& f) {
    if (f.txn) {
      if (!probe) probe = wire::RemoteSpace::connect(address);
      auto found = probe->read(Template::of(EntryKind::kScheduler).where_case(CaseId(case_id)),
                               std::nullopt, kNoWait);
      if (const auto* s = get_if<SchedulerEntry>(found)) {
        for (const auto& t : s->tasks) {
          if (t.state == TaskState::kOnComputing) {
            try {
              probe->txn_abort(t.txn_id);
            } catch (const Error&) {
            }
            harness_log("fault", {{"action", "abort-txn"}, {"part", t.part_index}, {"txn", t.txn_id.str()}});
            break;
          }
        }
      }
      return;
    }
    auto& w = workers[static_cast<std::size_t>(*f.worker)];
    if (!w.running) return;
    if (f.action.kind == FaultAction::kKill) {
      w.signal(SIGKILL);
      harness_log("fault", {{"action", "kill"}, {"worker", *f.worker}, {"pid", w.pid}});
    } else if (f.action.kind == FaultAction::kPause) {
      w.signal(SIGSTOP);
      resume.emplace_back(SteadyClock::now() + f.action.pause, *f.worker);
      harness_log("fault", {{"action", "pause"}, {"worker", *f.worker}, {"pid", w.pid}});
    }
  };

  const auto t0 = SteadyClock::now();
  bool timed_out = false;
  try {
    while (true) {
      const auto now = SteadyClock::now();
      const auto elapsed = now - t0;
      for (int i = 0; i < sc.workers; ++i) {
        if (!started[static_cast<std::size_t>(i)] && elapsed >= sc.start_offsets[static_cast<std::size_t>(i)]) {
          start_worker(i);
        }
      }
      if (!master_started && elapsed >= sc.master_offset) {
        master = spawn({bin, "master", "--config", (dir / "case.json").string()},
                       {{"SPACEFARM_EVENT_LOG", event_log}}, dir / "master.out", dir / "master.log");
        master_started = true;
      }
      for (std::size_t k = 0; k < sc.faults.size(); ++k) {
        const auto& f = sc.faults[k];
        if (!fault_done[k] && f.at && elapsed >= *f.at) {
          fault_done[k] = true;
          apply_timed(f);
        }
      }
      for (auto it = resume.begin(); it != resume.end();) {
        if (now >= it->first) {
          workers[static_cast<std::size_t>(it->second)].signal(SIGCONT);
          it = resume.erase(it);
        } else {
          ++it;
        }
      }
      for (auto& w : workers) w.poll();
      if (master_started && !master.poll()) break;
      if (elapsed > sc.timeout) {
        timed_out = true;
        master.signal(SIGKILL);
        master.wait_for(5s);
        break;
      }
      std::this_thread::sleep_for(5ms);
    }
  } catch (...) {
    master.terminate();
    for (auto& w : workers) w.terminate();
    server.terminate();
    throw;
  }
  for (auto& [when, idx] : resume) workers[static_cast<std::size_t>(idx)].signal(SIGCONT);

  json report = nullptr;
  {
    auto j = json::parse(slurp(dir / "master.out"), nullptr, false);
    if (!j.is_discarded() && j.is_object()) report = j;
  }
  json space_final = nullptr;
  try {
    if (!probe) probe = wire::RemoteSpace::connect(address);
    space_final = probe->admin_status(CaseId(case_id.empty() ? "-" : case_id));
    std::ofstream(dir / "space-final.json") << space_final.dump(2);
  } catch (const std::exception&) {
  }
  probe.reset();
  for (auto& w : workers) w.terminate();
  server.signal(SIGINT);
  if (!server.wait_for(5s)) server.terminate();

  const auto events_list = events::read_all(event_log);
  const auto tally = check_exactly_once(events_list, case_id, num_parts);
  const int master_exit = master_started ? master.exit_code() : -1;
  const std::string output = slurp(dir / "output.bin");

  json results = json::array();
  bool all = !timed_out;
  for (const auto& a : sc.assertions) {
    const auto name = a.is_string() ? a.get<std::string>() : a.value("name", std::string{});
    bool ok = false;
    std::string detail;
    const auto value = a.is_object() ? a.value("value", std::int64_t{0}) : 0;
    const auto replays = report.is_object() ? report.value("replays", std::int64_t{-1}) : -1;
    if (name == "completed") {
      ok = master_exit == 0 && report.is_object() && report.value("results", -1) == num_parts;
      detail = "master exit " + std::to_string(master_exit);
    } else if (name == "failed") {
      ok = master_exit == 1;
      detail = "master exit " + std::to_string(master_exit);
    } else if (name == "exactly_once") {
      ok = tally.exactly_once;
      detail = std::to_string(tally.commits.size()) + " parts committed";
    } else if (name == "no_replays") {
      ok = replays == 0;
      detail = "replays " + std::to_string(replays);
    } else if (name == "replays_at_least") {
      ok = replays >= value;
      detail = "replays " + std::to_string(replays);
    } else if (name == "executions_total") {
      int n = 0;
      for (const auto& [w, c] : tally.executed_by_worker) n += c;
      ok = n == value;
      detail = std::to_string(n) + " executions";
    } else if (name == "late_joiner_executed") {
      const int idx = a.value("worker", 0);
      int n = 0;
      for (const auto& [pid, i] : worker_index) {
        if (i == idx) {
          auto it = tally.executed_by_worker.find(std::to_string(pid));
          if (it != tally.executed_by_worker.end()) n += it->second;
        }
      }
      ok = n >= 1;
      detail = "worker " + std::to_string(idx) + " executed " + std::to_string(n);
    } else if (name == "output_equals_text") {
      ok = output == a.value("text", std::string{});
      detail = "output has " + std::to_string(output.size()) + " bytes";
    } else if (name == "output_equals_file") {
      fs::path p = a.value("path", std::string{});
      ok = fs::exists(p) && output == slurp(p);
      detail = "compared with " + p.string();
    } else if (name == "space_clean") {
      ok = space_final.is_object() && space_final.value("file_entries", -1) == 0 &&
           space_final.value("result_entries", -1) == 0 && space_final.value("open_txns", -1) == 0;
      detail = space_final.dump();
    } else if (name == "fault_fired") {
      ok = std::any_of(events_list.begin(), events_list.end(), [](const json& e) {
        return e.value("event", std::string{}) == "fault";
      });
    } else if (name == "recovery_within_ms") {
      // Fault to the master's abort of the part it hit.
      const auto limit = value > 0 ? value : 2 * lease_ms;
      std::int64_t worst = -1;
      bool any = false;
      for (const auto& f : events_list) {
        if (f.value("event", std::string{}) != "fault") continue;
        const auto t = event_time(f);
        const auto part = f.value("part", std::int64_t{-1});
        std::int64_t found = -1;
        for (const auto& e : events_list) {
          if (e.value("source", std::string{}) == "master" && e.value("event", std::string{}) == "abort" &&
              event_time(e) >= t && (part < 0 || e.value("part", std::int64_t{-1}) == part)) {
            found = event_time(e) - t;
            break;
          }
        }
        any = true;
        worst = found < 0 ? std::numeric_limits<std::int64_t>::max() : std::max(worst, found);
      }
      ok = any && worst <= limit;
      detail = "worst recovery " + std::to_string(worst) + " ms, limit " + std::to_string(limit);
    } else {
      detail = "unknown assertion";
    }
    all = all && ok;
    results.push_back({{"name", name}, {"passed", ok}, {"detail", detail}});
  }

  json commits = json::object();
  for (const auto& [p, n] : tally.commits) commits[std::to_string(p)] = n;
  json out{{"name", sc.name},
           {"passed", all},
           {"timed_out", timed_out},
           {"master_exit", master_exit},
           {"case_report", report},
           {"tally",
            {{"exactly_once", tally.exactly_once},
             {"commits", commits},
             {"aborted_attempts", tally.aborted_attempts},
             {"executed_by_worker", tally.executed_by_worker}}},
           {"assertions", results},
           {"artifacts", dir.string()}};
  std::ofstream(dir / "report.json") << out.dump(2);
  return out;
}

}  // namespace spacefarm::harness
