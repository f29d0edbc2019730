// spacefarm: serve | master | worker | status

#include <signal.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "spacefarm/error.hpp"
#include "spacefarm/master.hpp"
#include "spacefarm/space_service.hpp"
#include "spacefarm/wire.hpp"
#include "spacefarm/worker.hpp"

namespace fs = std::filesystem;
using namespace spacefarm;
using namespace std::chrono_literals;

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeFailure = 1;
constexpr int kUsage = 2;

sigset_t termination_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  return set;
}

// Must run before any thread starts so that every thread inherits the mask.
void block_termination_signals() {
  auto set = termination_signals();
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
}

int wait_for_termination() {
  auto set = termination_signals();
  int sig = 0;
  sigwait(&set, &sig);
  return sig;
}

int serve(const std::string& bind, int sweep_ms) {
  block_termination_signals();
  SpaceServiceOptions opts;
  opts.sweep_period = std::chrono::milliseconds(sweep_ms);
  auto service = std::make_shared<SpaceService>(steady_clock(), opts);
  std::unique_ptr<wire::SpaceServer> server;
  try {
    server = std::make_unique<wire::SpaceServer>(service, bind);
  } catch (const Error& e) {
    std::cerr << "spacefarm serve: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  std::cerr << "listening on " << server->address() << std::endl;
  wait_for_termination();
  service->shutdown();
  std::this_thread::sleep_for(100ms);
  server->stop();
  std::cerr << "stopped" << std::endl;
  return kOk;
}

int master(const std::string& config_path) {
  CaseConfig cfg;
  try {
    cfg = load_case_config(config_path);
  } catch (const Error& e) {
    std::cerr << "spacefarm master: " << e.what() << "\n";
    return kUsage;
  }
  std::unique_ptr<wire::RemoteSpace> space;
  try {
    space = wire::RemoteSpace::connect(cfg.space_address, {.role = "master"});
  } catch (const Error& e) {
    std::cerr << "spacefarm master: SpaceUnreachable: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  try {
    const auto report = run_case(cfg, *space);
    std::cout << to_json(report).dump() << std::endl;
    return kOk;
  } catch (const Error& e) {
    std::cerr << "spacefarm master: " << to_string(e.code()) << ": " << e.what() << "\n";
    return kRuntimeFailure;
  } catch (const std::exception& e) {
    std::cerr << "spacefarm master: " << e.what() << "\n";
    return kRuntimeFailure;
  }
}

int worker(const std::string& address, const std::string& scratch, const std::vector<std::string>& agents) {
  AgentRegistry registry;
  try {
    registry = agents.empty() ? builtin_agents() : builtin_agents().restricted_to(agents);
  } catch (const Error& e) {
    std::cerr << "spacefarm worker: " << e.what() << "\n";
    return kUsage;
  }
  FaultHook fault;
  try {
    fault = fault_hook_from_env();
  } catch (const Error& e) {
    std::cerr << "spacefarm worker: " << e.what() << "\n";
    return kUsage;
  }
  {
    std::error_code ec;
    fs::create_directories(scratch, ec);
    const auto probe = fs::path(scratch) / (".probe-" + std::to_string(::getpid()));
    std::ofstream out(probe);
    if (ec || !out) {
      std::cerr << "spacefarm worker: scratch directory " << scratch << " is not usable\n";
      return kRuntimeFailure;
    }
    out.close();
    fs::remove(probe, ec);
  }

  block_termination_signals();
  std::stop_source stop;
  std::mutex mu;
  std::vector<std::shared_ptr<wire::Session>> sessions;
  std::jthread signals([&] {
    wait_for_termination();
    stop.request_stop();
    std::lock_guard lk(mu);
    for (auto& s : sessions) s->close();
  });

  const auto worker_id = new_entry_id().str();
  auto backoff = 100ms;
  while (!stop.stop_requested()) {
    try {
      auto control_session = wire::Session::connect(address, {.role = "worker"});
      auto agent_session = wire::Session::connect(address, {.role = "agent"});
      {
        std::lock_guard lk(mu);
        sessions = {control_session, agent_session};
        if (stop.stop_requested()) break;
      }
      wire::RemoteSpace control(control_session);
      wire::RemoteSpace agent(agent_session);
      backoff = 100ms;
      WorkerOptions opts;
      opts.scratch = scratch;
      opts.agents = registry;
      opts.fault = fault;
      opts.worker_id = worker_id;
      Worker w(control, agent, std::move(opts));
      std::cerr << "worker " << w.id() << " connected to " << address << std::endl;
      w.run(stop.get_token());
    } catch (const Error& e) {
      if (stop.stop_requested()) break;
      std::cerr << "spacefarm worker: " << e.what() << "; retrying in " << backoff.count() << " ms"
                << std::endl;
    }
    {
      std::lock_guard lk(mu);
      sessions.clear();
    }
    if (stop.stop_requested()) break;
    std::this_thread::sleep_for(backoff);
    backoff = std::min<std::chrono::milliseconds>(backoff * 2, 5s);
  }
  {
    std::lock_guard lk(mu);
    sessions.clear();
  }
  if (!stop.stop_requested()) return kRuntimeFailure;
  // The signal thread is parked in sigwait only if we stopped for another reason.
  signals.detach();
  return kOk;
}

int status(const std::string& address, const std::string& case_id) {
  std::unique_ptr<wire::RemoteSpace> space;
  try {
    space = wire::RemoteSpace::connect(address, {.role = "status", .heartbeat = 0ms});
  } catch (const Error& e) {
    std::cerr << "spacefarm status: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  try {
    const CaseId id(case_id);
    nlohmann::json tasks{{"wait", 0}, {"on", 0}, {"computed", 0}};
    const auto found = space->read(Template::of(EntryKind::kScheduler).where_case(id), std::nullopt, kNoWait);
    if (const auto* s = get_if<SchedulerEntry>(found)) {
      for (const auto& t : s->tasks) {
        switch (t.state) {
          case TaskState::kWaitForComputing:
            tasks["wait"] = tasks["wait"].get<int>() + 1;
            break;
          case TaskState::kOnComputing:
            tasks["on"] = tasks["on"].get<int>() + 1;
            break;
          case TaskState::kComputed:
            tasks["computed"] = tasks["computed"].get<int>() + 1;
            break;
        }
      }
    }
    const auto counts = space->admin_status(id);
    const bool stopped =
        space->read(Template::of(EntryKind::kStop).where_case(id), std::nullopt, kNoWait).has_value();
    nlohmann::json out{{"case_id", case_id},
                       {"tasks", tasks},
                       {"file_entries", counts.value("file_entries", 0)},
                       {"result_entries", counts.value("result_entries", 0)},
                       {"open_txns", counts.value("open_txns", 0)},
                       {"stop", stopped}};
    std::cout << out.dump() << std::endl;
    return kOk;
  } catch (const Error& e) {
    std::cerr << "spacefarm status: " << e.what() << "\n";
    return kRuntimeFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tuple-space compute farm"};
  app.require_subcommand(1);

  std::string bind = "0.0.0.0:7420";
  int sweep_ms = 100;
  auto* serve_cmd = app.add_subcommand("serve", "Run the space and transaction server");
  serve_cmd->add_option("--bind", bind, "host:port to listen on")->capture_default_str();
  serve_cmd->add_option("--txn-sweep-ms", sweep_ms, "Lease expiry sweep period")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  std::string config;
  auto* master_cmd = app.add_subcommand("master", "Run one computation case");
  master_cmd->add_option("--config", config, "Case configuration (JSON)")->required();

  std::string space = "127.0.0.1:7420";
  std::string scratch = (fs::temp_directory_path() / "spacefarm-scratch").string();
  std::vector<std::string> agents;
  auto* worker_cmd = app.add_subcommand("worker", "Run a computing worker");
  worker_cmd->add_option("--space", space, "Space server host:port")->capture_default_str();
  worker_cmd->add_option("--scratch", scratch, "Scratch directory")->capture_default_str();
  worker_cmd->add_option("--agents", agents, "Agents to offer (default: all)")->delimiter(',');

  std::string case_id;
  auto* status_cmd = app.add_subcommand("status", "Print a case snapshot");
  status_cmd->add_option("--space", space, "Space server host:port")->capture_default_str();
  status_cmd->add_option("--case", case_id, "Case id")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  if (*serve_cmd) return serve(bind, sweep_ms);
  if (*master_cmd) return master(config);
  if (*worker_cmd) return worker(space, scratch, agents);
  if (*status_cmd) return status(space, case_id);
  return kUsage;
}
