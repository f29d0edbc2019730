#include <doctest.h>

#include <unistd.h>

#include "spacefarm/error.hpp"
#include "spacefarm/harness.hpp"

using namespace spacefarm;
using namespace spacefarm::harness;
using namespace std::chrono_literals;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kInternal;
}

json minimal() {
  return {{"name", "t"},
          {"topology", {{"workers", 2}}},
          {"case",
           {{"case_id", "c"},
            {"agent_id", "echo"},
            {"agent_version", "1"},
            {"initial_workers", 2},
            {"input_text", "abcdefgh"},
            {"cut_strategy", {{"name", "byte_chunk"}}},
            {"num_parts", 4},
            {"task_lease_ms", 1000}}}};
}

json ev(const std::string& source, const std::string& name, std::int64_t part, std::int64_t pid = 1) {
  return {{"source", source}, {"event", name}, {"case_id", "c"}, {"part", part}, {"pid", pid}};
}

}  // namespace

TEST_CASE("scenario parsing fills defaults") {
  const auto s = parse_scenario(minimal());
  CHECK(s.name == "t");
  CHECK(s.workers == 2);
  CHECK(s.input_text == "abcdefgh");
  CHECK_FALSE(s.case_config.contains("input_text"));
  CHECK(s.faults.empty());
  CHECK(s.timeout == 120000ms);
}

TEST_CASE("scenario faults parse targets and triggers") {
  auto j = minimal();
  j["faults"] = json::array({{{"target", 1}, {"trigger", "before-result-write"}, {"action", "kill"}},
                             {{"target", "txn"}, {"at_ms", 500}, {"action", "abort-txn"}}});
  const auto s = parse_scenario(j);
  REQUIRE(s.faults.size() == 2);
  CHECK(s.faults[0].worker == 1);
  CHECK(s.faults[0].trigger == FaultPhase::kBeforeResultWrite);
  CHECK(s.faults[0].action.kind == FaultAction::kKill);
  CHECK(s.faults[1].txn);
  CHECK(s.faults[1].at == 500ms);
}

TEST_CASE("scenario parsing rejects malformed faults") {
  auto unknown_phase = minimal();
  unknown_phase["faults"] = json::array({{{"target", 0}, {"trigger", "during-lunch"}, {"action", "kill"}}});
  CHECK(code_of([&] { parse_scenario(unknown_phase); }) == ErrorCode::kConfigError);

  auto out_of_range = minimal();
  out_of_range["faults"] = json::array({{{"target", 2}, {"trigger", "after-claim"}, {"action", "kill"}}});
  CHECK(code_of([&] { parse_scenario(out_of_range); }) == ErrorCode::kConfigError);

  auto bad_target = minimal();
  bad_target["faults"] = json::array({{{"target", "space"}, {"at_ms", 1}, {"action", "kill"}}});
  CHECK(code_of([&] { parse_scenario(bad_target); }) == ErrorCode::kConfigError);

  auto txn_kill = minimal();
  txn_kill["faults"] = json::array({{{"target", "txn"}, {"at_ms", 1}, {"action", "kill"}}});
  CHECK(code_of([&] { parse_scenario(txn_kill); }) == ErrorCode::kConfigError);

  auto no_when = minimal();
  no_when["faults"] = json::array({{{"target", 0}, {"action", "kill"}}});
  CHECK(code_of([&] { parse_scenario(no_when); }) == ErrorCode::kConfigError);

  auto no_case = minimal();
  no_case.erase("case");
  CHECK(code_of([&] { parse_scenario(no_case); }) == ErrorCode::kConfigError);
  CHECK(code_of([] { load_scenario("/nonexistent/scenario.json"); }) == ErrorCode::kConfigError);
}

TEST_CASE("shipped scenarios all parse") {
  int n = 0;
  for (const auto& e : fs::directory_iterator(SPACEFARM_SCENARIOS)) {
    if (e.path().extension() != ".json") continue;
    CAPTURE(e.path().string());
    CHECK_NOTHROW(load_scenario(e.path()));
    ++n;
  }
  CHECK(n >= 10);
}

TEST_CASE("exactly-once tally over a clean run") {
  std::vector<json> events;
  for (int p = 0; p < 8; ++p) {
    events.push_back(ev("worker", "executed", p, 10 + p % 3));
    events.push_back(ev("master", "committed", p));
  }
  const auto t = check_exactly_once(events, "c", 8);
  CHECK(t.exactly_once);
  CHECK(t.aborted_attempts == 0);
  CHECK(t.executed_by_worker.size() == 3);
}

TEST_CASE("exactly-once tally over a kill and replay") {
  std::vector<json> events;
  events.push_back(ev("worker", "claimed", 2, 10));
  events.push_back(ev("master", "abort", 2));
  for (int p = 0; p < 8; ++p) events.push_back(ev("master", "committed", p));
  auto other = ev("master", "committed", 2);
  other["case_id"] = "other-case";
  events.push_back(other);
  const auto t = check_exactly_once(events, "c", 8);
  CHECK(t.exactly_once);
  CHECK(t.aborted_attempts >= 1);
}

TEST_CASE("exactly-once tally catches duplicates and gaps") {
  std::vector<json> events;
  for (int p = 0; p < 8; ++p) events.push_back(ev("master", "committed", p));
  events.push_back(ev("master", "committed", 3));
  CHECK_FALSE(check_exactly_once(events, "c", 8).exactly_once);

  events.pop_back();
  events.erase(events.begin() + 5);
  CHECK_FALSE(check_exactly_once(events, "c", 8).exactly_once);

  events.push_back(ev("master", "committed", 5));
  events.push_back(ev("master", "committed", 8));
  CHECK_FALSE(check_exactly_once(events, "c", 8).exactly_once);
}

TEST_CASE("a small scenario runs end to end across processes") {
  const auto dir = fs::temp_directory_path() / ("spacefarm-harness-test-" + std::to_string(::getpid()));
  auto j = minimal();
  j["assertions"] = json::array({"completed", "exactly_once", "no_replays",
                                 {{"name", "output_equals_text"}, {"text", "abcdefgh"}}, "space_clean"});
  j["timeout_ms"] = 60000;
  const auto report = run_scenario(parse_scenario(j), {SPACEFARM_BIN, dir});
  CAPTURE(report.dump(2));
  CHECK(report["passed"] == true);
  CHECK(report["master_exit"] == 0);
  std::error_code ec;
  fs::remove_all(dir, ec);
}
