#include <doctest.h>

#include <random>
#include <set>

#include "oracles.hpp"
#include "spacefarm/entry.hpp"
#include "spacefarm/error.hpp"

using namespace spacefarm;

namespace {

std::string random_bytes(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> byte(0, 255);
  std::string s(n, '\0');
  for (auto& c : s) c = static_cast<char>(byte(rng));
  return s;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kInternal;
}

std::vector<Entry> sample_entries() {
  const CaseId c("case-a");
  ComputingTask t{c, 3, TransactionId::generate(), TaskState::kOnComputing, 17};
  return {
      FileEntry{c, 0, new_entry_id(), encode_payload(std::string_view("part zero"))},
      ResultEntry{c, 5, new_entry_id(), encode_payload(std::string_view("\x00\x01\xff", 3))},
      ConfigurationEntry{c, "bbp-pi", "1", {{"position_guard", "100"}}, 8},
      StopEntry{c},
      SchedulerEntry{c, {t}, std::string(kFifoPolicy)},
      RowEntry{c, 2, 4, "1 2 3 4 5"},
  };
}

}  // namespace

TEST_CASE("payload codec agrees with an independent base64 encoder") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 2000; ++i) {
    const auto bytes = random_bytes(rng, static_cast<std::size_t>(i % 97));
    const auto ours = encode_payload(std::string_view(bytes));
    CHECK(ours == oracle::base64(bytes));
    CHECK(decode_payload_to_string(ours) == bytes);
  }
}

TEST_CASE("payload codec known vectors") {
  CHECK(encode_payload(std::string_view("")) == "");
  CHECK(encode_payload(std::string_view("f")) == "Zg==");
  CHECK(encode_payload(std::string_view("fo")) == "Zm8=");
  CHECK(encode_payload(std::string_view("foo")) == "Zm9v");
  CHECK(encode_payload(std::string_view("foobar")) == "Zm9vYmFy");
}

TEST_CASE("payload decoder rejects malformed text") {
  for (const char* bad : {"Zg=", "Z===", "Zm9v!A==", "Zg==Zg==", "=Zg=", "Zm9"}) {
    CAPTURE(bad);
    CHECK(code_of([&] { decode_payload(bad); }) == ErrorCode::kMalformedPayload);
  }
}

TEST_CASE("entry ids print canonically and parse back") {
  std::set<EntryId> seen;
  for (int i = 0; i < 500; ++i) {
    const auto id = EntryId::generate();
    const auto text = id.str();
    REQUIRE(text.size() == 36);
    CHECK(text[14] == '4');
    CHECK(EntryId::parse(text) == id);
    seen.insert(id);
  }
  CHECK(seen.size() == 500);
  CHECK_FALSE(EntryId::parse("not-an-id").has_value());
  CHECK_FALSE(EntryId::parse("0123456789abcdef0123456789abcdef0123").has_value());
  CHECK(EntryId().is_nil());
}

TEST_CASE("case ids are never empty") {
  CHECK(code_of([] { CaseId(""); }) == ErrorCode::kMalformedEntry);
}

TEST_CASE("task state machine allows exactly W->O, O->C and O->W") {
  const TaskState all[] = {TaskState::kWaitForComputing, TaskState::kOnComputing, TaskState::kComputed};
  for (auto from : all) {
    for (auto to : all) {
      const bool expected = (from == TaskState::kWaitForComputing && to == TaskState::kOnComputing) ||
                            (from == TaskState::kOnComputing && to == TaskState::kComputed) ||
                            (from == TaskState::kOnComputing && to == TaskState::kWaitForComputing);
      CHECK(is_valid_transition(from, to) == expected);
      if (expected) {
        CHECK(transition(from, to) == to);
      } else {
        CHECK(code_of([&] { transition(from, to); }) == ErrorCode::kBadRequest);
      }
    }
    CHECK(task_state_from_string(to_string(from)) == from);
  }
  CHECK(to_string(TaskState::kWaitForComputing) == "WAIT_FOR_COMPUTING");
  CHECK(to_string(TaskState::kOnComputing) == "ON_COMPUTING");
  CHECK(to_string(TaskState::kComputed) == "COMPUTED");
}

TEST_CASE("every entry kind survives a JSON roundtrip") {
  for (const auto& e : sample_entries()) {
    CAPTURE(to_json(e).dump());
    const auto back = entry_from_json(to_json(e));
    CHECK(back == e);
    CHECK(kind_of(back) == kind_of(e));
    CHECK(kind_from_name(kind_name(kind_of(e))) == kind_of(e));
    CHECK(case_of(e).str() == "case-a");
  }
}

TEST_CASE("malformed entry JSON is rejected") {
  CHECK(code_of([] { entry_from_json(nlohmann::json::array()); }) == ErrorCode::kMalformedEntry);
  CHECK(code_of([] { entry_from_json({{"kind", "Nope"}}); }) == ErrorCode::kMalformedEntry);
  auto j = to_json(sample_entries()[0]);
  j.erase("part_index");
  CHECK(code_of([&] { entry_from_json(j); }) == ErrorCode::kMalformedEntry);
  auto k = to_json(sample_entries()[0]);
  k["part_index"] = "three";
  CHECK(code_of([&] { entry_from_json(k); }) == ErrorCode::kMalformedEntry);
}

TEST_CASE("templates match on kind and scalar fields only") {
  const auto entries = sample_entries();
  const FileEntry& f = std::get<FileEntry>(entries[0]);

  CHECK(matches(Template::of(EntryKind::kFile), entries[0]));
  CHECK_FALSE(matches(Template::of(EntryKind::kResult), entries[0]));
  CHECK(matches(Template::of(EntryKind::kFile).where_case(CaseId("case-a")).where("part_index", 0),
                entries[0]));
  CHECK_FALSE(matches(Template::of(EntryKind::kFile).where("part_index", 1), entries[0]));
  CHECK_FALSE(matches(Template::of(EntryKind::kFile).where_case(CaseId("case-b")), entries[0]));
  CHECK(matches(Template::of(EntryKind::kFile).where("entry_id", f.entry_id.str()), entries[0]));
  // Payloads are not matchable, so a constraint on one never matches.
  CHECK_FALSE(matches(Template::of(EntryKind::kFile).where("payload", f.payload), entries[0]));
  // Type mismatch between constraint and field.
  CHECK_FALSE(matches(Template::of(EntryKind::kFile).where("part_index", std::string("0")), entries[0]));
  CHECK(matches(Template::of(EntryKind::kRow).where("matrix_id", 2).where("row_index", 4), entries[5]));
}

TEST_CASE("templates survive a JSON roundtrip") {
  auto t = Template::of(EntryKind::kRow).where_case(CaseId("x")).where("row_index", 3);
  CHECK(template_from_json(to_json(t)) == t);
}

TEST_CASE("scheduler helpers find tasks") {
  SchedulerEntry s{CaseId("c"), {}, std::string(kFifoPolicy)};
  CHECK(s.first_waiting() == nullptr);
  for (int i = 0; i < 3; ++i) {
    s.tasks.push_back({CaseId("c"), i, TransactionId::generate(),
                       i == 0 ? TaskState::kOnComputing : TaskState::kWaitForComputing,
                       static_cast<std::uint64_t>(i)});
  }
  REQUIRE(s.first_waiting() != nullptr);
  CHECK(s.first_waiting()->part_index == 1);
  CHECK(s.find(2)->part_index == 2);
  CHECK(s.find(7) == nullptr);
  const auto t = task_from_json(to_json(s.tasks[1]));
  CHECK(t == s.tasks[1]);
}
