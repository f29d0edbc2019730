#include "spacefarm/entry.hpp"

#include <random>

#include "spacefarm/error.hpp"

namespace spacefarm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Base64

namespace {

constexpr std::string_view kAlphabet =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

constexpr std::array<std::int8_t, 256> make_decode_table() {
  std::array<std::int8_t, 256> table{};
  for (auto& v : table) v = -1;
  for (std::size_t i = 0; i < kAlphabet.size(); ++i) {
    table[static_cast<unsigned char>(kAlphabet[i])] = static_cast<std::int8_t>(i);
  }
  return table;
}

constexpr auto kDecodeTable = make_decode_table();

}  // namespace

std::string encode_payload(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= bytes.size(); i += 3) {
    const std::uint32_t n = (std::uint32_t{bytes[i]} << 16) |
                            (std::uint32_t{bytes[i + 1]} << 8) | bytes[i + 2];
    out.push_back(kAlphabet[(n >> 18) & 63]);
    out.push_back(kAlphabet[(n >> 12) & 63]);
    out.push_back(kAlphabet[(n >> 6) & 63]);
    out.push_back(kAlphabet[n & 63]);
  }
  const std::size_t rest = bytes.size() - i;
  if (rest == 1) {
    const std::uint32_t n = std::uint32_t{bytes[i]} << 16;
    out.push_back(kAlphabet[(n >> 18) & 63]);
    out.push_back(kAlphabet[(n >> 12) & 63]);
    out.append("==");
  } else if (rest == 2) {
    const std::uint32_t n = (std::uint32_t{bytes[i]} << 16) | (std::uint32_t{bytes[i + 1]} << 8);
    out.push_back(kAlphabet[(n >> 18) & 63]);
    out.push_back(kAlphabet[(n >> 12) & 63]);
    out.push_back(kAlphabet[(n >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

std::string encode_payload(std::string_view bytes) {
  return encode_payload(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

std::vector<std::uint8_t> decode_payload(std::string_view text) {
  if (text.size() % 4 != 0) {
    fail(ErrorCode::kMalformedPayload, "base64 length is not a multiple of 4");
  }
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const bool last = i + 4 == text.size();
    std::size_t pad = 0;
    if (last && text[i + 3] == '=') pad = text[i + 2] == '=' ? 2 : 1;
    std::uint32_t n = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (k >= 4 - pad) {
        n <<= 6;
        continue;
      }
      const auto v = kDecodeTable[static_cast<unsigned char>(c)];
      if (v < 0) {
        fail(ErrorCode::kMalformedPayload,
             c == '=' ? "bad base64 padding" : "illegal base64 character");
      }
      n = (n << 6) | static_cast<std::uint32_t>(v);
    }
    // Non-canonical trailing bits are rejected so that decoding is injective.
    if ((pad == 1 && (n & 0xFF) != 0) || (pad == 2 && (n & 0xFFFF) != 0)) {
      fail(ErrorCode::kMalformedPayload, "non-zero base64 padding bits");
    }
    out.push_back(static_cast<std::uint8_t>(n >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(n >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(n));
  }
  return out;
}

std::string decode_payload_to_string(std::string_view text) {
  auto bytes = decode_payload(text);
  return {bytes.begin(), bytes.end()};
}

// ---------------------------------------------------------------------------
// Identifiers

EntryId EntryId::generate() {
  thread_local std::mt19937_64 rng{[] {
    std::random_device rd;
    std::seed_seq seq{rd(), rd(), rd(), rd(), rd(), rd(), rd(), rd()};
    return std::mt19937_64(seq);
  }()};
  std::array<std::uint8_t, 16> bytes{};
  const std::uint64_t hi = rng();
  const std::uint64_t lo = rng();
  for (int i = 0; i < 8; ++i) {
    bytes[i] = static_cast<std::uint8_t>(hi >> (56 - 8 * i));
    bytes[8 + i] = static_cast<std::uint8_t>(lo >> (56 - 8 * i));
  }
  bytes[6] = static_cast<std::uint8_t>((bytes[6] & 0x0F) | 0x40);  // version 4
  bytes[8] = static_cast<std::uint8_t>((bytes[8] & 0x3F) | 0x80);  // RFC 4122 variant
  return EntryId(bytes);
}

std::optional<EntryId> EntryId::parse(std::string_view text) {
  if (text.size() != 36) return std::nullopt;
  std::array<std::uint8_t, 16> bytes{};
  std::size_t out = 0;
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  for (std::size_t i = 0; i < 36;) {
    if (i == 8 || i == 13 || i == 18 || i == 23) {
      if (text[i] != '-') return std::nullopt;
      ++i;
      continue;
    }
    const int h = nibble(text[i]);
    const int l = nibble(text[i + 1]);
    if (h < 0 || l < 0) return std::nullopt;
    bytes[out++] = static_cast<std::uint8_t>((h << 4) | l);
    i += 2;
  }
  return EntryId(bytes);
}

std::string EntryId::str() const {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(36);
  for (std::size_t i = 0; i < 16; ++i) {
    if (i == 4 || i == 6 || i == 8 || i == 10) out.push_back('-');
    out.push_back(kHex[bytes_[i] >> 4]);
    out.push_back(kHex[bytes_[i] & 0xF]);
  }
  return out;
}

bool EntryId::is_nil() const {
  for (auto b : bytes_) {
    if (b != 0) return false;
  }
  return true;
}

std::optional<TransactionId> TransactionId::parse(std::string_view text) {
  auto id = EntryId::parse(text);
  if (!id) return std::nullopt;
  return TransactionId{*id};
}

CaseId::CaseId(std::string value) : value_(std::move(value)) {
  if (value_.empty()) fail(ErrorCode::kMalformedEntry, "case id must not be empty");
}

// ---------------------------------------------------------------------------
// State machines

std::string_view to_string(TaskState state) {
  switch (state) {
    case TaskState::kWaitForComputing: return "WAIT_FOR_COMPUTING";
    case TaskState::kOnComputing: return "ON_COMPUTING";
    case TaskState::kComputed: return "COMPUTED";
  }
  return "?";
}

std::string_view to_string(WorkerState state) {
  return state == WorkerState::kWaitForComputing ? "WAIT_FOR_COMPUTING" : "ON_COMPUTING";
}

std::optional<TaskState> task_state_from_string(std::string_view text) {
  if (text == "WAIT_FOR_COMPUTING") return TaskState::kWaitForComputing;
  if (text == "ON_COMPUTING") return TaskState::kOnComputing;
  if (text == "COMPUTED") return TaskState::kComputed;
  return std::nullopt;
}

bool is_valid_transition(TaskState from, TaskState to) {
  using enum TaskState;
  return (from == kWaitForComputing && to == kOnComputing) ||
         (from == kOnComputing && to == kComputed) ||
         (from == kOnComputing && to == kWaitForComputing);
}

TaskState transition(TaskState from, TaskState to) {
  if (!is_valid_transition(from, to)) {
    fail(ErrorCode::kBadRequest, "illegal task transition " + std::string(to_string(from)) +
                                     " -> " + std::string(to_string(to)));
  }
  return to;
}

ComputingTask* SchedulerEntry::first_waiting() {
  for (auto& t : tasks) {
    if (t.state == TaskState::kWaitForComputing) return &t;
  }
  return nullptr;
}

const ComputingTask* SchedulerEntry::first_waiting() const {
  return const_cast<SchedulerEntry*>(this)->first_waiting();
}

ComputingTask* SchedulerEntry::find(std::int64_t part_index) {
  for (auto& t : tasks) {
    if (t.part_index == part_index) return &t;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Kinds and fields

EntryKind kind_of(const Entry& entry) { return static_cast<EntryKind>(entry.index()); }

std::string_view kind_name(EntryKind kind) {
  switch (kind) {
    case EntryKind::kFile: return "FileEntry";
    case EntryKind::kResult: return "ResultEntry";
    case EntryKind::kConfiguration: return "ConfigurationEntry";
    case EntryKind::kStop: return "StopEntry";
    case EntryKind::kScheduler: return "SchedulerEntry";
    case EntryKind::kRow: return "RowEntry";
  }
  return "?";
}

std::optional<EntryKind> kind_from_name(std::string_view name) {
  for (int k = 0; k <= static_cast<int>(EntryKind::kRow); ++k) {
    if (kind_name(static_cast<EntryKind>(k)) == name) return static_cast<EntryKind>(k);
  }
  return std::nullopt;
}

const CaseId& case_of(const Entry& entry) {
  return std::visit([](const auto& e) -> const CaseId& { return e.case_id; }, entry);
}

namespace {

template <typename... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <typename... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

}  // namespace

std::optional<FieldValue> field_value(const Entry& entry, std::string_view field) {
  if (field == "case_id") return case_of(entry).str();
  return std::visit(
      Overloaded{
          [&](const FileEntry& e) -> std::optional<FieldValue> {
            if (field == "part_index") return e.part_index;
            if (field == "entry_id") return e.entry_id.str();
            return std::nullopt;
          },
          [&](const ResultEntry& e) -> std::optional<FieldValue> {
            if (field == "part_index") return e.part_index;
            if (field == "entry_id") return e.entry_id.str();
            return std::nullopt;
          },
          [&](const ConfigurationEntry& e) -> std::optional<FieldValue> {
            if (field == "agent_id") return e.agent_id;
            if (field == "agent_version") return e.agent_version;
            if (field == "num_parts") return e.num_parts;
            return std::nullopt;
          },
          [&](const StopEntry&) -> std::optional<FieldValue> { return std::nullopt; },
          [&](const SchedulerEntry& e) -> std::optional<FieldValue> {
            if (field == "policy") return e.policy;
            return std::nullopt;
          },
          [&](const RowEntry& e) -> std::optional<FieldValue> {
            if (field == "matrix_id") return e.matrix_id;
            if (field == "row_index") return e.row_index;
            return std::nullopt;
          },
      },
      entry);
}

bool matches(const Template& tmpl, const Entry& entry) {
  if (kind_of(entry) != tmpl.kind) return false;
  for (const auto& [field, expected] : tmpl.constraints) {
    auto actual = field_value(entry, field);
    if (!actual || *actual != expected) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

[[noreturn]] void malformed(const std::string& what) { fail(ErrorCode::kMalformedEntry, what); }

const json& member(const json& j, const char* key) {
  if (!j.is_object()) malformed("expected a JSON object");
  auto it = j.find(key);
  if (it == j.end()) malformed(std::string("missing field '") + key + "'");
  return *it;
}

std::string get_string(const json& j, const char* key) {
  const auto& v = member(j, key);
  if (!v.is_string()) malformed(std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

std::int64_t get_int(const json& j, const char* key) {
  const auto& v = member(j, key);
  if (!v.is_number_integer()) malformed(std::string("field '") + key + "' must be an integer");
  return v.get<std::int64_t>();
}

CaseId get_case(const json& j) {
  auto s = get_string(j, "case_id");
  if (s.empty()) malformed("case_id must not be empty");
  return CaseId(std::move(s));
}

EntryId get_id(const json& j, const char* key) {
  auto id = EntryId::parse(get_string(j, key));
  if (!id) malformed(std::string("field '") + key + "' is not a canonical UUID");
  return *id;
}

}  // namespace

json to_json(const ComputingTask& task) {
  return json{{"case_id", task.case_id.str()},
              {"part_index", task.part_index},
              {"txn_id", task.txn_id.str()},
              {"state", to_string(task.state)},
              {"enqueued_at", task.enqueued_at}};
}

ComputingTask task_from_json(const json& j) {
  ComputingTask t;
  t.case_id = get_case(j);
  t.part_index = get_int(j, "part_index");
  t.txn_id = TransactionId{get_id(j, "txn_id")};
  auto state = task_state_from_string(get_string(j, "state"));
  if (!state) malformed("unknown task state");
  t.state = *state;
  const auto& seq = member(j, "enqueued_at");
  if (!seq.is_number_unsigned() && !seq.is_number_integer()) malformed("bad enqueued_at");
  t.enqueued_at = seq.get<std::uint64_t>();
  return t;
}

json to_json(const Entry& entry) {
  json j = std::visit(
      Overloaded{
          [](const FileEntry& e) {
            return json{{"case_id", e.case_id.str()}, {"part_index", e.part_index},
                        {"entry_id", e.entry_id.str()}, {"payload", e.payload}};
          },
          [](const ResultEntry& e) {
            return json{{"case_id", e.case_id.str()}, {"part_index", e.part_index},
                        {"entry_id", e.entry_id.str()}, {"payload", e.payload}};
          },
          [](const ConfigurationEntry& e) {
            return json{{"case_id", e.case_id.str()},       {"agent_id", e.agent_id},
                        {"agent_version", e.agent_version}, {"agent_params", e.agent_params},
                        {"num_parts", e.num_parts}};
          },
          [](const StopEntry& e) { return json{{"case_id", e.case_id.str()}}; },
          [](const SchedulerEntry& e) {
            json tasks = json::array();
            for (const auto& t : e.tasks) tasks.push_back(to_json(t));
            return json{{"case_id", e.case_id.str()}, {"policy", e.policy}, {"tasks", tasks}};
          },
          [](const RowEntry& e) {
            return json{{"case_id", e.case_id.str()}, {"matrix_id", e.matrix_id},
                        {"row_index", e.row_index}, {"values", e.values}};
          },
      },
      entry);
  j["kind"] = kind_name(kind_of(entry));
  return j;
}

Entry entry_from_json(const json& j) {
  auto kind = kind_from_name(get_string(j, "kind"));
  if (!kind) malformed("unknown entry kind");
  switch (*kind) {
    case EntryKind::kFile:
      return FileEntry{get_case(j), get_int(j, "part_index"), get_id(j, "entry_id"),
                       get_string(j, "payload")};
    case EntryKind::kResult:
      return ResultEntry{get_case(j), get_int(j, "part_index"), get_id(j, "entry_id"),
                         get_string(j, "payload")};
    case EntryKind::kConfiguration: {
      ConfigurationEntry e{get_case(j), get_string(j, "agent_id"),
                           get_string(j, "agent_version"), {}, get_int(j, "num_parts")};
      const auto& params = member(j, "agent_params");
      if (!params.is_object()) malformed("agent_params must be an object");
      for (const auto& [k, v] : params.items()) {
        if (!v.is_string()) malformed("agent_params values must be strings");
        e.agent_params[k] = v.get<std::string>();
      }
      return e;
    }
    case EntryKind::kStop:
      return StopEntry{get_case(j)};
    case EntryKind::kScheduler: {
      SchedulerEntry e{get_case(j), {}, get_string(j, "policy")};
      const auto& tasks = member(j, "tasks");
      if (!tasks.is_array()) malformed("tasks must be an array");
      for (const auto& t : tasks) e.tasks.push_back(task_from_json(t));
      return e;
    }
    case EntryKind::kRow:
      return RowEntry{get_case(j), get_int(j, "matrix_id"), get_int(j, "row_index"),
                      get_string(j, "values")};
  }
  malformed("unknown entry kind");
}

json to_json(const Template& tmpl) {
  json constraints = json::object();
  for (const auto& [k, v] : tmpl.constraints) {
    std::visit([&](const auto& x) { constraints[k] = x; }, v);
  }
  return json{{"kind", kind_name(tmpl.kind)}, {"constraints", constraints}};
}

Template template_from_json(const json& j) {
  auto kind = kind_from_name(get_string(j, "kind"));
  if (!kind) malformed("unknown template kind");
  Template t{*kind, {}};
  if (auto it = j.find("constraints"); it != j.end()) {
    if (!it->is_object()) malformed("constraints must be an object");
    for (const auto& [k, v] : it->items()) {
      if (v.is_string()) {
        t.constraints.emplace(k, v.get<std::string>());
      } else if (v.is_number_integer()) {
        t.constraints.emplace(k, v.get<std::int64_t>());
      } else {
        malformed("constraint '" + k + "' must be a string or integer");
      }
    }
  }
  return t;
}

}  // namespace spacefarm
