#pragma once

// Entry model shared by every participant of the space: identifiers, the
// task and worker state machines, the closed set of entry kinds, templates
// and their JSON representation.

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

namespace spacefarm {

// ---------------------------------------------------------------------------
// Payload codec (RFC 4648, standard alphabet, '=' padding, no line breaks).

std::string encode_payload(std::span<const std::uint8_t> bytes);
std::string encode_payload(std::string_view bytes);

/// Throws Error{kMalformedPayload} on an illegal character or bad padding.
std::vector<std::uint8_t> decode_payload(std::string_view text);
std::string decode_payload_to_string(std::string_view text);

// ---------------------------------------------------------------------------
// Identifiers.

/// 128-bit identifier printed in canonical 8-4-4-4-12 lowercase hex form.
class EntryId {
 public:
  EntryId() = default;
  explicit EntryId(const std::array<std::uint8_t, 16>& bytes) : bytes_(bytes) {}

  /// Random version-4 identifier.
  static EntryId generate();
  static std::optional<EntryId> parse(std::string_view text);

  std::string str() const;
  const std::array<std::uint8_t, 16>& bytes() const { return bytes_; }
  bool is_nil() const;

  auto operator<=>(const EntryId&) const = default;

 private:
  std::array<std::uint8_t, 16> bytes_{};
};

inline EntryId new_entry_id() { return EntryId::generate(); }

struct TransactionId {
  EntryId value;

  static TransactionId generate() { return {EntryId::generate()}; }
  static std::optional<TransactionId> parse(std::string_view text);
  std::string str() const { return value.str(); }

  auto operator<=>(const TransactionId&) const = default;
};

/// Names one computation case. Never empty.
class CaseId {
 public:
  CaseId() = default;
  explicit CaseId(std::string value);

  const std::string& str() const { return value_; }
  bool empty() const { return value_.empty(); }

  auto operator<=>(const CaseId&) const = default;

 private:
  std::string value_;
};

// ---------------------------------------------------------------------------
// State machines.

enum class TaskState { kWaitForComputing, kOnComputing, kComputed };
enum class WorkerState { kWaitForComputing, kOnComputing };

std::string_view to_string(TaskState state);
std::string_view to_string(WorkerState state);
std::optional<TaskState> task_state_from_string(std::string_view text);

/// Allowed: W->O, O->C, and the abort reset O->W.
bool is_valid_transition(TaskState from, TaskState to);

/// Returns `to` or throws Error{kBadRequest} for a forbidden transition.
TaskState transition(TaskState from, TaskState to);

struct ComputingTask {
  CaseId case_id;
  std::int64_t part_index = 0;
  TransactionId txn_id;
  TaskState state = TaskState::kWaitForComputing;
  std::uint64_t enqueued_at = 0;

  bool operator==(const ComputingTask&) const = default;
};

// ---------------------------------------------------------------------------
// Entry kinds.

struct FileEntry {
  CaseId case_id;
  std::int64_t part_index = 0;
  EntryId entry_id;
  std::string payload;  // Base64

  bool operator==(const FileEntry&) const = default;
};

struct ResultEntry {
  CaseId case_id;
  std::int64_t part_index = 0;
  EntryId entry_id;
  std::string payload;  // Base64

  bool operator==(const ResultEntry&) const = default;
};

struct ConfigurationEntry {
  CaseId case_id;
  std::string agent_id;
  std::string agent_version;
  std::map<std::string, std::string> agent_params;
  std::int64_t num_parts = 0;

  bool operator==(const ConfigurationEntry&) const = default;
};

struct StopEntry {
  CaseId case_id;

  bool operator==(const StopEntry&) const = default;
};

inline constexpr std::string_view kFifoPolicy = "fifo";

struct SchedulerEntry {
  CaseId case_id;
  std::vector<ComputingTask> tasks;  // ascending enqueued_at
  std::string policy{kFifoPolicy};

  bool operator==(const SchedulerEntry&) const = default;

  /// First task in WAIT_FOR_COMPUTING, or nullptr.
  ComputingTask* first_waiting();
  const ComputingTask* first_waiting() const;
  ComputingTask* find(std::int64_t part_index);
};

/// One published row of a Cholesky factor. Written outside any transaction
/// so that sibling tasks running under other transactions can read it.
struct RowEntry {
  CaseId case_id;
  std::int64_t matrix_id = 0;
  std::int64_t row_index = 0;  // zero-based
  std::string values;          // row_index+1 decimals, 17 significant digits

  bool operator==(const RowEntry&) const = default;
};

using Entry = std::variant<FileEntry, ResultEntry, ConfigurationEntry, StopEntry,
                           SchedulerEntry, RowEntry>;

enum class EntryKind { kFile, kResult, kConfiguration, kStop, kScheduler, kRow };

EntryKind kind_of(const Entry& entry);
std::string_view kind_name(EntryKind kind);
std::optional<EntryKind> kind_from_name(std::string_view name);
const CaseId& case_of(const Entry& entry);

// ---------------------------------------------------------------------------
// Templates.

using FieldValue = std::variant<std::int64_t, std::string>;

/// Value of a matchable scalar field. Payloads, value strings and task lists
/// are never matchable and yield nullopt.
std::optional<FieldValue> field_value(const Entry& entry, std::string_view field);

struct Template {
  EntryKind kind = EntryKind::kFile;
  std::map<std::string, FieldValue, std::less<>> constraints;

  static Template of(EntryKind kind) { return Template{kind, {}}; }
  Template& where(std::string field, FieldValue value) {
    constraints.insert_or_assign(std::move(field), std::move(value));
    return *this;
  }
  Template& where_case(const CaseId& id) { return where("case_id", id.str()); }

  bool operator==(const Template&) const = default;
};

bool matches(const Template& tmpl, const Entry& entry);

// ---------------------------------------------------------------------------
// JSON forms. Parsers throw Error{kMalformedEntry}.

nlohmann::json to_json(const Entry& entry);
Entry entry_from_json(const nlohmann::json& j);

nlohmann::json to_json(const Template& tmpl);
Template template_from_json(const nlohmann::json& j);

nlohmann::json to_json(const ComputingTask& task);
ComputingTask task_from_json(const nlohmann::json& j);

template <typename T>
const T* get_if(const std::optional<Entry>& entry) {
  return entry ? std::get_if<T>(&*entry) : nullptr;
}

}  // namespace spacefarm
