#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <string>

#include <json.hpp>

#include "spacefarm/entry.hpp"
#include "spacefarm/transactions.hpp"
#include "spacefarm/tuple_space.hpp"

namespace spacefarm {

using SubscriptionId = EntryId;

/// Negative timeouts block until a match appears.
inline constexpr std::chrono::milliseconds kWaitForever{-1};
inline constexpr std::chrono::milliseconds kNoWait{0};

struct SpaceEvent {
  SubscriptionId subscription;
  EntryId handle;
  Entry entry;
};

using EntryCallback = std::function<void(const SpaceEvent&)>;
using AbortCallback = std::function<void(const TransactionId&)>;

struct TxnInfo {
  TxnState state = TxnState::kOpen;
  std::chrono::milliseconds lease{0};
};

/// Client view of the space and transaction manager. Implemented in-process
/// (LocalSpace) and over TCP (RemoteSpace). Callbacks run on a dedicated
/// delivery thread per client and must not block on the same client.
class SpaceApi {
 public:
  virtual ~SpaceApi() = default;

  virtual EntryId write(const Entry& entry, const std::optional<TransactionId>& txn = {},
                        const Lease& lease = Lease::forever()) = 0;
  virtual std::optional<Entry> read(const Template& tmpl,
                                    const std::optional<TransactionId>& txn = {},
                                    std::chrono::milliseconds timeout = kNoWait) = 0;
  virtual std::optional<Entry> take(const Template& tmpl,
                                    const std::optional<TransactionId>& txn = {},
                                    std::chrono::milliseconds timeout = kNoWait) = 0;
  virtual SubscriptionId subscribe(const Template& tmpl, const std::optional<TransactionId>& txn,
                                   EntryCallback callback) = 0;
  virtual void unsubscribe(const SubscriptionId& id) = 0;

  virtual TransactionId txn_create(std::chrono::milliseconds lease, const std::string& tag = {}) = 0;
  virtual void txn_renew(const TransactionId& txn,
                         std::optional<std::chrono::milliseconds> lease = {}) = 0;
  virtual void txn_commit(const TransactionId& txn) = 0;
  virtual void txn_abort(const TransactionId& txn) = 0;
  virtual TxnInfo txn_status(const TransactionId& txn) = 0;
  /// Empty tag receives every abort.
  virtual SubscriptionId subscribe_aborts(const std::string& tag, AbortCallback callback) = 0;

  /// {"entries","open_txns","workers","sessions"} or, with a case id,
  /// {"file_entries","result_entries","open_txns"} scoped to that case.
  virtual nlohmann::json admin_status(const std::optional<CaseId>& case_id = {}) = 0;
};

}  // namespace spacefarm
