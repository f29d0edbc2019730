#pragma once

#include <chrono>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spacefarm/clock.hpp"
#include "spacefarm/entry.hpp"

namespace spacefarm {

enum class TxnState { kOpen, kCommitted, kAborted };

std::string_view to_string(TxnState state);
std::optional<TxnState> txn_state_from_string(std::string_view text);

struct TxnRecord {
  TransactionId id;
  TxnState state = TxnState::kOpen;
  Clock::time_point lease_deadline;
  std::chrono::milliseconds lease{0};
  std::string tag;  // case scope for abort subscriptions; may be empty
};

/// Something that holds state on behalf of transactions. The space is the
/// only participant in practice, but commit still runs prepare-then-apply.
class TxnParticipant {
 public:
  virtual ~TxnParticipant() = default;
  virtual bool prepare(const TransactionId& txn) = 0;
  virtual void commit_apply(const TransactionId& txn) = 0;
  virtual void abort_apply(const TransactionId& txn) = 0;
};

inline constexpr std::chrono::milliseconds kMinTxnLease{100};

/// Lease-based transaction manager. Not internally synchronized; the owner
/// serializes calls (SpaceService runs it on the space's command path).
class TransactionManager {
 public:
  using time_point = Clock::time_point;

  explicit TransactionManager(std::vector<TxnParticipant*> participants);

  /// lease must be at least kMinTxnLease (Error{kBadRequest} otherwise).
  TransactionId create(std::chrono::milliseconds lease, time_point now, std::string tag = {});

  /// Pushes the deadline to now+lease; without a lease the txn's current
  /// lease length is reused.
  void renew(const TransactionId& txn, std::optional<std::chrono::milliseconds> lease,
             time_point now);

  /// A txn whose deadline has passed is aborted instead and TXN_NOT_OPEN is
  /// raised. If a participant fails to prepare (after retries) the txn is
  /// aborted and PARTICIPANT_UNREACHABLE raised.
  void commit(const TransactionId& txn, time_point now);
  void abort(const TransactionId& txn);

  /// Throws Error{kUnknownTxn} for ids this manager never issued.
  const TxnRecord& record(const TransactionId& txn) const;
  TxnState status(const TransactionId& txn) const { return record(txn).state; }

  /// OPEN and not past its deadline.
  bool is_open(const TransactionId& txn, time_point now) const;

  /// Aborts every OPEN txn past its deadline and returns their records.
  std::vector<TxnRecord> expire(time_point now);
  /// Aborts every OPEN txn (shutdown).
  std::vector<TxnRecord> abort_all();

  std::size_t open_count() const;
  std::size_t open_count(const std::string& tag) const;

  int prepare_attempts = 3;

 private:
  TxnRecord& open_record(const TransactionId& txn);
  void do_abort(TxnRecord& rec);

  std::vector<TxnParticipant*> participants_;
  std::map<TransactionId, TxnRecord> records_;
};

}  // namespace spacefarm
