#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "spacefarm/clock.hpp"
#include "spacefarm/entry.hpp"

namespace spacefarm {

/// Entry lifetime. FOREVER unless a positive duration is given.
class Lease {
 public:
  static Lease forever() { return Lease(); }
  static Lease millis(std::int64_t ms);

  bool is_forever() const { return !duration_; }
  std::optional<std::chrono::milliseconds> duration() const { return duration_; }
  /// -1 for FOREVER, the wire representation.
  std::int64_t wire_millis() const { return duration_ ? duration_->count() : -1; }

 private:
  std::optional<std::chrono::milliseconds> duration_;
};

enum class Visibility { kGlobal, kWrittenUnder, kTakenUnder };

struct StoredEntry {
  Entry entry;
  EntryId handle;
  std::uint64_t sequence = 0;
  std::optional<Clock::time_point> lease_deadline;
  Visibility visibility = Visibility::kGlobal;
  std::optional<TransactionId> txn;
};

/// Result of an operation that may have made entries visible to new scopes.
/// `scope` is empty when the entry became globally visible.
struct VisibilityChange {
  Entry entry;
  EntryId handle;
  std::optional<TransactionId> scope;
};

/// The shared object store as a single-threaded state machine. Transaction
/// liveness is the caller's concern: every txn passed in is assumed OPEN.
/// SpaceService wraps this with locking, blocking and notification.
class TupleSpace {
 public:
  using time_point = Clock::time_point;

  /// Stores `entry`, visible only to `txn` until commit when a txn is given.
  StoredEntry& write(Entry entry, const std::optional<TransactionId>& txn, const Lease& lease,
                     time_point now);

  /// Oldest visible match, copied.
  std::optional<StoredEntry> read(const Template& tmpl, const std::optional<TransactionId>& txn,
                                  time_point now) const;

  /// Oldest visible match, removed from global visibility. Without a txn the
  /// removal is permanent; under a txn it is TAKEN_UNDER until commit/abort.
  std::optional<StoredEntry> take(const Template& tmpl, const std::optional<TransactionId>& txn,
                                  time_point now);

  /// Promotes WRITTEN_UNDER(txn) to global and deletes TAKEN_UNDER(txn).
  std::vector<VisibilityChange> commit_apply(const TransactionId& txn);
  /// Deletes WRITTEN_UNDER(txn) and restores TAKEN_UNDER(txn) globally.
  std::vector<VisibilityChange> abort_apply(const TransactionId& txn);

  /// Drops entries whose lease has run out. Returns the number removed.
  std::size_t purge_expired(time_point now);

  /// Entries visible to `txn` (or globally), oldest first.
  std::vector<StoredEntry> snapshot(const std::optional<TransactionId>& txn, time_point now) const;

  /// Entries of a case that are not taken (visible to some scope).
  std::size_t count_untaken(EntryKind kind, const std::optional<CaseId>& case_id,
                            time_point now) const;
  std::size_t size() const;

 private:
  using Bucket = std::map<std::uint64_t, StoredEntry>;

  static bool visible_to(const StoredEntry& s, const std::optional<TransactionId>& txn,
                         time_point now);
  const Bucket& bucket(EntryKind kind) const { return buckets_[static_cast<int>(kind)]; }
  Bucket& bucket(EntryKind kind) { return buckets_[static_cast<int>(kind)]; }

  std::uint64_t next_sequence_ = 1;
  std::array<Bucket, 6> buckets_;
};

}  // namespace spacefarm
