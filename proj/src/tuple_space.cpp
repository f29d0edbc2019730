#include "spacefarm/tuple_space.hpp"

#include "spacefarm/error.hpp"

namespace spacefarm {

Lease Lease::millis(std::int64_t ms) {
  if (ms < 0) return forever();
  if (ms == 0) fail(ErrorCode::kBadRequest, "lease must be positive");
  Lease lease;
  lease.duration_ = std::chrono::milliseconds(ms);
  return lease;
}

bool TupleSpace::visible_to(const StoredEntry& s, const std::optional<TransactionId>& txn,
                            time_point now) {
  if (s.lease_deadline && *s.lease_deadline <= now) return false;
  switch (s.visibility) {
    case Visibility::kGlobal: return true;
    case Visibility::kWrittenUnder: return txn && *txn == *s.txn;
    case Visibility::kTakenUnder: return false;
  }
  return false;
}

StoredEntry& TupleSpace::write(Entry entry, const std::optional<TransactionId>& txn,
                               const Lease& lease, time_point now) {
  StoredEntry s;
  s.handle = EntryId::generate();
  s.sequence = next_sequence_++;
  if (auto d = lease.duration()) s.lease_deadline = now + *d;
  s.visibility = txn ? Visibility::kWrittenUnder : Visibility::kGlobal;
  s.txn = txn;
  const auto kind = kind_of(entry);
  s.entry = std::move(entry);
  auto [it, _] = bucket(kind).emplace(s.sequence, std::move(s));
  return it->second;
}

std::optional<StoredEntry> TupleSpace::read(const Template& tmpl,
                                            const std::optional<TransactionId>& txn,
                                            time_point now) const {
  for (const auto& [seq, s] : bucket(tmpl.kind)) {
    if (visible_to(s, txn, now) && matches(tmpl, s.entry)) return s;
  }
  return std::nullopt;
}

std::optional<StoredEntry> TupleSpace::take(const Template& tmpl,
                                            const std::optional<TransactionId>& txn,
                                            time_point now) {
  auto& b = bucket(tmpl.kind);
  for (auto it = b.begin(); it != b.end(); ++it) {
    auto& s = it->second;
    if (!visible_to(s, txn, now) || !matches(tmpl, s.entry)) continue;
    StoredEntry copy = s;
    // An entry written under this same txn never existed outside it, so
    // taking it just drops it.
    if (!txn || s.visibility == Visibility::kWrittenUnder) {
      b.erase(it);
    } else {
      s.visibility = Visibility::kTakenUnder;
      s.txn = txn;
    }
    return copy;
  }
  return std::nullopt;
}

std::vector<VisibilityChange> TupleSpace::commit_apply(const TransactionId& txn) {
  std::vector<VisibilityChange> changes;
  for (auto& b : buckets_) {
    for (auto it = b.begin(); it != b.end();) {
      auto& s = it->second;
      if (!s.txn || *s.txn != txn) {
        ++it;
        continue;
      }
      if (s.visibility == Visibility::kTakenUnder) {
        it = b.erase(it);
        continue;
      }
      s.visibility = Visibility::kGlobal;
      s.txn.reset();
      changes.push_back({s.entry, s.handle, std::nullopt});
      ++it;
    }
  }
  return changes;
}

std::vector<VisibilityChange> TupleSpace::abort_apply(const TransactionId& txn) {
  std::vector<VisibilityChange> changes;
  for (auto& b : buckets_) {
    for (auto it = b.begin(); it != b.end();) {
      auto& s = it->second;
      if (!s.txn || *s.txn != txn) {
        ++it;
        continue;
      }
      if (s.visibility == Visibility::kWrittenUnder) {
        it = b.erase(it);
        continue;
      }
      s.visibility = Visibility::kGlobal;
      s.txn.reset();
      changes.push_back({s.entry, s.handle, std::nullopt});
      ++it;
    }
  }
  return changes;
}

std::size_t TupleSpace::purge_expired(time_point now) {
  std::size_t removed = 0;
  for (auto& b : buckets_) {
    for (auto it = b.begin(); it != b.end();) {
      if (it->second.lease_deadline && *it->second.lease_deadline <= now) {
        it = b.erase(it);
        ++removed;
      } else {
        ++it;
      }
    }
  }
  return removed;
}

std::vector<StoredEntry> TupleSpace::snapshot(const std::optional<TransactionId>& txn,
                                              time_point now) const {
  std::map<std::uint64_t, const StoredEntry*> ordered;
  for (const auto& b : buckets_) {
    for (const auto& [seq, s] : b) {
      if (visible_to(s, txn, now)) ordered.emplace(seq, &s);
    }
  }
  std::vector<StoredEntry> out;
  out.reserve(ordered.size());
  for (const auto& [seq, s] : ordered) out.push_back(*s);
  return out;
}

std::size_t TupleSpace::count_untaken(EntryKind kind, const std::optional<CaseId>& case_id,
                                      time_point now) const {
  std::size_t n = 0;
  for (const auto& [seq, s] : bucket(kind)) {
    if (s.visibility == Visibility::kTakenUnder) continue;
    if (s.lease_deadline && *s.lease_deadline <= now) continue;
    if (case_id && case_of(s.entry) != *case_id) continue;
    ++n;
  }
  return n;
}

std::size_t TupleSpace::size() const {
  std::size_t n = 0;
  for (const auto& b : buckets_) n += b.size();
  return n;
}

}  // namespace spacefarm
