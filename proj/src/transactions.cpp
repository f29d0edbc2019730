#include "spacefarm/transactions.hpp"

#include "spacefarm/error.hpp"

namespace spacefarm {

std::string_view to_string(TxnState state) {
  switch (state) {
    case TxnState::kOpen: return "OPEN";
    case TxnState::kCommitted: return "COMMITTED";
    case TxnState::kAborted: return "ABORTED";
  }
  return "?";
}

std::optional<TxnState> txn_state_from_string(std::string_view text) {
  if (text == "OPEN") return TxnState::kOpen;
  if (text == "COMMITTED") return TxnState::kCommitted;
  if (text == "ABORTED") return TxnState::kAborted;
  return std::nullopt;
}

TransactionManager::TransactionManager(std::vector<TxnParticipant*> participants)
    : participants_(std::move(participants)) {}

TransactionId TransactionManager::create(std::chrono::milliseconds lease, time_point now,
                                         std::string tag) {
  if (lease < kMinTxnLease) {
    fail(ErrorCode::kBadRequest, "transaction lease must be at least 100 ms");
  }
  TransactionId id = TransactionId::generate();
  while (records_.contains(id)) id = TransactionId::generate();
  records_.emplace(id, TxnRecord{id, TxnState::kOpen, now + lease, lease, std::move(tag)});
  return id;
}

const TxnRecord& TransactionManager::record(const TransactionId& txn) const {
  auto it = records_.find(txn);
  if (it == records_.end()) fail(ErrorCode::kUnknownTxn, "unknown transaction " + txn.str());
  return it->second;
}

TxnRecord& TransactionManager::open_record(const TransactionId& txn) {
  auto it = records_.find(txn);
  if (it == records_.end()) fail(ErrorCode::kUnknownTxn, "unknown transaction " + txn.str());
  if (it->second.state != TxnState::kOpen) {
    fail(ErrorCode::kTxnNotOpen, "transaction " + txn.str() + " is " +
                                     std::string(to_string(it->second.state)));
  }
  return it->second;
}

bool TransactionManager::is_open(const TransactionId& txn, time_point now) const {
  auto it = records_.find(txn);
  return it != records_.end() && it->second.state == TxnState::kOpen &&
         it->second.lease_deadline > now;
}

void TransactionManager::renew(const TransactionId& txn,
                               std::optional<std::chrono::milliseconds> lease, time_point now) {
  auto& rec = open_record(txn);
  if (rec.lease_deadline <= now) {
    do_abort(rec);
    fail(ErrorCode::kTxnNotOpen, "transaction " + txn.str() + " lease expired");
  }
  if (lease) {
    if (*lease < kMinTxnLease) {
      fail(ErrorCode::kBadRequest, "transaction lease must be at least 100 ms");
    }
    rec.lease = *lease;
  }
  rec.lease_deadline = now + rec.lease;
}

void TransactionManager::commit(const TransactionId& txn, time_point now) {
  auto& rec = open_record(txn);
  if (rec.lease_deadline <= now) {
    do_abort(rec);
    fail(ErrorCode::kTxnNotOpen, "transaction " + txn.str() + " lease expired");
  }
  for (auto* p : participants_) {
    bool prepared = false;
    for (int attempt = 0; attempt < prepare_attempts && !prepared; ++attempt) {
      prepared = p->prepare(txn);
    }
    if (!prepared) {
      do_abort(rec);
      fail(ErrorCode::kParticipantUnreachable,
           "participant failed to prepare " + txn.str() + "; aborted");
    }
  }
  for (auto* p : participants_) p->commit_apply(txn);
  rec.state = TxnState::kCommitted;
}

void TransactionManager::abort(const TransactionId& txn) { do_abort(open_record(txn)); }

void TransactionManager::do_abort(TxnRecord& rec) {
  for (auto* p : participants_) p->abort_apply(rec.id);
  rec.state = TxnState::kAborted;
}

std::vector<TxnRecord> TransactionManager::expire(time_point now) {
  std::vector<TxnRecord> expired;
  for (auto& [id, rec] : records_) {
    if (rec.state == TxnState::kOpen && rec.lease_deadline <= now) {
      do_abort(rec);
      expired.push_back(rec);
    }
  }
  return expired;
}

std::vector<TxnRecord> TransactionManager::abort_all() {
  std::vector<TxnRecord> aborted;
  for (auto& [id, rec] : records_) {
    if (rec.state == TxnState::kOpen) {
      do_abort(rec);
      aborted.push_back(rec);
    }
  }
  return aborted;
}

std::size_t TransactionManager::open_count() const {
  std::size_t n = 0;
  for (const auto& [id, rec] : records_) n += rec.state == TxnState::kOpen;
  return n;
}

std::size_t TransactionManager::open_count(const std::string& tag) const {
  std::size_t n = 0;
  for (const auto& [id, rec] : records_) n += rec.state == TxnState::kOpen && rec.tag == tag;
  return n;
}

}  // namespace spacefarm
