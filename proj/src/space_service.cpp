#include "spacefarm/space_service.hpp"

#include "spacefarm/error.hpp"

namespace spacefarm {

struct SpaceService::Participant final : TxnParticipant {
  explicit Participant(TupleSpace& s) : space(s) {}

  bool prepare(const TransactionId&) override { return true; }
  void commit_apply(const TransactionId& txn) override {
    auto c = space.commit_apply(txn);
    pending.insert(pending.end(), c.begin(), c.end());
  }
  void abort_apply(const TransactionId& txn) override {
    auto c = space.abort_apply(txn);
    pending.insert(pending.end(), c.begin(), c.end());
  }

  std::vector<VisibilityChange> drain() { return std::exchange(pending, {}); }

  TupleSpace& space;
  std::vector<VisibilityChange> pending;
};

SpaceService::SpaceService(std::shared_ptr<Clock> clock, SpaceServiceOptions options)
    : clock_(std::move(clock)),
      options_(options),
      participant_(std::make_unique<Participant>(space_)),
      txns_({participant_.get()}) {
  if (options_.start_sweeper) {
    sweeper_ = std::jthread([this](std::stop_token st) { sweep_loop(st); });
  }
}

SpaceService::~SpaceService() {
  if (sweeper_.joinable()) {
    sweeper_.request_stop();
    sweeper_.join();
  }
}

ClientId SpaceService::new_client() {
  ++clients_;
  return next_client_++;
}

void SpaceService::attach_worker() { ++workers_; }
void SpaceService::detach_worker() { --workers_; }

void SpaceService::bump() {
  ++version_;
  changed_.notify_all();
}

void SpaceService::record(HistoryRecord rec) {
  if (!options_.record_history) return;
  rec.index = history_.size();
  history_.push_back(std::move(rec));
}

void SpaceService::require_open(const TransactionId& txn) {
  if (!txns_.is_open(txn, clock_->now())) {
    const auto& rec = txns_.record(txn);  // throws UNKNOWN_TXN
    fail(ErrorCode::kTxnNotOpen, "transaction " + txn.str() + " is " +
                                     std::string(rec.state == TxnState::kOpen
                                                     ? "past its deadline"
                                                     : to_string(rec.state)));
  }
}

void SpaceService::publish(const std::vector<VisibilityChange>& changes) {
  for (const auto& change : changes) {
    for (const auto& [id, sub] : entry_subs_) {
      if (change.scope && sub.scope != change.scope) continue;
      if (!matches(sub.tmpl, change.entry)) continue;
      sub.sink(SpaceEvent{id, change.handle, change.entry});
    }
  }
}

void SpaceService::publish_aborts(const std::vector<TxnRecord>& aborted) {
  for (const auto& rec : aborted) {
    for (const auto& [id, sub] : abort_subs_) {
      if (!sub.tag.empty() && sub.tag != rec.tag) continue;
      sub.sink(id, rec.id);
    }
  }
}

EntryId SpaceService::write(ClientId client, const Entry& entry,
                            const std::optional<TransactionId>& txn, const Lease& lease) {
  std::lock_guard lk(mu_);
  if (closed_) fail(ErrorCode::kSpaceUnavailable, "space is shut down");
  if (txn) require_open(*txn);
  auto& stored = space_.write(entry, txn, lease, clock_->now());
  record({0, client, HistoryOp::kWrite, kind_of(entry), txn, entry, stored.handle,
          stored.sequence, std::nullopt});
  publish({{stored.entry, stored.handle, txn}});
  const auto handle = stored.handle;
  bump();
  return handle;
}

std::optional<Entry> SpaceService::read(ClientId client, const Template& tmpl,
                                        const std::optional<TransactionId>& txn,
                                        std::chrono::milliseconds timeout, std::stop_token stop) {
  return lookup(client, tmpl, txn, timeout, std::move(stop), false);
}

std::optional<Entry> SpaceService::take(ClientId client, const Template& tmpl,
                                        const std::optional<TransactionId>& txn,
                                        std::chrono::milliseconds timeout, std::stop_token stop) {
  return lookup(client, tmpl, txn, timeout, std::move(stop), true);
}

std::optional<Entry> SpaceService::lookup(ClientId client, const Template& tmpl,
                                          const std::optional<TransactionId>& txn,
                                          std::chrono::milliseconds timeout,
                                          std::stop_token stop, bool take) {
  const bool forever = timeout < std::chrono::milliseconds::zero();
  const auto deadline = std::chrono::steady_clock::now() + (forever ? kNoWait : timeout);
  const auto op = take ? HistoryOp::kTake : HistoryOp::kRead;

  std::unique_lock lk(mu_);
  while (true) {
    if (closed_) fail(ErrorCode::kSpaceUnavailable, "space is shut down");
    if (txn) require_open(*txn);
    const auto now = clock_->now();
    auto found = take ? space_.take(tmpl, txn, now) : space_.read(tmpl, txn, now);
    if (found) {
      record({0, client, op, tmpl.kind, txn, found->entry, found->handle, found->sequence, tmpl});
      if (take) bump();
      return std::move(found->entry);
    }
    const auto seen = version_;
    auto changed = [&] { return version_ != seen || closed_; };
    bool woke;
    if (forever) {
      woke = changed_.wait(lk, stop, changed);
    } else {
      if (std::chrono::steady_clock::now() >= deadline) woke = false;
      else woke = changed_.wait_until(lk, stop, deadline, changed);
    }
    if (!woke) {
      record({0, client, op, tmpl.kind, txn, std::nullopt, std::nullopt, 0, tmpl});
      return std::nullopt;
    }
  }
}

SubscriptionId SpaceService::subscribe(ClientId client, const Template& tmpl,
                                       const std::optional<TransactionId>& txn, EventSink sink) {
  std::lock_guard lk(mu_);
  auto id = SubscriptionId::generate();
  entry_subs_.emplace(id, EntrySubscription{client, tmpl, txn, std::move(sink)});
  return id;
}

SubscriptionId SpaceService::subscribe_aborts(ClientId client, const std::string& tag,
                                              AbortSink sink) {
  std::lock_guard lk(mu_);
  auto id = SubscriptionId::generate();
  abort_subs_.emplace(id, AbortSubscription{client, tag, std::move(sink)});
  return id;
}

void SpaceService::unsubscribe(const SubscriptionId& id) {
  std::lock_guard lk(mu_);
  entry_subs_.erase(id);
  abort_subs_.erase(id);
}

void SpaceService::unsubscribe_all(ClientId client) {
  std::lock_guard lk(mu_);
  std::erase_if(entry_subs_, [&](const auto& kv) { return kv.second.owner == client; });
  std::erase_if(abort_subs_, [&](const auto& kv) { return kv.second.owner == client; });
}

TransactionId SpaceService::txn_create(std::chrono::milliseconds lease, const std::string& tag) {
  std::lock_guard lk(mu_);
  if (closed_) fail(ErrorCode::kSpaceUnavailable, "space is shut down");
  return txns_.create(lease, clock_->now(), tag);
}

void SpaceService::txn_renew(const TransactionId& txn,
                             std::optional<std::chrono::milliseconds> lease) {
  std::lock_guard lk(mu_);
  const auto before = txns_.status(txn);
  try {
    txns_.renew(txn, lease, clock_->now());
  } catch (const Error&) {
    settle_failed(txn, before);
    throw;
  }
}

void SpaceService::txn_commit(ClientId client, const TransactionId& txn) {
  std::lock_guard lk(mu_);
  const auto before = txns_.status(txn);
  try {
    txns_.commit(txn, clock_->now());
  } catch (const Error&) {
    settle_failed(txn, before);
    throw;
  }
  publish(participant_->drain());
  record({0, client, HistoryOp::kCommit, std::nullopt, txn, std::nullopt, std::nullopt, 0, std::nullopt});
  bump();
}

void SpaceService::settle_failed(const TransactionId& txn, TxnState before) {
  // A renew or commit that finds the txn overdue aborts it on the spot.
  publish(participant_->drain());
  if (before == TxnState::kOpen && txns_.status(txn) == TxnState::kAborted) {
    publish_aborts({txns_.record(txn)});
    bump();
  }
}

void SpaceService::txn_abort(ClientId client, const TransactionId& txn) {
  std::lock_guard lk(mu_);
  txns_.abort(txn);
  publish(participant_->drain());
  publish_aborts({txns_.record(txn)});
  record({0, client, HistoryOp::kAbort, std::nullopt, txn, std::nullopt, std::nullopt, 0, std::nullopt});
  bump();
}

TxnInfo SpaceService::txn_status(const TransactionId& txn) {
  std::lock_guard lk(mu_);
  const auto& rec = txns_.record(txn);
  auto state = rec.state;
  // An overdue txn is reported ABORTED even before the sweeper gets to it.
  if (state == TxnState::kOpen && rec.lease_deadline <= clock_->now()) state = TxnState::kAborted;
  return {state, rec.lease};
}

nlohmann::json SpaceService::status(const std::optional<CaseId>& case_id) {
  std::lock_guard lk(mu_);
  const auto now = clock_->now();
  if (case_id) {
    return {{"file_entries", space_.count_untaken(EntryKind::kFile, case_id, now)},
            {"result_entries", space_.count_untaken(EntryKind::kResult, case_id, now)},
            {"row_entries", space_.count_untaken(EntryKind::kRow, case_id, now)},
            {"open_txns", txns_.open_count(case_id->str())}};
  }
  return {{"entries", space_.size()},
          {"open_txns", txns_.open_count()},
          {"workers", workers_.load()},
          {"sessions", clients_.load()},
          {"protocol", "1"}};
}

void SpaceService::sweep() {
  std::lock_guard lk(mu_);
  const auto now = clock_->now();
  auto expired = txns_.expire(now);
  const auto purged = space_.purge_expired(now);
  if (expired.empty() && purged == 0) return;
  publish(participant_->drain());
  publish_aborts(expired);
  bump();
}

void SpaceService::sweep_loop(std::stop_token st) {
  std::mutex m;
  std::condition_variable_any cv;
  while (!st.stop_requested()) {
    {
      std::unique_lock lk(m);
      cv.wait_for(lk, st, options_.sweep_period, [] { return false; });
    }
    if (st.stop_requested()) break;
    sweep();
  }
}

void SpaceService::shutdown() {
  std::lock_guard lk(mu_);
  if (closed_) return;
  auto aborted = txns_.abort_all();
  publish(participant_->drain());
  publish_aborts(aborted);
  closed_ = true;
  bump();
}

std::vector<HistoryRecord> SpaceService::history() const {
  std::lock_guard lk(mu_);
  return history_;
}

std::vector<StoredEntry> SpaceService::snapshot(const std::optional<TransactionId>& txn) const {
  std::lock_guard lk(mu_);
  return space_.snapshot(txn, clock_->now());
}

// ---------------------------------------------------------------------------
// LocalSpace

LocalSpace::LocalSpace(std::shared_ptr<SpaceService> service, bool is_worker)
    : service_(std::move(service)), client_(service_->new_client()), is_worker_(is_worker) {
  if (is_worker_) service_->attach_worker();
}

LocalSpace::~LocalSpace() {
  service_->unsubscribe_all(client_);
  delivery_.stop();
  if (is_worker_) service_->detach_worker();
}

EntryId LocalSpace::write(const Entry& entry, const std::optional<TransactionId>& txn,
                          const Lease& lease) {
  return service_->write(client_, entry, txn, lease);
}

std::optional<Entry> LocalSpace::read(const Template& tmpl,
                                      const std::optional<TransactionId>& txn,
                                      std::chrono::milliseconds timeout) {
  return service_->read(client_, tmpl, txn, timeout, stop_.get_token());
}

std::optional<Entry> LocalSpace::take(const Template& tmpl,
                                      const std::optional<TransactionId>& txn,
                                      std::chrono::milliseconds timeout) {
  return service_->take(client_, tmpl, txn, timeout, stop_.get_token());
}

SubscriptionId LocalSpace::subscribe(const Template& tmpl, const std::optional<TransactionId>& txn,
                                     EntryCallback callback) {
  auto cb = std::make_shared<EntryCallback>(std::move(callback));
  return service_->subscribe(client_, tmpl, txn, [this, cb](const SpaceEvent& ev) {
    delivery_.post([cb, ev] { (*cb)(ev); });
  });
}

void LocalSpace::unsubscribe(const SubscriptionId& id) { service_->unsubscribe(id); }

TransactionId LocalSpace::txn_create(std::chrono::milliseconds lease, const std::string& tag) {
  return service_->txn_create(lease, tag);
}

void LocalSpace::txn_renew(const TransactionId& txn,
                           std::optional<std::chrono::milliseconds> lease) {
  service_->txn_renew(txn, lease);
}

void LocalSpace::txn_commit(const TransactionId& txn) { service_->txn_commit(client_, txn); }
void LocalSpace::txn_abort(const TransactionId& txn) { service_->txn_abort(client_, txn); }
TxnInfo LocalSpace::txn_status(const TransactionId& txn) { return service_->txn_status(txn); }

SubscriptionId LocalSpace::subscribe_aborts(const std::string& tag, AbortCallback callback) {
  auto cb = std::make_shared<AbortCallback>(std::move(callback));
  return service_->subscribe_aborts(
      client_, tag, [this, cb](const SubscriptionId&, const TransactionId& txn) {
        delivery_.post([cb, txn] { (*cb)(txn); });
      });
}

nlohmann::json LocalSpace::admin_status(const std::optional<CaseId>& case_id) {
  return service_->status(case_id);
}

}  // namespace spacefarm
