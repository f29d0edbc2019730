#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <stop_token>
#include <thread>
#include <vector>

#include "spacefarm/callback_queue.hpp"
#include "spacefarm/space_api.hpp"
#include "spacefarm/transactions.hpp"
#include "spacefarm/tuple_space.hpp"

namespace spacefarm {

using ClientId = std::uint64_t;

/// Invoked while the service lock is held: must only enqueue.
using EventSink = std::function<void(const SpaceEvent&)>;
using AbortSink = std::function<void(const SubscriptionId&, const TransactionId&)>;

enum class HistoryOp { kWrite, kRead, kTake, kCommit, kAbort };

/// One linearized space operation, in the order the service applied it.
struct HistoryRecord {
  std::uint64_t index = 0;
  ClientId client = 0;
  HistoryOp op = HistoryOp::kWrite;
  std::optional<EntryKind> kind;
  std::optional<TransactionId> txn;
  std::optional<Entry> entry;  // written entry, or the result of read/take
  std::optional<EntryId> handle;
  std::uint64_t sequence = 0;  // space sequence of the entry involved
  std::optional<Template> tmpl;  // read and take only
};

struct SpaceServiceOptions {
  std::chrono::milliseconds sweep_period{100};
  bool start_sweeper = true;
  bool record_history = false;
};

/// The space server core: a TupleSpace plus TransactionManager behind one
/// mutex, which is the single ordered command path. Blocking reads and takes
/// park on a condition variable and are re-evaluated after every
/// visibility-changing command.
class SpaceService {
 public:
  explicit SpaceService(std::shared_ptr<Clock> clock = steady_clock(),
                        SpaceServiceOptions options = {});
  ~SpaceService();

  SpaceService(const SpaceService&) = delete;
  SpaceService& operator=(const SpaceService&) = delete;

  ClientId new_client();
  void attach_worker();
  void detach_worker();

  EntryId write(ClientId client, const Entry& entry, const std::optional<TransactionId>& txn,
                const Lease& lease);
  std::optional<Entry> read(ClientId client, const Template& tmpl,
                            const std::optional<TransactionId>& txn,
                            std::chrono::milliseconds timeout, std::stop_token stop = {});
  std::optional<Entry> take(ClientId client, const Template& tmpl,
                            const std::optional<TransactionId>& txn,
                            std::chrono::milliseconds timeout, std::stop_token stop = {});

  SubscriptionId subscribe(ClientId client, const Template& tmpl,
                           const std::optional<TransactionId>& txn, EventSink sink);
  SubscriptionId subscribe_aborts(ClientId client, const std::string& tag, AbortSink sink);
  void unsubscribe(const SubscriptionId& id);
  void unsubscribe_all(ClientId client);

  TransactionId txn_create(std::chrono::milliseconds lease, const std::string& tag);
  void txn_renew(const TransactionId& txn, std::optional<std::chrono::milliseconds> lease);
  void txn_commit(ClientId client, const TransactionId& txn);
  void txn_abort(ClientId client, const TransactionId& txn);
  TxnInfo txn_status(const TransactionId& txn);

  nlohmann::json status(const std::optional<CaseId>& case_id);

  /// Expires overdue transactions and entry leases. Runs periodically on the
  /// sweeper thread; callable directly with a manual clock.
  void sweep();

  /// Aborts every open transaction and fails all blocked callers.
  void shutdown();

  std::vector<HistoryRecord> history() const;
  std::vector<StoredEntry> snapshot(const std::optional<TransactionId>& txn = {}) const;

  Clock& clock() { return *clock_; }

 private:
  struct Participant;
  struct EntrySubscription {
    ClientId owner;
    Template tmpl;
    std::optional<TransactionId> scope;
    EventSink sink;
  };
  struct AbortSubscription {
    ClientId owner;
    std::string tag;
    AbortSink sink;
  };

  std::optional<Entry> lookup(ClientId client, const Template& tmpl,
                              const std::optional<TransactionId>& txn,
                              std::chrono::milliseconds timeout, std::stop_token stop, bool take);
  void require_open(const TransactionId& txn);
  void publish(const std::vector<VisibilityChange>& changes);
  void publish_aborts(const std::vector<TxnRecord>& aborted);
  void settle_failed(const TransactionId& txn, TxnState before);
  void bump();
  void record(HistoryRecord rec);
  void sweep_loop(std::stop_token st);

  std::shared_ptr<Clock> clock_;
  SpaceServiceOptions options_;

  mutable std::mutex mu_;
  std::condition_variable_any changed_;
  std::uint64_t version_ = 0;
  bool closed_ = false;

  TupleSpace space_;
  std::unique_ptr<Participant> participant_;
  TransactionManager txns_;

  std::map<SubscriptionId, EntrySubscription> entry_subs_;
  std::map<SubscriptionId, AbortSubscription> abort_subs_;

  std::vector<HistoryRecord> history_;
  std::atomic<ClientId> next_client_{1};
  std::atomic<int> workers_{0};
  std::atomic<int> clients_{0};

  std::jthread sweeper_;
};

/// In-process SpaceApi over a shared SpaceService.
class LocalSpace final : public SpaceApi {
 public:
  explicit LocalSpace(std::shared_ptr<SpaceService> service, bool is_worker = false);
  ~LocalSpace() override;

  EntryId write(const Entry& entry, const std::optional<TransactionId>& txn,
                const Lease& lease) override;
  std::optional<Entry> read(const Template& tmpl, const std::optional<TransactionId>& txn,
                            std::chrono::milliseconds timeout) override;
  std::optional<Entry> take(const Template& tmpl, const std::optional<TransactionId>& txn,
                            std::chrono::milliseconds timeout) override;
  SubscriptionId subscribe(const Template& tmpl, const std::optional<TransactionId>& txn,
                           EntryCallback callback) override;
  void unsubscribe(const SubscriptionId& id) override;

  TransactionId txn_create(std::chrono::milliseconds lease, const std::string& tag) override;
  void txn_renew(const TransactionId& txn, std::optional<std::chrono::milliseconds> lease) override;
  void txn_commit(const TransactionId& txn) override;
  void txn_abort(const TransactionId& txn) override;
  TxnInfo txn_status(const TransactionId& txn) override;
  SubscriptionId subscribe_aborts(const std::string& tag, AbortCallback callback) override;

  nlohmann::json admin_status(const std::optional<CaseId>& case_id) override;

  ClientId client_id() const { return client_; }
  SpaceService& service() { return *service_; }

  /// Interrupts blocked calls made through this handle.
  void interrupt() { stop_.request_stop(); }

 private:
  std::shared_ptr<SpaceService> service_;
  ClientId client_;
  bool is_worker_;
  std::stop_source stop_;
  CallbackQueue delivery_;
};

}  // namespace spacefarm
