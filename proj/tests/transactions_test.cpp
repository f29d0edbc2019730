#include <doctest.h>

#include <atomic>
#include <future>
#include <random>
#include <thread>

#include "space_model.hpp"
#include "spacefarm/error.hpp"
#include "spacefarm/space_service.hpp"
#include "spacefarm/transactions.hpp"

using namespace spacefarm;
using namespace std::chrono_literals;

namespace {

const CaseId kCase("c1");
const Clock::time_point t0{std::chrono::hours(1)};

struct FakeParticipant : TxnParticipant {
  int refuse = 0;  // prepare calls to refuse
  int prepares = 0;
  std::vector<std::string> log;
  bool prepare(const TransactionId&) override {
    ++prepares;
    if (refuse > 0) {
      --refuse;
      return false;
    }
    return true;
  }
  void commit_apply(const TransactionId&) override { log.push_back("commit"); }
  void abort_apply(const TransactionId&) override { log.push_back("abort"); }
};

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kInternal;
}

FileEntry file(std::int64_t part) {
  return FileEntry{kCase, part, new_entry_id(), encode_payload(std::string_view("x"))};
}

Template files() { return Template::of(EntryKind::kFile).where_case(kCase); }

std::shared_ptr<SpaceService> manual_service(std::shared_ptr<ManualClock>& clock,
                                             bool history = false) {
  clock = std::make_shared<ManualClock>();
  SpaceServiceOptions o;
  o.start_sweeper = false;
  o.record_history = history;
  return std::make_shared<SpaceService>(clock, o);
}

}  // namespace

TEST_CASE("transaction leases below the minimum are rejected") {
  TransactionManager tm({});
  CHECK(code_of([&] { tm.create(99ms, t0); }) == ErrorCode::kBadRequest);
  const auto tx = tm.create(100ms, t0);
  CHECK(tm.status(tx) == TxnState::kOpen);
  CHECK(code_of([&] { tm.renew(tx, 50ms, t0); }) == ErrorCode::kBadRequest);
}

TEST_CASE("commit runs prepare then apply on every participant") {
  FakeParticipant a, b;
  TransactionManager tm({&a, &b});
  const auto tx = tm.create(1s, t0);
  tm.commit(tx, t0 + 10ms);
  CHECK(tm.status(tx) == TxnState::kCommitted);
  CHECK(a.log == std::vector<std::string>{"commit"});
  CHECK(b.log == std::vector<std::string>{"commit"});
  CHECK(code_of([&] { tm.commit(tx, t0); }) == ErrorCode::kTxnNotOpen);
  CHECK(code_of([&] { tm.abort(tx); }) == ErrorCode::kTxnNotOpen);
}

TEST_CASE("prepare is retried before the transaction is aborted") {
  FakeParticipant p;
  p.refuse = 2;
  TransactionManager tm({&p});
  const auto tx = tm.create(1s, t0);
  tm.commit(tx, t0);
  CHECK(p.prepares == 3);
  CHECK(tm.status(tx) == TxnState::kCommitted);

  p.refuse = 3;
  const auto tx2 = tm.create(1s, t0);
  CHECK(code_of([&] { tm.commit(tx2, t0); }) == ErrorCode::kParticipantUnreachable);
  CHECK(tm.status(tx2) == TxnState::kAborted);
}

TEST_CASE("an overdue transaction cannot commit or renew and ends aborted") {
  FakeParticipant p;
  TransactionManager tm({&p});
  const auto tx = tm.create(100ms, t0);
  CHECK(tm.is_open(tx, t0 + 99ms));
  CHECK_FALSE(tm.is_open(tx, t0 + 100ms));
  CHECK(code_of([&] { tm.commit(tx, t0 + 100ms); }) == ErrorCode::kTxnNotOpen);
  CHECK(tm.status(tx) == TxnState::kAborted);
  CHECK(p.log == std::vector<std::string>{"abort"});

  const auto tx2 = tm.create(100ms, t0);
  CHECK(code_of([&] { tm.renew(tx2, {}, t0 + 150ms); }) == ErrorCode::kTxnNotOpen);
  CHECK(tm.status(tx2) == TxnState::kAborted);
}

TEST_CASE("renew without a lease reuses the current lease length") {
  TransactionManager tm({});
  const auto tx = tm.create(200ms, t0);
  tm.renew(tx, {}, t0 + 150ms);
  CHECK(tm.record(tx).lease_deadline == t0 + 350ms);
  tm.renew(tx, 1s, t0 + 300ms);
  CHECK(tm.record(tx).lease == 1s);
  tm.renew(tx, {}, t0 + 400ms);
  CHECK(tm.record(tx).lease_deadline == t0 + 1400ms);
}

TEST_CASE("expire aborts exactly the overdue open transactions") {
  TransactionManager tm({});
  const auto a = tm.create(100ms, t0, "x");
  const auto b = tm.create(500ms, t0, "x");
  const auto c = tm.create(100ms, t0, "y");
  tm.commit(c, t0);
  const auto gone = tm.expire(t0 + 200ms);
  REQUIRE(gone.size() == 1);
  CHECK(gone[0].id == a);
  CHECK(gone[0].tag == "x");
  CHECK(tm.status(b) == TxnState::kOpen);
  CHECK(tm.open_count() == 1);
  CHECK(tm.open_count("x") == 1);
  CHECK(tm.open_count("y") == 0);
  CHECK(code_of([&] { tm.record(TransactionId::generate()); }) == ErrorCode::kUnknownTxn);
}

TEST_CASE("service: commit promotes and abort restores") {
  std::shared_ptr<ManualClock> clock;
  auto svc = manual_service(clock);
  const auto me = svc->new_client();
  svc->write(me, file(1), {}, Lease::forever());
  const auto tx = svc->txn_create(1s, "c1");
  CHECK(svc->take(me, files(), tx, kNoWait).has_value());
  svc->write(me, file(2), tx, Lease::forever());
  CHECK(svc->status(kCase)["file_entries"] == 1);
  CHECK(svc->status(kCase)["open_txns"] == 1);
  svc->txn_abort(me, tx);
  auto back = svc->read(me, files(), {}, kNoWait);
  REQUIRE(get_if<FileEntry>(back));
  CHECK(get_if<FileEntry>(back)->part_index == 1);
  CHECK(svc->snapshot().size() == 1);

  const auto tx2 = svc->txn_create(1s, "c1");
  svc->take(me, files(), tx2, kNoWait);
  svc->write(me, file(3), tx2, Lease::forever());
  svc->txn_commit(me, tx2);
  auto now_visible = svc->read(me, files(), {}, kNoWait);
  REQUIRE(get_if<FileEntry>(now_visible));
  CHECK(get_if<FileEntry>(now_visible)->part_index == 3);
  CHECK(svc->txn_status(tx2).state == TxnState::kCommitted);
}

TEST_CASE("service: operations under a dead transaction fail") {
  std::shared_ptr<ManualClock> clock;
  auto svc = manual_service(clock);
  const auto me = svc->new_client();
  const auto tx = svc->txn_create(100ms, "");
  clock->advance(150ms);
  CHECK(svc->txn_status(tx).state == TxnState::kAborted);
  CHECK(code_of([&] { svc->write(me, file(1), tx, Lease::forever()); }) == ErrorCode::kTxnNotOpen);
  CHECK(code_of([&] { svc->read(me, files(), tx, kNoWait); }) == ErrorCode::kTxnNotOpen);
  CHECK(code_of([&] { svc->txn_status(TransactionId::generate()); }) == ErrorCode::kUnknownTxn);
}

TEST_CASE("service: sweep expires transactions and restores their takes") {
  std::shared_ptr<ManualClock> clock;
  auto svc = manual_service(clock);
  const auto me = svc->new_client();
  svc->write(me, file(1), {}, Lease::forever());
  const auto tx = svc->txn_create(200ms, "c1");
  svc->take(me, files(), tx, kNoWait);
  CHECK_FALSE(svc->read(me, files(), {}, kNoWait).has_value());

  std::vector<TransactionId> aborted;
  svc->subscribe_aborts(me, "c1",
                        [&](const SubscriptionId&, const TransactionId& t) { aborted.push_back(t); });
  clock->advance(199ms);
  svc->sweep();
  CHECK(aborted.empty());
  clock->advance(1ms);
  svc->sweep();
  REQUIRE(aborted.size() == 1);
  CHECK(aborted[0] == tx);
  CHECK(svc->read(me, files(), {}, kNoWait).has_value());
}

TEST_CASE("service: abort subscriptions are scoped by tag") {
  std::shared_ptr<ManualClock> clock;
  auto svc = manual_service(clock);
  const auto me = svc->new_client();
  std::vector<std::string> seen;
  svc->subscribe_aborts(me, "a", [&](const SubscriptionId&, const TransactionId&) { seen.push_back("a"); });
  svc->subscribe_aborts(me, "", [&](const SubscriptionId&, const TransactionId&) { seen.push_back("*"); });
  svc->txn_abort(me, svc->txn_create(1s, "a"));
  svc->txn_abort(me, svc->txn_create(1s, "b"));
  std::sort(seen.begin(), seen.end());
  CHECK(seen == std::vector<std::string>{"*", "*", "a"});
}

TEST_CASE("service: entry events fire on global visibility") {
  std::shared_ptr<ManualClock> clock;
  auto svc = manual_service(clock);
  const auto me = svc->new_client();
  std::vector<std::int64_t> seen;
  const auto sub = svc->subscribe(me, files(), {}, [&](const SpaceEvent& ev) {
    seen.push_back(std::get<FileEntry>(ev.entry).part_index);
  });
  svc->write(me, file(1), {}, Lease::forever());
  const auto tx = svc->txn_create(1s, "");
  svc->write(me, file(2), tx, Lease::forever());
  CHECK(seen == std::vector<std::int64_t>{1});
  svc->txn_commit(me, tx);
  CHECK(seen == std::vector<std::int64_t>{1, 2});

  // An abort that restores a taken entry makes it visible again.
  const auto tx2 = svc->txn_create(1s, "");
  svc->take(me, files(), tx2, kNoWait);
  svc->txn_abort(me, tx2);
  CHECK(seen == std::vector<std::int64_t>{1, 2, 1});

  svc->unsubscribe(sub);
  svc->write(me, file(9), {}, Lease::forever());
  CHECK(seen.size() == 3);
}

TEST_CASE("service: scoped subscriptions see their transaction's writes") {
  std::shared_ptr<ManualClock> clock;
  auto svc = manual_service(clock);
  const auto me = svc->new_client();
  const auto tx = svc->txn_create(1s, "");
  int seen = 0;
  svc->subscribe(me, files(), tx, [&](const SpaceEvent&) { ++seen; });
  svc->write(me, file(1), tx, Lease::forever());
  svc->write(me, file(2), TransactionId{svc->txn_create(1s, "")}, Lease::forever());
  CHECK(seen == 1);
}

TEST_CASE("service: a blocked take wakes on a matching write") {
  auto svc = std::make_shared<SpaceService>();
  const auto a = svc->new_client();
  const auto b = svc->new_client();
  auto taker = std::async(std::launch::async, [&] { return svc->take(a, files(), {}, 5s); });
  std::this_thread::sleep_for(50ms);
  svc->write(b, file(4), {}, Lease::forever());
  const auto got = taker.get();
  REQUIRE(get_if<FileEntry>(got));
  CHECK(get_if<FileEntry>(got)->part_index == 4);
}

TEST_CASE("service: a blocked take wakes when an abort restores an entry") {
  auto svc = std::make_shared<SpaceService>();
  const auto a = svc->new_client();
  svc->write(a, file(1), {}, Lease::forever());
  const auto tx = svc->txn_create(10s, "");
  svc->take(a, files(), tx, kNoWait);
  auto taker = std::async(std::launch::async, [&] { return svc->take(a, files(), {}, 5s); });
  std::this_thread::sleep_for(50ms);
  svc->txn_abort(a, tx);
  CHECK(taker.get().has_value());
}

TEST_CASE("service: blocking calls time out, stop, and fail on shutdown") {
  auto svc = std::make_shared<SpaceService>();
  const auto a = svc->new_client();
  const auto started = std::chrono::steady_clock::now();
  CHECK_FALSE(svc->read(a, files(), {}, 120ms).has_value());
  CHECK(std::chrono::steady_clock::now() - started >= 120ms);

  std::stop_source stop;
  auto stopped = std::async(std::launch::async,
                            [&] { return svc->take(a, files(), {}, kWaitForever, stop.get_token()); });
  std::this_thread::sleep_for(50ms);
  stop.request_stop();
  CHECK_FALSE(stopped.get().has_value());

  auto blocked = std::async(std::launch::async, [&] { return svc->take(a, files(), {}, kWaitForever); });
  std::this_thread::sleep_for(50ms);
  const auto tx = svc->txn_create(1s, "");
  svc->shutdown();
  CHECK(code_of([&] { blocked.get(); }) == ErrorCode::kSpaceUnavailable);
  CHECK(svc->txn_status(tx).state == TxnState::kAborted);
  CHECK(code_of([&] { svc->write(a, file(1), {}, Lease::forever()); }) == ErrorCode::kSpaceUnavailable);
}

TEST_CASE("service: the real sweeper expires transactions") {
  auto svc = std::make_shared<SpaceService>();
  const auto tx = svc->txn_create(100ms, "");
  std::this_thread::sleep_for(350ms);
  CHECK(svc->status(std::nullopt)["open_txns"] == 0);
  CHECK(svc->txn_status(tx).state == TxnState::kAborted);
}

TEST_CASE("local space delivers callbacks off the caller's thread") {
  auto svc = std::make_shared<SpaceService>();
  LocalSpace space(svc);
  std::promise<std::thread::id> where;
  space.subscribe(files(), std::nullopt, [&](const SpaceEvent&) { where.set_value(std::this_thread::get_id()); });
  space.write(file(1), std::nullopt, Lease::forever());
  auto fut = where.get_future();
  REQUIRE(fut.wait_for(2s) == std::future_status::ready);
  CHECK(fut.get() != std::this_thread::get_id());
}

TEST_CASE("local space counts workers") {
  auto svc = std::make_shared<SpaceService>();
  {
    LocalSpace w(svc, true);
    CHECK(svc->status(std::nullopt)["workers"] == 1);
  }
  CHECK(svc->status(std::nullopt)["workers"] == 0);
}

TEST_CASE("property: a sequential history replays exactly in the model") {
  std::shared_ptr<ManualClock> clock;
  auto svc = manual_service(clock, true);
  const auto me = svc->new_client();
  std::mt19937_64 rng(99);
  std::vector<TransactionId> open;
  for (int i = 0; i < 400; ++i) {
    const auto r = rng() % 8;
    std::optional<TransactionId> tx;
    if (!open.empty() && rng() % 2) tx = open[rng() % open.size()];
    if (r < 3) {
      svc->write(me, file(static_cast<std::int64_t>(rng() % 3)), tx, Lease::forever());
    } else if (r < 4) {
      svc->read(me, files().where("part_index", static_cast<std::int64_t>(rng() % 3)), tx, kNoWait);
    } else if (r < 6) {
      svc->take(me, files(), tx, kNoWait);
    } else if (r == 6) {
      open.push_back(svc->txn_create(1h, ""));
    } else if (!open.empty()) {
      const auto idx = rng() % open.size();
      const auto t = open[idx];
      open.erase(open.begin() + static_cast<long>(idx));
      if (rng() % 2) svc->txn_commit(me, t);
      else svc->txn_abort(me, t);
    }
  }
  CHECK(model::check_history(svc->history()) == "");
}
