#include <doctest.h>

#include <future>
#include <random>
#include <thread>

#include "raw_client.hpp"
#include "spacefarm/error.hpp"
#include "spacefarm/space_service.hpp"
#include "spacefarm/wire.hpp"

using namespace spacefarm;
using namespace spacefarm::wire;
using namespace std::chrono_literals;
using nlohmann::json;

namespace {

const CaseId kCase("w1");

FileEntry file(std::int64_t part) {
  return FileEntry{kCase, part, new_entry_id(), encode_payload(std::string_view("data"))};
}

Template files() { return Template::of(EntryKind::kFile).where_case(kCase); }

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kInternal;
}

struct Server {
  std::shared_ptr<SpaceService> service = std::make_shared<SpaceService>();
  SpaceServer server{service, "127.0.0.1:0"};
  std::string address() const { return server.address(); }
};

std::unique_ptr<SpaceApi> remote(const std::string& address, SessionOptions options = {}) {
  return RemoteSpace::connect(address, std::move(options));
}

bool eventually(const std::function<bool()>& pred, std::chrono::milliseconds limit = 3s) {
  const auto until = std::chrono::steady_clock::now() + limit;
  while (std::chrono::steady_clock::now() < until) {
    if (pred()) return true;
    std::this_thread::sleep_for(10ms);
  }
  return pred();
}

}  // namespace

TEST_CASE("frames carry a big-endian length prefix") {
  const auto f = encode_frame("abc");
  REQUIRE(f.size() == 7);
  CHECK(f.substr(0, 4) == std::string("\0\0\0\3", 4));
  CHECK(f.substr(4) == "abc");
  const auto big = encode_frame(std::string(0x01020304 & 0xffff, 'x'));
  CHECK(static_cast<unsigned char>(big[2]) == 0x03);
  CHECK(static_cast<unsigned char>(big[3]) == 0x04);
}

TEST_CASE("frame decoder reassembles arbitrary splits") {
  std::mt19937_64 rng(3);
  std::string stream;
  std::vector<std::string> bodies;
  for (int i = 0; i < 50; ++i) {
    bodies.push_back(std::string(rng() % 300, static_cast<char>('a' + i % 26)));
    stream += encode_frame(bodies.back());
  }
  FrameDecoder d;
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < stream.size()) {
    const auto n = std::min<std::size_t>(1 + rng() % 17, stream.size() - pos);
    d.feed(std::string_view(stream).substr(pos, n));
    pos += n;
    while (auto b = d.next()) out.push_back(*b);
  }
  CHECK(out == bodies);
  CHECK(d.buffered() == 0);
}

TEST_CASE("oversize frames are refused on both sides") {
  FrameDecoder d;
  CHECK(code_of([&] { d.feed(std::string("\x04\x00\x00\x01", 4)); }) == ErrorCode::kFrameTooLarge);
  FrameDecoder ok;
  ok.feed(std::string("\x04\x00\x00\x00", 4));  // exactly the cap is allowed
  CHECK_FALSE(ok.next().has_value());
}

TEST_CASE("message shapes are recognised") {
  CHECK(std::holds_alternative<Request>(message_from_json({{"req_id", 1}, {"op", "x"}})));
  CHECK(std::holds_alternative<Response>(message_from_json({{"req_id", 1}, {"ok", true}})));
  CHECK(std::holds_alternative<EventMessage>(message_from_json({{"subscription_id", "s"}})));
  CHECK(std::holds_alternative<Hello>(message_from_json({{"hello", "spacefarm/1"}})));
  CHECK(code_of([] { message_from_json(json::array()); }) == ErrorCode::kBadRequest);
  CHECK(code_of([] { message_from_json({{"x", 1}}); }) == ErrorCode::kBadRequest);
  CHECK(code_of([] { message_from_json({{"req_id", "one"}, {"op", "x"}}); }) == ErrorCode::kBadRequest);
  CHECK(code_of([] { message_from_json({{"req_id", 1}}); }) == ErrorCode::kBadRequest);
  CHECK(code_of([] { decode_message("{not json"); }) == ErrorCode::kBadRequest);
}

TEST_CASE("handshake rejects a foreign protocol version") {
  Server s;
  CHECK(code_of([&] { Session::connect(s.address(), {.hello = "spacefarm/9"}); }) ==
        ErrorCode::kProtocolMismatch);
  auto ok = Session::connect(s.address());
  CHECK(ok->server_protocol() == "spacefarm/1");
}

TEST_CASE("connecting to nothing fails cleanly") {
  CHECK(code_of([] { Session::connect("127.0.0.1:1", {.connect_timeout = 500ms}); }) ==
        ErrorCode::kConnectionFailed);
}

TEST_CASE("remote space mirrors local semantics") {
  Server s;
  auto space = remote(s.address());
  space->write(file(1));
  space->write(file(2), std::nullopt, Lease::millis(60000));
  auto first = space->read(files());
  REQUIRE(get_if<FileEntry>(first));
  CHECK(get_if<FileEntry>(first)->part_index == 1);

  const auto tx = space->txn_create(5s, kCase.str());
  auto taken = space->take(files(), tx);
  REQUIRE(taken.has_value());
  CHECK(space->admin_status(kCase)["file_entries"] == 1);
  CHECK(space->txn_status(tx).state == TxnState::kOpen);
  CHECK(space->txn_status(tx).lease == 5s);
  space->txn_renew(tx);
  space->txn_abort(tx);
  CHECK(space->txn_status(tx).state == TxnState::kAborted);
  CHECK(space->admin_status(kCase)["file_entries"] == 2);

  CHECK(code_of([&] { space->txn_commit(tx); }) == ErrorCode::kTxnNotOpen);
  CHECK(code_of([&] { space->txn_status(TransactionId::generate()); }) == ErrorCode::kUnknownTxn);
  CHECK(code_of([&] { space->txn_create(10ms); }) == ErrorCode::kBadRequest);
  auto session = Session::connect(s.address());
  CHECK(session->call("admin.status")["protocol"] == "1");
  CHECK(code_of([&] { session->call("no.such.op"); }) == ErrorCode::kBadRequest);
}

TEST_CASE("remote blocking take wakes on another client's write") {
  Server s;
  auto a = remote(s.address());
  auto b = remote(s.address());
  auto taker = std::async(std::launch::async, [&] { return a->take(files(), std::nullopt, 5s); });
  std::this_thread::sleep_for(100ms);
  // The blocked call does not hold up other calls on the same session.
  CHECK(a->admin_status()["protocol"] == "1");
  b->write(file(7));
  auto got = taker.get();
  REQUIRE(get_if<FileEntry>(got));
  CHECK(get_if<FileEntry>(got)->part_index == 7);
}

TEST_CASE("remote subscriptions deliver entry and abort events") {
  Server s;
  auto space = remote(s.address());
  std::mutex mu;
  std::vector<std::int64_t> parts;
  std::vector<TransactionId> aborted;
  const auto sub = space->subscribe(files(), std::nullopt, [&](const SpaceEvent& ev) {
    std::lock_guard lk(mu);
    parts.push_back(std::get<FileEntry>(ev.entry).part_index);
  });
  space->subscribe_aborts(kCase.str(), [&](const TransactionId& t) {
    std::lock_guard lk(mu);
    aborted.push_back(t);
  });
  space->write(file(1));
  const auto tx = space->txn_create(1s, kCase.str());
  space->txn_abort(tx);
  space->txn_abort(space->txn_create(1s, "other"));
  CHECK(eventually([&] {
    std::lock_guard lk(mu);
    return parts.size() == 1 && aborted.size() == 1;
  }));
  {
    std::lock_guard lk(mu);
    CHECK(aborted[0] == tx);
  }
  space->unsubscribe(sub);
  space->write(file(2));
  std::this_thread::sleep_for(200ms);
  std::lock_guard lk(mu);
  CHECK(parts.size() == 1);
}

TEST_CASE("worker sessions are counted while connected") {
  Server s;
  auto observer = remote(s.address());
  {
    auto w = remote(s.address(), {.role = "worker"});
    CHECK(observer->admin_status()["workers"] == 1);
  }
  CHECK(eventually([&] { return observer->admin_status()["workers"] == 0; }));
}

TEST_CASE("pending calls fail when the session closes") {
  Server s;
  auto session = Session::connect(s.address());
  RemoteSpace space(session);
  auto blocked = std::async(std::launch::async, [&] { return space.take(files(), std::nullopt, kWaitForever); });
  std::this_thread::sleep_for(100ms);
  session->close();
  CHECK(code_of([&] { blocked.get(); }) == ErrorCode::kSessionClosed);
  CHECK(code_of([&] { space.admin_status(std::nullopt); }) == ErrorCode::kSessionClosed);
}

TEST_CASE("server shutdown fails blocked remote calls") {
  Server s;
  auto space = remote(s.address());
  auto blocked = std::async(std::launch::async, [&] { return space->take(files(), std::nullopt, kWaitForever); });
  std::this_thread::sleep_for(100ms);
  s.service->shutdown();
  const auto code = code_of([&] { blocked.get(); });
  CHECK((code == ErrorCode::kSpaceUnavailable || code == ErrorCode::kSessionClosed));
}

TEST_CASE("raw protocol: requests before hello and oversize frames drop the connection") {
  Server s;
  {
    RawClient c(s.server.port());
    REQUIRE(c.ok());
    c.send(Request{1, "admin.status", json::object()});
    auto m = c.recv();
    // Either a mismatch hello or a plain close.
    if (m) {
      REQUIRE(std::holds_alternative<Hello>(*m));
      CHECK(std::get<Hello>(*m).error.has_value());
    }
    CHECK_FALSE(c.recv().has_value());
  }
  {
    RawClient c(s.server.port());
    REQUIRE(c.hello());
    c.send_raw(std::string("\x7f\xff\xff\xff", 4));
    CHECK_FALSE(c.recv().has_value());
  }
}

TEST_CASE("raw protocol: a take abandoned by disconnect consumes nothing") {
  Server s;
  {
    RawClient c(s.server.port());
    REQUIRE(c.hello());
    c.send(Request{1, "space.take", {{"template", to_json(files())}, {"timeout_ms", -1}}});
    std::this_thread::sleep_for(100ms);
  }
  std::this_thread::sleep_for(100ms);
  auto space = remote(s.address());
  space->write(file(3));
  std::this_thread::sleep_for(200ms);
  CHECK(space->read(files()).has_value());
}
