#include <vector>

#include "net.hpp"
#include "spacefarm/wire.hpp"

namespace spacefarm::wire {

using nlohmann::json;

struct SessionSocket {
  net::Socket sock;
};

namespace {

constexpr std::size_t kMaxOrphansPerSubscription = 4096;

Response closed_response(std::uint64_t req_id) {
  return {req_id, false, json(),
          WireError{std::string(to_string(ErrorCode::kSessionClosed)), "session closed"}};
}

}  // namespace

std::shared_ptr<Session> Session::connect(const std::string& address, SessionOptions options) {
  auto hp = net::parse_address(address);
  std::shared_ptr<Session> s(new Session());
  s->socket_ = std::make_unique<SessionSocket>();
  s->socket_->sock = net::connect_to(hp, options.connect_timeout);

  Hello hello{options.hello, options.role, std::nullopt};
  if (!net::send_all(s->socket_->sock, encode_message(hello))) {
    fail(ErrorCode::kConnectionFailed, "connection to " + address + " dropped during hello");
  }
  auto body = net::recv_frame(s->socket_->sock);
  if (!body) {
    fail(ErrorCode::kProtocolMismatch, "server at " + address + " closed the connection during hello");
  }
  Message reply = decode_message(*body);
  auto* h = std::get_if<Hello>(&reply);
  if (!h) fail(ErrorCode::kProtocolMismatch, "server did not answer the hello");
  if (h->error) fail(ErrorCode::kProtocolMismatch, h->error->message);
  if (h->hello != kHello) fail(ErrorCode::kProtocolMismatch, "server speaks " + h->hello);
  s->server_protocol_ = h->hello;

  s->open_ = true;
  s->delivery_ = std::make_unique<CallbackQueue>();
  s->reader_ = std::thread([raw = s.get()] { raw->reader_loop(); });
  if (options.heartbeat.count() > 0) {
    std::weak_ptr<Session> weak = s;
    const auto period = options.heartbeat;
    s->heartbeat_ = std::jthread([weak, period](std::stop_token st) {
      auto next = std::chrono::steady_clock::now() + period;
      while (!st.stop_requested()) {
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
        if (std::chrono::steady_clock::now() < next) continue;
        next += period;
        auto self = weak.lock();
        if (!self || !self->is_open()) return;
        try {
          self->call("admin.status");
        } catch (const std::exception&) {
          return;
        }
      }
    });
  }
  return s;
}

Session::~Session() { close(); }

void Session::close() {
  std::lock_guard lk(close_mu_);
  open_ = false;
  if (socket_) socket_->sock.shutdown_both();
  if (heartbeat_.joinable() && heartbeat_.get_id() != std::this_thread::get_id()) {
    heartbeat_.request_stop();
    heartbeat_.join();
  }
  if (reader_.joinable() && reader_.get_id() != std::this_thread::get_id()) reader_.join();
  if (delivery_) delivery_->stop();
}

json Session::call(const std::string& op, const json& params) {
  const auto id = next_req_++;
  std::future<Response> fut;
  {
    std::lock_guard lk(pending_mu_);
    if (!open_) fail(ErrorCode::kSessionClosed, "session closed");
    fut = pending_[id].get_future();
  }
  const auto frame = encode_message(Request{id, op, params});
  bool sent;
  {
    std::lock_guard lk(send_mu_);
    sent = net::send_all(socket_->sock, frame);
  }
  if (!sent) {
    std::lock_guard lk(pending_mu_);
    if (auto it = pending_.find(id); it != pending_.end()) {
      it->second.set_value(closed_response(id));
      pending_.erase(it);
    }
  }
  Response r = fut.get();
  if (r.ok) return std::move(r.result);
  const auto code = r.error ? error_code_from_string(r.error->code) : std::nullopt;
  throw Error(code.value_or(ErrorCode::kInternal), r.error ? r.error->message : "request failed");
}

void Session::reader_loop() {
  try {
    while (auto body = net::recv_frame(socket_->sock)) {
      Message msg = decode_message(*body);
      if (auto* r = std::get_if<Response>(&msg)) {
        std::lock_guard lk(pending_mu_);
        if (auto it = pending_.find(r->req_id); it != pending_.end()) {
          it->second.set_value(std::move(*r));
          pending_.erase(it);
        }
      } else if (auto* ev = std::get_if<EventMessage>(&msg)) {
        dispatch_event(ev->subscription_id, ev->payload);
      }
    }
  } catch (const std::exception&) {
  }
  std::lock_guard lk(pending_mu_);
  open_ = false;
  for (auto& [id, promise] : pending_) promise.set_value(closed_response(id));
  pending_.clear();
}

void Session::dispatch_event(const std::string& id, const json& payload) {
  std::lock_guard lk(handlers_mu_);
  if (auto it = handlers_.find(id); it != handlers_.end()) {
    delivery_->post([h = it->second, payload] { h(payload); });
    return;
  }
  if (removed_.count(id)) return;
  auto& buf = orphan_events_[id];
  if (buf.size() < kMaxOrphansPerSubscription) buf.push_back(payload);
}

void Session::set_event_handler(const std::string& subscription_id, EventHandler handler) {
  std::lock_guard lk(handlers_mu_);
  handlers_[subscription_id] = handler;
  removed_.erase(subscription_id);
  if (auto it = orphan_events_.find(subscription_id); it != orphan_events_.end()) {
    for (auto& payload : it->second) {
      delivery_->post([handler, payload = std::move(payload)] { handler(payload); });
    }
    orphan_events_.erase(it);
  }
}

void Session::remove_event_handler(const std::string& subscription_id) {
  std::lock_guard lk(handlers_mu_);
  handlers_.erase(subscription_id);
  orphan_events_.erase(subscription_id);
  removed_.insert(subscription_id);
}

// ---------------------------------------------------------------------------

namespace {

json txn_param(const std::optional<TransactionId>& txn) {
  return txn ? json(txn->str()) : json(nullptr);
}

}  // namespace

std::unique_ptr<RemoteSpace> RemoteSpace::connect(const std::string& address,
                                                  SessionOptions options) {
  return std::make_unique<RemoteSpace>(Session::connect(address, std::move(options)));
}

EntryId RemoteSpace::write(const Entry& entry, const std::optional<TransactionId>& txn,
                           const Lease& lease) {
  auto res = session_->call("space.write", {{"entry", to_json(entry)},
                                            {"txn", txn_param(txn)},
                                            {"lease_ms", lease.wire_millis()}});
  auto id = EntryId::parse(res.value("entry_id", std::string{}));
  if (!id) fail(ErrorCode::kBadRequest, "server returned no entry_id");
  return *id;
}

std::optional<Entry> RemoteSpace::lookup(const char* op, const Template& tmpl,
                                         const std::optional<TransactionId>& txn,
                                         std::chrono::milliseconds timeout) {
  auto res = session_->call(op, {{"template", to_json(tmpl)},
                                 {"txn", txn_param(txn)},
                                 {"timeout_ms", timeout.count()}});
  auto it = res.find("entry");
  if (it == res.end() || it->is_null()) return std::nullopt;
  return entry_from_json(*it);
}

std::optional<Entry> RemoteSpace::read(const Template& tmpl, const std::optional<TransactionId>& txn,
                                       std::chrono::milliseconds timeout) {
  return lookup("space.read", tmpl, txn, timeout);
}

std::optional<Entry> RemoteSpace::take(const Template& tmpl, const std::optional<TransactionId>& txn,
                                       std::chrono::milliseconds timeout) {
  return lookup("space.take", tmpl, txn, timeout);
}

SubscriptionId RemoteSpace::subscribe(const Template& tmpl, const std::optional<TransactionId>& txn,
                                      EntryCallback callback) {
  auto res = session_->call("space.subscribe", {{"template", to_json(tmpl)}, {"txn", txn_param(txn)}});
  auto id = EntryId::parse(res.value("subscription_id", std::string{}));
  if (!id) fail(ErrorCode::kBadRequest, "server returned no subscription_id");
  session_->set_event_handler(id->str(), [cb = std::move(callback), sub = *id](const json& payload) {
    auto handle = EntryId::parse(payload.value("handle", std::string{}));
    cb(SpaceEvent{sub, handle.value_or(EntryId{}), entry_from_json(payload.at("entry"))});
  });
  return *id;
}

void RemoteSpace::unsubscribe(const SubscriptionId& id) {
  session_->remove_event_handler(id.str());
  session_->call("space.unsubscribe", {{"subscription_id", id.str()}});
}

TransactionId RemoteSpace::txn_create(std::chrono::milliseconds lease, const std::string& tag) {
  json params{{"lease_ms", lease.count()}};
  if (!tag.empty()) params["tag"] = tag;
  auto res = session_->call("txn.create", params);
  auto id = TransactionId::parse(res.value("txn_id", std::string{}));
  if (!id) fail(ErrorCode::kBadRequest, "server returned no txn_id");
  return *id;
}

void RemoteSpace::txn_renew(const TransactionId& txn, std::optional<std::chrono::milliseconds> lease) {
  json params{{"txn_id", txn.str()}};
  if (lease) params["lease_ms"] = lease->count();
  session_->call("txn.renew", params);
}

void RemoteSpace::txn_commit(const TransactionId& txn) {
  session_->call("txn.commit", {{"txn_id", txn.str()}});
}

void RemoteSpace::txn_abort(const TransactionId& txn) {
  session_->call("txn.abort", {{"txn_id", txn.str()}});
}

TxnInfo RemoteSpace::txn_status(const TransactionId& txn) {
  auto res = session_->call("txn.status", {{"txn_id", txn.str()}});
  auto state = txn_state_from_string(res.value("state", std::string{}));
  if (!state) fail(ErrorCode::kBadRequest, "server returned an unknown transaction state");
  return {*state, std::chrono::milliseconds(res.value("lease_ms", std::int64_t{0}))};
}

SubscriptionId RemoteSpace::subscribe_aborts(const std::string& tag, AbortCallback callback) {
  json params = json::object();
  if (!tag.empty()) params["tag"] = tag;
  auto res = session_->call("txn.subscribe_aborts", params);
  auto id = EntryId::parse(res.value("subscription_id", std::string{}));
  if (!id) fail(ErrorCode::kBadRequest, "server returned no subscription_id");
  session_->set_event_handler(id->str(), [cb = std::move(callback)](const json& payload) {
    if (auto txn = TransactionId::parse(payload.value("txn_id", std::string{}))) cb(*txn);
  });
  return *id;
}

json RemoteSpace::admin_status(const std::optional<CaseId>& case_id) {
  json params = json::object();
  if (case_id) params["case_id"] = case_id->str();
  return session_->call("admin.status", params);
}

}  // namespace spacefarm::wire
