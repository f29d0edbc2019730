#include <sys/socket.h>
#include <unistd.h>

#include <deque>
#include <iostream>

#include "net.hpp"
#include "spacefarm/space_service.hpp"
#include "spacefarm/wire.hpp"

namespace spacefarm::wire {

using nlohmann::json;

namespace {

std::optional<TransactionId> opt_txn(const json& params) {
  auto it = params.find("txn");
  if (it == params.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) fail(ErrorCode::kBadRequest, "txn must be a string");
  auto id = TransactionId::parse(it->get<std::string>());
  if (!id) fail(ErrorCode::kBadRequest, "txn is not a canonical id");
  return id;
}

TransactionId req_txn(const json& params) {
  auto it = params.find("txn_id");
  if (it == params.end() || !it->is_string()) fail(ErrorCode::kBadRequest, "txn_id required");
  auto id = TransactionId::parse(it->get<std::string>());
  if (!id) fail(ErrorCode::kBadRequest, "txn_id is not a canonical id");
  return *id;
}

std::int64_t int_param(const json& params, const char* key, std::int64_t fallback) {
  auto it = params.find(key);
  if (it == params.end() || it->is_null()) return fallback;
  if (!it->is_number_integer()) fail(ErrorCode::kBadRequest, std::string(key) + " must be an integer");
  return it->get<std::int64_t>();
}

const json& obj_param(const json& params, const char* key) {
  auto it = params.find(key);
  if (it == params.end() || !it->is_object()) {
    fail(ErrorCode::kBadRequest, std::string(key) + " must be an object");
  }
  return *it;
}

bool is_blocking(const Request& req) {
  if (req.op != "space.read" && req.op != "space.take") return false;
  auto it = req.params.find("timeout_ms");
  return it != req.params.end() && it->is_number_integer() && it->get<std::int64_t>() != 0;
}

}  // namespace

class SpaceServer::Connection : public std::enable_shared_from_this<Connection> {
 public:
  Connection(SpaceServer& server, std::uint64_t id, std::shared_ptr<SpaceService> service,
             net::Socket sock)
      : server_(server), id_(id), service_(std::move(service)), sock_(std::move(sock)) {
    client_ = service_->new_client();
  }

  void start() {
    writer_ = std::thread([this] { write_loop(); });
    std::thread([self = shared_from_this()] { self->read_loop(); }).detach();
  }

  void shutdown() { sock_.shutdown_both(); }

 private:
  struct Outgoing {
    std::string frame;
    std::function<void()> on_fail;
  };

  void enqueue(std::string frame, std::function<void()> on_fail = {}) {
    {
      std::lock_guard lk(out_mu_);
      if (!write_broken_) {
        out_.push_back({std::move(frame), std::move(on_fail)});
        out_cv_.notify_one();
        return;
      }
    }
    if (on_fail) on_fail();
  }

  void write_loop() {
    while (true) {
      Outgoing item;
      {
        std::unique_lock lk(out_mu_);
        out_cv_.wait(lk, [&] { return !out_.empty() || writer_stop_; });
        if (out_.empty()) return;
        item = std::move(out_.front());
        out_.pop_front();
      }
      if (!net::send_all(sock_, item.frame)) {
        std::deque<Outgoing> rest;
        {
          std::lock_guard lk(out_mu_);
          write_broken_ = true;
          rest.swap(out_);
        }
        sock_.shutdown_both();
        if (item.on_fail) item.on_fail();
        for (auto& r : rest) {
          if (r.on_fail) r.on_fail();
        }
      }
    }
  }

  void read_loop() {
    try {
      if (handshake()) {
        while (auto body = net::recv_frame(sock_)) {
          Message msg = decode_message(*body);
          auto* req = std::get_if<Request>(&msg);
          if (!req) continue;
          if (is_blocking(*req)) {
            spawn_blocking(std::move(*req));
          } else {
            respond(*req, handle(*req, {}));
          }
        }
      }
    } catch (const std::exception&) {
      // malformed or oversize frame: drop the connection
    }
    teardown();
  }

  bool handshake() {
    auto body = net::recv_frame(sock_);
    if (!body) return false;
    Message msg = decode_message(*body);
    auto* hello = std::get_if<Hello>(&msg);
    if (!hello || hello->hello != kHello) {
      Hello reply{std::string(kHello), "", WireError{std::string(to_string(ErrorCode::kProtocolMismatch)),
                                                     "server speaks " + std::string(kHello)}};
      net::send_all(sock_, encode_message(reply));
      return false;
    }
    if (hello->role == "worker") {
      worker_ = true;
      service_->attach_worker();
    }
    enqueue(encode_message(Hello{std::string(kHello), "", std::nullopt}));
    return true;
  }

  void spawn_blocking(Request req) {
    auto stop = std::make_shared<std::stop_source>();
    {
      std::lock_guard lk(ops_mu_);
      if (closing_) return;
      ++active_;
      blocking_[req.req_id] = stop;
    }
    std::thread([self = shared_from_this(), req = std::move(req), stop] {
      auto res = self->handle(req, stop->get_token());
      self->respond(req, std::move(res));
      std::lock_guard lk(self->ops_mu_);
      self->blocking_.erase(req.req_id);
      --self->active_;
      self->ops_cv_.notify_all();
    }).detach();
  }

  struct Handled {
    Response response;
    std::function<void()> on_fail;
  };

  void respond(const Request&, Handled h) {
    enqueue(encode_message(h.response), std::move(h.on_fail));
  }

  Handled handle(const Request& req, std::stop_token stop) {
    Handled h;
    h.response.req_id = req.req_id;
    try {
      h.response.result = dispatch(req, stop, h.on_fail);
    } catch (const Error& e) {
      h.response.ok = false;
      h.response.error = WireError{std::string(to_string(e.code())), e.what()};
    } catch (const std::exception& e) {
      h.response.ok = false;
      h.response.error = WireError{std::string(to_string(ErrorCode::kBadRequest)), e.what()};
    }
    return h;
  }

  json dispatch(const Request& req, std::stop_token stop, std::function<void()>& on_fail) {
    const auto& p = req.params;
    const auto& op = req.op;
    if (op == "space.write") {
      const auto entry = entry_from_json(obj_param(p, "entry"));
      auto handle = service_->write(client_, entry, opt_txn(p), Lease::millis(int_param(p, "lease_ms", -1)));
      return {{"entry_id", handle.str()}};
    }
    if (op == "space.read" || op == "space.take") {
      const auto tmpl = template_from_json(obj_param(p, "template"));
      const auto txn = opt_txn(p);
      const auto timeout = std::chrono::milliseconds(int_param(p, "timeout_ms", 0));
      auto found = op == "space.read" ? service_->read(client_, tmpl, txn, timeout, stop)
                                      : service_->take(client_, tmpl, txn, timeout, stop);
      if (!found) return {{"entry", nullptr}};
      if (op == "space.take" && !txn) {
        // The caller never saw it: put it back.
        on_fail = [svc = service_, client = client_, entry = *found] {
          try {
            svc->write(client, entry, std::nullopt, Lease::forever());
          } catch (const std::exception&) {
          }
        };
      }
      return {{"entry", to_json(*found)}};
    }
    if (op == "space.subscribe") {
      const auto tmpl = template_from_json(obj_param(p, "template"));
      auto id = service_->subscribe(client_, tmpl, opt_txn(p), [this](const SpaceEvent& ev) {
        enqueue(encode_message(EventMessage{
            ev.subscription.str(), {{"handle", ev.handle.str()}, {"entry", to_json(ev.entry)}}}));
      });
      return {{"subscription_id", id.str()}};
    }
    if (op == "space.unsubscribe") {
      auto id = EntryId::parse(p.value("subscription_id", std::string{}));
      if (!id) fail(ErrorCode::kBadRequest, "subscription_id required");
      service_->unsubscribe(*id);
      return json::object();
    }
    if (op == "txn.create") {
      const auto lease = int_param(p, "lease_ms", -1);
      if (lease < 0) fail(ErrorCode::kBadRequest, "lease_ms required");
      auto id = service_->txn_create(std::chrono::milliseconds(lease), p.value("tag", std::string{}));
      return {{"txn_id", id.str()}};
    }
    if (op == "txn.renew") {
      std::optional<std::chrono::milliseconds> lease;
      if (auto ms = int_param(p, "lease_ms", -1); ms >= 0) lease = std::chrono::milliseconds(ms);
      service_->txn_renew(req_txn(p), lease);
      return json::object();
    }
    if (op == "txn.commit") {
      service_->txn_commit(client_, req_txn(p));
      return json::object();
    }
    if (op == "txn.abort") {
      service_->txn_abort(client_, req_txn(p));
      return json::object();
    }
    if (op == "txn.status") {
      auto info = service_->txn_status(req_txn(p));
      return {{"state", to_string(info.state)}, {"lease_ms", info.lease.count()}};
    }
    if (op == "txn.subscribe_aborts") {
      auto id = service_->subscribe_aborts(
          client_, p.value("tag", std::string{}),
          [this](const SubscriptionId& sub, const TransactionId& txn) {
            enqueue(encode_message(EventMessage{sub.str(), {{"txn_id", txn.str()}}}));
          });
      return {{"subscription_id", id.str()}};
    }
    if (op == "admin.status") {
      std::optional<CaseId> case_id;
      if (auto it = p.find("case_id"); it != p.end() && it->is_string()) {
        case_id = CaseId(it->get<std::string>());
      }
      return service_->status(case_id);
    }
    fail(ErrorCode::kBadRequest, "unknown op '" + op + "'");
  }

  void teardown() {
    sock_.shutdown_both();
    {
      std::unique_lock lk(ops_mu_);
      closing_ = true;
      for (auto& [id, stop] : blocking_) stop->request_stop();
    }
    // After this no sink can reference `this`.
    service_->unsubscribe_all(client_);
    {
      std::unique_lock lk(ops_mu_);
      ops_cv_.wait(lk, [&] { return active_ == 0; });
    }
    {
      std::lock_guard lk(out_mu_);
      writer_stop_ = true;
      // Undelivered frames: run their failure hooks.
      write_broken_ = true;
    }
    out_cv_.notify_all();
    if (writer_.joinable()) writer_.join();
    std::deque<Outgoing> rest;
    {
      std::lock_guard lk(out_mu_);
      rest.swap(out_);
    }
    for (auto& r : rest) {
      if (r.on_fail) r.on_fail();
    }
    if (worker_) service_->detach_worker();
    server_.connection_done(id_);
  }

  SpaceServer& server_;
  std::uint64_t id_;
  std::shared_ptr<SpaceService> service_;
  net::Socket sock_;
  ClientId client_ = 0;
  bool worker_ = false;

  std::mutex out_mu_;
  std::condition_variable out_cv_;
  std::deque<Outgoing> out_;
  bool writer_stop_ = false;
  bool write_broken_ = false;
  std::thread writer_;

  std::mutex ops_mu_;
  std::condition_variable ops_cv_;
  std::map<std::uint64_t, std::shared_ptr<std::stop_source>> blocking_;
  int active_ = 0;
  bool closing_ = false;
};

SpaceServer::SpaceServer(std::shared_ptr<SpaceService> service, const std::string& bind_address)
    : service_(std::move(service)) {
  auto hp = net::parse_address(bind_address);
  host_ = hp.host;
  auto sock = net::listen_on(hp);
  port_ = net::local_port(sock);
  listen_fd_ = ::dup(sock.fd());
  acceptor_ = std::thread([this] { accept_loop(); });
}

SpaceServer::~SpaceServer() { stop(); }

std::string SpaceServer::address() const {
  const auto host = host_.empty() || host_ == "0.0.0.0" ? std::string("127.0.0.1") : host_;
  return host + ":" + std::to_string(port_);
}

void SpaceServer::accept_loop() {
  while (!stopping_) {
    const int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (stopping_) break;
      if (errno == EINTR || errno == ECONNABORTED) continue;
      break;
    }
    net::Socket sock(fd);
    std::shared_ptr<Connection> conn;
    {
      std::lock_guard lk(mu_);
      if (stopping_) break;
      const auto id = next_conn_++;
      conn = std::make_shared<Connection>(*this, id, service_, std::move(sock));
      connections_[id] = conn;
    }
    conn->start();
  }
}

void SpaceServer::connection_done(std::uint64_t id) {
  std::lock_guard lk(mu_);
  connections_.erase(id);
  cv_.notify_all();
}

void SpaceServer::stop() {
  if (stopping_.exchange(true)) {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return connections_.empty(); });
    return;
  }
  if (listen_fd_ >= 0) {
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
  }
  if (acceptor_.joinable()) acceptor_.join();
  listen_fd_ = -1;
  std::unique_lock lk(mu_);
  for (auto& [id, weak] : connections_) {
    if (auto c = weak.lock()) c->shutdown();
  }
  cv_.wait(lk, [&] { return connections_.empty(); });
}

}  // namespace spacefarm::wire
