#pragma once

// Client/server protocol for the space and transaction manager.
//
// Frame:   4-byte big-endian length, then that many bytes of UTF-8 JSON.
// Hello:   first frame each way is {"hello": "spacefarm/1"}.
// Request: {"req_id": n, "op": "space.take", "params": {...}}
// Reply:   {"req_id": n, "ok": true, "result": ...}
//          {"req_id": n, "ok": false, "error": {"code": "TXN_NOT_OPEN", "message": "..."}}
// Event:   {"subscription_id": "...", "payload": {...}}

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <variant>

#include <json.hpp>

#include "spacefarm/callback_queue.hpp"
#include "spacefarm/error.hpp"
#include "spacefarm/space_api.hpp"

namespace spacefarm {

class SpaceService;

namespace wire {

inline constexpr std::uint32_t kMaxFrameBytes = 64u * 1024 * 1024;
inline constexpr std::string_view kHello = "spacefarm/1";
inline constexpr std::string_view kProtocolVersion = "1";
inline constexpr std::uint16_t kDefaultPort = 7420;

std::string encode_frame(std::string_view body);

/// Incremental frame splitter for a byte stream.
class FrameDecoder {
 public:
  /// Throws Error{kFrameTooLarge} as soon as an oversize prefix is seen.
  void feed(std::string_view bytes);
  std::optional<std::string> next();
  std::size_t buffered() const { return buffer_.size() - offset_; }

 private:
  std::string buffer_;
  std::size_t offset_ = 0;
};

struct WireError {
  std::string code;
  std::string message;
  bool operator==(const WireError&) const = default;
};

struct Request {
  std::uint64_t req_id = 0;
  std::string op;
  nlohmann::json params = nlohmann::json::object();
  bool operator==(const Request&) const = default;
};

struct Response {
  std::uint64_t req_id = 0;
  bool ok = true;
  nlohmann::json result;
  std::optional<WireError> error;
  bool operator==(const Response&) const = default;
};

struct EventMessage {
  std::string subscription_id;
  nlohmann::json payload;
  bool operator==(const EventMessage&) const = default;
};

struct Hello {
  std::string hello;
  std::string role;
  std::optional<WireError> error;
  bool operator==(const Hello&) const = default;
};

using Message = std::variant<Request, Response, EventMessage, Hello>;

nlohmann::json to_json(const Message& message);
/// Throws Error{kBadRequest} when the object is not one of the four shapes.
Message message_from_json(const nlohmann::json& j);

std::string encode_message(const Message& message);
Message decode_message(std::string_view body);

// ---------------------------------------------------------------------------

/// TCP front end of a SpaceService. One reader thread per connection;
/// blocking reads/takes run on their own threads so a session can pipeline.
class SpaceServer {
 public:
  SpaceServer(std::shared_ptr<SpaceService> service, const std::string& bind_address);
  ~SpaceServer();

  SpaceServer(const SpaceServer&) = delete;
  SpaceServer& operator=(const SpaceServer&) = delete;

  std::uint16_t port() const { return port_; }
  std::string address() const;
  /// Closes the listener and every connection. Does not shut the service down.
  void stop();

  class Connection;

 private:
  void accept_loop();

  std::shared_ptr<SpaceService> service_;
  std::string host_;
  std::uint16_t port_ = 0;
  int listen_fd_ = -1;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;

  std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::uint64_t, std::weak_ptr<Connection>> connections_;
  std::uint64_t next_conn_ = 0;
  friend class Connection;
  void connection_done(std::uint64_t id);
};

struct SessionOptions {
  std::string role = "client";  // "worker" sessions count toward registrations
  std::chrono::milliseconds connect_timeout{3000};
  std::chrono::milliseconds heartbeat{5000};
  std::string hello{kHello};    // overridable for negotiation tests
};

/// Client side of one connection. Thread-safe; responses are matched to
/// callers by req_id and events run on a dedicated delivery thread.
class Session : public std::enable_shared_from_this<Session> {
 public:
  using EventHandler = std::function<void(const nlohmann::json& payload)>;

  /// Throws Error{kConnectionFailed} or Error{kProtocolMismatch}.
  static std::shared_ptr<Session> connect(const std::string& address, SessionOptions options = {});
  ~Session();

  /// Throws the server's error verbatim as Error, or Error{kSessionClosed}.
  nlohmann::json call(const std::string& op, const nlohmann::json& params = nlohmann::json::object());

  /// Events that arrived before the handler was set are replayed to it.
  void set_event_handler(const std::string& subscription_id, EventHandler handler);
  void remove_event_handler(const std::string& subscription_id);

  const std::string& server_protocol() const { return server_protocol_; }
  bool is_open() const { return open_.load(); }
  void close();

 private:
  Session() = default;
  void reader_loop();
  void heartbeat_loop(std::stop_token st);
  void dispatch_event(const std::string& id, const nlohmann::json& payload);

  std::unique_ptr<struct SessionSocket> socket_;
  std::string server_protocol_;
  std::atomic<bool> open_{false};
  std::atomic<std::uint64_t> next_req_{1};

  std::mutex send_mu_;
  std::mutex pending_mu_;
  std::map<std::uint64_t, std::promise<Response>> pending_;

  std::mutex handlers_mu_;
  std::map<std::string, EventHandler> handlers_;
  std::map<std::string, std::vector<nlohmann::json>> orphan_events_;
  std::set<std::string> removed_;

  std::unique_ptr<CallbackQueue> delivery_;
  std::thread reader_;
  std::jthread heartbeat_;
  std::mutex close_mu_;
};

/// SpaceApi over a Session.
class RemoteSpace final : public SpaceApi {
 public:
  explicit RemoteSpace(std::shared_ptr<Session> session) : session_(std::move(session)) {}
  static std::unique_ptr<RemoteSpace> connect(const std::string& address,
                                              SessionOptions options = {});

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

  Session& session() { return *session_; }

 private:
  std::optional<Entry> lookup(const char* op, const Template& tmpl,
                              const std::optional<TransactionId>& txn,
                              std::chrono::milliseconds timeout);
  std::shared_ptr<Session> session_;
};

}  // namespace wire
}  // namespace spacefarm
