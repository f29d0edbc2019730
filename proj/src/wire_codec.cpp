#include "spacefarm/wire.hpp"

namespace spacefarm::wire {

using nlohmann::json;

std::string encode_frame(std::string_view body) {
  if (body.size() > kMaxFrameBytes) {
    fail(ErrorCode::kFrameTooLarge, "frame body of " + std::to_string(body.size()) + " bytes");
  }
  const auto len = static_cast<std::uint32_t>(body.size());
  std::string out;
  out.reserve(body.size() + 4);
  out.push_back(static_cast<char>(len >> 24));
  out.push_back(static_cast<char>(len >> 16));
  out.push_back(static_cast<char>(len >> 8));
  out.push_back(static_cast<char>(len));
  out.append(body);
  return out;
}

void FrameDecoder::feed(std::string_view bytes) {
  if (offset_ > 0 && offset_ == buffer_.size()) {
    buffer_.clear();
    offset_ = 0;
  }
  buffer_.append(bytes);
  if (buffered() >= 4) {
    const auto* p = reinterpret_cast<const unsigned char*>(buffer_.data() + offset_);
    const std::uint32_t len = (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) |
                              (std::uint32_t{p[2]} << 8) | p[3];
    if (len > kMaxFrameBytes) {
      fail(ErrorCode::kFrameTooLarge, "frame of " + std::to_string(len) + " bytes exceeds cap");
    }
  }
}

std::optional<std::string> FrameDecoder::next() {
  if (buffered() < 4) return std::nullopt;
  const auto* p = reinterpret_cast<const unsigned char*>(buffer_.data() + offset_);
  const std::uint32_t len = (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) |
                            (std::uint32_t{p[2]} << 8) | p[3];
  if (len > kMaxFrameBytes) {
    fail(ErrorCode::kFrameTooLarge, "frame of " + std::to_string(len) + " bytes exceeds cap");
  }
  if (buffered() < 4 + std::size_t{len}) return std::nullopt;
  std::string body = buffer_.substr(offset_ + 4, len);
  offset_ += 4 + len;
  if (offset_ > 4096 && offset_ * 2 > buffer_.size()) {
    buffer_.erase(0, offset_);
    offset_ = 0;
  }
  // The next frame's prefix may already be buffered.
  if (buffered() >= 4) feed({});
  return body;
}

namespace {

json error_json(const WireError& e) { return {{"code", e.code}, {"message", e.message}}; }

WireError error_from_json(const json& j) {
  if (!j.is_object() || !j.contains("code") || !j["code"].is_string()) {
    fail(ErrorCode::kBadRequest, "error object needs a string 'code'");
  }
  return {j["code"].get<std::string>(), j.value("message", std::string{})};
}

}  // namespace

json to_json(const Message& message) {
  return std::visit(
      [](const auto& m) -> json {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, Request>) {
          return {{"req_id", m.req_id}, {"op", m.op}, {"params", m.params}};
        } else if constexpr (std::is_same_v<T, Response>) {
          json j{{"req_id", m.req_id}, {"ok", m.ok}};
          if (m.error) {
            j["error"] = error_json(*m.error);
          } else {
            j["result"] = m.result;
          }
          return j;
        } else if constexpr (std::is_same_v<T, EventMessage>) {
          return {{"subscription_id", m.subscription_id}, {"payload", m.payload}};
        } else {
          json j{{"hello", m.hello}};
          if (!m.role.empty()) j["role"] = m.role;
          if (m.error) j["error"] = error_json(*m.error);
          return j;
        }
      },
      message);
}

Message message_from_json(const json& j) {
  if (!j.is_object()) fail(ErrorCode::kBadRequest, "message must be a JSON object");
  if (auto it = j.find("hello"); it != j.end()) {
    if (!it->is_string()) fail(ErrorCode::kBadRequest, "hello must be a string");
    Hello h{it->get<std::string>(), j.value("role", std::string{}), std::nullopt};
    if (j.contains("error")) h.error = error_from_json(j["error"]);
    return h;
  }
  if (!j.contains("req_id")) {
    if (j.contains("subscription_id") && j["subscription_id"].is_string()) {
      return EventMessage{j["subscription_id"].get<std::string>(), j.value("payload", json())};
    }
    fail(ErrorCode::kBadRequest, "message has neither req_id nor subscription_id");
  }
  if (!j["req_id"].is_number_unsigned() && !j["req_id"].is_number_integer()) {
    fail(ErrorCode::kBadRequest, "req_id must be an integer");
  }
  const auto req_id = j["req_id"].get<std::uint64_t>();
  if (j.contains("op")) {
    if (!j["op"].is_string()) fail(ErrorCode::kBadRequest, "op must be a string");
    json params = j.value("params", json::object());
    return Request{req_id, j["op"].get<std::string>(), std::move(params)};
  }
  if (!j.contains("ok") || !j["ok"].is_boolean()) {
    fail(ErrorCode::kBadRequest, "response needs a boolean 'ok'");
  }
  Response r{req_id, j["ok"].get<bool>(), j.value("result", json()), std::nullopt};
  if (j.contains("error")) r.error = error_from_json(j["error"]);
  return r;
}

std::string encode_message(const Message& message) {
  return encode_frame(to_json(message).dump());
}

Message decode_message(std::string_view body) {
  auto j = json::parse(body, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::kBadRequest, "frame body is not valid JSON");
  return message_from_json(j);
}

}  // namespace spacefarm::wire
