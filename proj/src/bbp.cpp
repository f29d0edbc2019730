#include <charconv>

#include "spacefarm/agents.hpp"
#include "spacefarm/error.hpp"

namespace spacefarm {

namespace {

using u64 = std::uint64_t;
using u128 = unsigned __int128;

u64 pow16_mod(u64 e, u64 m) {
  if (m == 1) return 0;
  u64 result = 1;
  u64 base = 16 % m;
  while (e > 0) {
    if (e & 1) result = result * base % m;
    base = base * base % m;
    e >>= 1;
  }
  return result;
}

// Fractional part of 16^d * sum_k 16^-k / (8k+j), as a 64-bit binary fraction.
// Unsigned wraparound is reduction mod 1.
u64 series(u64 j, u64 d) {
  u64 acc = 0;
  for (u64 k = 0; k <= d; ++k) {
    const u64 m = 8 * k + j;
    const u64 r = pow16_mod(d - k, m);
    acc += static_cast<u64>((static_cast<u128>(r) << 64) / m);
  }
  for (u64 t = 1; t < 16; ++t) {
    const u64 m = 8 * (d + t) + j;
    acc += static_cast<u64>((static_cast<u128>(1) << (64 - 4 * t)) / m);
  }
  return acc;
}

}  // namespace

int bbp_digit(std::uint64_t position) {
  const u64 d = position - 1;
  const u64 x = 4 * series(1, d) - 2 * series(4, d) - series(5, d) - series(6, d);
  return static_cast<int>(x >> 60);
}

std::string bbp_hex_digits(std::uint64_t start, std::uint64_t count, std::uint64_t guard) {
  if (start < 1) fail(ErrorCode::kMalformedPayload, "start position must be >= 1");
  if (start + count > guard) {
    fail(ErrorCode::kPositionOverflow, "positions up to " + std::to_string(start + count - 1) +
                                           " exceed the guard of " + std::to_string(guard));
  }
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out(count, '0');
  for (u64 i = 0; i < count; ++i) out[i] = kHex[bbp_digit(start + i)];
  return out;
}

std::string format_bbp_range(const BbpRange& range) {
  return "start=" + std::to_string(range.start) + "\ncount=" + std::to_string(range.count) + "\n";
}

BbpRange parse_bbp_range(std::string_view text) {
  BbpRange r;
  bool have_start = false, have_count = false;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      fail(ErrorCode::kMalformedPayload, "expected key=value, got '" + std::string(line) + "'");
    }
    const auto key = line.substr(0, eq);
    const auto val = line.substr(eq + 1);
    u64 v = 0;
    auto [p, ec] = std::from_chars(val.data(), val.data() + val.size(), v);
    if (ec != std::errc() || p != val.data() + val.size()) {
      fail(ErrorCode::kMalformedPayload, "bad number for " + std::string(key));
    }
    if (key == "start") {
      r.start = v;
      have_start = true;
    } else if (key == "count") {
      r.count = v;
      have_count = true;
    } else {
      fail(ErrorCode::kMalformedPayload, "unknown key " + std::string(key));
    }
  }
  if (!have_start || !have_count) fail(ErrorCode::kMalformedPayload, "need start= and count=");
  if (r.start < 1 || r.count < 1) fail(ErrorCode::kMalformedPayload, "start and count must be >= 1");
  return r;
}

AgentDescriptor bbp_agent() {
  return {"bbp-pi", "1", true, [](std::string_view input, const AgentParams& params, AgentContext&) {
            auto range = parse_bbp_range(input);
            u64 guard = kBbpPositionGuard;
            if (auto it = params.find("position_guard"); it != params.end()) {
              guard = std::stoull(it->second);
            }
            return bbp_hex_digits(range.start, range.count, guard);
          }};
}

}  // namespace spacefarm
