#include "spacefarm/event_log.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <mutex>

namespace spacefarm::events {

namespace {

std::mutex& mu() {
  static std::mutex m;
  return m;
}

std::string& path_ref() {
  static std::string p = [] {
    const char* env = std::getenv("SPACEFARM_EVENT_LOG");
    return std::string(env ? env : "");
  }();
  return p;
}

}  // namespace

void set_path(const std::string& path) {
  std::lock_guard lk(mu());
  path_ref() = path;
}

bool enabled() {
  std::lock_guard lk(mu());
  return !path_ref().empty();
}

std::int64_t wall_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

void log(const std::string& source, const std::string& event, nlohmann::json fields) {
  std::string path;
  {
    std::lock_guard lk(mu());
    path = path_ref();
  }
  if (path.empty()) return;
  fields["t_ms"] = wall_ms();
  fields["pid"] = static_cast<std::int64_t>(::getpid());
  fields["source"] = source;
  fields["event"] = event;
  const std::string line = fields.dump() + "\n";
  // O_APPEND keeps lines from concurrent processes whole.
  const int fd = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) return;
  [[maybe_unused]] auto n = ::write(fd, line.data(), line.size());
  ::close(fd);
}

std::vector<nlohmann::json> read_all(const std::string& path) {
  std::vector<nlohmann::json> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (!j.is_discarded() && j.is_object()) out.push_back(std::move(j));
  }
  return out;
}

}  // namespace spacefarm::events
