#include <thread>

#include "spacefarm/agents.hpp"
#include "spacefarm/error.hpp"

namespace spacefarm {

void AgentRegistry::add(AgentDescriptor descriptor) {
  auto key = std::make_pair(descriptor.agent_id, descriptor.version);
  agents_.insert_or_assign(std::move(key), std::move(descriptor));
}

const AgentDescriptor& AgentRegistry::resolve(std::string_view agent_id,
                                              std::string_view version) const {
  if (auto it = agents_.find(std::make_pair(std::string(agent_id), std::string(version)));
      it != agents_.end()) {
    return it->second;
  }
  if (contains(agent_id)) {
    fail(ErrorCode::kVersionMismatch,
         "agent " + std::string(agent_id) + " has no version " + std::string(version));
  }
  fail(ErrorCode::kAgentNotFound, "no agent named " + std::string(agent_id));
}

bool AgentRegistry::contains(std::string_view agent_id) const {
  for (const auto& [key, _] : agents_) {
    if (key.first == agent_id) return true;
  }
  return false;
}

std::vector<std::string> AgentRegistry::ids() const {
  std::vector<std::string> out;
  for (const auto& [key, _] : agents_) {
    if (out.empty() || out.back() != key.first) out.push_back(key.first);
  }
  return out;
}

AgentRegistry AgentRegistry::restricted_to(const std::vector<std::string>& ids) const {
  AgentRegistry out;
  for (const auto& id : ids) {
    if (!contains(id)) fail(ErrorCode::kAgentNotFound, "no agent named " + id);
    for (const auto& [key, desc] : agents_) {
      if (key.first == id) out.add(desc);
    }
  }
  return out;
}

AgentDescriptor echo_agent() {
  return {"echo", "1", true, [](std::string_view input, const AgentParams& params, AgentContext&) {
            if (auto it = params.find("delay_ms"); it != params.end()) {
              std::this_thread::sleep_for(std::chrono::milliseconds(std::stoll(it->second)));
            }
            return std::string(input);
          }};
}

AgentRegistry builtin_agents() {
  AgentRegistry r;
  r.add(echo_agent());
  r.add(bbp_agent());
  r.add(cholesky_agent());
  return r;
}

}  // namespace spacefarm
