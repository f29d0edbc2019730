#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(SPACEFARM_BIN) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  char buf[4096];
  while (const auto n = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path temp_file(const std::string& name, const std::string& body) {
  const auto p = fs::temp_directory_path() / ("spacefarm-cli-" + std::to_string(::getpid()) + "-" + name);
  std::ofstream(p) << body;
  return p;
}

}  // namespace

TEST_CASE("help exits zero") {
  CHECK(run("--help").code == 0);
  CHECK(run("master --help").code == 0);
}

TEST_CASE("bad arguments exit two") {
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("master").code == 2);
  CHECK(run("worker --space").code == 2);
}

TEST_CASE("master with a broken configuration exits two") {
  const auto bad = temp_file("bad.json", "{\"case_id\": \"x\"}");
  CHECK(run("master --config " + bad.string()).code == 2);
  CHECK(run("master --config /nonexistent/case.json").code == 2);
  fs::remove(bad);
}

TEST_CASE("master exits one when the space is unreachable") {
  const auto input = temp_file("in.txt", "abcd");
  const nlohmann::json cfg{{"case_id", "cli"},
                           {"space_address", "127.0.0.1:1"},
                           {"agent_id", "echo"},
                           {"agent_version", "1"},
                           {"input_path", input.string()},
                           {"output_path", (fs::temp_directory_path() / "spacefarm-cli-out.bin").string()},
                           {"cut_strategy", {{"name", "byte_chunk"}}},
                           {"num_parts", 2},
                           {"initial_workers", 1},
                           {"task_lease_ms", 1000}};
  const auto path = temp_file("case.json", cfg.dump());
  CHECK(run("master --config " + path.string()).code == 1);
  fs::remove(path);
  fs::remove(input);
}

TEST_CASE("status exits one when the space is down") {
  CHECK(run("status --space 127.0.0.1:1 --case x").code == 1);
}
