// spacefarm-harness run <scenario.json> [--bin path] [--artifacts dir]

#include <unistd.h>

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "spacefarm/error.hpp"
#include "spacefarm/harness.hpp"

namespace fs = std::filesystem;
using namespace spacefarm;

namespace {

fs::path sibling_binary() {
  std::error_code ec;
  const auto self = fs::read_symlink("/proc/self/exe", ec);
  if (ec) return "spacefarm";
  return self.parent_path() / "spacefarm";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-process scenario runner"};
  app.require_subcommand(1);

  std::string scenario_path;
  std::string binary;
  std::string artifacts;
  auto* run_cmd = app.add_subcommand("run", "Run one scenario and check its assertions");
  run_cmd->add_option("scenario", scenario_path, "Scenario JSON file")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--bin", binary, "spacefarm binary (default: next to this one)");
  run_cmd->add_option("--artifacts", artifacts, "Directory for logs and outputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  harness::Scenario scenario;
  try {
    scenario = harness::load_scenario(scenario_path);
  } catch (const Error& e) {
    std::cerr << "spacefarm-harness: " << e.what() << "\n";
    return 2;
  }

  harness::RunOptions opts;
  opts.spacefarm_binary = binary.empty() ? sibling_binary() : fs::path(binary);
  opts.artifacts_dir = artifacts.empty()
                           ? fs::temp_directory_path() /
                                 ("spacefarm-" + scenario.name + "-" + std::to_string(::getpid()))
                           : fs::path(artifacts);
  try {
    const auto report = harness::run_scenario(scenario, opts);
    std::cout << report.dump(2) << std::endl;
    return report.value("passed", false) ? 0 : 1;
  } catch (const Error& e) {
    std::cerr << "spacefarm-harness: " << e.what() << "\n";
    return 1;
  }
}
