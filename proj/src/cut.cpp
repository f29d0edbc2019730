#include <algorithm>
#include <fstream>

#include "spacefarm/error.hpp"
#include "spacefarm/master.hpp"

namespace spacefarm {

using nlohmann::json;

namespace {

[[noreturn]] void config_error(const std::string& msg) { fail(ErrorCode::kConfigError, msg); }

const json& required(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) config_error(std::string("missing key '") + key + "'");
  return *it;
}

std::string required_string(const json& j, const char* key) {
  const auto& v = required(j, key);
  if (!v.is_string() || v.get<std::string>().empty()) {
    config_error(std::string("key '") + key + "' must be a non-empty string");
  }
  return v.get<std::string>();
}

std::int64_t int_value(const json& v, const char* key, std::int64_t min) {
  if (!v.is_number_integer()) config_error(std::string("key '") + key + "' must be an integer");
  const auto n = v.get<std::int64_t>();
  if (n < min) config_error(std::string("key '") + key + "' must be >= " + std::to_string(min));
  return n;
}

std::int64_t required_int(const json& j, const char* key, std::int64_t min) {
  return int_value(required(j, key), key, min);
}

std::int64_t optional_int(const json& j, const char* key, std::int64_t fallback, std::int64_t min) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  return int_value(*it, key, min);
}

std::int64_t tasks_per_matrix(const json& params) {
  auto it = params.find("tasks_per_matrix");
  if (it == params.end()) return 1;
  if (!it->is_number_integer() || it->get<std::int64_t>() < 1) {
    fail(ErrorCode::kCutFailed, "tasks_per_matrix must be a positive integer");
  }
  return it->get<std::int64_t>();
}

[[noreturn]] void cut_failed(const std::string& msg) { fail(ErrorCode::kCutFailed, msg); }

class ByteChunkCutter final : public Cutter {
 public:
  ByteChunkCutter(std::string input, std::int64_t num_parts, std::optional<std::int64_t> chunk)
      : input_(std::move(input)), parts_(num_parts) {
    const auto size = static_cast<std::int64_t>(input_.size());
    if (chunk) {
      if (*chunk < 1) cut_failed("chunk_bytes must be positive");
      chunk_ = *chunk;
      const auto n = std::max<std::int64_t>(1, (size + chunk_ - 1) / chunk_);
      if (n != num_parts) {
        cut_failed("chunk_bytes " + std::to_string(chunk_) + " gives " + std::to_string(n) +
                   " parts, num_parts is " + std::to_string(num_parts));
      }
    } else if (size < num_parts) {
      cut_failed("input of " + std::to_string(size) + " bytes cannot fill " +
                 std::to_string(num_parts) + " parts");
    }
  }
  std::int64_t count() const override { return parts_; }
  std::string part(std::int64_t i) const override {
    const auto size = static_cast<std::int64_t>(input_.size());
    std::int64_t begin, end;
    if (chunk_) {
      begin = std::min(size, i * chunk_);
      end = std::min(size, begin + chunk_);
    } else {
      // Even split, the first size % parts parts one byte longer.
      const auto base = size / parts_, extra = size % parts_;
      begin = i * base + std::min(i, extra);
      end = begin + base + (i < extra ? 1 : 0);
    }
    return input_.substr(static_cast<std::size_t>(begin), static_cast<std::size_t>(end - begin));
  }

 private:
  std::string input_;
  std::int64_t parts_;
  std::int64_t chunk_ = 0;
};

class BbpRangeCutter final : public Cutter {
 public:
  BbpRangeCutter(const std::string& input, std::int64_t num_parts) : parts_(num_parts) {
    try {
      range_ = parse_bbp_range(input);
    } catch (const Error& e) {
      cut_failed(std::string("bbp_range input: ") + e.what());
    }
    if (range_.count < static_cast<std::uint64_t>(num_parts)) {
      cut_failed("cannot cut " + std::to_string(range_.count) + " digits into " +
                 std::to_string(num_parts) + " parts");
    }
  }
  std::int64_t count() const override { return parts_; }
  std::string part(std::int64_t i) const override {
    const auto n = static_cast<std::uint64_t>(parts_);
    const auto idx = static_cast<std::uint64_t>(i);
    const auto base = range_.count / n;
    const auto extra = range_.count % n;
    const auto start = range_.start + idx * base + std::min(idx, extra);
    return format_bbp_range({start, base + (idx < extra ? 1 : 0)});
  }

 private:
  BbpRange range_;
  std::int64_t parts_;
};

class MatrixSetCutter final : public Cutter {
 public:
  MatrixSetCutter(const std::string& input, std::int64_t num_parts, std::int64_t p) : p_(p) {
    try {
      matrices_ = parse_matrix_file(input);
    } catch (const Error& e) {
      cut_failed(std::string("matrix file: ") + e.what());
    }
    if (matrices_.empty()) cut_failed("matrix file holds no matrix");
    const auto want = static_cast<std::int64_t>(matrices_.size()) * p_;
    if (want != num_parts) {
      cut_failed(std::to_string(matrices_.size()) + " matrices x " + std::to_string(p_) +
                 " tasks gives " + std::to_string(want) + " parts, num_parts is " +
                 std::to_string(num_parts));
    }
    for (std::size_t m = 0; m < matrices_.size(); ++m) {
      const auto& a = matrices_[m];
      if (a.n % static_cast<std::size_t>(p_) != 0) {
        cut_failed("matrix " + std::to_string(m) + ": P=" + std::to_string(p_) +
                   " does not divide L=" + std::to_string(a.n));
      }
      for (std::size_t i = 0; i < a.n; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
          if (a(i, j) != a(j, i)) cut_failed("matrix " + std::to_string(m) + " is not symmetric");
        }
      }
    }
  }
  std::int64_t count() const override { return static_cast<std::int64_t>(matrices_.size()) * p_; }
  std::string part(std::int64_t i) const override {
    const auto m = static_cast<std::size_t>(i / p_);
    return format_cholesky_part(make_cholesky_part(matrices_[m], static_cast<std::int64_t>(m),
                                                   static_cast<std::size_t>(p_),
                                                   static_cast<std::size_t>(i % p_)));
  }

 private:
  std::vector<Matrix> matrices_;
  std::int64_t p_;
};

}  // namespace

CaseConfig parse_case_config(const json& j) {
  if (!j.is_object()) config_error("configuration must be a JSON object");
  CaseConfig c;
  c.case_id = CaseId(required_string(j, "case_id"));
  c.space_address = required_string(j, "space_address");
  c.agent_id = required_string(j, "agent_id");
  c.agent_version = required_string(j, "agent_version");
  if (auto it = j.find("agent_params"); it != j.end() && !it->is_null()) {
    if (!it->is_object()) config_error("key 'agent_params' must be an object");
    for (const auto& [k, v] : it->items()) {
      c.agent_params[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }
  }
  c.input_path = required_string(j, "input_path");
  c.output_path = required_string(j, "output_path");
  const auto& cut = required(j, "cut_strategy");
  if (!cut.is_object()) config_error("key 'cut_strategy' must be an object");
  c.cut_strategy.name = required_string(cut, "name");
  if (auto it = cut.find("params"); it != cut.end() && !it->is_null()) {
    if (!it->is_object()) config_error("key 'cut_strategy.params' must be an object");
    c.cut_strategy.params = *it;
  }
  const auto names = cut_strategy_names();
  if (std::find(names.begin(), names.end(), c.cut_strategy.name) == names.end()) {
    config_error("unknown cut strategy '" + c.cut_strategy.name + "'");
  }
  c.num_parts = required_int(j, "num_parts", 1);
  c.initial_workers = required_int(j, "initial_workers", 1);
  c.task_lease = std::chrono::milliseconds(required_int(j, "task_lease_ms", 100));
  c.max_attempts = static_cast<int>(optional_int(j, "max_attempts", 5, 1));
  c.retry_backoff = std::chrono::milliseconds(optional_int(j, "retry_backoff_ms", 1000, 0));
  c.worker_grace = std::chrono::milliseconds(optional_int(j, "worker_grace_ms", 10000, 0));
  if (auto it = j.find("tmp_dir"); it != j.end() && it->is_string()) {
    c.tmp_dir = it->get<std::string>();
  } else {
    c.tmp_dir = std::filesystem::temp_directory_path() / "spacefarm";
  }
  if (auto it = j.find("results_dir"); it != j.end() && it->is_string()) {
    c.results_dir = it->get<std::string>();
  } else {
    c.results_dir = c.output_path.parent_path().empty() ? std::filesystem::path(".")
                                                         : c.output_path.parent_path();
  }
  if (c.agent_id == "cholesky-rowblock") {
    std::int64_t p = 1;
    try {
      p = tasks_per_matrix(c.cut_strategy.params);
    } catch (const Error& e) {
      config_error(e.what());
    }
    if (c.initial_workers < p) {
      config_error("cholesky-rowblock needs initial_workers >= P (" + std::to_string(p) + ")");
    }
  }
  return c;
}

CaseConfig load_case_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) config_error("cannot read configuration " + path.string());
  auto j = json::parse(in, nullptr, false);
  if (j.is_discarded()) config_error("configuration " + path.string() + " is not valid JSON");
  return parse_case_config(j);
}

json to_json(const CaseReport& r) {
  return {{"case_id", r.case_id.str()}, {"parts", r.parts},           {"results", r.results},
          {"replays", r.replays},       {"elapsed_ms", r.elapsed_ms}, {"output_path", r.output_path}};
}

std::vector<std::string> cut_strategy_names() { return {"byte_chunk", "bbp_range", "matrix_set"}; }

std::unique_ptr<Cutter> make_cutter(const CutStrategy& strategy, std::string input,
                                    std::int64_t num_parts) {
  if (num_parts < 1) cut_failed("num_parts must be positive");
  if (strategy.name == "byte_chunk") {
    std::optional<std::int64_t> chunk;
    if (auto it = strategy.params.find("chunk_bytes"); it != strategy.params.end()) {
      if (!it->is_number_integer()) cut_failed("chunk_bytes must be an integer");
      chunk = it->get<std::int64_t>();
    }
    return std::make_unique<ByteChunkCutter>(std::move(input), num_parts, chunk);
  }
  if (strategy.name == "bbp_range") return std::make_unique<BbpRangeCutter>(input, num_parts);
  if (strategy.name == "matrix_set") {
    return std::make_unique<MatrixSetCutter>(input, num_parts, tasks_per_matrix(strategy.params));
  }
  cut_failed("unknown cut strategy '" + strategy.name + "'");
}

std::string assemble_output(const CaseConfig& config, const std::vector<std::string>& results) {
  if (config.agent_id != "cholesky-rowblock") {
    std::string out;
    for (const auto& r : results) out += r;
    return out;
  }
  const auto p = static_cast<std::size_t>(tasks_per_matrix(config.cut_strategy.params));
  std::vector<Matrix> factors;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto m = i / p;
    auto rows = parse_factor_rows(results[i]);
    if (factors.size() <= m) factors.emplace_back();
    auto& f = factors[m];
    std::size_t n = f.n;
    for (const auto& [j, _] : rows) n = std::max(n, j + 1);
    if (n != f.n) {
      Matrix grown(n);
      for (std::size_t r = 0; r < f.n; ++r) {
        for (std::size_t c = 0; c < f.n; ++c) grown(r, c) = f(r, c);
      }
      f = std::move(grown);
    }
    for (const auto& [j, row] : rows) {
      for (std::size_t k = 0; k < row.size(); ++k) f(j, k) = row[k];
    }
  }
  return format_matrix_file(factors);
}

}  // namespace spacefarm
