#pragma once

// Computing agents: the code a worker applies to one part of a case.
// Agents are compiled in and looked up by (agent_id, version).

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spacefarm/entry.hpp"
#include "spacefarm/space_api.hpp"

namespace spacefarm {

using AgentParams = std::map<std::string, std::string>;

/// What an agent may see of the outside world while it runs. `space` is
/// an independent handle, never the worker's control channel.
struct AgentContext {
  SpaceApi* space = nullptr;
  CaseId case_id{"-"};
  std::int64_t part_index = 0;
};

using AgentFn = std::function<std::string(std::string_view input, const AgentParams& params,
                                          AgentContext& ctx)>;

struct AgentDescriptor {
  std::string agent_id;
  std::string version;
  bool deterministic = true;
  AgentFn execute;
};

class AgentRegistry {
 public:
  void add(AgentDescriptor descriptor);

  /// Throws Error{kAgentNotFound} for an unknown id and
  /// Error{kVersionMismatch} when the id exists under other versions only.
  const AgentDescriptor& resolve(std::string_view agent_id, std::string_view version) const;
  bool contains(std::string_view agent_id) const;
  std::vector<std::string> ids() const;

  /// Registry holding only the listed ids; unknown names are an error.
  AgentRegistry restricted_to(const std::vector<std::string>& ids) const;

 private:
  std::map<std::pair<std::string, std::string>, AgentDescriptor, std::less<>> agents_;
};

/// echo/1, bbp-pi/1 and cholesky-rowblock/1.
AgentRegistry builtin_agents();

AgentDescriptor echo_agent();
AgentDescriptor bbp_agent();
AgentDescriptor cholesky_agent();

// ---------------------------------------------------------------------------
// BBP hex digits of pi.

inline constexpr std::uint64_t kBbpPositionGuard = 10'000'000;

/// Hex digit (0..15) of pi at `position`, where position 1 is the first digit
/// after the point. Allocation-free.
int bbp_digit(std::uint64_t position);

/// Uppercase hex digits at positions [start, start+count). Throws
/// Error{kPositionOverflow} past `guard`.
std::string bbp_hex_digits(std::uint64_t start, std::uint64_t count,
                           std::uint64_t guard = kBbpPositionGuard);

/// "start=N\ncount=M\n". Also the input format of a bbp_range case.
struct BbpRange {
  std::uint64_t start = 1;
  std::uint64_t count = 1;
};
std::string format_bbp_range(const BbpRange& range);
/// Throws Error{kMalformedPayload}.
BbpRange parse_bbp_range(std::string_view text);

// ---------------------------------------------------------------------------
// Cholesky.

struct Matrix {
  std::size_t n = 0;
  std::vector<double> a;  // row-major

  Matrix() = default;
  explicit Matrix(std::size_t size) : n(size), a(size * size, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }
};

/// Shortest text that reads back to the same double, at most 17 digits.
std::string format_double(double v);
/// Throws Error{kMalformedPayload}.
double parse_double(std::string_view text);

/// First line L, then L rows; several matrices separated by blank lines.
std::vector<Matrix> parse_matrix_file(std::string_view text);
std::string format_matrix_file(const std::vector<Matrix>& matrices);

/// Input of one row-block task: the rows of A with j mod P == rank.
struct CholeskyPart {
  std::int64_t matrix_id = 0;
  std::size_t L = 0;
  std::size_t P = 1;
  std::size_t rank = 0;
  std::map<std::size_t, std::vector<double>> rows;  // row j -> A[j][0..L)
};
std::string format_cholesky_part(const CholeskyPart& part);
CholeskyPart parse_cholesky_part(std::string_view text);
CholeskyPart make_cholesky_part(const Matrix& a, std::int64_t matrix_id, std::size_t P,
                                std::size_t rank);

/// Fetches row i of the factor (i+1 values); called only for rows the task
/// does not own.
using RowSource = std::function<std::vector<double>(std::size_t i)>;
/// Receives each owned row as soon as its diagonal is known.
using RowSink = std::function<void(std::size_t i, const std::vector<double>& row)>;

/// Factor rows owned by `part`, keyed by row index. Throws
/// Error{kNotPositiveDefinite}.
std::map<std::size_t, std::vector<double>> cholesky_rows(const CholeskyPart& part,
                                                         const RowSource& fetch,
                                                         const RowSink& publish);

/// "row j v0 ... vj" lines.
std::string format_factor_rows(const std::map<std::size_t, std::vector<double>>& rows);
std::map<std::size_t, std::vector<double>> parse_factor_rows(std::string_view text);

/// Plain sequential factorization with the same operation order.
Matrix cholesky_sequential(const Matrix& a);

}  // namespace spacefarm
