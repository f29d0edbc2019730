#include <doctest.h>

#include <cmath>
#include <future>
#include <random>

#include "oracles.hpp"
#include "spacefarm/agents.hpp"
#include "spacefarm/error.hpp"
#include "spacefarm/space_service.hpp"

using namespace spacefarm;
using namespace std::chrono_literals;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kInternal;
}

double max_abs_diff(const std::map<std::size_t, std::vector<double>>& rows, const Eigen::MatrixXd& l) {
  double worst = 0;
  for (const auto& [i, row] : rows) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      worst = std::max(worst, std::abs(row[j] - l(static_cast<long>(i), static_cast<long>(j))));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("machin oracle reproduces the well-known leading hex digits") {
  CHECK(oracle::pi_hex(16) == "243F6A8885A308D3");
}

TEST_CASE("bbp digits match the arbitrary-precision oracle for positions 1..1000") {
  const auto expected = oracle::pi_hex(1000);
  CHECK(bbp_hex_digits(1, 1000) == expected);
}

TEST_CASE("bbp digits at scattered positions") {
  const auto expected = oracle::pi_hex(5200);
  for (std::uint64_t pos : {1u, 2u, 100u, 1024u, 4095u, 5000u, 5200u}) {
    CAPTURE(pos);
    CHECK(bbp_hex_digits(pos, 1) == expected.substr(pos - 1, 1));
  }
  CHECK(bbp_hex_digits(4990, 11) == expected.substr(4989, 11));
}

TEST_CASE("bbp guard and malformed ranges") {
  CHECK(code_of([] { bbp_hex_digits(95, 10, 100); }) == ErrorCode::kPositionOverflow);
  CHECK(bbp_hex_digits(90, 9, 100).size() == 9);
  CHECK(code_of([] { bbp_hex_digits(0, 1); }) == ErrorCode::kMalformedPayload);
}

TEST_CASE("bbp range text roundtrip and errors") {
  const BbpRange r{41, 10};
  const auto back = parse_bbp_range(format_bbp_range(r));
  CHECK(back.start == 41);
  CHECK(back.count == 10);
  CHECK(code_of([] { parse_bbp_range("start=1\n"); }) == ErrorCode::kMalformedPayload);
  CHECK(code_of([] { parse_bbp_range("start=x\ncount=2\n"); }) == ErrorCode::kMalformedPayload);
}

TEST_CASE("bbp agent honours the position guard parameter") {
  const auto agent = bbp_agent();
  AgentContext ctx;
  CHECK(agent.execute(format_bbp_range({1, 8}), {}, ctx) == "243F6A88");
  CHECK(code_of([&] { agent.execute(format_bbp_range({1, 8}), {{"position_guard", "5"}}, ctx); }) ==
        ErrorCode::kPositionOverflow);
}

TEST_CASE("registry resolves by id and version") {
  auto reg = builtin_agents();
  CHECK(reg.contains("echo"));
  CHECK(reg.resolve("bbp-pi", "1").agent_id == "bbp-pi");
  CHECK(code_of([&] { reg.resolve("nope", "1"); }) == ErrorCode::kAgentNotFound);
  CHECK(code_of([&] { reg.resolve("echo", "2"); }) == ErrorCode::kVersionMismatch);
  auto only = reg.restricted_to({"echo"});
  CHECK(only.ids() == std::vector<std::string>{"echo"});
  CHECK(code_of([&] { only.resolve("bbp-pi", "1"); }) == ErrorCode::kAgentNotFound);
  CHECK_THROWS_AS(reg.restricted_to({"missing"}), Error);
}

TEST_CASE("echo agent returns its input") {
  AgentContext ctx;
  CHECK(echo_agent().execute("hello", {}, ctx) == "hello");
  CHECK(echo_agent().execute("", {{"delay_ms", "1"}}, ctx) == "");
}

TEST_CASE("doubles print in the shortest form that reads back exactly") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(-1e6, 1e6);
  for (int i = 0; i < 5000; ++i) {
    const double v = d(rng) / (1 + (rng() % 1000));
    CHECK(parse_double(format_double(v)) == v);
  }
  CHECK(format_double(0.5) == "0.5");
  CHECK(format_double(1.0) == "1");
  CHECK(code_of([] { parse_double("1.5x"); }) == ErrorCode::kMalformedPayload);
  CHECK(code_of([] { parse_double(""); }) == ErrorCode::kMalformedPayload);
}

TEST_CASE("matrix file roundtrip") {
  std::mt19937_64 rng(11);
  std::vector<Matrix> ms{oracle::random_spd(3, rng), oracle::random_spd(5, rng)};
  const auto back = parse_matrix_file(format_matrix_file(ms));
  REQUIRE(back.size() == 2);
  CHECK(back[0].a == ms[0].a);
  CHECK(back[1].a == ms[1].a);
  CHECK(code_of([] { parse_matrix_file("2\n1 2\n3\n"); }) == ErrorCode::kMalformedPayload);
}

TEST_CASE("sequential cholesky agrees with Eigen LLT") {
  std::mt19937_64 rng(17);
  for (std::size_t n : {1u, 2u, 5u, 10u, 25u}) {
    CAPTURE(n);
    const auto a = oracle::random_spd(n, rng);
    const auto l = cholesky_sequential(a);
    const auto ref = oracle::cholesky(a);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double want = j <= i ? ref(static_cast<long>(i), static_cast<long>(j)) : 0.0;
        CHECK(std::abs(l(i, j) - want) <= 1e-12 * std::max(1.0, std::abs(want)));
      }
    }
  }
}

TEST_CASE("cholesky rejects matrices that are not positive definite") {
  Matrix m(2);
  m(0, 0) = 1;
  m(0, 1) = m(1, 0) = 2;
  m(1, 1) = 1;
  CHECK(code_of([&] { cholesky_sequential(m); }) == ErrorCode::kNotPositiveDefinite);
}

TEST_CASE("cholesky part text roundtrip") {
  std::mt19937_64 rng(23);
  const auto a = oracle::random_spd(6, rng);
  const auto part = make_cholesky_part(a, 4, 3, 1);
  CHECK(part.rows.size() == 2);
  CHECK(part.rows.count(1) == 1);
  CHECK(part.rows.count(4) == 1);
  const auto back = parse_cholesky_part(format_cholesky_part(part));
  CHECK(back.matrix_id == 4);
  CHECK(back.L == 6);
  CHECK(back.P == 3);
  CHECK(back.rank == 1);
  CHECK(back.rows == part.rows);
}

TEST_CASE("row-block tasks cooperating through shared rows reproduce the factor") {
  std::mt19937_64 rng(29);
  const std::size_t n = 10;
  const auto a = oracle::random_spd(n, rng);
  const auto ref = oracle::cholesky(a);
  for (std::size_t p : {1u, 2u, 5u, 10u}) {
    CAPTURE(p);
    std::mutex mu;
    std::condition_variable cv;
    std::map<std::size_t, std::vector<double>> board;
    auto fetch = [&](std::size_t i) {
      std::unique_lock lk(mu);
      cv.wait(lk, [&] { return board.count(i) > 0; });
      return board[i];
    };
    auto publish = [&](std::size_t i, const std::vector<double>& row) {
      std::lock_guard lk(mu);
      board[i] = row;
      cv.notify_all();
    };
    std::vector<std::future<std::map<std::size_t, std::vector<double>>>> tasks;
    for (std::size_t r = 0; r < p; ++r) {
      tasks.push_back(std::async(std::launch::async, [&, r] {
        return cholesky_rows(make_cholesky_part(a, 0, p, r), fetch, publish);
      }));
    }
    std::map<std::size_t, std::vector<double>> all;
    for (auto& t : tasks) all.merge(t.get());
    REQUIRE(all.size() == n);
    CHECK(max_abs_diff(all, ref) <= 1e-12);
    CHECK(parse_factor_rows(format_factor_rows(all)) == all);
  }
}

TEST_CASE("cholesky agent exchanges rows through the space") {
  std::mt19937_64 rng(31);
  const std::size_t n = 6, p = 3;
  const auto a = oracle::random_spd(n, rng);
  auto svc = std::make_shared<SpaceService>();
  const auto agent = cholesky_agent();
  std::vector<std::future<std::string>> runs;
  std::vector<std::unique_ptr<LocalSpace>> spaces;
  for (std::size_t r = 0; r < p; ++r) spaces.push_back(std::make_unique<LocalSpace>(svc));
  for (std::size_t r = 0; r < p; ++r) {
    runs.push_back(std::async(std::launch::async, [&, r] {
      AgentContext ctx{spaces[r].get(), CaseId("chol"), static_cast<std::int64_t>(r)};
      return agent.execute(format_cholesky_part(make_cholesky_part(a, 0, p, r)), {}, ctx);
    }));
  }
  std::map<std::size_t, std::vector<double>> all;
  for (auto& r : runs) all.merge(parse_factor_rows(r.get()));
  CHECK(max_abs_diff(all, oracle::cholesky(a)) <= 1e-12);
}

TEST_CASE("cholesky agent times out when a needed row never appears") {
  std::mt19937_64 rng(37);
  const auto a = oracle::random_spd(4, rng);
  auto svc = std::make_shared<SpaceService>();
  LocalSpace space(svc);
  AgentContext ctx{&space, CaseId("lonely"), 1};
  CHECK(code_of([&] {
          cholesky_agent().execute(format_cholesky_part(make_cholesky_part(a, 0, 2, 1)),
                                   {{"row_timeout_ms", "200"}}, ctx);
        }) == ErrorCode::kRowTimeout);
}
