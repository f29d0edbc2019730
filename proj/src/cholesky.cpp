#include <charconv>
#include <cmath>
#include <sstream>

#include "spacefarm/agents.hpp"
#include "spacefarm/error.hpp"

namespace spacefarm {

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const auto s = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > s) out.push_back(line.substr(s, i - s));
  }
  return out;
}

std::vector<std::string_view> lines_of(std::string_view text) {
  std::vector<std::string_view> out;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    out.push_back(text.substr(0, nl));
    if (nl == std::string_view::npos) break;
    text.remove_prefix(nl + 1);
  }
  return out;
}

std::size_t parse_size(std::string_view s, const char* what) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    fail(ErrorCode::kMalformedPayload, std::string("bad ") + what + " '" + std::string(s) + "'");
  }
  return v;
}

void append_row(std::string& out, const std::vector<double>& values, std::size_t from = 0) {
  for (std::size_t k = from; k < values.size(); ++k) {
    if (k > from) out.push_back(' ');
    out += format_double(values[k]);
  }
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

double parse_double(std::string_view text) {
  double v = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size()) {
    fail(ErrorCode::kMalformedPayload, "bad number '" + std::string(text) + "'");
  }
  return v;
}

std::vector<Matrix> parse_matrix_file(std::string_view text) {
  std::vector<Matrix> out;
  auto lines = lines_of(text);
  std::size_t i = 0;
  auto skip_blank = [&] {
    while (i < lines.size() && split_ws(lines[i]).empty()) ++i;
  };
  skip_blank();
  while (i < lines.size()) {
    auto head = split_ws(lines[i++]);
    if (head.size() != 1) fail(ErrorCode::kMalformedPayload, "matrix block must start with its size");
    const auto n = parse_size(head[0], "matrix size");
    if (n == 0) fail(ErrorCode::kMalformedPayload, "matrix size must be positive");
    Matrix m(n);
    for (std::size_t r = 0; r < n; ++r) {
      if (i >= lines.size()) fail(ErrorCode::kMalformedPayload, "matrix ends early");
      auto cells = split_ws(lines[i++]);
      if (cells.size() != n) {
        fail(ErrorCode::kMalformedPayload, "row " + std::to_string(r) + " has " +
                                               std::to_string(cells.size()) + " values, want " +
                                               std::to_string(n));
      }
      for (std::size_t c = 0; c < n; ++c) m(r, c) = parse_double(cells[c]);
    }
    out.push_back(std::move(m));
    skip_blank();
  }
  return out;
}

std::string format_matrix_file(const std::vector<Matrix>& matrices) {
  std::string out;
  for (std::size_t m = 0; m < matrices.size(); ++m) {
    if (m > 0) out += "\n";
    const auto& a = matrices[m];
    out += std::to_string(a.n) + "\n";
    for (std::size_t r = 0; r < a.n; ++r) {
      append_row(out, std::vector<double>(a.a.begin() + r * a.n, a.a.begin() + (r + 1) * a.n));
      out += "\n";
    }
  }
  return out;
}

std::string format_cholesky_part(const CholeskyPart& part) {
  std::string out = "cholesky-rowblock\n";
  out += "matrix " + std::to_string(part.matrix_id) + "\n";
  out += "L " + std::to_string(part.L) + "\n";
  out += "P " + std::to_string(part.P) + "\n";
  out += "rank " + std::to_string(part.rank) + "\n";
  for (const auto& [j, row] : part.rows) {
    out += "row " + std::to_string(j) + " ";
    append_row(out, row);
    out += "\n";
  }
  return out;
}

CholeskyPart parse_cholesky_part(std::string_view text) {
  auto lines = lines_of(text);
  if (lines.empty() || split_ws(lines[0]) != std::vector<std::string_view>{"cholesky-rowblock"}) {
    fail(ErrorCode::kMalformedPayload, "not a cholesky-rowblock part");
  }
  CholeskyPart part;
  bool have_l = false, have_p = false;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    auto f = split_ws(lines[i]);
    if (f.empty()) continue;
    if (f[0] == "row") {
      if (f.size() < 2) fail(ErrorCode::kMalformedPayload, "row line without index");
      const auto j = parse_size(f[1], "row index");
      std::vector<double> row;
      for (std::size_t k = 2; k < f.size(); ++k) row.push_back(parse_double(f[k]));
      part.rows[j] = std::move(row);
    } else if (f.size() == 2 && f[0] == "matrix") {
      part.matrix_id = static_cast<std::int64_t>(parse_size(f[1], "matrix id"));
    } else if (f.size() == 2 && f[0] == "L") {
      part.L = parse_size(f[1], "L");
      have_l = true;
    } else if (f.size() == 2 && f[0] == "P") {
      part.P = parse_size(f[1], "P");
      have_p = true;
    } else if (f.size() == 2 && f[0] == "rank") {
      part.rank = parse_size(f[1], "rank");
    } else {
      fail(ErrorCode::kMalformedPayload, "unexpected line '" + std::string(lines[i]) + "'");
    }
  }
  if (!have_l || !have_p || part.L == 0 || part.P == 0) {
    fail(ErrorCode::kMalformedPayload, "part needs positive L and P");
  }
  if (part.L % part.P != 0) fail(ErrorCode::kMalformedPayload, "P must divide L");
  if (part.rank >= part.P) fail(ErrorCode::kMalformedPayload, "rank out of range");
  for (std::size_t j = part.rank; j < part.L; j += part.P) {
    auto it = part.rows.find(j);
    if (it == part.rows.end() || it->second.size() != part.L) {
      fail(ErrorCode::kMalformedPayload, "row " + std::to_string(j) + " missing or short");
    }
  }
  if (part.rows.size() != part.L / part.P) fail(ErrorCode::kMalformedPayload, "unexpected rows");
  return part;
}

CholeskyPart make_cholesky_part(const Matrix& a, std::int64_t matrix_id, std::size_t P,
                                std::size_t rank) {
  CholeskyPart part;
  part.matrix_id = matrix_id;
  part.L = a.n;
  part.P = P;
  part.rank = rank;
  for (std::size_t j = rank; j < a.n; j += P) {
    part.rows[j] = std::vector<double>(a.a.begin() + j * a.n, a.a.begin() + (j + 1) * a.n);
  }
  return part;
}

std::map<std::size_t, std::vector<double>> cholesky_rows(const CholeskyPart& part,
                                                         const RowSource& fetch,
                                                         const RowSink& publish) {
  std::map<std::size_t, std::vector<double>> l;
  for (const auto& [j, row] : part.rows) l[j].assign(j + 1, 0.0);

  for (std::size_t i = 0; i < part.L; ++i) {
    const bool owner = i % part.P == part.rank;
    auto later = l.upper_bound(i);
    if (!owner && later == l.end()) continue;

    std::vector<double> row_i;
    if (owner) {
      auto& li = l[i];
      double d = part.rows.at(i)[i];
      for (std::size_t k = 0; k < i; ++k) d -= li[k] * li[k];
      if (!(d > 0.0)) {
        fail(ErrorCode::kNotPositiveDefinite,
             "pivot " + std::to_string(i) + " is " + format_double(d));
      }
      li[i] = std::sqrt(d);
      if (publish) publish(i, li);
      row_i = li;
    } else {
      row_i = fetch(i);
      if (row_i.size() != i + 1) {
        fail(ErrorCode::kMalformedPayload, "row " + std::to_string(i) + " has wrong length");
      }
    }

    for (auto it = l.upper_bound(i); it != l.end(); ++it) {
      const auto j = it->first;
      auto& lj = it->second;
      double s = part.rows.at(j)[i];
      for (std::size_t k = 0; k < i; ++k) s -= lj[k] * row_i[k];
      lj[i] = s / row_i[i];
    }
  }
  return l;
}

std::string format_factor_rows(const std::map<std::size_t, std::vector<double>>& rows) {
  std::string out;
  for (const auto& [j, row] : rows) {
    out += "row " + std::to_string(j) + " ";
    append_row(out, row);
    out += "\n";
  }
  return out;
}

std::map<std::size_t, std::vector<double>> parse_factor_rows(std::string_view text) {
  std::map<std::size_t, std::vector<double>> out;
  for (auto line : lines_of(text)) {
    auto f = split_ws(line);
    if (f.empty()) continue;
    if (f.size() < 2 || f[0] != "row") fail(ErrorCode::kMalformedPayload, "expected a row line");
    const auto j = parse_size(f[1], "row index");
    if (f.size() != j + 3) {
      fail(ErrorCode::kMalformedPayload, "row " + std::to_string(j) + " has wrong length");
    }
    std::vector<double> row;
    for (std::size_t k = 2; k < f.size(); ++k) row.push_back(parse_double(f[k]));
    out[j] = std::move(row);
  }
  return out;
}

Matrix cholesky_sequential(const Matrix& a) {
  CholeskyPart whole = make_cholesky_part(a, 0, 1, 0);
  auto rows = cholesky_rows(whole, {}, {});
  Matrix l(a.n);
  for (const auto& [j, row] : rows) {
    for (std::size_t k = 0; k < row.size(); ++k) l(j, k) = row[k];
  }
  return l;
}

AgentDescriptor cholesky_agent() {
  return {"cholesky-rowblock", "1", true,
          [](std::string_view input, const AgentParams& params, AgentContext& ctx) {
            const auto part = parse_cholesky_part(input);
            std::chrono::milliseconds row_timeout{60000};
            if (auto it = params.find("row_timeout_ms"); it != params.end()) {
              row_timeout = std::chrono::milliseconds(std::stoll(it->second));
            }
            if (!ctx.space) fail(ErrorCode::kAgentFailure, "cholesky agent needs a space handle");
            auto row_template = [&](std::size_t i) {
              return Template::of(EntryKind::kRow)
                  .where_case(ctx.case_id)
                  .where("matrix_id", part.matrix_id)
                  .where("row_index", static_cast<std::int64_t>(i));
            };
            auto fetch = [&](std::size_t i) {
              const auto found = ctx.space->read(row_template(i), std::nullopt, row_timeout);
              const auto* entry = get_if<RowEntry>(found);
              if (!entry) {
                fail(ErrorCode::kRowTimeout, "row " + std::to_string(i) + " of matrix " +
                                                 std::to_string(part.matrix_id) + " did not appear");
              }
              std::vector<double> values;
              std::string_view v = entry->values;
              for (auto cell : split_ws(v)) values.push_back(parse_double(cell));
              return values;
            };
            auto publish = [&](std::size_t i, const std::vector<double>& row) {
              // A replayed attempt finds the identical row already published.
              if (ctx.space->read(row_template(i), std::nullopt, kNoWait)) return;
              std::string values;
              append_row(values, row);
              ctx.space->write(RowEntry{ctx.case_id, part.matrix_id, static_cast<std::int64_t>(i), values},
                               std::nullopt, Lease::forever());
            };
            return format_factor_rows(cholesky_rows(part, fetch, publish));
          }};
}

}  // namespace spacefarm
