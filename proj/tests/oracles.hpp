#pragma once

// Independent reference implementations used only by tests.

#include <boost/beast/core/detail/base64.hpp>
#include <boost/multiprecision/cpp_int.hpp>

#include <Eigen/Dense>

#include <random>
#include <string>
#include <string_view>

#include "spacefarm/agents.hpp"

namespace oracle {

using boost::multiprecision::cpp_int;

// arctan(1/x) * scale by the alternating Taylor series, truncating each term.
inline cpp_int arctan_inv(unsigned x, const cpp_int& scale) {
  cpp_int sum = 0;
  cpp_int power = scale / x;
  const cpp_int x2 = cpp_int(x) * x;
  for (unsigned k = 0; power != 0; ++k) {
    const cpp_int term = power / (2 * k + 1);
    if (k % 2 == 0) {
      sum += term;
    } else {
      sum -= term;
    }
    power /= x2;
  }
  return sum;
}

/// First `digits` hex digits of pi after the point, uppercase, from Machin's
/// formula pi = 16 atan(1/5) - 4 atan(1/239) in fixed point.
inline std::string pi_hex(std::size_t digits) {
  const std::size_t guard = 8;
  const cpp_int scale = cpp_int(1) << (4 * (digits + guard));
  cpp_int pi = 16 * arctan_inv(5, scale) - 4 * arctan_inv(239, scale);
  pi -= 3 * scale;  // fractional part
  pi >>= 4 * guard;
  std::string out(digits, '0');
  static constexpr char kHex[] = "0123456789ABCDEF";
  for (std::size_t i = digits; i-- > 0;) {
    out[i] = kHex[static_cast<unsigned>(pi & 15)];
    pi >>= 4;
  }
  return out;
}

inline std::string base64(std::string_view bytes) {
  namespace b64 = boost::beast::detail::base64;
  std::string out(b64::encoded_size(bytes.size()), '\0');
  out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

inline Eigen::MatrixXd to_eigen(const spacefarm::Matrix& m) {
  Eigen::MatrixXd e(m.n, m.n);
  for (std::size_t i = 0; i < m.n; ++i) {
    for (std::size_t j = 0; j < m.n; ++j) e(i, j) = m(i, j);
  }
  return e;
}

/// Lower factor from Eigen's LLT.
inline Eigen::MatrixXd cholesky(const spacefarm::Matrix& m) {
  Eigen::LLT<Eigen::MatrixXd> llt(to_eigen(m));
  return llt.matrixL();
}

/// Random symmetric positive definite matrix, B*B^T + n*I, exactly symmetric.
inline spacefarm::Matrix random_spd(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  Eigen::MatrixXd b(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) b(i, j) = d(rng);
  }
  Eigen::MatrixXd a = b * b.transpose() + static_cast<double>(n) * Eigen::MatrixXd::Identity(n, n);
  spacefarm::Matrix m(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m(i, j) = m(j, i) = a(i, j);
  }
  return m;
}

}  // namespace oracle
