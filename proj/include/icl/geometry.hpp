#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "icl/common.hpp"

namespace icl {

struct GeometryConfig {
  int d_x = 0;          // word dimension
  int d_y = 0;          // label dimension
  int K1 = 0;           // task-relevant concept count
  int K2 = 0;           // task-irrelevant feature count
  double u_norm = 0.0;  // feature magnitude
  double q_norm = 0.0;  // label magnitude
  double kappa_x = 0.0; // within-concept word cosine, in (0,1)
  double kappa_y = 0.0; // within-concept label cosine, in (0,1)
  // < 0 means no rotation (canonical axes); otherwise seeds a random
  // orthogonal rotation of both spaces.
  std::int64_t rotation_seed = -1;

  int K() const { return 2 * K1 + K2; }

  void validate() const {
    if (K1 < 1) throw ConfigError("geometry: K1 must be >= 1");
    if (K2 < 0) throw ConfigError("geometry: K2 must be >= 0");
    if (K() >= d_x)
      throw ConfigError("geometry: require K = 2*K1 + K2 < d_x");
    if (2 * K1 > d_y) throw ConfigError("geometry: require 2*K1 <= d_y");
    if (!(kappa_x > 0.0 && kappa_x < 1.0))
      throw ConfigError("geometry: kappa_x must lie in (0,1)");
    if (!(kappa_y > 0.0 && kappa_y < 1.0))
      throw ConfigError("geometry: kappa_y must lie in (0,1)");
    if (!(u_norm > 0.0)) throw ConfigError("geometry: u_norm must be > 0");
    if (!(q_norm > 0.0)) throw ConfigError("geometry: q_norm must be > 0");
  }
};

// Ground-truth dictionaries plus all derived bases.
//
// Column layout of M: mu_1^+, mu_1^-, ..., mu_K1^+, mu_K1^-, nu_1..nu_K2.
// Column layout of Q: q_1^+, q_1^-, ..., q_K1^+, q_K1^-, then K2 zero columns.
struct Dictionary {
  GeometryConfig cfg;
  Matrix M;       // d_x x K
  Matrix Q;       // d_y x K
  Matrix a;       // d_x x K1, a_k = (mu_k^+ + mu_k^-)/2
  Matrix b;       // d_x x K1, b_k = (mu_k^+ - mu_k^-)/2
  Matrix c;       // d_y x K1
  Matrix d;       // d_y x K1
  Matrix nu;      // d_x x K2 (view copy of M's trailing columns)
  Matrix u_perp;  // d_x x (d_x - K), orthonormal complement of span(M)
  Matrix q_perp;  // d_y x (d_y - 2*K1), orthonormal complement of span(Q)

  double a_norm_sq() const { return (1.0 + cfg.kappa_x) / 2.0 * cfg.u_norm * cfg.u_norm; }
  double b_norm_sq() const { return (1.0 - cfg.kappa_x) / 2.0 * cfg.u_norm * cfg.u_norm; }
  double c_norm_sq() const { return (1.0 + cfg.kappa_y) / 2.0 * cfg.q_norm * cfg.q_norm; }
  double d_norm_sq() const { return (1.0 - cfg.kappa_y) / 2.0 * cfg.q_norm * cfg.q_norm; }

  // Column index of mu_k^e / q_k^e (k is 0-based, e = +1/-1).
  static int pair_col(int k, int e) { return 2 * k + (e > 0 ? 0 : 1); }
};

namespace detail {

// Random orthogonal matrix: QR of a seeded Gaussian with sign-fixed diagonal.
inline Matrix random_orthogonal(int n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix G(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) G(i, j) = nd(gen);
  Eigen::HouseholderQR<Matrix> qr(G);
  Matrix Qm = qr.householderQ();
  Matrix R = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j)
    if (R(j, j) < 0) Qm.col(j) = -Qm.col(j);
  return Qm;
}

}  // namespace detail

// Exact-Gram construction: pick orthonormal directions (canonical axes or a
// seeded rotation of them), set a_k, b_k on consecutive directions with the
// norms forced by the within-concept cosine, then mu_k^{+/-} = a_k +/- b_k.
inline Dictionary build_dictionary(const GeometryConfig& cfg) {
  cfg.validate();
  Dictionary dict;
  dict.cfg = cfg;
  const int K1 = cfg.K1, K2 = cfg.K2, K = cfg.K();
  const double sa = std::sqrt((1.0 + cfg.kappa_x) / 2.0) * cfg.u_norm;
  const double sb = std::sqrt((1.0 - cfg.kappa_x) / 2.0) * cfg.u_norm;
  const double sc = std::sqrt((1.0 + cfg.kappa_y) / 2.0) * cfg.q_norm;
  const double sd = std::sqrt((1.0 - cfg.kappa_y) / 2.0) * cfg.q_norm;

  Matrix Ex, Ey;  // orthonormal direction banks
  if (cfg.rotation_seed >= 0) {
    Ex = detail::random_orthogonal(cfg.d_x, static_cast<std::uint64_t>(cfg.rotation_seed));
    Ey = detail::random_orthogonal(cfg.d_y, static_cast<std::uint64_t>(cfg.rotation_seed) + 1);
  } else {
    Ex = Matrix::Identity(cfg.d_x, cfg.d_x);
    Ey = Matrix::Identity(cfg.d_y, cfg.d_y);
  }

  dict.a.resize(cfg.d_x, K1);
  dict.b.resize(cfg.d_x, K1);
  dict.c.resize(cfg.d_y, K1);
  dict.d.resize(cfg.d_y, K1);
  dict.M.resize(cfg.d_x, K);
  dict.Q = Matrix::Zero(cfg.d_y, K);
  for (int k = 0; k < K1; ++k) {
    dict.a.col(k) = sa * Ex.col(2 * k);
    dict.b.col(k) = sb * Ex.col(2 * k + 1);
    dict.c.col(k) = sc * Ey.col(2 * k);
    dict.d.col(k) = sd * Ey.col(2 * k + 1);
    dict.M.col(2 * k) = dict.a.col(k) + dict.b.col(k);
    dict.M.col(2 * k + 1) = dict.a.col(k) - dict.b.col(k);
    dict.Q.col(2 * k) = dict.c.col(k) + dict.d.col(k);
    dict.Q.col(2 * k + 1) = dict.c.col(k) - dict.d.col(k);
  }
  dict.nu.resize(cfg.d_x, K2);
  for (int r = 0; r < K2; ++r) {
    dict.nu.col(r) = cfg.u_norm * Ex.col(2 * K1 + r);
    dict.M.col(2 * K1 + r) = dict.nu.col(r);
  }

  // Complement bases are materialized only at moderate dimension; beyond
  // that, use complement_residual_sq() which never forms them.
  constexpr int kMaxExplicitComplement = 4096;
  if (cfg.d_x <= kMaxExplicitComplement)
    dict.u_perp = Ex.rightCols(cfg.d_x - K);
  if (cfg.d_y <= kMaxExplicitComplement)
    dict.q_perp = Ey.middleCols(2 * K1, cfg.d_y - 2 * K1);
  return dict;
}

// Squared norm of the component of x orthogonal to span(M); works whether or
// not the explicit complement basis is stored.
inline double complement_residual_sq(const Dictionary& dict, const Vector& x) {
  const double u2 = dict.cfg.u_norm * dict.cfg.u_norm;
  Vector r = x;
  for (int k = 0; k < dict.cfg.K1; ++k) {
    r -= dict.a.col(k) * (dict.a.col(k).dot(x) / dict.a_norm_sq());
    r -= dict.b.col(k) * (dict.b.col(k).dot(x) / dict.b_norm_sq());
  }
  for (int j = 0; j < dict.cfg.K2; ++j)
    r -= dict.nu.col(j) * (dict.nu.col(j).dot(x) / u2);
  return r.squaredNorm();
}

// Frobenius norm of I - [sum of the rank-1 projectors of the decomposition].
inline double idempotent_reconstruction_residual(const Dictionary& dict) {
  const int d = dict.cfg.d_x;
  const double u2 = dict.cfg.u_norm * dict.cfg.u_norm;
  Matrix P = Matrix::Zero(d, d);
  for (int k = 0; k < dict.cfg.K1; ++k) {
    P.noalias() += dict.a.col(k) * dict.a.col(k).transpose() / dict.a_norm_sq();
    P.noalias() += dict.b.col(k) * dict.b.col(k).transpose() / dict.b_norm_sq();
  }
  for (int r = 0; r < dict.cfg.K2; ++r)
    P.noalias() += dict.nu.col(r) * dict.nu.col(r).transpose() / u2;
  if (dict.u_perp.cols() != d - dict.cfg.K())
    throw DomainError("idempotent residual requires the explicit complement basis");
  P.noalias() += dict.u_perp * dict.u_perp.transpose();
  return (Matrix::Identity(d, d) - P).norm();
}

}  // namespace icl
