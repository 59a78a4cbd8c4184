#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "icl/common.hpp"
#include "icl/geometry.hpp"
#include "icl/model.hpp"
#include "icl/promptgen.hpp"

namespace icl {

// One row of the diagnostics time series (Figs 2-3 style).
struct CoefficientRecord {
  long step = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double zero_one_error = 0.0;
  long tie_count = 0;
  double correct_attention = 0.0;
  double alphaQK_max = 0.0;
  double betaQK_max = 0.0;
  double complement_max = 0.0;
  double noise_qk_max = 0.0;
  double alphaO_max = 0.0;
  double betaO_absmax = 0.0;
  double rhoO_max = 0.0;
  double noise_o_max = 0.0;
};

inline std::string csv_header() {
  return "step,train_loss,test_loss,zero_one_error,tie_count,"
         "correct_attention,alphaQK_max,betaQK_max,complement_max,"
         "noise_qk_max,alphaO_max,betaO_absmax,rhoO_max,noise_o_max";
}

inline std::string csv_row(const CoefficientRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%ld,%.9g,%.9g,%.9g,%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,"
                "%.9g,%.9g",
                r.step, r.train_loss, r.test_loss, r.zero_one_error,
                r.tie_count, r.correct_attention, r.alphaQK_max, r.betaQK_max,
                r.complement_max, r.noise_qk_max, r.alphaO_max, r.betaO_absmax,
                r.rhoO_max, r.noise_o_max);
  return buf;
}

// Raw quadratic-form projection coefficients of one attention block pair.
// alpha(k) = a_k' W a_k, beta(k) = b_k' W b_k, tau(r) = nu_r' W nu_r,
// rho(w) = u_w_perp' W u_w_perp.
struct QkCoefficients {
  Vector alpha_Q, alpha_K, beta_Q, beta_K;
  Vector tau_Q, tau_K;
  Vector rho_Q, rho_K;
};

namespace detail {

inline void quad_forms(const Matrix& W, const Dictionary& dict, Vector& alpha,
                       Vector& beta, Vector& tau, Vector& rho) {
  const int K1 = dict.cfg.K1, K2 = dict.cfg.K2;
  Matrix WA = W * dict.a;   // d_x x K1
  Matrix WB = W * dict.b;
  alpha.resize(K1);
  beta.resize(K1);
  for (int k = 0; k < K1; ++k) {
    alpha(k) = dict.a.col(k).dot(WA.col(k));
    beta(k) = dict.b.col(k).dot(WB.col(k));
  }
  tau.resize(K2);
  if (K2 > 0) {
    Matrix WN = W * dict.nu;
    for (int r = 0; r < K2; ++r) tau(r) = dict.nu.col(r).dot(WN.col(r));
  }
  if (dict.u_perp.cols() == 0)
    throw DomainError("coefficient extraction requires the explicit complement basis");
  Matrix WU = W * dict.u_perp;
  rho.resize(dict.u_perp.cols());
  for (int w = 0; w < dict.u_perp.cols(); ++w)
    rho(w) = dict.u_perp.col(w).dot(WU.col(w));
}

}  // namespace detail

inline QkCoefficients extract_qk_coefficients(const ModelState& s,
                                              const Dictionary& dict) {
  QkCoefficients c;
  detail::quad_forms(s.WQ, dict, c.alpha_Q, c.beta_Q, c.tau_Q, c.rho_Q);
  detail::quad_forms(s.WK, dict, c.alpha_K, c.beta_K, c.tau_K, c.rho_K);
  return c;
}

// Raw row projections of the MLP block: alpha_O(i,k) = WO(i,:) . c_k,
// beta_O(i,k) = WO(i,:) . d_k, rho_O over the label-space complement.
// With these raw forms the identity WO(i,:) . q_k^e = alpha + e*beta is exact.
struct OCoefficients {
  Matrix alpha_O;  // m x K1
  Matrix beta_O;   // m x K1
  Matrix rho_O;    // m x (d_y - 2*K1)
};

inline OCoefficients extract_o_coefficients(const ModelState& s,
                                            const Dictionary& dict) {
  if (dict.q_perp.cols() == 0)
    throw DomainError("coefficient extraction requires the explicit complement basis");
  OCoefficients c;
  c.alpha_O = s.WO * dict.c;
  c.beta_O = s.WO * dict.d;
  c.rho_O = s.WO * dict.q_perp;
  return c;
}

// ---------------------------------------------------------------------------
// Held-out evaluation set, stored as flat matrices so evaluation is a few
// large matrix products.
struct TestSet {
  int L = 0;
  Matrix Xd;                  // d_x x (n*L) demonstration words
  Matrix Xq;                  // d_x x n query words
  Matrix Yd;                  // d_y x (n*L) demonstration labels
  std::vector<int> y_S;       // n query labels
  std::vector<uint8_t> match; // n*L, demo sign == y_S
  int n() const { return static_cast<int>(y_S.size()); }
};

template <class Sampler>
inline TestSet make_test_set_with(int d_x, int d_y, int L, int n,
                                  Sampler&& sample_one) {
  TestSet ts;
  ts.L = L;
  ts.Xd.resize(d_x, static_cast<long>(n) * L);
  ts.Xq.resize(d_x, n);
  ts.Yd.resize(d_y, static_cast<long>(n) * L);
  ts.y_S.resize(n);
  ts.match.assign(static_cast<std::size_t>(n) * L, 0);
  Matrix X(d_x, L + 1);
  Matrix Y(d_y, L);
  PromptMeta meta;
  for (int i = 0; i < n; ++i) {
    sample_one(X, Y, meta);
    ts.Xd.middleCols(static_cast<long>(i) * L, L) = X.leftCols(L);
    ts.Xq.col(i) = X.col(L);
    ts.Yd.middleCols(static_cast<long>(i) * L, L) = Y;
    ts.y_S[i] = meta.y_S;
    for (int l = 0; l < L; ++l)
      ts.match[static_cast<std::size_t>(i) * L + l] =
          meta.demo_signs[l] == meta.y_S ? 1 : 0;
  }
  return ts;
}

template <class RNG>
inline TestSet make_test_set(const Dictionary& dict, const PromptConfig& cfg,
                             int n, RNG& rng) {
  return make_test_set_with(
      dict.cfg.d_x, dict.cfg.d_y, cfg.L, n,
      [&](Eigen::Ref<Matrix> X, Eigen::Ref<Matrix> Y, PromptMeta& meta) {
        sample_prompt_into(dict, cfg, rng, X, Y, meta);
      });
}

template <class RNG>
inline TestSet make_ood_test_set(const OodScenario& sc, int n, RNG& rng) {
  return make_test_set_with(
      sc.dict.cfg.d_x, sc.dict.cfg.d_y, sc.cfg.L, n,
      [&](Eigen::Ref<Matrix> X, Eigen::Ref<Matrix> Y, PromptMeta& meta) {
        sample_ood_prompt_into(sc, rng, X, Y, meta);
      });
}

struct EvalResult {
  double test_loss = 0.0;       // mean data cross-entropy
  double zero_one_error = 0.0;  // fraction with y*f < 0
  long tie_count = 0;           // prompts with f == 0
  double correct_attention = 0.0;
  long attention_excluded = 0;  // prompts with no matching demonstration
};

inline double stable_softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline EvalResult evaluate_on_test_set(const ModelState& s, const TestSet& ts) {
  const int n = ts.n(), L = ts.L;
  EvalResult res;
  Matrix A = s.WK.transpose() * s.WQ;
  Matrix AXq = A * ts.Xq;  // d_x x n
  Matrix G(ts.Yd.rows(), n);
  Vector logits(L), w(L);
  long errors = 0;
  double loss_sum = 0.0, att_sum = 0.0;
  long att_count = 0;
  for (int i = 0; i < n; ++i) {
    const long off = static_cast<long>(i) * L;
    for (int l = 0; l < L; ++l) logits(l) = ts.Xd.col(off + l).dot(AXq.col(i));
    if (!logits.allFinite()) throw DivergenceError("eval: non-finite logits");
    w = stable_softmax(logits);
    G.col(i).noalias() = ts.Yd.middleCols(off, L) * w;
    double mass = 0.0;
    bool any = false;
    for (int l = 0; l < L; ++l)
      if (ts.match[off + l]) { mass += w(l); any = true; }
    if (any) { att_sum += mass; ++att_count; }
  }
  res.attention_excluded = n - att_count;
  res.correct_attention = att_count > 0 ? att_sum / att_count : 0.0;
  Matrix P = s.WO * G;  // m x n
  for (int i = 0; i < n; ++i) {
    double f = 0.0;
    for (int j = 0; j < P.rows(); ++j)
      if (P(j, i) > 0.0) f += s.r(j) * P(j, i);
    const double z = ts.y_S[i] * f;
    loss_sum += stable_softplus(-z);
    if (z < 0.0) ++errors;
    if (f == 0.0) ++res.tie_count;
  }
  res.test_loss = loss_sum / n;
  res.zero_one_error = static_cast<double>(errors) / n;
  return res;
}

struct ZeroOneResult {
  double error_rate = 0.0;
  long tie_count = 0;
};

inline ZeroOneResult zero_one_error(const ModelState& s,
                                    const std::vector<PromptSample>& prompts) {
  if (prompts.empty()) throw DomainError("zero_one_error: empty prompt list");
  ZeroOneResult r;
  long errors = 0;
  for (const auto& p : prompts) {
    const double f = forward(s, p).f;
    if (p.meta.y_S * f < 0.0) ++errors;
    if (f == 0.0) ++r.tie_count;
  }
  r.error_rate = static_cast<double>(errors) / prompts.size();
  return r;
}

// Monte-Carlo mean of the softmax mass on demonstrations whose co-concept
// sign equals y_S. Prompts with no such demonstration are excluded from the
// mean and counted.
struct AttentionStat {
  double mean = 0.0;
  long excluded = 0;
};

template <class RNG>
inline AttentionStat correct_attention_stat(const ModelState& s,
                                            const Dictionary& dict,
                                            const PromptConfig& cfg,
                                            long n_samples, RNG& rng) {
  if (n_samples < 1) throw DomainError("correct_attention_stat: n_samples >= 1");
  const int L = cfg.L, d_x = dict.cfg.d_x;
  Matrix A = s.WK.transpose() * s.WQ;
  const int block = 512;
  Matrix X(d_x, L + 1), Y(dict.cfg.d_y, L);
  Matrix Xq(d_x, block), Xd(d_x, static_cast<long>(block) * L);
  std::vector<PromptMeta> metas(block);
  double sum = 0.0;
  long counted = 0, excluded = 0, done = 0;
  Vector logits(L), w(L);
  while (done < n_samples) {
    const int nb = static_cast<int>(std::min<long>(block, n_samples - done));
    for (int i = 0; i < nb; ++i) {
      sample_prompt_into(dict, cfg, rng, X, Y, metas[i]);
      Xd.middleCols(static_cast<long>(i) * L, L) = X.leftCols(L);
      Xq.col(i) = X.col(L);
    }
    Matrix AXq = A * Xq.leftCols(nb);
    for (int i = 0; i < nb; ++i) {
      const long off = static_cast<long>(i) * L;
      for (int l = 0; l < L; ++l) logits(l) = Xd.col(off + l).dot(AXq.col(i));
      w = stable_softmax(logits);
      const auto& match = metas[i].y_S > 0 ? metas[i].S_plus : metas[i].S_minus;
      if (match.empty()) { ++excluded; continue; }
      double mass = 0.0;
      for (int l : match) mass += w(l);
      sum += mass;
      ++counted;
    }
    done += nb;
  }
  AttentionStat st;
  st.excluded = excluded;
  st.mean = counted > 0 ? sum / counted : 0.0;
  return st;
}

// Max over fresh Gaussian noise draws of the attention bilinear form
// (WK xi)' (WQ xi) and of the MLP row responses |WO(i,:) xi_y|.
struct NoiseProducts {
  double noise_qk_max = 0.0;
  double noise_o_max = 0.0;
};

template <class RNG>
inline NoiseProducts noise_products(const ModelState& s, const Dictionary& dict,
                                    double sigma_xi, int n_draws, RNG& rng) {
  NoiseProducts np;
  if (sigma_xi == 0.0 || n_draws < 1) return np;
  std::normal_distribution<double> gauss(0.0, sigma_xi);
  Vector xi(dict.cfg.d_x), xiy(dict.cfg.d_y);
  bool first = true;
  for (int t = 0; t < n_draws; ++t) {
    for (int i = 0; i < xi.size(); ++i) xi(i) = gauss(rng);
    for (int i = 0; i < xiy.size(); ++i) xiy(i) = gauss(rng);
    const double qk = (s.WK * xi).dot(s.WQ * xi);
    const double o = (s.WO * xiy).cwiseAbs().maxCoeff();
    if (first || qk > np.noise_qk_max) np.noise_qk_max = qk;
    if (o > np.noise_o_max) np.noise_o_max = o;
    first = false;
  }
  return np;
}

// Assemble one CSV record from an evaluation plus fresh coefficient and
// noise-probe measurements.
template <class RNG>
inline CoefficientRecord make_record(long step, double train_loss,
                                     const EvalResult& ev, const ModelState& s,
                                     const Dictionary& dict, double sigma_xi,
                                     int noise_draws, RNG& noise_rng) {
  CoefficientRecord r;
  r.step = step;
  r.train_loss = train_loss;
  r.test_loss = ev.test_loss;
  r.zero_one_error = ev.zero_one_error;
  r.tie_count = ev.tie_count;
  r.correct_attention = ev.correct_attention;
  QkCoefficients qk = extract_qk_coefficients(s, dict);
  r.alphaQK_max = (qk.alpha_Q.array() * qk.alpha_K.array()).maxCoeff();
  r.betaQK_max = (qk.beta_Q.array() * qk.beta_K.array()).maxCoeff();
  double comp = (qk.rho_Q.array() * qk.rho_K.array()).maxCoeff();
  if (qk.tau_Q.size() > 0)
    comp = std::max(comp, (qk.tau_Q.array() * qk.tau_K.array()).maxCoeff());
  r.complement_max = comp;
  OCoefficients oc = extract_o_coefficients(s, dict);
  r.alphaO_max = oc.alpha_O.maxCoeff();
  r.betaO_absmax = oc.beta_O.cwiseAbs().maxCoeff();
  r.rhoO_max = oc.rho_O.cwiseAbs().maxCoeff();
  NoiseProducts np = noise_products(s, dict, sigma_xi, noise_draws, noise_rng);
  r.noise_qk_max = np.noise_qk_max;
  r.noise_o_max = np.noise_o_max;
  return r;
}

}  // namespace icl
