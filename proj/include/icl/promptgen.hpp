#pragma once

#include <random>
#include <vector>

#include "icl/common.hpp"
#include "icl/geometry.hpp"

namespace icl {

struct PromptConfig {
  int L = 4;              // demonstration count
  double sigma_xi = 0.0;  // word/label noise std
  // Per-coordinate activation probability for non-co-concept latents;
  // < 0 selects the default 1/K.
  double extra_feature_prob = -1.0;
  // Prompt probabilities, one per (concept, sign) pair in column order
  // (1+, 1-, 2+, 2-, ...); empty selects the uniform 1/(2*K1).
  std::vector<double> mixture;
  // Resample until at least one demonstration shares the query's co-concept
  // label; keeps the test task well-posed (the admissible test distributions
  // all require one matching pair) and is what the shipped configs use.
  bool require_query_match = true;

  void validate(const GeometryConfig& g) const {
    if (L < 1) throw ConfigError("prompt: L must be >= 1");
    if (sigma_xi < 0.0) throw ConfigError("prompt: sigma_xi must be >= 0");
    if (extra_feature_prob > 1.0)
      throw ConfigError("prompt: extra_feature_prob must be <= 1");
    if (!mixture.empty()) {
      if (static_cast<int>(mixture.size()) != 2 * g.K1)
        throw ConfigError("prompt: mixture must have 2*K1 entries");
      double s = 0.0;
      for (double p : mixture) {
        if (p < 0.0) throw ConfigError("prompt: mixture entries must be >= 0");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-9)
        throw ConfigError("prompt: mixture must sum to 1");
    }
  }

  double effective_extra_prob(const GeometryConfig& g) const {
    return extra_feature_prob < 0.0 ? 1.0 / g.K() : extra_feature_prob;
  }
};

// Latent bookkeeping for one prompt. demo_signs[l] is the co-concept
// semantic sign of demonstration l; latents[p] lists the active dictionary
// columns at position p (positions 0..L-1 demos, position L the query).
struct PromptMeta {
  int k_star = 0;
  int y_S = +1;
  std::vector<int> demo_signs;
  std::vector<std::vector<int>> latents;
  std::vector<int> S_plus;   // demo indices with sign +1
  std::vector<int> S_minus;  // demo indices with sign -1
};

struct PromptSample {
  Matrix H;  // (d_x + d_y) x (L+1); column L stacks (x_query; 0)
  PromptMeta meta;
};

// Pure stacking of word columns X (d_x x (L+1)) and demonstration label
// columns Y (d_y x L) into the prompt embedding; the query label slot is 0.
inline Matrix embed(const Matrix& X, const Matrix& Y) {
  if (Y.cols() + 1 != X.cols() || X.cols() < 2)
    throw DomainError("embed: need L+1 word columns and L label columns");
  const int L = static_cast<int>(Y.cols());
  Matrix H = Matrix::Zero(X.rows() + Y.rows(), L + 1);
  H.topRows(X.rows()) = X;
  H.block(X.rows(), 0, Y.rows(), L) = Y;
  return H;
}

namespace detail {

// One draw (no rejection): fills X (d_x x (L+1)), Y (d_y x L) and meta.
template <class RNG>
inline void draw_prompt_once(const Dictionary& dict, const PromptConfig& cfg,
                             RNG& rng, Eigen::Ref<Matrix> X,
                             Eigen::Ref<Matrix> Y, PromptMeta& meta) {
  const GeometryConfig& g = dict.cfg;
  const int L = cfg.L, K = g.K();
  const double p_extra = cfg.effective_extra_prob(g);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Co-concept and query sign from the mixture.
  int pair_idx;
  if (cfg.mixture.empty()) {
    pair_idx = static_cast<int>(unif(rng) * (2 * g.K1));
    if (pair_idx >= 2 * g.K1) pair_idx = 2 * g.K1 - 1;
  } else {
    double r = unif(rng), acc = 0.0;
    pair_idx = 2 * g.K1 - 1;
    for (int i = 0; i < 2 * g.K1; ++i) {
      acc += cfg.mixture[i];
      if (r < acc) { pair_idx = i; break; }
    }
  }
  meta.k_star = pair_idx / 2;
  meta.y_S = (pair_idx % 2 == 0) ? +1 : -1;
  meta.demo_signs.assign(L, 0);
  meta.latents.assign(L + 1, {});
  meta.S_plus.clear();
  meta.S_minus.clear();

  const int co0 = 2 * meta.k_star, co1 = 2 * meta.k_star + 1;
  for (int pos = 0; pos <= L; ++pos) {
    auto& active = meta.latents[pos];
    int sign;
    if (pos < L) {
      sign = unif(rng) < 0.5 ? +1 : -1;
      meta.demo_signs[pos] = sign;
      (sign > 0 ? meta.S_plus : meta.S_minus).push_back(pos);
    } else {
      sign = meta.y_S;
    }
    active.push_back(Dictionary::pair_col(meta.k_star, sign));
    for (int j = 0; j < K; ++j) {
      if (j == co0 || j == co1) continue;
      if (unif(rng) < p_extra) active.push_back(j);
    }

    auto x = X.col(pos);
    x.setZero();
    for (int j : active) x += dict.M.col(j);
    if (cfg.sigma_xi > 0.0)
      for (int i = 0; i < g.d_x; ++i) x(i) += cfg.sigma_xi * gauss(rng);
    if (pos < L) {
      auto y = Y.col(pos);
      y.setZero();
      for (int j : active) y += dict.Q.col(j);
      if (cfg.sigma_xi > 0.0)
        for (int i = 0; i < g.d_y; ++i) y(i) += cfg.sigma_xi * gauss(rng);
    }
  }
}

}  // namespace detail

// Core sampler writing into caller-provided storage (hot path for training
// batches and held-out sets). Applies the query-match rejection if enabled.
template <class RNG>
inline void sample_prompt_into(const Dictionary& dict, const PromptConfig& cfg,
                               RNG& rng, Eigen::Ref<Matrix> X,
                               Eigen::Ref<Matrix> Y, PromptMeta& meta) {
  for (;;) {
    detail::draw_prompt_once(dict, cfg, rng, X, Y, meta);
    if (!cfg.require_query_match) return;
    const auto& match = meta.y_S > 0 ? meta.S_plus : meta.S_minus;
    if (!match.empty()) return;
  }
}

template <class RNG>
inline PromptSample sample_prompt(const Dictionary& dict,
                                  const PromptConfig& cfg, RNG& rng) {
  Matrix X(dict.cfg.d_x, cfg.L + 1), Y(dict.cfg.d_y, cfg.L);
  PromptSample s;
  sample_prompt_into(dict, cfg, rng, X, Y, s.meta);
  s.H = embed(X, Y);
  return s;
}

// ---------------------------------------------------------------------------
// OOD families.

struct OodSpec {
  enum class Variant { length_shift, mixture_shift, z_shift, data_shift };
  Variant variant = Variant::length_shift;
  std::string name;
  int L_star = -1;                    // < 0 keeps the training L
  std::vector<double> mixture_star;   // empty keeps the training mixture
  // Conic combination weights: a*_k = sum_j wa(j,k) * a_j, etc. Empty means
  // identity. Only used by data_shift.
  Matrix wa, wb, wc, wd;
  std::int64_t nu_star_seed = 0;
  // Scale admissibility window for the shifted vectors, relative to the
  // training magnitudes u_norm / q_norm.
  double ratio_min = 0.5, ratio_max = 2.0;
};

namespace detail {

inline Matrix conic_combine(const Matrix& base, const Matrix& w, int K1,
                            const char* what) {
  if (w.size() == 0) return base;
  if (w.rows() != K1 || w.cols() != K1)
    throw ConfigError(std::string("ood: ") + what + " weights must be K1 x K1");
  if ((w.array() < 0.0).any())
    throw DomainError(std::string("ood: ") + what + " weights must be >= 0 (conic hull)");
  return base * w;
}

}  // namespace detail

// A prepared OOD scenario: an effective dictionary + prompt config such that
// in-distribution sampling machinery applies (z_shift keeps its own sampler).
struct OodScenario {
  OodSpec spec;
  Dictionary dict;  // training dict, or the shifted one for data_shift
  PromptConfig cfg;
};

inline OodScenario prepare_ood(const Dictionary& dict, const OodSpec& spec,
                               const PromptConfig& base_cfg) {
  OodScenario sc{spec, dict, base_cfg};
  if (spec.L_star >= 1) sc.cfg.L = spec.L_star;
  if (!spec.mixture_star.empty()) sc.cfg.mixture = spec.mixture_star;
  sc.cfg.validate(dict.cfg);
  if (spec.variant != OodSpec::Variant::data_shift) return sc;

  const GeometryConfig& g = dict.cfg;
  Dictionary nd = dict;
  nd.a = detail::conic_combine(dict.a, spec.wa, g.K1, "a*");
  nd.b = detail::conic_combine(dict.b, spec.wb, g.K1, "b*");
  nd.c = detail::conic_combine(dict.c, spec.wc, g.K1, "c*");
  nd.d = detail::conic_combine(dict.d, spec.wd, g.K1, "d*");
  for (int k = 0; k < g.K1; ++k) {
    const double ra = nd.a.col(k).norm() / g.u_norm;
    const double rb = nd.b.col(k).norm() / g.u_norm;
    const double rc = nd.c.col(k).norm() / g.q_norm;
    const double rd = nd.d.col(k).norm() / g.q_norm;
    // Ordering is checked relative to the training norms (the label-semantic
    // direction must not shrink relative to the concept direction).
    if (nd.b.col(k).norm() / dict.b.col(k).norm() <
        nd.a.col(k).norm() / dict.a.col(k).norm() - 1e-12)
      throw DomainError("ood: shifted b*_k shrinks below a*_k (norm ordering)");
    if (nd.d.col(k).norm() / dict.d.col(k).norm() <
        nd.c.col(k).norm() / dict.c.col(k).norm() - 1e-12)
      throw DomainError("ood: shifted d*_k shrinks below c*_k (norm ordering)");
    for (double r : {ra, rb})
      if (r < spec.ratio_min - 1e-12 || r > spec.ratio_max + 1e-12)
        throw DomainError("ood: shifted word vector magnitude outside the admissible window");
    for (double r : {rc, rd})
      if (r < spec.ratio_min - 1e-12 || r > spec.ratio_max + 1e-12)
        throw DomainError("ood: shifted label vector magnitude outside the admissible window");
  }
  for (int k = 0; k < g.K1; ++k) {
    nd.M.col(2 * k) = nd.a.col(k) + nd.b.col(k);
    nd.M.col(2 * k + 1) = nd.a.col(k) - nd.b.col(k);
    nd.Q.col(2 * k) = nd.c.col(k) + nd.d.col(k);
    nd.Q.col(2 * k + 1) = nd.c.col(k) - nd.d.col(k);
  }
  // Fresh task-irrelevant directions from the complement of span(M).
  if (g.K2 > 0) {
    if (dict.u_perp.cols() == 0)
      throw DomainError("ood: data_shift nu* needs the explicit complement basis");
    std::mt19937_64 gen(static_cast<std::uint64_t>(spec.nu_star_seed));
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int r = 0; r < g.K2; ++r) {
      Vector w(dict.u_perp.cols());
      for (int i = 0; i < w.size(); ++i) w(i) = gauss(gen);
      Vector v = dict.u_perp * w;
      v *= g.u_norm / v.norm();
      nd.nu.col(r) = v;
      nd.M.col(2 * g.K1 + r) = v;
    }
  }
  sc.dict = std::move(nd);
  return sc;
}

// z-distribution shift: multiple co-concepts per prompt, each position
// carrying one consistent semantic sign across all of them; at least one
// demonstration shares the query's sign.
template <class RNG>
inline void sample_zshift_prompt_into(const Dictionary& dict,
                                      const PromptConfig& cfg, RNG& rng,
                                      Eigen::Ref<Matrix> X,
                                      Eigen::Ref<Matrix> Y, PromptMeta& meta) {
  const GeometryConfig& g = dict.cfg;
  const int L = cfg.L, K = g.K();
  const double p_extra = cfg.effective_extra_prob(g);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (;;) {
    std::vector<int> concepts;
    for (int k = 0; k < g.K1; ++k)
      if (unif(rng) < 0.5) concepts.push_back(k);
    if (concepts.empty()) continue;
    meta.k_star = concepts.front();
    meta.y_S = unif(rng) < 0.5 ? +1 : -1;
    meta.demo_signs.assign(L, 0);
    meta.latents.assign(L + 1, {});
    meta.S_plus.clear();
    meta.S_minus.clear();
    for (int pos = 0; pos <= L; ++pos) {
      int sign;
      if (pos < L) {
        sign = unif(rng) < 0.5 ? +1 : -1;
        meta.demo_signs[pos] = sign;
        (sign > 0 ? meta.S_plus : meta.S_minus).push_back(pos);
      } else {
        sign = meta.y_S;
      }
      auto& active = meta.latents[pos];
      for (int k : concepts) active.push_back(Dictionary::pair_col(k, sign));
      for (int j = 0; j < K; ++j) {
        bool co = false;
        for (int k : concepts)
          if (j == 2 * k || j == 2 * k + 1) { co = true; break; }
        if (!co && unif(rng) < p_extra) active.push_back(j);
      }
      auto x = X.col(pos);
      x.setZero();
      for (int j : active) x += dict.M.col(j);
      if (cfg.sigma_xi > 0.0)
        for (int i = 0; i < g.d_x; ++i) x(i) += cfg.sigma_xi * gauss(rng);
      if (pos < L) {
        auto y = Y.col(pos);
        y.setZero();
        for (int j : active) y += dict.Q.col(j);
        if (cfg.sigma_xi > 0.0)
          for (int i = 0; i < g.d_y; ++i) y(i) += cfg.sigma_xi * gauss(rng);
      }
    }
    const auto& match = meta.y_S > 0 ? meta.S_plus : meta.S_minus;
    if (!match.empty()) return;
  }
}

template <class RNG>
inline void sample_ood_prompt_into(const OodScenario& sc, RNG& rng,
                                   Eigen::Ref<Matrix> X, Eigen::Ref<Matrix> Y,
                                   PromptMeta& meta) {
  if (sc.spec.variant == OodSpec::Variant::z_shift)
    sample_zshift_prompt_into(sc.dict, sc.cfg, rng, X, Y, meta);
  else
    sample_prompt_into(sc.dict, sc.cfg, rng, X, Y, meta);
}

template <class RNG>
inline PromptSample sample_ood_prompt(const Dictionary& dict,
                                      const OodSpec& spec,
                                      const PromptConfig& cfg, RNG& rng) {
  OodScenario sc = prepare_ood(dict, spec, cfg);
  Matrix X(sc.dict.cfg.d_x, sc.cfg.L + 1), Y(sc.dict.cfg.d_y, sc.cfg.L);
  PromptSample s;
  sample_ood_prompt_into(sc, rng, X, Y, s.meta);
  s.H = embed(X, Y);
  return s;
}

}  // namespace icl
