#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "icl/geometry.hpp"
#include "icl/promptgen.hpp"
#include "icl/rng.hpp"

namespace {

icl::GeometryConfig small_geometry() {
  icl::GeometryConfig g;
  g.d_x = 16;
  g.d_y = 16;
  g.K1 = 2;
  g.K2 = 3;
  g.u_norm = 10.0;
  g.q_norm = 10.0;
  g.kappa_x = 0.5;
  g.kappa_y = 0.5;
  return g;
}

TEST(PromptGen, UnconditionedSignStatistics) {
  icl::Dictionary dict = icl::build_dictionary(small_geometry());
  icl::PromptConfig cfg;
  cfg.L = 4;
  cfg.sigma_xi = 0.0;
  cfg.extra_feature_prob = 0.0;
  cfg.require_query_match = false;
  auto rng = icl::make_stream(42, icl::Stream::train_sampling);
  const int n = 100000;
  icl::Matrix X(16, 5), Y(16, 4);
  icl::PromptMeta meta;
  double sum_plus = 0.0;
  long hist[5] = {0, 0, 0, 0, 0};
  long kstar0 = 0;
  for (int i = 0; i < n; ++i) {
    icl::sample_prompt_into(dict, cfg, rng, X, Y, meta);
    const int sp = static_cast<int>(meta.S_plus.size());
    sum_plus += sp;
    ++hist[sp];
    if (meta.k_star == 0) ++kstar0;
  }
  // Demonstration signs are i.i.d. fair coins: E|S_plus| = L/2 = 2.
  EXPECT_NEAR(sum_plus / n, 2.0, 0.02);
  // Chi-square against Binomial(4, 1/2); 4 dof, 0.001 quantile ~ 18.47.
  const double probs[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  double chi2 = 0.0;
  for (int j = 0; j <= 4; ++j) {
    const double e = n * probs[j];
    chi2 += (hist[j] - e) * (hist[j] - e) / e;
  }
  EXPECT_LE(chi2, 18.47);
  // Uniform mixture: each concept is the co-concept half the time.
  EXPECT_NEAR(static_cast<double>(kstar0) / n, 0.5, 0.005);
}

TEST(PromptGen, ConditionedSamplerAlwaysHasMatch) {
  icl::Dictionary dict = icl::build_dictionary(small_geometry());
  icl::PromptConfig cfg;
  cfg.L = 4;
  cfg.sigma_xi = 0.0;
  cfg.extra_feature_prob = 0.0;
  auto rng = icl::make_stream(7, icl::Stream::train_sampling);
  icl::Matrix X(16, 5), Y(16, 4);
  icl::PromptMeta meta;
  const int n = 20000;
  double sum_plus = 0.0;
  for (int i = 0; i < n; ++i) {
    icl::sample_prompt_into(dict, cfg, rng, X, Y, meta);
    const auto& match = meta.y_S > 0 ? meta.S_plus : meta.S_minus;
    ASSERT_FALSE(match.empty());
    sum_plus += meta.S_plus.size();
  }
  // Conditioning is symmetric in the query sign, so the mean is unchanged.
  EXPECT_NEAR(sum_plus / n, 2.0, 0.03);
}

TEST(PromptGen, NoiselessColumnsLieInDictionarySpan) {
  icl::GeometryConfig g = small_geometry();
  g.rotation_seed = 9;
  icl::Dictionary dict = icl::build_dictionary(g);
  icl::PromptConfig cfg;
  cfg.L = 4;
  cfg.sigma_xi = 0.0;
  auto rng = icl::make_stream(3, icl::Stream::train_sampling);
  for (int i = 0; i < 50; ++i) {
    icl::PromptSample s = icl::sample_prompt(dict, cfg, rng);
    for (int pos = 0; pos <= 4; ++pos) {
      icl::Vector x = s.H.col(pos).head(16);
      EXPECT_LE(icl::complement_residual_sq(dict, x), 1e-10);
      // Column matches the recorded latent set exactly.
      icl::Vector recon = icl::Vector::Zero(16);
      for (int j : s.meta.latents[pos]) recon += dict.M.col(j);
      EXPECT_LE((x - recon).norm(), 1e-10);
    }
    // Query label slot is zero.
    EXPECT_EQ(s.H.col(4).tail(16).norm(), 0.0);
  }
}

TEST(PromptGen, MixtureFrequencies) {
  icl::Dictionary dict = icl::build_dictionary(small_geometry());
  icl::PromptConfig cfg;
  cfg.L = 4;
  cfg.mixture = {0.7, 0.1, 0.1, 0.1};
  cfg.require_query_match = false;
  cfg.extra_feature_prob = 0.0;
  auto rng = icl::make_stream(11, icl::Stream::train_sampling);
  icl::Matrix X(16, 5), Y(16, 4);
  icl::PromptMeta meta;
  const int n = 50000;
  long counts[4] = {0, 0, 0, 0};
  for (int i = 0; i < n; ++i) {
    icl::sample_prompt_into(dict, cfg, rng, X, Y, meta);
    ++counts[2 * meta.k_star + (meta.y_S > 0 ? 0 : 1)];
  }
  EXPECT_NEAR(counts[0] / double(n), 0.7, 0.01);
  EXPECT_NEAR(counts[1] / double(n), 0.1, 0.007);
  EXPECT_NEAR(counts[2] / double(n), 0.1, 0.007);
  EXPECT_NEAR(counts[3] / double(n), 0.1, 0.007);
}

TEST(PromptGen, ExtraFeatureRate) {
  icl::Dictionary dict = icl::build_dictionary(small_geometry());
  icl::PromptConfig cfg;
  cfg.L = 1;
  cfg.require_query_match = false;
  // default rate 1/K = 1/7
  auto rng = icl::make_stream(13, icl::Stream::train_sampling);
  icl::Matrix X(16, 2), Y(16, 1);
  icl::PromptMeta meta;
  const int n = 40000;
  long extras = 0;
  for (int i = 0; i < n; ++i) {
    icl::sample_prompt_into(dict, cfg, rng, X, Y, meta);
    extras += static_cast<long>(meta.latents[0].size()) - 1;
  }
  // 5 eligible non-co-concept latents per position at rate 1/7.
  EXPECT_NEAR(extras / double(n), 5.0 / 7.0, 0.01);
}

TEST(PromptGen, EmbedShapeErrors) {
  icl::Matrix X(4, 3), Y(2, 2);
  X.setZero();
  Y.setZero();
  EXPECT_NO_THROW(icl::embed(X, Y));
  icl::Matrix Ybad(2, 3);
  Ybad.setZero();
  EXPECT_THROW(icl::embed(X, Ybad), icl::DomainError);
}

TEST(PromptGen, MixtureValidation) {
  icl::GeometryConfig g = small_geometry();
  icl::PromptConfig cfg;
  cfg.L = 4;
  cfg.mixture = {0.5, 0.5};  // wrong length (needs 2*K1 = 4)
  EXPECT_THROW(cfg.validate(g), icl::ConfigError);
  cfg.mixture = {0.5, 0.5, 0.25, 0.25};  // does not sum to 1
  EXPECT_THROW(cfg.validate(g), icl::ConfigError);
  cfg.mixture = {0.7, 0.1, 0.1, 0.1};
  EXPECT_NO_THROW(cfg.validate(g));
}

// ---------------------------------------------------------------------------
// OOD scenario preparation.

TEST(PromptGen, OodIdentityDataShiftKeepsDictionary) {
  icl::Dictionary dict = icl::build_dictionary(small_geometry());
  icl::PromptConfig cfg;
  cfg.L = 4;
  icl::OodSpec spec;
  spec.variant = icl::OodSpec::Variant::data_shift;
  spec.wb = icl::Matrix::Identity(2, 2);
  icl::OodScenario sc = icl::prepare_ood(dict, spec, cfg);
  EXPECT_EQ((sc.dict.a - dict.a).norm(), 0.0);
  EXPECT_EQ((sc.dict.b - dict.b).norm(), 0.0);
  // nu is redrawn but stays in the complement of the concept span.
  for (int r = 0; r < 3; ++r) {
    EXPECT_NEAR(sc.dict.nu.col(r).norm(), 10.0, 1e-9);
    EXPECT_LE(std::abs(sc.dict.nu.col(r).dot(dict.a.col(0))), 1e-8);
  }
}

TEST(PromptGen, OodDataShiftRejectsInadmissibleWeights) {
  icl::Dictionary dict = icl::build_dictionary(small_geometry());
  icl::PromptConfig cfg;
  cfg.L = 4;
  icl::OodSpec spec;
  spec.variant = icl::OodSpec::Variant::data_shift;
  // Negative weight: outside the conic hull.
  spec.wb = icl::Matrix(2, 2);
  spec.wb << 1.0, 0.0, -0.5, 1.0;
  EXPECT_THROW(icl::prepare_ood(dict, spec, cfg), icl::DomainError);
  // Shrinking b* below the admissible magnitude window.
  spec.wb << 0.1, 0.0, 0.0, 0.1;
  EXPECT_THROW(icl::prepare_ood(dict, spec, cfg), icl::DomainError);
  // Growing a* while keeping b*: violates the norm ordering.
  spec.wb = icl::Matrix();
  spec.wa = icl::Matrix(2, 2);
  spec.wa << 1.5, 0.0, 0.0, 1.5;
  EXPECT_THROW(icl::prepare_ood(dict, spec, cfg), icl::DomainError);
}

TEST(PromptGen, OodBSwapProducesValidDictionary) {
  icl::Dictionary dict = icl::build_dictionary(small_geometry());
  icl::PromptConfig cfg;
  cfg.L = 4;
  icl::OodSpec spec;
  spec.variant = icl::OodSpec::Variant::data_shift;
  spec.wb = icl::Matrix(2, 2);
  spec.wb << 0.0, 1.0, 1.0, 0.0;
  spec.nu_star_seed = 21;
  icl::OodScenario sc = icl::prepare_ood(dict, spec, cfg);
  EXPECT_EQ((sc.dict.b.col(0) - dict.b.col(1)).norm(), 0.0);
  EXPECT_EQ((sc.dict.b.col(1) - dict.b.col(0)).norm(), 0.0);
  EXPECT_EQ((sc.dict.M.col(0) - (dict.a.col(0) + dict.b.col(1))).norm(), 0.0);
}

TEST(PromptGen, OodLengthAndMixtureShift) {
  icl::Dictionary dict = icl::build_dictionary(small_geometry());
  icl::PromptConfig cfg;
  cfg.L = 4;
  icl::OodSpec spec;
  spec.variant = icl::OodSpec::Variant::length_shift;
  spec.L_star = 6;
  icl::OodScenario sc = icl::prepare_ood(dict, spec, cfg);
  EXPECT_EQ(sc.cfg.L, 6);
  icl::OodSpec spec2;
  spec2.variant = icl::OodSpec::Variant::mixture_shift;
  spec2.mixture_star = {0.4, 0.4, 0.1, 0.1};
  icl::OodScenario sc2 = icl::prepare_ood(dict, spec2, cfg);
  EXPECT_EQ(sc2.cfg.L, 4);
  EXPECT_EQ(sc2.cfg.mixture.size(), 4u);
}

TEST(PromptGen, ZShiftConsistentSignsAndMatch) {
  icl::Dictionary dict = icl::build_dictionary(small_geometry());
  icl::PromptConfig cfg;
  cfg.L = 4;
  cfg.sigma_xi = 0.0;
  cfg.extra_feature_prob = 0.0;
  icl::OodSpec spec;
  spec.variant = icl::OodSpec::Variant::z_shift;
  icl::OodScenario sc = icl::prepare_ood(dict, spec, cfg);
  auto rng = icl::make_stream(31, icl::Stream::ood_eval);
  icl::Matrix X(16, 5), Y(16, 4);
  icl::PromptMeta meta;
  for (int i = 0; i < 2000; ++i) {
    icl::sample_ood_prompt_into(sc, rng, X, Y, meta);
    const auto& match = meta.y_S > 0 ? meta.S_plus : meta.S_minus;
    ASSERT_FALSE(match.empty());
    for (int pos = 0; pos <= 4; ++pos) {
      const int sign = pos < 4 ? meta.demo_signs[pos] : meta.y_S;
      // All active co-concept columns carry the same semantic sign.
      for (int j : meta.latents[pos]) {
        if (j >= 4) continue;  // irrelevant features excluded here
        EXPECT_EQ(j % 2, sign > 0 ? 0 : 1);
      }
    }
  }
}

}  // namespace
