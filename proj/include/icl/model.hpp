#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "icl/common.hpp"
#include "icl/promptgen.hpp"

namespace icl {

struct ModelConfig {
  int m = 50;            // MLP width
  double sigma0 = 0.1;   // attention init scale (WQ = WK = sigma0 * I)
  double sigma1 = 0.01;  // MLP init std
  double r_scale = -1.0; // readout magnitude; < 0 selects the default 1/m

  double effective_r_scale() const { return r_scale < 0.0 ? 1.0 / m : r_scale; }
  void validate() const {
    if (m < 1) throw ConfigError("model: m must be >= 1");
    if (!(sigma0 > 0.0)) throw ConfigError("model: sigma0 must be > 0");
    if (!(sigma1 > 0.0)) throw ConfigError("model: sigma1 must be > 0");
    if (r_scale == 0.0) throw ConfigError("model: r_scale must be nonzero");
  }
};

// The three trainable blocks of the reduced architecture plus the fixed
// readout. All other blocks of the full model are frozen (zero off-blocks,
// identity value path), which makes this reduction exact.
struct ModelState {
  Matrix WQ;  // d_x x d_x
  Matrix WK;  // d_x x d_x
  Matrix WO;  // m x d_y
  Vector r;   // length m, entries in {-r_scale, +r_scale}
};

struct ForwardTrace {
  Vector logits;            // length L
  Vector weights;           // softmax over demonstrations
  Vector attended;          // d_y, sum_l weights_l * y_l
  Vector preact;            // length m
  std::vector<int> active_set;
  double f = 0.0;
};

template <class RNG>
inline ModelState init_model(int d_x, int d_y, const ModelConfig& mc, RNG& rng) {
  mc.validate();
  ModelState s;
  s.WQ = mc.sigma0 * Matrix::Identity(d_x, d_x);
  s.WK = mc.sigma0 * Matrix::Identity(d_x, d_x);
  s.WO.resize(mc.m, d_y);
  std::normal_distribution<double> gauss(0.0, mc.sigma1);
  for (int j = 0; j < d_y; ++j)
    for (int i = 0; i < mc.m; ++i) s.WO(i, j) = gauss(rng);
  s.r.resize(mc.m);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double rs = mc.effective_r_scale();
  for (int i = 0; i < mc.m; ++i) s.r(i) = unif(rng) < 0.5 ? rs : -rs;
  return s;
}

// Numerically stable softmax (max-logit subtraction).
inline Vector stable_softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector w = (logits.array() - mx).exp();
  return w / w.sum();
}

// Reduced forward pass on raw word/label columns:
//   logit_l = (WK x_l)' (WQ x_q), softmax over demonstrations only,
//   g = sum_l w_l y_l, f = r' ReLU(WO g).
inline ForwardTrace forward_cols(const ModelState& s, const Matrix& X,
                                 const Matrix& Y) {
  const int L = static_cast<int>(Y.cols());
  ForwardTrace t;
  Vector qx = s.WQ * X.col(L);
  t.logits.resize(L);
  for (int l = 0; l < L; ++l) t.logits(l) = (s.WK * X.col(l)).dot(qx);
  if (!t.logits.allFinite()) throw DomainError("forward: non-finite logits");
  t.weights = stable_softmax(t.logits);
  t.attended = Y * t.weights;
  t.preact = s.WO * t.attended;
  t.f = 0.0;
  for (int i = 0; i < t.preact.size(); ++i)
    if (t.preact(i) > 0.0) {
      t.active_set.push_back(i);
      t.f += s.r(i) * t.preact(i);
    }
  return t;
}

inline ForwardTrace forward(const ModelState& s, const PromptSample& sample) {
  const int d_x = static_cast<int>(s.WQ.rows());
  const int d_y = static_cast<int>(s.WO.cols());
  const int L = static_cast<int>(sample.H.cols()) - 1;
  if (sample.H.rows() != d_x + d_y)
    throw DomainError("forward: prompt/model dimension mismatch");
  if (!sample.H.allFinite()) throw DomainError("forward: non-finite input");
  Matrix X = sample.H.topRows(d_x);
  Matrix Y = sample.H.block(d_x, 0, d_y, L);
  return forward_cols(s, X, Y);
}

enum class Prediction { positive, negative, tie };

// Sign of f; exact zero is a tie, which the strict "y*f < 0" error
// definition counts as correct but which we tally separately.
inline Prediction predict(const ModelState& s, const PromptSample& sample) {
  const double f = forward(s, sample).f;
  if (f > 0.0) return Prediction::positive;
  if (f < 0.0) return Prediction::negative;
  return Prediction::tie;
}

}  // namespace icl
