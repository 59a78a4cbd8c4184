#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "icl/common.hpp"
#include "icl/metrics.hpp"
#include "icl/model.hpp"
#include "icl/promptgen.hpp"
#include "icl/rng.hpp"

namespace icl {

struct TrainConfig {
  int B = 16;             // batch size
  double lambda = 2e-3;   // L2 regularization weight
  double gamma = 1e4;     // step-size offset; eta_t = 2 / (lambda*(gamma+t))
  long T = 10000;         // SGD step count
  // 0-1 error early-stopping threshold; eps = 0 disables early stopping
  // (otherwise a run would halt the moment the error first hits zero).
  double eps = 0.0;
  long eval_every = 100;  // steps between held-out evaluations
  int n_test = 5000;      // held-out prompt count
  std::uint64_t seed = 0; // master seed
  int noise_draws = 256;  // noise-probe draws per record

  void validate() const {
    if (B < 1) throw ConfigError("train: B must be >= 1");
    if (!(lambda > 0.0)) throw ConfigError("train: lambda must be > 0");
    // gamma > 2 keeps eta_t*lambda = 2/(gamma+t) < 1 (update stays a
    // contraction of the regularization term).
    if (!(gamma > 2.0)) throw ConfigError("train: gamma must be > 2");
    if (T < 0) throw ConfigError("train: T must be >= 0");
    if (eps < 0.0) throw ConfigError("train: eps must be >= 0");
    if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
    if (n_test < 1) throw ConfigError("train: n_test must be >= 1");
  }
};

inline double step_size(const TrainConfig& cfg, long t) {
  return 2.0 / (cfg.lambda * (cfg.gamma + t));
}

// Cross-entropy of the sign target: l(z) = log(1 + exp(-z)) at z = y*f.
inline double loss(double f, int y_S) {
  if (!std::isfinite(f)) throw DomainError("loss: non-finite f");
  return stable_softplus(-static_cast<double>(y_S) * f);
}

inline double batch_loss(const ModelState& s,
                         const std::vector<PromptSample>& batch,
                         double lambda) {
  if (batch.empty()) throw DomainError("batch_loss: empty batch");
  double sum = 0.0;
  for (const auto& p : batch) sum += loss(forward(s, p).f, p.meta.y_S);
  const double reg = 0.5 * lambda *
                     (s.WQ.squaredNorm() + s.WK.squaredNorm() + s.WO.squaredNorm());
  return sum / batch.size() + reg;
}

struct GradientSet {
  Matrix gWQ, gWK, gWO;
};

// Reference reverse-mode gradients of batch_loss (per-prompt loop). The
// batched SGD step below must produce the identical update; a test pins that.
inline GradientSet gradients(const ModelState& s,
                             const std::vector<PromptSample>& batch,
                             double lambda) {
  if (batch.empty()) throw DomainError("gradients: empty batch");
  const int d_x = static_cast<int>(s.WQ.rows());
  const int d_y = static_cast<int>(s.WO.cols());
  GradientSet g;
  g.gWQ = Matrix::Zero(d_x, d_x);
  g.gWK = Matrix::Zero(d_x, d_x);
  g.gWO = Matrix::Zero(s.WO.rows(), d_y);
  for (const auto& p : batch) {
    const int L = static_cast<int>(p.H.cols()) - 1;
    Matrix X = p.H.topRows(d_x);
    Matrix Y = p.H.block(d_x, 0, d_y, L);
    ForwardTrace t = forward_cols(s, X, Y);
    // dl/df = -y * sigmoid(-y*f)
    const double z = p.meta.y_S * t.f;
    const double dldf = -p.meta.y_S / (1.0 + std::exp(z));
    // MLP block: relu mask (derivative 0 at exactly 0).
    Vector rmask = Vector::Zero(s.r.size());
    for (int i : t.active_set) rmask(i) = s.r(i);
    g.gWO.noalias() += dldf * rmask * t.attended.transpose();
    // Attention blocks through the softmax Jacobian.
    Vector v = s.WO.transpose() * rmask;  // d_y
    Vector tl(L);
    for (int l = 0; l < L; ++l) tl(l) = dldf * v.dot(Y.col(l));
    const double tbar = t.weights.dot(tl);
    Vector dlogit = t.weights.array() * (tl.array() - tbar);
    Vector qx = s.WQ * X.col(L);
    Vector kacc = Vector::Zero(d_x);
    Vector xacc = Vector::Zero(d_x);
    for (int l = 0; l < L; ++l) {
      kacc.noalias() += dlogit(l) * (s.WK * X.col(l));
      xacc.noalias() += dlogit(l) * X.col(l);
    }
    g.gWQ.noalias() += kacc * X.col(L).transpose();
    g.gWK.noalias() += qx * xacc.transpose();
    if (!std::isfinite(dldf))
      throw DomainError("gradients: non-finite intermediate");
  }
  const double inv = 1.0 / batch.size();
  g.gWQ = inv * g.gWQ + lambda * s.WQ;
  g.gWK = inv * g.gWK + lambda * s.WK;
  g.gWO = inv * g.gWO + lambda * s.WO;
  if (!g.gWQ.allFinite() || !g.gWK.allFinite() || !g.gWO.allFinite())
    throw DomainError("gradients: non-finite result");
  return g;
}

// Central finite-difference check of `gradients` on sampled coordinates of
// each block; returns the worst relative error (denominator guarded so
// coordinates with a vanishing gradient compare absolutely).
template <class RNG>
inline double finite_difference_check(const ModelState& s,
                                      const std::vector<PromptSample>& batch,
                                      double lambda, int coords_per_block,
                                      double h, RNG& rng) {
  GradientSet g = gradients(s, batch, lambda);
  ModelState pert = s;
  double worst = 0.0;
  auto probe = [&](Matrix& W, const Matrix& gW) {
    std::uniform_int_distribution<long> pick(0, W.size() - 1);
    for (int c = 0; c < coords_per_block; ++c) {
      const long idx = pick(rng);
      const double orig = W.data()[idx];
      W.data()[idx] = orig + h;
      const double lp = batch_loss(pert, batch, lambda);
      W.data()[idx] = orig - h;
      const double lm = batch_loss(pert, batch, lambda);
      W.data()[idx] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = gW.data()[idx];
      // Central differences at this step size carry ~1e-10 roundoff on an
      // O(1) loss; the floor keeps numerically-zero coordinates from
      // registering that noise as relative error.
      const double rel = std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-4);
      if (rel > worst) worst = rel;
    }
  };
  probe(pert.WQ, g.gWQ);
  probe(pert.WK, g.gWK);
  probe(pert.WO, g.gWO);
  return worst;
}

struct RunResult {
  long steps_taken = 0;
  bool stopped_early = false;
  std::vector<CoefficientRecord> records;
};

// Online mini-batch SGD (Algorithm-1 style): fresh batch from the prompt
// distribution every step, eta_t = 2/(lambda*(gamma+t)), periodic held-out
// evaluation, one CoefficientRecord per evaluation via `sink`.
//
// train_loss in a record is the mean data cross-entropy of the batches
// consumed since the previous record (a fresh probe batch for step 0).
inline RunResult sgd_run(
    ModelState& s, const Dictionary& dict, const PromptConfig& pcfg,
    const TrainConfig& tcfg,
    const std::function<void(const CoefficientRecord&)>& sink = nullptr) {
  tcfg.validate();
  pcfg.validate(dict.cfg);
  const int d_x = dict.cfg.d_x, d_y = dict.cfg.d_y;
  const int B = tcfg.B, L = pcfg.L;
  auto train_rng = make_stream(tcfg.seed, Stream::train_sampling);
  auto test_rng = make_stream(tcfg.seed, Stream::test_set);
  auto noise_rng = make_stream(tcfg.seed, Stream::noise_probe);
  TestSet ts = make_test_set(dict, pcfg, tcfg.n_test, test_rng);

  Matrix Xtmp(d_x, L + 1), Ytmp(d_y, L);
  Matrix Xd(d_x, static_cast<long>(B) * L), Xq(d_x, B);
  Matrix Yd(d_y, static_cast<long>(B) * L);
  std::vector<PromptMeta> metas(B);
  Matrix KX, QX, G(d_y, B), V(s.WO.rows(), B), Vy, U(d_x, B), D(d_x, B);
  Vector logits(L), w(L), tl(L), dlogit(L);

  auto sample_batch = [&]() {
    for (int i = 0; i < B; ++i) {
      sample_prompt_into(dict, pcfg, train_rng, Xtmp, Ytmp, metas[i]);
      Xd.middleCols(static_cast<long>(i) * L, L) = Xtmp.leftCols(L);
      Xq.col(i) = Xtmp.col(L);
      Yd.middleCols(static_cast<long>(i) * L, L) = Ytmp;
    }
  };

  RunResult res;
  double window_loss_sum = 0.0;
  long window_batches = 0;

  auto emit = [&](long step, const EvalResult& ev) {
    const double train_loss =
        window_batches > 0 ? window_loss_sum / window_batches : 0.0;
    window_loss_sum = 0.0;
    window_batches = 0;
    CoefficientRecord rec = make_record(step, train_loss, ev, s, dict,
                                        pcfg.sigma_xi, tcfg.noise_draws,
                                        noise_rng);
    res.records.push_back(rec);
    if (sink) sink(rec);
  };

  // Initial record: probe batch for the data term, no parameter change.
  {
    sample_batch();
    double sum = 0.0;
    Matrix Xfull(d_x, L + 1);
    for (int i = 0; i < B; ++i) {
      Xfull.leftCols(L) = Xd.middleCols(static_cast<long>(i) * L, L);
      Xfull.col(L) = Xq.col(i);
      ForwardTrace t = forward_cols(s, Xfull,
                                    Yd.middleCols(static_cast<long>(i) * L, L));
      sum += loss(t.f, metas[i].y_S);
    }
    window_loss_sum = sum / B;
    window_batches = 1;
    emit(0, evaluate_on_test_set(s, ts));
  }

  for (long t = 0; t < tcfg.T; ++t) {
    sample_batch();
    const double eta = step_size(tcfg, t);
    KX.noalias() = s.WK * Xd;  // d_x x B*L
    QX.noalias() = s.WQ * Xq;  // d_x x B
    double batch_ce = 0.0;
    for (int i = 0; i < B; ++i) {
      const long off = static_cast<long>(i) * L;
      for (int l = 0; l < L; ++l) logits(l) = KX.col(off + l).dot(QX.col(i));
      if (!logits.allFinite()) throw DivergenceError("train: non-finite logits");
      w = stable_softmax(logits);
      G.col(i).noalias() = Yd.middleCols(off, L) * w;
    }
    Matrix P = s.WO * G;  // m x B
    for (int i = 0; i < B; ++i) {
      double f = 0.0;
      for (int j = 0; j < P.rows(); ++j)
        if (P(j, i) > 0.0) f += s.r(j) * P(j, i);
      const double z = metas[i].y_S * f;
      batch_ce += stable_softplus(-z);
      const double dldf = -metas[i].y_S / (1.0 + std::exp(z));
      for (int j = 0; j < P.rows(); ++j)
        V(j, i) = P(j, i) > 0.0 ? dldf * s.r(j) / B : 0.0;
    }
    batch_ce /= B;
    window_loss_sum += batch_ce;
    ++window_batches;
    if (batch_ce > 1e6) throw DivergenceError("train: batch loss exceeded 1e6");

    Matrix gWO = V * G.transpose();       // m x d_y (dldf/B folded into V)
    Vy.noalias() = s.WO.transpose() * V;  // d_y x B
    for (int i = 0; i < B; ++i) {
      const long off = static_cast<long>(i) * L;
      for (int l = 0; l < L; ++l) logits(l) = KX.col(off + l).dot(QX.col(i));
      w = stable_softmax(logits);
      for (int l = 0; l < L; ++l) tl(l) = Yd.col(off + l).dot(Vy.col(i));
      const double tbar = w.dot(tl);
      dlogit = w.array() * (tl.array() - tbar);
      U.col(i).noalias() = KX.middleCols(off, L) * dlogit;
      D.col(i).noalias() = Xd.middleCols(off, L) * dlogit;
    }
    const double shrink = 1.0 - eta * tcfg.lambda;
    s.WQ *= shrink;
    s.WQ.noalias() -= eta * (U * Xq.transpose());
    s.WK *= shrink;
    s.WK.noalias() -= eta * (QX * D.transpose());
    s.WO *= shrink;
    s.WO.noalias() -= eta * gWO;
    res.steps_taken = t + 1;

    const double wnorm = std::max({s.WQ.norm(), s.WK.norm(), s.WO.norm()});
    if (!std::isfinite(wnorm) || wnorm > 1e9)
      throw DivergenceError("train: weight norm exceeded 1e9");

    if ((t + 1) % tcfg.eval_every == 0 || t + 1 == tcfg.T) {
      EvalResult ev = evaluate_on_test_set(s, ts);
      emit(t + 1, ev);
      if (tcfg.eps > 0.0 && ev.zero_one_error <= tcfg.eps) {
        res.stopped_early = true;
        break;
      }
    }
  }
  return res;
}

}  // namespace icl
