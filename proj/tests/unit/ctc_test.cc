#include "cslab/ctc.h"

#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "cslab/autodiff.h"
#include "cslab/ngram.h"
#include "unit/test_util.h"

namespace cslab {
namespace {

using testing::random_posteriors;
using testing::random_tensor;

FramePosteriors probs(std::vector<std::vector<double>> rows) {
  Tensor t({rows.size(), rows.front().size()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) t.at(r, c) = rows[r][c];
  }
  return FramePosteriors::from_probs(std::move(t));
}

LabelSeq random_labels(std::size_t max_len, std::size_t vocab, Rng& rng) {
  LabelSeq y(rng.below(max_len + 1));
  for (auto& v : y) v = 1 + static_cast<int>(rng.below(vocab - 1));
  return y;
}

// CTC negative log-likelihood recorded on the tape from elementary ops, so
// backward() yields a gradient that shares no code with the analytic route.
ad::Var ctc_on_tape(ad::Graph& g, ad::Var logits, const LabelSeq& y) {
  const ad::Var lp = g.log_softmax(logits);
  const std::size_t frames = g.value(logits).rows();
  std::vector<int> ext{0};
  for (int s : y) {
    ext.push_back(s);
    ext.push_back(0);
  }
  auto emit = [&](std::size_t t, int k) {
    return g.slice(g.slice(lp, 0, t, t + 1), 1, static_cast<std::size_t>(k),
                   static_cast<std::size_t>(k) + 1);
  };
  std::vector<ad::Var> alpha(ext.size());
  alpha[0] = emit(0, ext[0]);
  if (ext.size() > 1) alpha[1] = emit(0, ext[1]);
  for (std::size_t t = 1; t < frames; ++t) {
    std::vector<ad::Var> next(ext.size());
    for (std::size_t s = 0; s < ext.size(); ++s) {
      std::vector<ad::Var> from;
      if (alpha[s].valid()) from.push_back(alpha[s]);
      if (s >= 1 && alpha[s - 1].valid()) from.push_back(alpha[s - 1]);
      if (s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2] && alpha[s - 2].valid()) {
        from.push_back(alpha[s - 2]);
      }
      if (from.empty()) continue;
      next[s] = g.add(emit(t, ext[s]), g.logsumexp(g.concat(from, 1)));
    }
    alpha = std::move(next);
  }
  std::vector<ad::Var> ends{alpha.back()};
  if (ext.size() > 1) ends.push_back(alpha[ext.size() - 2]);
  return g.scale(g.logsumexp(g.concat(ends, 1)), -1.0);
}

TEST(Ctc, SingleFrameExample) {
  const auto post = probs({{0.4, 0.6}});
  EXPECT_NEAR(ctc_loss(post, {1}).loss, -std::log(0.6), 1e-12);
  EXPECT_NEAR(ctc_loss(post, {1}).loss, 0.5108, 1e-4);
}

TEST(Ctc, TwoFrameUniformExample) {
  const auto post = probs({{0.5, 0.5}, {0.5, 0.5}});
  // Paths "aa", "a-", "-a".
  EXPECT_NEAR(ctc_loss(post, {1}).loss, -std::log(3 * 0.25), 1e-12);
  EXPECT_NEAR(ctc_loss(post, {1}).loss, 0.2877, 1e-4);
}

TEST(Ctc, EmptyLabelsIsAllBlank) {
  const auto post = probs({{0.7, 0.3}, {0.2, 0.8}});
  EXPECT_NEAR(ctc_loss(post, {}).loss, -std::log(0.7 * 0.2), 1e-12);
  EXPECT_NEAR(ctc_brute_force(post, {}), -std::log(0.7 * 0.2), 1e-12);
}

TEST(Ctc, InfeasibleLabelsThrow) {
  const auto post = probs({{0.5, 0.5}, {0.5, 0.5}});
  EXPECT_EQ(ctc_min_frames({1, 1}), 3u);
  EXPECT_EQ(ctc_min_frames({1, 2, 1}), 3u);
  EXPECT_THROW(ctc_loss(post, {1, 1}), CtcInfeasibleError);
  EXPECT_TRUE(std::isinf(ctc_brute_force(post, {1, 1})));
  EXPECT_THROW(ctc_loss(post, {0}), ValidationError);
  EXPECT_THROW(ctc_loss(post, {2}), ValidationError);
}

TEST(Ctc, BruteForceGuard) {
  Rng rng(1);
  const auto post = random_posteriors(kCtcBruteForceMaxFrames + 1, 2, rng);
  EXPECT_THROW(ctc_brute_force(post, {1}), ValidationError);
}

TEST(Ctc, MatchesBruteForceOnRandomInstances) {
  Rng rng(2024);
  int compared = 0;
  for (int trial = 0; compared < 1000; ++trial) {
    const std::size_t frames = 1 + rng.below(6);
    const std::size_t vocab = 2 + rng.below(3);
    const auto post = random_posteriors(frames, vocab, rng);
    const LabelSeq y = random_labels(3, vocab, rng);
    const double brute = ctc_brute_force(post, y);
    if (frames < ctc_min_frames(y)) {
      EXPECT_TRUE(std::isinf(brute));
      EXPECT_THROW(ctc_loss(post, y), CtcInfeasibleError);
      continue;
    }
    ++compared;
    ASSERT_NEAR(ctc_loss(post, y).loss, brute, 1e-9) << "trial " << trial;
  }
}

TEST(Ctc, AlphaAndBetaAgree) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t frames = 3 + rng.below(40);
    const std::size_t vocab = 2 + rng.below(6);
    const auto post = random_posteriors(frames, vocab, rng);
    LabelSeq y = random_labels(std::min<std::size_t>(frames / 2, 10), vocab, rng);
    const Lattice lat = ctc_lattice(post.log_probs(), y);
    EXPECT_NEAR(lat.log_likelihood_alpha, lat.log_likelihood_beta, 1e-9);
    for (double v : lat.alpha.data()) EXPECT_LE(v, 1e-12);
    for (double v : lat.beta.data()) EXPECT_LE(v, 1e-12);
    for (std::size_t t = 0; t < frames; t += 5) {
      double acc = -std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < lat.extended.size(); ++s) {
        const double v = lat.alpha.at(t, s) + lat.beta.at(t, s);
        if (std::isinf(v)) continue;
        const double hi = std::max(acc, v);
        acc = hi + std::log(std::exp(acc - hi) + std::exp(v - hi));
      }
      EXPECT_NEAR(acc, lat.log_likelihood_alpha, 1e-8) << "t=" << t;
    }
  }
}

TEST(Ctc, LongSequencesStayFinite) {
  Rng rng(8);
  const auto post = random_posteriors(600, 10, rng);
  LabelSeq y;
  for (int i = 0; i < 100; ++i) y.push_back(1 + (i % 9));
  const CtcResult r = ctc_loss(post, y);
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_TRUE(r.grad.all_finite());
}

TEST(Ctc, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t frames = 3 + rng.below(6);
    const std::size_t vocab = 2 + rng.below(4);
    const LabelSeq y = random_labels(std::min<std::size_t>(3, frames / 2), vocab, rng);
    const Tensor logits = random_tensor({frames, vocab}, rng, 2.0);
    const CtcResult r = ctc_loss_from_logits(logits, y);
    const double eps = 1e-6;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      Tensor up = logits, down = logits;
      up[i] += eps;
      down[i] -= eps;
      const double fd =
          (ctc_loss_from_logits(up, y).loss - ctc_loss_from_logits(down, y).loss) / (2 * eps);
      const double rel = std::abs(fd - r.grad[i]) / std::max(1e-8, std::abs(fd) + std::abs(r.grad[i]));
      EXPECT_LT(rel, 1e-4) << "trial " << trial << " entry " << i;
    }
  }
}

TEST(Ctc, AnalyticGradientMatchesTapeRoute) {
  Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t frames = 2 + rng.below(8);
    const std::size_t vocab = 2 + rng.below(4);
    const LabelSeq y = random_labels(std::min<std::size_t>(4, frames / 2), vocab, rng);
    const Tensor logits = random_tensor({frames, vocab}, rng, 2.0);
    const CtcResult r = ctc_loss_from_logits(logits, y);

    ad::Graph g;
    const ad::Var z = g.parameter(logits);
    const ad::Var loss = ctc_on_tape(g, z, y);
    g.backward(loss);
    EXPECT_NEAR(g.value(loss).item(), r.loss, 1e-9);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      EXPECT_NEAR(g.grad(z)[i], r.grad[i], 1e-9) << "trial " << trial;
    }
  }
}

TEST(Ctc, GradientRowsSumToZero) {
  Rng rng(13);
  const Tensor logits = random_tensor({12, 5}, rng);
  const CtcResult r = ctc_loss_from_logits(logits, {1, 2, 2, 4});
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    double s = 0;
    for (double v : r.grad.row(t)) s += v;
    EXPECT_NEAR(s, 0.0, 1e-12);
  }
}

TEST(Ctc, AppendingABlankFrameKeepsLikelihood) {
  Rng rng(14);
  const double tiny = 1e-300;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t frames = 2 + rng.below(10);
    const std::size_t vocab = 2 + rng.below(4);
    const auto post = random_posteriors(frames, vocab, rng);
    const LabelSeq y = random_labels(frames / 2, vocab, rng);
    Tensor grown({frames + 1, vocab});
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t v = 0; v < vocab; ++v) grown.at(t, v) = post(t, v);
    }
    grown.at(frames, 0) = 1.0;
    for (std::size_t v = 1; v < vocab; ++v) grown.at(frames, v) = tiny;
    const auto longer = FramePosteriors::from_probs(std::move(grown));
    EXPECT_NEAR(ctc_loss(longer, y).loss, ctc_loss(post, y).loss, 1e-12);
  }
}

TEST(Greedy, CollapseExamples) {
  // Columns: blank, a, b.
  const double h = 0.8, l = 0.1;
  EXPECT_EQ(greedy_decode(probs({{l, h, l}, {l, h, l}, {h, l, l}, {l, h, l}})), (LabelSeq{1, 1}));
  EXPECT_EQ(greedy_decode(probs({{h, l, l}, {h, l, l}})), LabelSeq{});
  EXPECT_EQ(greedy_decode(probs({{l, h, l}, {l, l, h}, {l, l, h}, {h, l, l}, {l, l, h}})),
            (LabelSeq{1, 2, 2}));
}

FramePosteriors peaked_posteriors(std::size_t frames, std::size_t vocab, Rng& rng) {
  Tensor t({frames, vocab});
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t top = rng.below(vocab);
    double rest = 0;
    for (std::size_t v = 0; v < vocab; ++v) {
      if (v == top) continue;
      t.at(f, v) = rng.uniform(0.01, 1.0);
      rest += t.at(f, v);
    }
    const double mass = rng.uniform(0.01, 0.24);
    for (std::size_t v = 0; v < vocab; ++v) {
      if (v != top) t.at(f, v) *= mass / rest;
    }
    t.at(f, top) = 1.0 - mass;
  }
  return FramePosteriors::from_probs(std::move(t));
}

TEST(Beam, WidthOneMatchesGreedyOnPeakedPosteriors) {
  Rng rng(21);
  for (int trial = 0; trial < 500; ++trial) {
    const auto post = peaked_posteriors(1 + rng.below(20), 2 + rng.below(5), rng);
    EXPECT_EQ(beam_decode(post, nullptr, 1, 0.0), greedy_decode(post)) << "trial " << trial;
  }
}

TEST(Beam, WideBeamDominatesGreedy) {
  Rng rng(22);
  for (int trial = 0; trial < 300; ++trial) {
    const auto post = random_posteriors(1 + rng.below(8), 2 + rng.below(3), rng, 1.0);
    const LabelSeq best = beam_decode(post, nullptr, 16, 0.0);
    EXPECT_GE(sequence_score(post, best, nullptr, 0.0) + 1e-12,
              sequence_score(post, greedy_decode(post), nullptr, 0.0))
        << "trial " << trial;
  }
}

TEST(Beam, ExhaustiveBeamFindsTheBruteForceOptimum) {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t frames = 1 + rng.below(4);
    const std::size_t vocab = 2 + rng.below(2);
    const auto post = random_posteriors(frames, vocab, rng, 1.5);
    const LabelSeq best = beam_search(post, nullptr, 1000, 0.0).front().labels;
    // Enumerate every collapsed string of length <= frames.
    double top = -std::numeric_limits<double>::infinity();
    std::vector<LabelSeq> frontier{{}};
    for (std::size_t len = 0; len <= frames; ++len) {
      std::vector<LabelSeq> grown;
      for (const auto& y : frontier) {
        if (frames >= ctc_min_frames(y)) top = std::max(top, -ctc_brute_force(post, y));
        for (std::size_t k = 1; k < vocab; ++k) {
          LabelSeq z = y;
          z.push_back(static_cast<int>(k));
          grown.push_back(z);
        }
      }
      frontier = std::move(grown);
    }
    EXPECT_NEAR(sequence_score(post, best, nullptr, 0.0), top, 1e-9) << "trial " << trial;
  }
}

TEST(Beam, HypothesisScoresAreExactWithoutPruning) {
  Rng rng(24);
  const auto post = random_posteriors(5, 3, rng);
  for (const Hypothesis& h : beam_search(post, nullptr, 10000, 0.0)) {
    EXPECT_NEAR(h.ctc_log_prob, -ctc_brute_force(post, h.labels), 1e-9);
  }
}

TEST(Beam, LanguageModelBreaksAcousticTie) {
  // Columns: blank, a, b. Frames are ambiguous between a and b in either order.
  const auto post = probs({{0.1, 0.45, 0.45}, {0.1, 0.45, 0.45}});
  const NGramLM lm = train_ngram_lm({{1, 2}, {1, 2}, {1, 2}}, 2, 0.1, 3);
  const auto hyps = beam_search(post, &lm, 16, 1.0);
  auto rank_of = [&](const LabelSeq& y) {
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      if (hyps[i].labels == y) return i;
    }
    return hyps.size();
  };
  EXPECT_LT(rank_of({1, 2}), rank_of({2, 1}));
  EXPECT_EQ(hyps.front().labels, (LabelSeq{1, 2}));
  EXPECT_NEAR(sequence_score(post, {1, 2}, nullptr, 0.0),
              sequence_score(post, {2, 1}, nullptr, 0.0), 1e-12);
}

TEST(Beam, FusionScoreIsCtcPlusWeightedLm) {
  Rng rng(25);
  const auto post = random_posteriors(6, 3, rng);
  const NGramLM lm = train_ngram_lm({{1, 2}, {2, 1, 1}, {1}}, 3, 0.1, 3);
  for (const Hypothesis& h : beam_search(post, &lm, 10000, 0.7)) {
    EXPECT_NEAR(h.lm_log_prob, lm.sentence_log_prob(h.labels), 1e-9);
    EXPECT_NEAR(h.score, h.ctc_log_prob + 0.7 * h.lm_log_prob, 1e-9);
    EXPECT_NEAR(h.score, sequence_score(post, h.labels, &lm, 0.7), 1e-9);
  }
}

TEST(Beam, WiderBeamNeverLowersTheReturnedScore) {
  Rng rng(26);
  const NGramLM lm = train_ngram_lm({{1, 2}, {2, 3, 1}, {3}}, 2, 0.1, 4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto post = random_posteriors(2 + rng.below(10), 4, rng, 1.0);
    for (const NGramLM* model : {static_cast<const NGramLM*>(nullptr), &lm}) {
      double prev = -std::numeric_limits<double>::infinity();
      for (std::size_t beam : {1u, 2u, 3u, 5u, 8u, 12u, 16u}) {
        const double s = sequence_score(post, beam_decode(post, model, beam, 0.5), model, 0.5);
        EXPECT_GE(s + 1e-9, prev) << "trial " << trial << " beam " << beam
                                  << (model ? " with LM" : " without LM");
        prev = std::max(prev, s);
      }
    }
  }
}

TEST(Beam, RejectsZeroWidthAndMismatchedLm) {
  Rng rng(27);
  const auto post = random_posteriors(3, 3, rng);
  EXPECT_THROW(beam_search(post, nullptr, 0, 0.0), ValidationError);
  const NGramLM lm(2, 0.1, 5);
  EXPECT_THROW(beam_search(post, &lm, 4, 0.5), ValidationError);
}

}  // namespace
}  // namespace cslab
