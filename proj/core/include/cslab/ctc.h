#pragma once

#include <cstddef>
#include <vector>

#include "cslab/errors.h"
#include "cslab/posteriors.h"
#include "cslab/tensor.h"
#include "cslab/vocab.h"

namespace cslab {

class NGramLM;

// The label sequence cannot be aligned to the available frames.
class CtcInfeasibleError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Minimum frame count for a CTC alignment of `labels`: one frame per label
// plus one separating blank per adjacent repeat.
std::size_t ctc_min_frames(const LabelSeq& labels);

// Forward-backward tables over the blank-interleaved label sequence.
// alpha(t, s) includes the emission at t; beta(t, s) covers frames t+1..T-1
// only, so alpha(t, s) + beta(t, s) summed over s gives log P(y|X) at every t.
struct Lattice {
  std::vector<int> extended;  // 2L+1 symbols: blank, y1, blank, ..., yL, blank
  Tensor alpha;               // T x (2L+1), log domain
  Tensor beta;                // T x (2L+1), log domain
  double log_likelihood_alpha = 0.0;
  double log_likelihood_beta = 0.0;
};

// log_probs is T x V of normalized log posteriors. Throws CtcInfeasibleError.
Lattice ctc_lattice(const Tensor& log_probs, const LabelSeq& labels);

struct CtcResult {
  double loss = 0.0;  // -log P(y|X)
  Tensor grad;        // d loss / d logits, T x V
};

CtcResult ctc_loss(const FramePosteriors& post, const LabelSeq& labels);
// Same quantity from unnormalized scores; the gradient is with respect to them.
CtcResult ctc_loss_from_logits(const Tensor& logits, const LabelSeq& labels);

// Sums every frame-level path whose collapse equals `labels`. Exponential in T;
// refuses T > kCtcBruteForceMaxFrames. Returns +inf when no path exists.
inline constexpr std::size_t kCtcBruteForceMaxFrames = 8;
double ctc_brute_force(const FramePosteriors& post, const LabelSeq& labels);

// Per-frame argmax, merge repeats, drop blanks.
LabelSeq greedy_decode(const FramePosteriors& post);

struct Hypothesis {
  LabelSeq labels;
  double ctc_log_prob = 0.0;  // prefix probability accumulated by the search
  double lm_log_prob = 0.0;   // unweighted LM log probability incl. end of sentence
  double score = 0.0;         // ctc_log_prob + lm_weight * lm_log_prob
};

// Prefix beam search over collapsed label strings with optional shallow
// fusion: each symbol extension adds lm_weight * log P_lm(symbol | prefix).
// Returns the surviving hypotheses, best first. beam must be >= 1.
std::vector<Hypothesis> beam_search(const FramePosteriors& post, const NGramLM* lm,
                                    std::size_t beam, double lm_weight);
// Best sequence by exact sequence_score over the final hypotheses of every
// search width 1..beam. Pruning makes a single search non-monotone in its
// width; taking the union makes the returned score non-decreasing in beam.
LabelSeq beam_decode(const FramePosteriors& post, const NGramLM* lm, std::size_t beam,
                     double lm_weight);

// Exact combined score of a fixed label sequence: log P_ctc(y|X) summed over
// all alignments plus lm_weight * log P_lm(y). -inf when infeasible.
double sequence_score(const FramePosteriors& post, const LabelSeq& labels, const NGramLM* lm,
                      double lm_weight);

}  // namespace cslab
