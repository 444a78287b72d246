#include "cslab/ctc.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "cslab/ngram.h"

namespace cslab {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double mx = std::max(a, b);
  return mx + std::log1p(std::exp(-std::abs(a - b)));
}

void check_labels(const LabelSeq& labels, std::size_t vocab) {
  for (int l : labels) {
    if (l <= Vocab::kBlank || static_cast<std::size_t>(l) >= vocab) {
      throw ValidationError("ctc: label " + std::to_string(l) +
                            " is blank or outside a vocabulary of " + std::to_string(vocab));
    }
  }
}

Tensor log_softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  for (std::size_t t = 0; t < out.rows(); ++t) {
    auto row = out.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lz = mx + std::log(z);
    for (auto& v : row) v -= lz;
  }
  return out;
}

// Transition s' -> s with s' = s - 2 is allowed for a label that differs from
// the label two positions back.
bool can_skip(const std::vector<int>& ext, std::size_t s) {
  return s >= 2 && ext[s] != Vocab::kBlank && ext[s] != ext[s - 2];
}

CtcResult loss_and_grad(const Tensor& log_probs, const LabelSeq& labels) {
  const Lattice lat = ctc_lattice(log_probs, labels);
  const std::size_t frames = log_probs.rows();
  const std::size_t vocab = log_probs.cols();
  const std::size_t states = lat.extended.size();
  const double log_p = lat.log_likelihood_alpha;

  CtcResult r;
  r.loss = -log_p;
  r.grad = Tensor({frames, vocab});
  std::vector<double> occupancy(vocab);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(occupancy.begin(), occupancy.end(), kNegInf);
    for (std::size_t s = 0; s < states; ++s) {
      const double v = lat.alpha.at(t, s) + lat.beta.at(t, s);
      auto& o = occupancy[static_cast<std::size_t>(lat.extended[s])];
      o = log_add(o, v);
    }
    for (std::size_t k = 0; k < vocab; ++k) {
      const double posterior = std::exp(log_probs.at(t, k));
      const double gamma = occupancy[k] == kNegInf ? 0.0 : std::exp(occupancy[k] - log_p);
      r.grad.at(t, k) = posterior - gamma;
    }
  }
  return r;
}

}  // namespace

std::size_t ctc_min_frames(const LabelSeq& labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i) {
    if (labels[i] == labels[i - 1]) ++n;
  }
  return n;
}

Lattice ctc_lattice(const Tensor& log_probs, const LabelSeq& labels) {
  const std::size_t frames = log_probs.rows();
  const std::size_t vocab = log_probs.cols();
  if (log_probs.rank() != 2 || frames == 0) {
    throw ValidationError("ctc: expected T x V log posteriors, got " +
                          shape_str(log_probs.shape()));
  }
  check_labels(labels, vocab);
  if (frames < ctc_min_frames(labels)) {
    std::ostringstream os;
    os << "ctc: " << labels.size() << " labels need at least " << ctc_min_frames(labels)
       << " frames, got " << frames;
    throw CtcInfeasibleError(os.str());
  }

  Lattice lat;
  lat.extended.assign(2 * labels.size() + 1, Vocab::kBlank);
  for (std::size_t i = 0; i < labels.size(); ++i) lat.extended[2 * i + 1] = labels[i];
  const auto& ext = lat.extended;
  const std::size_t states = ext.size();
  auto emit = [&](std::size_t t, std::size_t s) {
    return log_probs.at(t, static_cast<std::size_t>(ext[s]));
  };

  lat.alpha = Tensor({frames, states}, kNegInf);
  lat.alpha.at(0, 0) = emit(0, 0);
  if (states > 1) lat.alpha.at(0, 1) = emit(0, 1);
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < states; ++s) {
      double a = lat.alpha.at(t - 1, s);
      if (s >= 1) a = log_add(a, lat.alpha.at(t - 1, s - 1));
      if (can_skip(ext, s)) a = log_add(a, lat.alpha.at(t - 1, s - 2));
      lat.alpha.at(t, s) = a == kNegInf ? kNegInf : a + emit(t, s);
    }
  }

  lat.beta = Tensor({frames, states}, kNegInf);
  lat.beta.at(frames - 1, states - 1) = 0.0;
  if (states > 1) lat.beta.at(frames - 1, states - 2) = 0.0;
  for (std::size_t t = frames - 1; t-- > 0;) {
    for (std::size_t s = 0; s < states; ++s) {
      double b = lat.beta.at(t + 1, s) + emit(t + 1, s);
      if (s + 1 < states) b = log_add(b, lat.beta.at(t + 1, s + 1) + emit(t + 1, s + 1));
      if (s + 2 < states && can_skip(ext, s + 2)) {
        b = log_add(b, lat.beta.at(t + 1, s + 2) + emit(t + 1, s + 2));
      }
      lat.beta.at(t, s) = b;
    }
  }

  double tail = lat.alpha.at(frames - 1, states - 1);
  if (states > 1) tail = log_add(tail, lat.alpha.at(frames - 1, states - 2));
  double head = lat.beta.at(0, 0) + emit(0, 0);
  if (states > 1) head = log_add(head, lat.beta.at(0, 1) + emit(0, 1));
  lat.log_likelihood_alpha = tail;
  lat.log_likelihood_beta = head;
  return lat;
}

CtcResult ctc_loss(const FramePosteriors& post, const LabelSeq& labels) {
  return loss_and_grad(post.log_probs(), labels);
}

CtcResult ctc_loss_from_logits(const Tensor& logits, const LabelSeq& labels) {
  if (logits.rank() != 2) {
    throw ValidationError("ctc: expected T x V logits, got " + shape_str(logits.shape()));
  }
  return loss_and_grad(log_softmax_rows(logits), labels);
}

double ctc_brute_force(const FramePosteriors& post, const LabelSeq& labels) {
  const std::size_t frames = post.frames();
  const std::size_t vocab = post.vocab_size();
  if (frames > kCtcBruteForceMaxFrames) {
    throw ValidationError("ctc_brute_force: T=" + std::to_string(frames) +
                          " exceeds the enumeration guard of " +
                          std::to_string(kCtcBruteForceMaxFrames));
  }
  check_labels(labels, vocab);
  std::vector<std::size_t> path(frames, 0);
  double total = 0.0;
  LabelSeq collapsed;
  while (true) {
    collapsed.clear();
    int prev = -1;
    for (std::size_t t = 0; t < frames; ++t) {
      const int k = static_cast<int>(path[t]);
      if (k != Vocab::kBlank && k != prev) collapsed.push_back(k);
      prev = k;
    }
    if (collapsed == labels) {
      double p = 1.0;
      for (std::size_t t = 0; t < frames; ++t) p *= post(t, path[t]);
      total += p;
    }
    std::size_t t = 0;
    while (t < frames && ++path[t] == vocab) path[t++] = 0;
    if (t == frames) break;
  }
  return total > 0.0 ? -std::log(total) : std::numeric_limits<double>::infinity();
}

LabelSeq greedy_decode(const FramePosteriors& post) {
  LabelSeq out;
  int prev = -1;
  for (std::size_t t = 0; t < post.frames(); ++t) {
    const auto row = post.probs().row(t);
    const int best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best != Vocab::kBlank && best != prev) out.push_back(best);
    prev = best;
  }
  return out;
}

namespace {

struct Prefix {
  double blank = kNegInf;      // log P(prefix, path ends in blank)
  double non_blank = kNegInf;  // log P(prefix, path ends in last label)
  double lm = 0.0;             // unweighted LM log prob of the prefix

  double ctc() const { return log_add(blank, non_blank); }
};

struct Scored {
  LabelSeq labels;
  Prefix state;
  double lm_total = 0.0;
  double score = 0.0;
};

// Best first. std::map iterates lexicographically and the sort is stable, so
// equal scores are broken by prefix order.
std::vector<Scored> rank(std::map<LabelSeq, Prefix>&& table, const NGramLM* lm, double weight,
                         bool final_step) {
  std::vector<Scored> out;
  out.reserve(table.size());
  for (auto& [labels, st] : table) {
    if (std::isinf(st.ctc())) continue;  // no alignment reaches this prefix yet
    Scored s{labels, st, st.lm, 0.0};
    if (final_step && lm) s.lm_total += lm->log_prob(NGramLM::kEos, labels);
    s.score = st.ctc() + weight * s.lm_total;
    out.push_back(std::move(s));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Scored& a, const Scored& b) { return a.score > b.score; });
  return out;
}

}  // namespace

std::vector<Hypothesis> beam_search(const FramePosteriors& post, const NGramLM* lm,
                                    std::size_t beam, double lm_weight) {
  if (beam == 0) throw ValidationError("beam_search: beam must be >= 1");
  const Tensor log_probs = post.log_probs();
  const std::size_t vocab = post.vocab_size();
  if (lm && lm->vocab_size() != vocab) {
    throw ValidationError("beam_search: LM vocabulary size " + std::to_string(lm->vocab_size()) +
                          " does not match posteriors width " + std::to_string(vocab));
  }
  const double weight = lm ? lm_weight : 0.0;

  std::map<LabelSeq, Prefix> current;
  current[LabelSeq{}] = Prefix{0.0, kNegInf, 0.0};
  for (std::size_t t = 0; t < post.frames(); ++t) {
    std::map<LabelSeq, Prefix> next;
    for (const auto& [prefix, st] : current) {
      const double total = st.ctc();
      {
        Prefix& same = next[prefix];
        same.lm = st.lm;
        same.blank = log_add(same.blank, total + log_probs.at(t, Vocab::kBlank));
      }
      const int last = prefix.empty() ? -1 : prefix.back();
      for (std::size_t k = 1; k < vocab; ++k) {
        const int sym = static_cast<int>(k);
        const double p = log_probs.at(t, k);
        LabelSeq extended = prefix;
        extended.push_back(sym);
        auto [it, inserted] = next.try_emplace(std::move(extended));
        if (inserted) it->second.lm = st.lm + (lm ? lm->log_prob(sym, prefix) : 0.0);
        if (sym == last) {
          // A repeated label only starts a new token after a blank.
          it->second.non_blank = log_add(it->second.non_blank, st.blank + p);
          Prefix& same = next[prefix];
          same.non_blank = log_add(same.non_blank, st.non_blank + p);
        } else {
          it->second.non_blank = log_add(it->second.non_blank, total + p);
        }
      }
    }
    auto ranked = rank(std::move(next), lm, weight, false);
    current.clear();
    for (std::size_t i = 0; i < std::min(beam, ranked.size()); ++i) {
      current.emplace(std::move(ranked[i].labels), ranked[i].state);
    }
  }

  std::vector<Hypothesis> out;
  for (auto& s : rank(std::move(current), lm, weight, true)) {
    out.push_back({std::move(s.labels), s.state.ctc(), s.lm_total, s.score});
  }
  return out;
}

LabelSeq beam_decode(const FramePosteriors& post, const NGramLM* lm, std::size_t beam,
                     double lm_weight) {
  if (beam == 0) throw ValidationError("beam_decode: beam must be >= 1");
  LabelSeq best;
  double best_score = kNegInf;
  bool have = false;
  for (std::size_t width = 1; width <= beam; ++width) {
    for (const Hypothesis& h : beam_search(post, lm, width, lm_weight)) {
      const double s = sequence_score(post, h.labels, lm, lm_weight);
      if (!have || s > best_score) {
        best = h.labels;
        best_score = s;
        have = true;
      }
    }
  }
  return best;
}

double sequence_score(const FramePosteriors& post, const LabelSeq& labels, const NGramLM* lm,
                      double lm_weight) {
  if (post.frames() < ctc_min_frames(labels)) return kNegInf;
  const double ctc = -ctc_loss(post, labels).loss;
  return ctc + (lm ? lm_weight * lm->sentence_log_prob(labels) : 0.0);
}

}  // namespace cslab
