#pragma once

#include <cstddef>

#include "cslab/tensor.h"

namespace cslab {

// T x V matrix of per-frame output distributions.
class FramePosteriors {
 public:
  // Validates rows: entries in (0, 1], each row sums to 1 within 1e-9.
  static FramePosteriors from_probs(Tensor probs);
  // Row-wise softmax of unnormalized scores.
  static FramePosteriors from_logits(const Tensor& logits);

  std::size_t frames() const { return probs_.rows(); }
  std::size_t vocab_size() const { return probs_.cols(); }
  double operator()(std::size_t t, std::size_t v) const { return probs_.at(t, v); }
  const Tensor& probs() const { return probs_; }
  // Natural log of probs, computed on demand.
  Tensor log_probs() const;

  friend bool operator==(const FramePosteriors& a, const FramePosteriors& b) {
    return a.probs_ == b.probs_;
  }

 private:
  explicit FramePosteriors(Tensor probs) : probs_(std::move(probs)) {}
  Tensor probs_;
};

}  // namespace cslab
