#pragma once

#include <cmath>
#include <vector>

#include "cslab/net.h"
#include "cslab/posteriors.h"
#include "cslab/rng.h"
#include "cslab/tensor.h"
#include "cslab/vocab.h"

namespace cslab::testing {

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-scale, scale);
  return t;
}

// Rows drawn from a softmax of random logits: strictly positive, sums to 1.
inline FramePosteriors random_posteriors(std::size_t frames, std::size_t vocab, Rng& rng,
                                         double spread = 2.0) {
  return FramePosteriors::from_logits(random_tensor({frames, vocab}, rng, spread));
}

// Vocab with n_a language-A and n_b language-B symbols after the blank.
inline Vocab small_vocab(std::size_t n_a, std::size_t n_b = 0) {
  std::vector<std::pair<std::string, LangTag>> v;
  for (std::size_t i = 0; i < n_a; ++i) v.emplace_back("a" + std::to_string(i), LangTag::kA);
  for (std::size_t i = 0; i < n_b; ++i) v.emplace_back("b" + std::to_string(i), LangTag::kB);
  return Vocab(std::move(v));
}

inline ModelConfig tiny_config(const Vocab& vocab, std::size_t input_dim = 3) {
  ModelConfig cfg;
  cfg.input_dim = input_dim;
  cfg.conv = {ConvSpec{3, 4, 1}};
  cfg.recurrent_layers = 1;
  cfg.hidden_dim = 3;
  cfg.heads = {{"main", vocab}};
  return cfg;
}

}  // namespace cslab::testing
