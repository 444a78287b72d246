#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cslab/vocab.h"

namespace cslab {

// Add-k smoothed n-gram model over vocabulary indices. Events are the
// non-blank symbols plus end-of-sentence; histories are padded with
// begin-of-sentence. Unseen contexts fall back to the uniform distribution
// through the smoothing term alone.
class NGramLM {
 public:
  static constexpr int kBos = -1;
  static constexpr int kEos = Vocab::kBlank;  // blank never occurs as an event

  NGramLM(std::size_t order, double smoothing, std::size_t vocab_size);

  std::size_t order() const { return order_; }
  double smoothing() const { return smoothing_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t event_count() const { return vocab_size_; }  // V-1 symbols + </s>

  void add_sentence(const LabelSeq& sentence);

  // log P(event | last order-1 tokens of history)
  double log_prob(int event, const LabelSeq& history) const;
  double sentence_log_prob(const LabelSeq& sentence) const;

  nlohmann::json to_json() const;
  static NGramLM from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static NGramLM load(const std::filesystem::path& path);

 private:
  std::vector<int> context_of(const LabelSeq& history) const;

  std::size_t order_;
  double smoothing_;
  std::size_t vocab_size_;
  std::map<std::vector<int>, std::map<int, double>> counts_;
  std::map<std::vector<int>, double> totals_;
};

NGramLM train_ngram_lm(const std::vector<LabelSeq>& transcripts, std::size_t order,
                       double smoothing, std::size_t vocab_size);

}  // namespace cslab
