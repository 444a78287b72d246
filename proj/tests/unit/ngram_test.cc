#include "cslab/ngram.h"

#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "cslab/errors.h"
#include "cslab/rng.h"

namespace cslab {
namespace {

double row_mass(const NGramLM& lm, const LabelSeq& history) {
  double s = 0;
  for (std::size_t e = 0; e < lm.event_count(); ++e) {
    s += std::exp(lm.log_prob(static_cast<int>(e), history));
  }
  return s;
}

TEST(NGram, RowsAreNormalized) {
  Rng rng(5);
  std::vector<LabelSeq> corpus;
  for (int i = 0; i < 50; ++i) {
    LabelSeq s(1 + rng.below(6));
    for (auto& v : s) v = 1 + static_cast<int>(rng.below(5));
    corpus.push_back(s);
  }
  for (std::size_t order : {1u, 2u, 3u, 4u}) {
    const NGramLM lm = train_ngram_lm(corpus, order, 0.1, 6);
    for (int i = 0; i < 40; ++i) {
      LabelSeq h(rng.below(5));
      for (auto& v : h) v = 1 + static_cast<int>(rng.below(5));
      EXPECT_NEAR(row_mass(lm, h), 1.0, 1e-9) << "order " << order;
    }
  }
}

TEST(NGram, UnigramOnRepeatedSymbolFavoursIt) {
  const NGramLM lm = train_ngram_lm({{1, 1}}, 1, 0.1, 4);
  for (int other : {2, 3, NGramLM::kEos}) {
    EXPECT_GT(lm.log_prob(1, {}), lm.log_prob(other, {}));
  }
}

TEST(NGram, BigramHandCount) {
  // Events: a, b, </s> (k = 0.1). Bigram counts from {ab, ab}:
  // <s>->a 2, a->b 2, b-></s> 2.
  const NGramLM lm = train_ngram_lm({{1, 2}, {1, 2}}, 2, 0.1, 3);
  const double denom = 2 + 3 * 0.1;
  EXPECT_NEAR(std::exp(lm.log_prob(2, {1})), 2.1 / denom, 1e-12);
  EXPECT_NEAR(std::exp(lm.log_prob(1, {1})), 0.1 / denom, 1e-12);
  EXPECT_GT(lm.log_prob(2, {1}), lm.log_prob(1, {1}));
  EXPECT_NEAR(lm.sentence_log_prob({1, 2}), 3 * std::log(2.1 / denom), 1e-12);
}

TEST(NGram, UnseenContextIsUniform) {
  const NGramLM lm = train_ngram_lm({{1, 2}}, 3, 0.5, 4);
  for (int e = 0; e < 4; ++e) EXPECT_NEAR(std::exp(lm.log_prob(e, {3, 3})), 0.25, 1e-12);
}

TEST(NGram, JsonRoundTripIsExact) {
  const NGramLM lm = train_ngram_lm({{1, 2, 3}, {3, 2}, {1}}, 3, 0.2, 4);
  const NGramLM back = NGramLM::from_json(lm.to_json());
  EXPECT_EQ(back.to_json().dump(), lm.to_json().dump());
  for (int e = 0; e < 4; ++e) {
    EXPECT_EQ(back.log_prob(e, {1, 2}), lm.log_prob(e, {1, 2}));
  }
  const auto path = std::filesystem::temp_directory_path() / "cslab_ngram_test.json";
  lm.save(path);
  EXPECT_EQ(NGramLM::load(path).to_json(), lm.to_json());
  std::filesystem::remove(path);
}

TEST(NGram, RejectsBadInputs) {
  EXPECT_THROW(train_ngram_lm({}, 2, 0.1, 3), ValidationError);
  EXPECT_THROW(NGramLM(0, 0.1, 3), ValidationError);
  EXPECT_THROW(NGramLM(2, 0.0, 3), ValidationError);
  EXPECT_THROW(train_ngram_lm({{5}}, 2, 0.1, 3), ValidationError);
  EXPECT_THROW(NGramLM::from_json(nlohmann::json{{"order", 2}}), ValidationError);
}

}  // namespace
}  // namespace cslab
