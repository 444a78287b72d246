#include "cslab/regimes.h"

#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "cslab/errors.h"
#include "cslab/hash.h"
#include "unit/test_util.h"

namespace cslab {
namespace {

class RegimeTest : public ::testing::Test {
 protected:
  void SetUp() override {
    spec_.feat_dim = 3;
    spec_.vocab_a = spec_.vocab_b = 3;
    spec_.shared = 1;
    spec_.confusable = 1;
    vocab_ = union_vocab(spec_);
    mono_ = generate(spec_, 8, GenMode::kMonoA);
    cs_ = generate(spec_, 8, GenMode::kCodeSwitched);
    cfg_.lr = 0.5;
    cfg_.epochs = 2;
    cfg_.batch_size = 4;
    cfg_.clip_norm = 5;
  }
  Model fresh(std::uint64_t seed = 1) const {
    return build_model(testing::tiny_config(vocab_), vocab_, seed);
  }

  GenSpec spec_;
  Vocab vocab_;
  Manifest mono_, cs_;
  TrainConfig cfg_;
};

TEST(TrainConfigTest, DefaultsValidationAndJson) {
  TrainConfig c;
  EXPECT_EQ(c.lr, 3e-4);
  EXPECT_EQ(c.epochs, 40u);
  EXPECT_EQ(c.batch_size, 64u);
  EXPECT_NO_THROW(c.validate());
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_THROW(TrainConfig::from_json({{"learning_rate", 0.1}}), ValidationError);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = TrainConfig{};
  c.loss = LossKind::kScaled;
  EXPECT_THROW(c.validate(), ValidationError);
  c.distill = DistillConfig{DistillMode::kBlended, 0.3, 100};
  EXPECT_THROW(c.validate(), ValidationError);
  c.distill->mode = DistillMode::kScaled;
  EXPECT_NO_THROW(c.validate());
  c = TrainConfig{};
  c.subsample_d = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c.subsample_d = 100.5;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(SubsetTest, SizeLawAndPerEpochVariation) {
  const auto e1 = sample_subset(100, 25.0, 1, 7);
  const auto e2 = sample_subset(100, 25.0, 2, 7);
  EXPECT_EQ(e1.size(), 25u);
  EXPECT_EQ(e2.size(), 25u);
  EXPECT_NE(std::set<std::size_t>(e1.begin(), e1.end()), std::set<std::size_t>(e2.begin(), e2.end()));
  EXPECT_EQ(sample_subset(100, 25.0, 1, 7), e1);
  const auto whole = sample_subset(100, 100.0, 3, 7);
  EXPECT_EQ(std::set<std::size_t>(whole.begin(), whole.end()).size(), 100u);
  std::vector<std::size_t> identity(100);
  for (std::size_t i = 0; i < 100; ++i) identity[i] = i;
  EXPECT_NE(whole, identity);
  EXPECT_EQ(sample_subset(100, std::nullopt, 3, 7), whole);
  for (std::size_t n : {1u, 7u, 33u, 250u}) {
    for (double d : {1.0, 10.0, 25.0, 33.3, 50.0, 99.0, 100.0}) {
      const std::size_t expect = static_cast<std::size_t>(std::floor(n * d / 100.0));
      if (expect == 0) {
        EXPECT_THROW(sample_subset(n, d, 1, 1), ValidationError);
      } else {
        EXPECT_EQ(sample_subset(n, d, 1, 1).size(), expect) << n << " " << d;
      }
    }
  }
}

TEST_F(RegimeTest, ZeroLearningRateLeavesParametersUnchanged) {
  cfg_.lr = 0.0;
  const Model m = fresh();
  const TrainResult r = train(m, mono_, cfg_);
  EXPECT_EQ(r.model.checksum(), m.checksum());
}

TEST_F(RegimeTest, LossDecreasesOnToyCorpus) {
  const TrainResult r = train(fresh(), mono_, cfg_);
  ASSERT_EQ(r.history.epochs.size(), 2u);
  EXPECT_LT(r.history.epochs[1].mean_loss, r.history.epochs[0].mean_loss);
  EXPECT_EQ(r.history.batches.size(), 4u);
  EXPECT_EQ(r.history.epochs[0].utterances, 8u);
}

TEST_F(RegimeTest, SameSeedGivesIdenticalHistory) {
  const TrainResult a = train(fresh(), mono_, cfg_);
  const TrainResult b = train(fresh(), mono_, cfg_);
  EXPECT_EQ(a.model.checksum(), b.model.checksum());
  EXPECT_EQ(a.history.to_json(), b.history.to_json());
  cfg_.seed = 2;
  const TrainResult c = train(fresh(), mono_, cfg_);
  EXPECT_NE(a.history.epochs[0].subset_hash, c.history.epochs[0].subset_hash);
}

TEST_F(RegimeTest, FrozenCollectionsStayBitwiseConstant) {
  Model m = fresh();
  m.add_head("cs", vocab_, 3);
  const std::vector<std::string> frozen{"shared", "main"};
  m.set_trainable(frozen, false);
  TrainConfig cfg = cfg_;
  cfg.epochs = 3;
  TrainContext ctx;
  ctx.head_id = "cs";
  const TrainResult r = train(m, cs_, cfg, ctx);
  EXPECT_EQ(r.model.checksum("shared"), m.checksum("shared"));
  EXPECT_EQ(r.model.checksum("main"), m.checksum("main"));
  EXPECT_NE(r.model.checksum("cs"), m.checksum("cs"));
}

TEST_F(RegimeTest, OneStepWithEverythingTrainableMovesEveryCollection) {
  const TrainResult r = lwf_train(fresh(), cs_, [&] {
    TrainConfig c = cfg_;
    c.epochs = 1;
    c.warmup_epochs = 0;
    c.batch_size = 8;
    return c;
  }());
  for (const auto& id : r.model.collection_ids()) {
    EXPECT_NE(r.history.epochs[0].checksums.at(id), r.history.initial_checksums.at(id)) << id;
  }
}

TEST_F(RegimeTest, FineTuneLearningRate) {
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 8;
  const TrainResult r = fine_tune(fresh(), cs_, c);
  EXPECT_NEAR(r.history.epochs[0].lr, 2.7e-4, 1e-18);
  c.fine_tune_lr = 0.01;
  EXPECT_EQ(fine_tune(fresh(), cs_, c).history.epochs[0].lr, 0.01);
}

TEST_F(RegimeTest, ZeroEpochFineTuneReturnsTheBase) {
  cfg_.epochs = 0;
  const Model base = fresh(4);
  const TrainResult r = fine_tune(base, cs_, cfg_);
  EXPECT_EQ(r.model.checksum(), base.checksum());
  EXPECT_TRUE(r.history.epochs.empty());
}

TEST_F(RegimeTest, SubsampledFineTuneVisitsTheRightCount) {
  Manifest big = generate(spec_, 20, GenMode::kCodeSwitched);
  cfg_.subsample_d = 25.0;
  cfg_.epochs = 3;
  const TrainResult r = fine_tune(fresh(), big, cfg_);
  std::set<std::uint64_t> subsets;
  for (const auto& e : r.history.epochs) {
    EXPECT_EQ(e.utterances, 5u);
    subsets.insert(e.subset_hash);
  }
  EXPECT_EQ(subsets.size(), 3u);
}

TEST_F(RegimeTest, DistillWithoutBaseIsRejected) {
  cfg_.loss = LossKind::kScaled;
  cfg_.distill = DistillConfig{};
  EXPECT_THROW(train(fresh(), cs_, cfg_), ValidationError);
}

TEST_F(RegimeTest, InfeasibleTranscriptIsNamed) {
  Manifest bad = mono_;
  bad.utterances[1].feats = Tensor({1, 3});
  try {
    train(fresh(), bad, cfg_);
    FAIL() << "expected an infeasible-utterance error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find(bad.utterances[1].id), std::string::npos) << e.what();
  }
}

TEST_F(RegimeTest, DevWerAndEarlyStopping) {
  cfg_.epochs = 6;
  cfg_.patience = 1;
  cfg_.lr = 0.0;
  TrainContext ctx;
  ctx.dev = &cs_;
  const TrainResult r = train(fresh(), mono_, cfg_, ctx);
  ASSERT_TRUE(r.history.stopped_early_at.has_value());
  EXPECT_EQ(*r.history.stopped_early_at, 2u);
  for (const auto& e : r.history.epochs) EXPECT_TRUE(e.dev_wer.has_value());
}

TEST_F(RegimeTest, OnBatchCallbackSeesEveryStep) {
  std::size_t calls = 0;
  TrainContext ctx;
  ctx.on_batch = [&](const BatchRecord& b, const Model&) {
    ++calls;
    EXPECT_NEAR(b.loss, b.parts.at("ctc"), 1e-12);
  };
  train(fresh(), mono_, cfg_, ctx);
  EXPECT_EQ(calls, 4u);
}

class LwfTest : public RegimeTest {
 protected:
  void SetUp() override {
    RegimeTest::SetUp();
    pretrained_.emplace(train(fresh(), mono_, cfg_).model);
    lcfg_ = cfg_;
    lcfg_.epochs = 4;
    lcfg_.warmup_epochs = 2;
  }
  std::optional<Model> pretrained_;
  TrainConfig lcfg_;
};

TEST_F(LwfTest, WarmupFreezesSharedAndMainThenJointMovesAll) {
  const TrainResult r = lwf_train(*pretrained_, cs_, lcfg_);
  const auto& h = r.history;
  ASSERT_EQ(h.epochs.size(), 4u);
  EXPECT_EQ(h.warmup_end_epoch, 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(h.epochs[e].phase, "warmup");
    EXPECT_EQ(h.epochs[e].checksums.at("shared"), pretrained_->checksum("shared"));
    EXPECT_EQ(h.epochs[e].checksums.at("main"), pretrained_->checksum("main"));
  }
  EXPECT_NE(h.epochs[0].checksums.at("cs"), h.initial_checksums.at("cs"));
  for (std::size_t e = 2; e < 4; ++e) {
    EXPECT_EQ(h.epochs[e].phase, "joint");
    for (const char* id : {"shared", "main", "cs"}) {
      EXPECT_NE(h.epochs[e].checksums.at(id), h.epochs[e - 1].checksums.at(id)) << id;
    }
  }
  for (const auto& id : r.model.collection_ids()) EXPECT_TRUE(r.model.collection(id).trainable);
}

TEST_F(LwfTest, PseudoLabelsComeFromThePretrainedModelOnce) {
  const TrainResult r = lwf_train(*pretrained_, cs_, lcfg_);
  std::vector<LabelSeq> expect;
  for (const auto& u : cs_.utterances) {
    expect.push_back(decode(*pretrained_, "main", u.feats, DecodeConfig{}));
  }
  ASSERT_TRUE(r.history.pseudo_label_hash.has_value());
  EXPECT_EQ(*r.history.pseudo_label_hash, hash_labels(expect));
  for (const auto& e : r.history.epochs) EXPECT_EQ(e.pseudo_label_hash, r.history.pseudo_label_hash);
}

TEST_F(LwfTest, JointLossDecomposes) {
  const TrainResult r = lwf_train(*pretrained_, cs_, lcfg_);
  for (const auto& b : r.history.batches) {
    EXPECT_NEAR(b.loss, b.parts.at("ctc_main") + b.parts.at("ctc_cs"), 1e-9);
  }
  EXPECT_EQ(r.history.batches.size(), 8u);
}

TEST_F(LwfTest, DeterministicAndValidated) {
  const TrainResult a = lwf_train(*pretrained_, cs_, lcfg_);
  const TrainResult b = lwf_train(*pretrained_, cs_, lcfg_);
  EXPECT_EQ(a.model.checksum(), b.model.checksum());
  EXPECT_EQ(a.history.to_json(), b.history.to_json());
  TrainConfig too_long = lcfg_;
  too_long.warmup_epochs = 5;
  EXPECT_THROW(lwf_train(*pretrained_, cs_, too_long), ValidationError);
  Model two_heads = *pretrained_;
  two_heads.add_head("cs", vocab_, 9);
  EXPECT_THROW(lwf_train(two_heads, cs_, lcfg_), ValidationError);
}

TEST(HashLabels, OrderAndContentSensitive) {
  const LabelSeq a{1, 2}, b{2, 1};
  const LabelSeq ab[] = {a, b};
  const LabelSeq ba[] = {b, a};
  EXPECT_NE(hash_labels(ab), hash_labels(ba));
  const LabelSeq split1[] = {LabelSeq{1}, LabelSeq{2, 3}};
  const LabelSeq split2[] = {LabelSeq{1, 2}, LabelSeq{3}};
  EXPECT_NE(hash_labels(split1), hash_labels(split2));
}

TEST(Learnability, CleanToyCorpusIsTranscribedPerfectly) {
  GenSpec spec;
  spec.feat_dim = 4;
  spec.vocab_a = 3;
  spec.vocab_b = 0;
  spec.shared = 0;
  spec.sigma = 0.05;
  spec.confusion_distance = 1.0;
  const Vocab vocab = union_vocab(spec);
  const Manifest data = generate(spec, 10, GenMode::kMonoA);
  ModelConfig mc = testing::tiny_config(vocab, 4);
  mc.hidden_dim = 8;
  mc.conv = {ConvSpec{3, 8, 1}};
  TrainConfig cfg;
  cfg.lr = 0.5;
  cfg.epochs = 150;
  cfg.batch_size = 5;
  cfg.clip_norm = 5;
  const TrainResult r = train(build_model(mc, vocab, 1), data, cfg);
  const EvalReport rep = evaluate(r.model, "main", data, DecodeConfig{});
  EXPECT_EQ(rep.wer(), 0.0);
}

}  // namespace
}  // namespace cslab
