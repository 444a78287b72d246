#include "cslab/suite.h"

#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "cslab/errors.h"
#include "unit/test_util.h"

namespace cslab {
namespace {

namespace fs = std::filesystem;

class SuiteTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("cslab_suite_test_" +
            std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_ / "data");
    GenSpec g;
    g.feat_dim = 3;
    g.vocab_a = g.vocab_b = 3;
    g.shared = 1;
    save("mono-train", generate(g, 10, GenMode::kMonoA));
    save("cs-train", generate(g, 10, GenMode::kCodeSwitched));
    // Test sets reuse the generator stream and drop the ids already in training.
    Manifest mono_test = generate(g, 16, GenMode::kMonoA);
    Manifest cs_test = generate(g, 16, GenMode::kCodeSwitched);
    mono_test.utterances.erase(mono_test.utterances.begin(), mono_test.utterances.begin() + 10);
    cs_test.utterances.erase(cs_test.utterances.begin(), cs_test.utterances.begin() + 10);
    save("mono-test", mono_test);
    save("cs-test", cs_test);

    spec_.out_dir = dir_ / "runs";
    spec_.model = testing::tiny_config(Vocab{});
    spec_.model.heads.clear();
    spec_.tests = {{"mono-test", "mono-test", TestKind::kMono},
                   {"cs-test", "cs-test", TestKind::kCodeSwitched}};
    train_.lr = 0.5;
    train_.epochs = 2;
    train_.batch_size = 5;
    train_.clip_norm = 5;
  }
  void TearDown() override { fs::remove_all(dir_); }

  void save(const std::string& name, const Manifest& m) {
    const fs::path p = dir_ / "data" / (name + ".jsonl");
    save_manifest(m, p);
    spec_.corpora[name] = p;
  }
  RegimeSpec regime(const std::string& id, RegimeKind kind,
                    std::optional<std::string> base = std::nullopt) const {
    RegimeSpec r;
    r.id = id;
    r.kind = kind;
    r.base = std::move(base);
    r.train = train_;
    if (kind == RegimeKind::kLwf) r.train.warmup_epochs = 1;
    return r;
  }

  fs::path dir_;
  SuiteSpec spec_;
  TrainConfig train_;
};

TEST_F(SuiteTest, TwoRegimesByTwoTestsGiveFourCells) {
  spec_.regimes = {regime("Exp1", RegimeKind::kExp1), regime("Exp2", RegimeKind::kExp2)};
  const SuiteReport r = run_experiment_suite(spec_);
  for (const auto& o : r.regimes) EXPECT_FALSE(o.error.has_value()) << *o.error;
  ASSERT_EQ(r.cells.size(), 4u);
  const WerMatrix m = r.matrix();
  for (const char* reg : {"Exp1", "Exp2"}) {
    for (const char* t : {"mono-test", "cs-test"}) {
      ASSERT_TRUE(m.at(reg).at(t).wer.has_value()) << reg << " " << t;
      EXPECT_FALSE(m.at(reg).at(t).failed);
    }
  }
  for (const auto& o : r.regimes) {
    EXPECT_EQ(o.status, "trained");
    EXPECT_TRUE(fs::exists(o.checkpoint));
    EXPECT_TRUE(fs::exists(o.history));
  }
  const auto j = r.to_json();
  EXPECT_EQ(j.at("regimes").size(), 2u);
  EXPECT_TRUE(j.at("regimes")[0].contains("history"));
  EXPECT_EQ(r.cmi.at("mono-test").pooled, 0.0);
  EXPECT_GT(r.cmi.at("cs-train").pooled, 0.0);
}

TEST_F(SuiteTest, RerunReusesEverythingAndReportsIdentically) {
  spec_.regimes = {regime("Exp1", RegimeKind::kExp1), regime("Exp4", RegimeKind::kExp4, "Exp1"),
                   regime("LWF", RegimeKind::kLwf, "Exp1")};
  const SuiteReport first = run_experiment_suite(spec_);
  const SuiteReport second = run_experiment_suite(spec_);
  for (const auto& o : second.regimes) EXPECT_EQ(o.status, "reused") << o.id;
  for (const auto& c : second.cells) EXPECT_EQ(c.status, "reused") << c.regime << c.test;
  for (std::size_t i = 0; i < first.regimes.size(); ++i) {
    EXPECT_EQ(first.regimes[i].checksum, second.regimes[i].checksum);
  }
  auto strip = [](nlohmann::json j) {
    for (auto& r : j.at("regimes")) {
      r.erase("status");
      r.erase("wall_seconds");
    }
    for (auto& c : j.at("cells")) c.erase("status");
    return j;
  };
  EXPECT_EQ(strip(first.to_json()), strip(second.to_json()));
  EXPECT_EQ(first.cells[4].head, "main");
  EXPECT_EQ(first.cells[5].head, "cs");
}

TEST_F(SuiteTest, ChangedHyperparametersRetrainOnlyDependents) {
  spec_.regimes = {regime("Exp1", RegimeKind::kExp1), regime("Exp4", RegimeKind::kExp4, "Exp1")};
  run_experiment_suite(spec_);
  spec_.regimes[1].train.epochs = 1;
  const SuiteReport r = run_experiment_suite(spec_);
  EXPECT_EQ(r.regimes[0].status, "reused");
  EXPECT_EQ(r.regimes[1].status, "trained");
}

TEST_F(SuiteTest, ParallelSchedulingMatchesSerial) {
  spec_.regimes = {regime("Exp1", RegimeKind::kExp1), regime("Exp2", RegimeKind::kExp2),
                   regime("Exp4", RegimeKind::kExp4, "Exp1")};
  const SuiteReport serial = run_experiment_suite(spec_);
  fs::remove_all(spec_.out_dir);
  spec_.jobs = 3;
  const SuiteReport parallel = run_experiment_suite(spec_);
  for (std::size_t i = 0; i < serial.regimes.size(); ++i) {
    EXPECT_EQ(serial.regimes[i].checksum, parallel.regimes[i].checksum);
  }
  for (std::size_t i = 0; i < serial.cells.size(); ++i) {
    EXPECT_EQ(serial.cells[i].wer, parallel.cells[i].wer);
  }
}

TEST_F(SuiteTest, FailedBaseCascadesWithoutAbortingTheSuite) {
  // One utterance too short for its transcript makes Exp1 fail.
  Manifest bad = load_manifest(spec_.corpora.at("mono-train"));
  bad.utterances[0].feats = Tensor({1, 3});
  save("mono-train", bad);
  spec_.regimes = {regime("Exp1", RegimeKind::kExp1), regime("Exp4", RegimeKind::kExp4, "Exp1"),
                   regime("Exp2", RegimeKind::kExp2)};
  const SuiteReport r = run_experiment_suite(spec_);
  EXPECT_EQ(r.regimes[0].status, "failed");
  EXPECT_EQ(r.regimes[1].status, "failed");
  EXPECT_NE(r.regimes[1].error->find("Exp1"), std::string::npos);
  EXPECT_EQ(r.regimes[2].status, "trained");
  const WerMatrix m = r.matrix();
  EXPECT_TRUE(m.at("Exp4").at("cs-test").failed);
  EXPECT_FALSE(m.at("Exp2").at("cs-test").failed);
}

TEST_F(SuiteTest, SpecValidation) {
  RegimeSpec r = regime("Exp4", RegimeKind::kExp4);
  EXPECT_THROW(r.validate(), ValidationError);
  r = regime("Exp1", RegimeKind::kExp1, "x");
  EXPECT_THROW(r.validate(), ValidationError);
  r = regime("KLD", RegimeKind::kKldFt, "Exp1");
  EXPECT_THROW(r.validate(), ValidationError);
  r.train.loss = LossKind::kScaled;
  r.train.distill = DistillConfig{};
  EXPECT_NO_THROW(r.validate());
  r = regime("LWF", RegimeKind::kLwf, "Exp1");
  r.train.subsample_d = 50;
  EXPECT_THROW(r.validate(), ValidationError);

  spec_.regimes = {regime("A", RegimeKind::kExp4, "B"), regime("B", RegimeKind::kExp5, "A")};
  EXPECT_THROW(spec_.validate(), ValidationError);
  spec_.regimes = {regime("Exp1", RegimeKind::kExp1), regime("Exp1", RegimeKind::kExp2)};
  EXPECT_THROW(spec_.validate(), ValidationError);
  spec_.regimes = {regime("Exp1", RegimeKind::kExp1)};
  spec_.regimes[0].train_corpora = {"nowhere"};
  EXPECT_THROW(spec_.validate(), ValidationError);
  spec_.regimes = {regime("Exp1", RegimeKind::kExp1)};
  EXPECT_NO_THROW(spec_.validate());
  const RegimeSpec back = RegimeSpec::from_json(spec_.regimes[0].to_json());
  EXPECT_EQ(back.to_json(), spec_.regimes[0].to_json());
  EXPECT_EQ(back.train_corpora, (std::vector<std::string>{"mono-train"}));
  EXPECT_THROW(parse_regime_kind("Exp9"), ValidationError);
}

TEST_F(SuiteTest, MissingBaseCheckpointFailsThatRegime) {
  spec_.regimes = {regime("Exp4", RegimeKind::kExp4, (dir_ / "absent.ckpt").string())};
  const SuiteReport r = run_experiment_suite(spec_);
  EXPECT_EQ(r.regimes[0].status, "failed");
}

TEST(VocabFromManifests, GroupsSharedThenAThenB) {
  Manifest m;
  Utterance u;
  u.id = "x";
  u.feats = Tensor({1, 1});
  u.transcript = {"b10", "a2", "s0", "b2", "a10"};
  u.lang_tags = {LangTag::kB, LangTag::kA, LangTag::kShared, LangTag::kB, LangTag::kA};
  m.utterances = {u};
  const Manifest* ms[] = {&m};
  const Vocab v = vocab_from_manifests(ms);
  ASSERT_EQ(v.size(), 6u);
  EXPECT_EQ(v.decode({1, 2, 3, 4, 5}), (std::vector<std::string>{"s0", "a2", "a10", "b2", "b10"}));
  Manifest clash = m;
  clash.utterances[0].lang_tags[0] = LangTag::kA;
  const Manifest* both[] = {&m, &clash};
  EXPECT_THROW(vocab_from_manifests(both), ValidationError);
}

TEST(EvalHead, LwfAnswersCodeSwitchedTestsWithItsCsHead) {
  EXPECT_EQ(eval_head(RegimeKind::kLwf, TestKind::kCodeSwitched), "cs");
  EXPECT_EQ(eval_head(RegimeKind::kLwf, TestKind::kMono), "main");
  EXPECT_EQ(eval_head(RegimeKind::kExp4, TestKind::kCodeSwitched), "main");
}

TEST(TrendVerdicts, DirectionalChecks) {
  auto spec = [](std::string id, RegimeKind k, std::optional<double> d = std::nullopt) {
    RegimeSpec r;
    r.id = std::move(id);
    r.kind = k;
    r.train.subsample_d = d;
    return r;
  };
  const std::vector<RegimeSpec> specs = {
      spec("Exp1", RegimeKind::kExp1), spec("Exp4", RegimeKind::kExp4),
      spec("LWF", RegimeKind::kLwf), spec("Exp5", RegimeKind::kExp5),
      spec("Exp5-D25", RegimeKind::kExp5, 25.0)};
  const std::vector<TestSetSpec> tests = {{"m", "m", TestKind::kMono},
                                          {"c", "c", TestKind::kCodeSwitched}};
  WerMatrix w;
  auto set = [&](const char* r, double mono, double cs) {
    w[r]["m"] = WerCell{mono, false};
    w[r]["c"] = WerCell{cs, false};
  };
  set("Exp1", 1.0, 30.0);
  set("Exp4", 5.0, 12.0);
  set("LWF", 1.5, 14.0);
  set("Exp5", 9.0, 13.0);
  set("Exp5-D25", 4.0, 12.0);
  auto v = trend_verdicts(specs, tests, w);
  ASSERT_EQ(v.size(), 3u);
  for (const auto& x : v) EXPECT_EQ(x.pass, std::optional<bool>(true)) << x.name << x.detail;

  set("Exp4", 2.9, 12.0);  // forgetting below the 2-point margin
  set("LWF", 3.0, 14.0);   // worse than Exp4 on mono
  set("Exp5-D25", 9.0, 12.0);
  v = trend_verdicts(specs, tests, w);
  for (const auto& x : v) EXPECT_EQ(x.pass, std::optional<bool>(false)) << x.name;

  w["Exp4"]["m"].failed = true;
  v = trend_verdicts(specs, tests, w);
  EXPECT_FALSE(v[0].pass.has_value());
}

}  // namespace
}  // namespace cslab
