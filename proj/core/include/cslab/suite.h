#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cslab/corpus.h"
#include "cslab/metrics.h"
#include "cslab/net.h"
#include "cslab/regimes.h"

namespace cslab {

enum class RegimeKind { kExp1, kExp2, kExp3, kExp4, kExp5, kLwf, kKldFt };

std::string_view regime_kind_name(RegimeKind k);
RegimeKind parse_regime_kind(std::string_view s);
bool needs_base(RegimeKind k);

struct RegimeSpec {
  std::string id;
  RegimeKind kind = RegimeKind::kExp1;
  // Corpus names; defaults by kind (mono-train, cs-train, or both).
  std::vector<std::string> train_corpora;
  std::optional<std::string> dev_corpus;
  // Id of another regime in the suite, or a checkpoint path.
  std::optional<std::string> base;
  TrainConfig train;
  std::uint64_t init_seed = 0;  // 0: derived from train.seed and id

  void validate() const;
  nlohmann::json to_json() const;
  static RegimeSpec from_json(const nlohmann::json& j);
};

enum class TestKind { kMono, kCodeSwitched };

struct TestSetSpec {
  std::string name;
  std::string corpus;  // corpus name
  TestKind kind = TestKind::kMono;
};

struct SuiteSpec {
  std::filesystem::path out_dir;
  std::map<std::string, std::filesystem::path> corpora;
  ModelConfig model;  // heads are filled in from the corpora vocabulary
  std::vector<RegimeSpec> regimes;
  std::vector<TestSetSpec> tests;
  DecodeConfig decode;
  std::size_t jobs = 1;

  void validate() const;
};

// Every (symbol, tag) pair seen in the manifests: shared symbols, then A, then
// B, each group ordered by (length, name).
Vocab vocab_from_manifests(std::span<const Manifest* const> manifests);

struct RegimeOutcome {
  std::string id;
  std::string status;  // trained | reused | failed
  std::optional<std::string> error;
  std::filesystem::path checkpoint;
  std::filesystem::path history;
  std::uint64_t checksum = 0;
  double wall_seconds = 0.0;
};

struct EvalOutcome {
  std::string regime;
  std::string test;
  std::string head;
  std::string status;  // evaluated | reused | failed
  std::optional<std::string> error;
  std::optional<double> wer;
  std::filesystem::path report;
};

struct TrendVerdict {
  std::string name;
  std::optional<bool> pass;  // unset when the suite lacks the needed cells
  std::string detail;
};

struct SuiteReport {
  std::vector<RegimeOutcome> regimes;
  std::vector<EvalOutcome> cells;
  std::map<std::string, CmiValue> cmi;  // per corpus
  std::vector<TrendVerdict> verdicts;

  WerMatrix matrix() const;
  nlohmann::json to_json() const;
};

// Trains (or reuses) every regime in dependency order and evaluates it on
// every test set. A regime whose directory holds a checkpoint with a matching
// fingerprint is not retrained; evaluation reports are reused the same way.
// Failures are recorded per cell and never abort the suite.
SuiteReport run_experiment_suite(const SuiteSpec& spec,
                                 const std::function<void(const std::string&)>& log = {});

// Directional checks of the forgetting findings on a regime x test matrix.
// `specs` identifies regimes by kind (and subsampling) rather than by id.
std::vector<TrendVerdict> trend_verdicts(const std::vector<RegimeSpec>& specs,
                                         const std::vector<TestSetSpec>& tests,
                                         const WerMatrix& wer);

// Head that scores a regime on a test set: LWF models answer code-switched
// tests with their CS head, everything else uses the main head.
std::string eval_head(RegimeKind kind, TestKind test);

}  // namespace cslab
