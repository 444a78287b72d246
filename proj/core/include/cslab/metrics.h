#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cslab/corpus.h"
#include "cslab/vocab.h"

namespace cslab {

class Model;
class NGramLM;

struct WerBreakdown {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t ref_len = 0;

  std::size_t edits() const { return substitutions + insertions + deletions; }
  double wer() const;  // percent
  WerBreakdown& operator+=(const WerBreakdown& o);
  nlohmann::json to_json() const;
};

// Unit-cost Levenshtein alignment. Among minimal alignments the backtrace
// prefers match/substitution, then deletion, then insertion.
WerBreakdown wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);

double cmi_utterance(const std::vector<LangTag>& tags);

struct CmiValue {
  double pooled = 0.0;          // formula applied to corpus-wide counts
  double mean_utterance = 0.0;  // mean of per-utterance values
  std::vector<double> per_utterance;
  nlohmann::json to_json() const;  // aggregates only
};

CmiValue cmi_corpus(const Manifest& m);

enum class DecodeKind { kGreedy, kBeam };

struct DecodeConfig {
  DecodeKind kind = DecodeKind::kGreedy;
  std::size_t beam = 8;
  double lm_weight = 0.5;
  // Optional shallow-fusion LM (beam only); not owned.
  const NGramLM* lm = nullptr;
  std::string lm_path;  // recorded in reports

  nlohmann::json to_json() const;
  static DecodeConfig from_json(const nlohmann::json& j);
};

LabelSeq decode(const Model& model, std::string_view head_id, const Tensor& feats,
                const DecodeConfig& cfg);

struct UttResult {
  std::string id;
  std::vector<std::string> ref;
  std::vector<std::string> hyp;
  WerBreakdown breakdown;
  std::optional<std::string> error;  // decode failure; scored as full deletion
};

struct EvalReport {
  std::string head_id;
  std::string test_name;
  std::uint64_t model_checksum = 0;
  nlohmann::json decode = nlohmann::json::object();
  WerBreakdown total;
  std::vector<UttResult> utterances;
  CmiValue cmi;
  std::size_t failures = 0;

  double wer() const { return total.wer(); }
  nlohmann::json to_json() const;
  // FNV-1a of the canonical JSON dump.
  std::uint64_t hash() const;
};

// Micro-averaged: total edits over total reference tokens. Utterances are
// decoded on up to `jobs` threads; results are aggregated in manifest order.
EvalReport evaluate(const Model& model, std::string_view head_id, const Manifest& test,
                    const DecodeConfig& cfg, std::string test_name = "test",
                    std::size_t jobs = 1);

// Regime x test-set WER matrix as an aligned text table. Missing cells print
// as "-", failed cells as "FAIL".
struct WerCell {
  std::optional<double> wer;
  bool failed = false;
};
using WerMatrix = std::map<std::string, std::map<std::string, WerCell>>;
std::string render_wer_table(const std::vector<std::string>& rows,
                             const std::vector<std::string>& cols, const WerMatrix& cells);

}  // namespace cslab
