#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cslab/corpus.h"
#include "cslab/distill.h"
#include "cslab/metrics.h"
#include "cslab/net.h"

namespace cslab {

inline constexpr std::string_view kMainHead = "main";
inline constexpr std::string_view kCsHead = "cs";

enum class LossKind { kPlainCtc, kBlended, kScaled };

struct TrainConfig {
  double lr = 3e-4;
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  LossKind loss = LossKind::kPlainCtc;
  std::optional<DistillConfig> distill;
  std::optional<double> subsample_d;  // percent in (0, 100]
  // Fine-tuning multiplies lr by this unless fine_tune_lr is set.
  double fine_tune_scale = 0.9;
  std::optional<double> fine_tune_lr;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
  // Early stopping on dev WER; 0 disables (requires a dev set).
  std::size_t patience = 0;
  // LWF warm-up epochs (counted inside `epochs`).
  std::size_t warmup_epochs = 5;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct BatchRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t batch = 0;
  double loss = 0.0;
  // Named components of `loss` (LWF: "ctc_main", "ctc_cs"; distill: "ctc", "kld").
  std::map<std::string, double> parts;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  std::string phase;      // "train", "warmup", "joint"
  double mean_loss = 0.0;
  std::optional<double> dev_wer;
  std::size_t utterances = 0;
  double lr = 0.0;
  std::uint64_t subset_hash = 0;  // FNV of the epoch's utterance ids in visit order
  std::map<std::string, std::uint64_t> checksums;  // per collection, after the epoch
  // LWF: hash of the Y_m targets the epoch actually trained on.
  std::optional<std::uint64_t> pseudo_label_hash;
};

struct TrainHistory {
  std::map<std::string, std::uint64_t> initial_checksums;
  std::vector<EpochRecord> epochs;
  std::vector<BatchRecord> batches;
  std::optional<std::size_t> warmup_end_epoch;
  std::optional<std::uint64_t> pseudo_label_hash;
  std::optional<std::size_t> stopped_early_at;
  double wall_seconds = 0.0;

  // Everything except wall time, which is the only nondeterministic field.
  nlohmann::json to_json(bool include_batches = true) const;
};

struct TrainResult {
  Model model;
  TrainHistory history;
};

// Optional inputs shared by the training entry points.
struct TrainContext {
  std::string head_id = std::string(kMainHead);
  const Manifest* dev = nullptr;  // enables per-epoch dev WER
  std::string dev_head_id;        // defaults to head_id
  DecodeConfig dev_decode;
  // Called after every optimizer step.
  std::function<void(const BatchRecord&, const Model&)> on_batch;
};

struct CtcTarget {
  std::string head;
  LabelSeq labels;
};

struct BatchObjective {
  double loss = 0.0;                    // batch mean
  std::map<std::string, double> parts;  // batch means of the named components
  Gradients grads;                      // d loss / d params of trainable collections
};

// The training objective on one batch: per utterance, the sum of CTC losses
// over its targets, combined with the frame KLD against `teacher` on the
// first target's head when `distill` is set; averaged over the batch.
BatchObjective batch_objective(const Model& model, std::span<const Utterance> batch,
                               std::span<const std::vector<CtcTarget>> targets,
                               const TeacherSnapshot* teacher = nullptr,
                               const std::optional<DistillConfig>& distill = std::nullopt);

// Utterance visit order for one epoch: a fresh shuffle seeded by
// (seed, epoch); with d_percent set, the first floor(N * d / 100) of it.
std::vector<std::size_t> sample_subset(std::size_t n, std::optional<double> d_percent,
                                       std::size_t epoch, std::uint64_t seed);

TrainResult train(Model model, const Manifest& corpus, const TrainConfig& cfg,
                  const TrainContext& ctx = {});

// train() with the fine-tuning learning rate. A distillation loss uses the
// base model itself as the teacher.
TrainResult fine_tune(const Model& base, const Manifest& corpus, const TrainConfig& cfg,
                      const TrainContext& ctx = {});

struct LwfOptions {
  std::string main_head = std::string(kMainHead);
  std::string cs_head = std::string(kCsHead);
  DecodeConfig pseudo_decode;  // greedy unless configured
  std::uint64_t head_seed = 0;  // 0: derive from cfg.seed
};

// Learning without forgetting on code-switched data only: pseudo-label the
// corpus once with the pretrained monolingual head, add a fresh CS head, train
// it alone for cfg.warmup_epochs, then train all parameters jointly on
// L_CTC(Y_m) + L_CTC(Y_c). Runs at the fine-tuning learning rate.
TrainResult lwf_train(const Model& pretrained, const Manifest& cs_corpus,
                      const TrainConfig& cfg, const LwfOptions& opt = {},
                      const TrainContext& ctx = {});

std::uint64_t hash_labels(std::span<const LabelSeq> labels);

// Fresh model whose heads all share one vocabulary.
Model build_model(const ModelConfig& base, const Vocab& vocab, std::uint64_t seed);

}  // namespace cslab
