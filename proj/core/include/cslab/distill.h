#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "cslab/autodiff.h"
#include "cslab/corpus.h"
#include "cslab/net.h"
#include "cslab/posteriors.h"

namespace cslab {

enum class DistillMode { kBlended, kScaled };

struct DistillConfig {
  DistillMode mode = DistillMode::kScaled;
  double alpha = 0.3;    // blended: (1 - alpha) * ctc + alpha * kld
  double gamma = 100.0;  // scaled: ctc + gamma * kld

  void validate() const;
  nlohmann::json to_json() const;
  static DistillConfig from_json(const nlohmann::json& j);
};

// Probabilities below this are floored before taking log Q.
inline constexpr double kKldFloor = 1e-12;

// Mean over frames of sum_v P(v) log(P(v) / Q(v)), with 0 log 0 = 0.
double kld_frames(const FramePosteriors& p, const FramePosteriors& q);
// Same on raw T x V probability matrices, which may contain exact zeros.
double kld_frames(const Tensor& p, const Tensor& q);

// Differentiable version with respect to the student logits [T x V]. The
// student distribution is taken through log_softmax, which never produces
// log 0, so no floor is needed on the tape.
ad::Var kld_frames(ad::Graph& g, const FramePosteriors& teacher, ad::Var student_logits);

ad::Var blended_loss(ad::Graph& g, ad::Var l_ctc, ad::Var l_kld, double alpha);
ad::Var scaled_loss(ad::Graph& g, ad::Var l_ctc, ad::Var l_kld, double gamma);
ad::Var distill_loss(ad::Graph& g, ad::Var l_ctc, ad::Var l_kld, const DistillConfig& cfg);

std::vector<FramePosteriors> capture_teacher(const Model& pretrained,
                                             std::span<const Utterance> batch,
                                             std::string_view head_id);

// Frozen copy of a pre-trained model plus a posterior cache keyed by
// (utterance id, model checksum). Thread-safe for concurrent lookups.
class TeacherSnapshot {
 public:
  TeacherSnapshot(const Model& pretrained, std::string head_id);

  const Model& model() const { return model_; }
  const std::string& head_id() const { return head_id_; }
  std::uint64_t checksum() const { return checksum_; }

  // Posteriors for `utt`, computed on first request and cached after that.
  // Callers that perturb features between requests must use uncached().
  const FramePosteriors& posteriors(const Utterance& utt) const;
  FramePosteriors uncached(const Tensor& feats) const;
  std::size_t cached() const;

 private:
  Model model_;
  std::string head_id_;
  std::uint64_t checksum_;
  mutable std::mutex mu_;
  mutable std::map<std::pair<std::string, std::uint64_t>, FramePosteriors> cache_;
};

}  // namespace cslab
