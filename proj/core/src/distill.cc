#include "cslab/distill.h"

#include <algorithm>
#include <cmath>

#include "cslab/errors.h"

namespace cslab {

void DistillConfig::validate() const {
  if (mode == DistillMode::kBlended && !(alpha >= 0.0 && alpha <= 1.0)) {
    throw ValidationError("distill.alpha must be in [0, 1], got " + std::to_string(alpha));
  }
  if (mode == DistillMode::kScaled && !(gamma >= 0.0)) {
    throw ValidationError("distill.gamma must be >= 0, got " + std::to_string(gamma));
  }
}

nlohmann::json DistillConfig::to_json() const {
  if (mode == DistillMode::kBlended) return {{"mode", "blended"}, {"alpha", alpha}};
  return {{"mode", "scaled"}, {"gamma", gamma}};
}

DistillConfig DistillConfig::from_json(const nlohmann::json& j) {
  DistillConfig c;
  try {
    const std::string mode = j.at("mode").get<std::string>();
    if (mode == "blended") {
      c.mode = DistillMode::kBlended;
      if (j.contains("gamma")) throw ValidationError("distill: gamma given for blended mode");
      c.alpha = j.at("alpha").get<double>();
    } else if (mode == "scaled") {
      c.mode = DistillMode::kScaled;
      if (j.contains("alpha")) throw ValidationError("distill: alpha given for scaled mode");
      c.gamma = j.value("gamma", c.gamma);
    } else {
      throw ValidationError("distill.mode: expected blended or scaled, got '" + mode + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("distill: ") + e.what());
  }
  c.validate();
  return c;
}

double kld_frames(const Tensor& p, const Tensor& q) {
  if (p.rank() != 2 || !p.same_shape(q) || p.rows() == 0) {
    throw ValidationError("kld_frames: shape mismatch " + shape_str(p.shape()) + " vs " +
                          shape_str(q.shape()));
  }
  for (const Tensor* m : {&p, &q}) {
    for (std::size_t t = 0; t < m->rows(); ++t) {
      double s = 0.0;
      for (double v : m->row(t)) {
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("kld_frames: entry outside [0, 1]");
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-9) {
        throw ValidationError("kld_frames: frame " + std::to_string(t) + " does not sum to 1");
      }
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pv = p[i];
    if (pv == 0.0) continue;
    total += pv * (std::log(pv) - std::log(std::max(q[i], kKldFloor)));
  }
  return std::max(0.0, total / static_cast<double>(p.rows()));
}

double kld_frames(const FramePosteriors& p, const FramePosteriors& q) {
  return kld_frames(p.probs(), q.probs());
}

ad::Var kld_frames(ad::Graph& g, const FramePosteriors& teacher, ad::Var student_logits) {
  const Tensor& z = g.value(student_logits);
  if (!z.same_shape(teacher.probs())) {
    throw ValidationError("kld_frames: teacher " + shape_str(teacher.probs().shape()) +
                          " vs student " + shape_str(z.shape()));
  }
  const double frames = static_cast<double>(teacher.frames());
  double entropy_term = 0.0;
  for (double pv : teacher.probs().data()) {
    if (pv > 0.0) entropy_term += pv * std::log(pv);
  }
  // KL = (sum P log P - sum P log Q) / T
  const ad::Var log_q = g.log_softmax(student_logits);
  const ad::Var cross = g.sum(g.mul(g.constant(teacher.probs()), log_q));
  return g.add(g.scale(cross, -1.0 / frames), g.constant(Tensor::scalar(entropy_term / frames)));
}

ad::Var blended_loss(ad::Graph& g, ad::Var l_ctc, ad::Var l_kld, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ValidationError("blended_loss: alpha must be in [0, 1], got " + std::to_string(alpha));
  }
  return g.add(g.scale(l_ctc, 1.0 - alpha), g.scale(l_kld, alpha));
}

ad::Var scaled_loss(ad::Graph& g, ad::Var l_ctc, ad::Var l_kld, double gamma) {
  if (!(gamma >= 0.0)) {
    throw ValidationError("scaled_loss: gamma must be >= 0, got " + std::to_string(gamma));
  }
  return g.add(l_ctc, g.scale(l_kld, gamma));
}

ad::Var distill_loss(ad::Graph& g, ad::Var l_ctc, ad::Var l_kld, const DistillConfig& cfg) {
  return cfg.mode == DistillMode::kBlended ? blended_loss(g, l_ctc, l_kld, cfg.alpha)
                                           : scaled_loss(g, l_ctc, l_kld, cfg.gamma);
}

std::vector<FramePosteriors> capture_teacher(const Model& pretrained,
                                             std::span<const Utterance> batch,
                                             std::string_view head_id) {
  if (!pretrained.has_head(head_id)) {
    throw ValidationError("capture_teacher: model has no head '" + std::string(head_id) + "'");
  }
  std::vector<FramePosteriors> out;
  out.reserve(batch.size());
  for (const auto& u : batch) out.push_back(pretrained.forward_posteriors(u.feats, head_id));
  return out;
}

TeacherSnapshot::TeacherSnapshot(const Model& pretrained, std::string head_id)
    : model_(pretrained), head_id_(std::move(head_id)), checksum_(pretrained.checksum()) {
  if (!model_.has_head(head_id_)) {
    throw ValidationError("teacher: model has no head '" + head_id_ + "'");
  }
}

const FramePosteriors& TeacherSnapshot::posteriors(const Utterance& utt) const {
  const auto key = std::make_pair(utt.id, checksum_);
  {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  FramePosteriors p = model_.forward_posteriors(utt.feats, head_id_);
  std::lock_guard lock(mu_);
  return cache_.try_emplace(key, std::move(p)).first->second;
}

FramePosteriors TeacherSnapshot::uncached(const Tensor& feats) const {
  return model_.forward_posteriors(feats, head_id_);
}

std::size_t TeacherSnapshot::cached() const {
  std::lock_guard lock(mu_);
  return cache_.size();
}

}  // namespace cslab
