#include "cslab/regimes.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "cslab/ctc.h"
#include "cslab/errors.h"
#include "cslab/hash.h"
#include "cslab/rng.h"

namespace cslab {

namespace {

std::string_view loss_name(LossKind k) {
  switch (k) {
    case LossKind::kPlainCtc: return "plain-CTC";
    case LossKind::kBlended: return "blended";
    case LossKind::kScaled: return "scaled";
  }
  return "?";
}

LossKind parse_loss(const std::string& s) {
  if (s == "plain-CTC") return LossKind::kPlainCtc;
  if (s == "blended") return LossKind::kBlended;
  if (s == "scaled") return LossKind::kScaled;
  throw ValidationError("train.loss: expected plain-CTC, blended or scaled, got '" + s + "'");
}

// Everything one training run needs besides the model and the data.
struct Job {
  const Manifest& corpus;
  std::vector<std::vector<CtcTarget>> targets;  // per utterance
  const TrainConfig& cfg;
  double lr;
  const TeacherSnapshot* teacher = nullptr;
  // Sets trainable flags for an epoch and returns its phase name.
  std::function<std::string(Model&, std::size_t epoch)> phase;
};

std::string part_name(const CtcTarget& t, std::size_t n_targets) {
  return n_targets == 1 ? "ctc" : "ctc_" + t.head;
}

// Adds d(loss)/d(params) for one utterance into `grads` and returns the loss.
double utterance_gradient(const Model& model, const Utterance& utt,
                          const std::vector<CtcTarget>& targets, const TeacherSnapshot* teacher,
                          const std::optional<DistillConfig>& distill, Gradients& grads,
                          std::map<std::string, double>& parts) {
  ad::Graph g;
  ModelBinding bind(g, model, true);
  const ad::Var trunk = bind.trunk(utt.feats);
  ad::Var first_logits;
  ad::Var ctc_total;
  for (const auto& t : targets) {
    const ad::Var z = bind.logits(trunk, t.head);
    CtcResult r;
    try {
      r = ctc_loss_from_logits(g.value(z), t.labels);
    } catch (const CtcInfeasibleError& e) {
      throw ValidationError("utterance '" + utt.id + "': " + e.what());
    }
    parts[part_name(t, targets.size())] += r.loss;
    const ad::Var l = g.external_loss(z, r.loss, std::move(r.grad));
    if (!first_logits.valid()) first_logits = z;
    ctc_total = ctc_total.valid() ? g.add(ctc_total, l) : l;
  }
  ad::Var root = ctc_total;
  if (teacher && distill) {
    const ad::Var kld = kld_frames(g, teacher->posteriors(utt), first_logits);
    parts["kld"] += g.value(kld).item();
    root = distill_loss(g, ctc_total, kld, *distill);
  }
  g.backward(root);
  bind.accumulate(grads);
  return g.value(root).item();
}

BatchObjective objective(const Model& model, std::span<const Utterance* const> utts,
                         std::span<const std::vector<CtcTarget>* const> targets,
                         const TeacherSnapshot* teacher,
                         const std::optional<DistillConfig>& distill) {
  if (utts.empty() || utts.size() != targets.size()) {
    throw ValidationError("batch: need one target list per utterance and a non-empty batch");
  }
  BatchObjective out{0.0, {}, model.zero_gradients()};
  for (std::size_t i = 0; i < utts.size(); ++i) {
    out.loss += utterance_gradient(model, *utts[i], *targets[i], teacher, distill, out.grads,
                                   out.parts);
  }
  const double n = static_cast<double>(utts.size());
  out.grads.scale(1.0 / n);
  out.loss /= n;
  for (auto& [name, v] : out.parts) v /= n;
  return out;
}

void sgd_step(Model& model, const Gradients& grads, double lr) {
  for (const auto& id : model.collection_ids()) {
    auto& c = model.collection(id);
    if (!c.trainable) continue;
    const auto& gs = grads.by_collection.at(id);
    for (std::size_t i = 0; i < c.params.size(); ++i) {
      auto p = c.params[i].value.data();
      const auto g = gs[i].data();
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * g[k];
    }
  }
}

std::map<std::string, std::uint64_t> checksums(const Model& m) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& id : m.collection_ids()) out[id] = m.checksum(id);
  return out;
}

std::uint64_t target_hash(const std::vector<std::vector<CtcTarget>>& targets,
                          std::string_view head) {
  Fnv1a h;
  for (const auto& per_utt : targets) {
    for (const auto& t : per_utt) {
      if (t.head != head) continue;
      h.update_u64(t.labels.size());
      for (int l : t.labels) h.update_u64(static_cast<std::uint64_t>(l));
    }
  }
  return h.digest();
}

TrainResult run(Model model, Job job, const TrainContext& ctx) {
  const auto start = std::chrono::steady_clock::now();
  const TrainConfig& cfg = job.cfg;
  const Manifest& corpus = job.corpus;
  TrainResult res{std::move(model), {}};
  Model& m = res.model;
  TrainHistory& hist = res.history;
  hist.initial_checksums = checksums(m);

  std::optional<double> best_dev;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = job.lr;
    rec.phase = job.phase ? job.phase(m, epoch) : "train";

    const auto order = sample_subset(corpus.size(), cfg.subsample_d, epoch, cfg.seed);
    Fnv1a visit;
    for (auto i : order) visit.update(corpus.utterances[i].id);
    rec.subset_hash = visit.digest();
    rec.utterances = order.size();
    if (job.targets.front().size() > 1) {
      rec.pseudo_label_hash = target_hash(job.targets, job.targets.front().front().head);
    }

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const double n = static_cast<double>(end - begin);
      std::vector<const Utterance*> utts;
      std::vector<const std::vector<CtcTarget>*> tgts;
      for (std::size_t k = begin; k < end; ++k) {
        utts.push_back(&corpus.utterances[order[k]]);
        tgts.push_back(&job.targets[order[k]]);
      }
      BatchObjective obj = objective(m, utts, tgts, job.teacher, cfg.distill);
      Gradients& grads = obj.grads;
      BatchRecord br;
      br.epoch = epoch;
      br.batch = ++batch_index;
      br.parts = obj.parts;
      br.loss = obj.loss;
      const double batch_loss = obj.loss * n;
      if (cfg.clip_norm > 0.0) {
        const double norm = std::sqrt(grads.squared_norm());
        if (norm > cfg.clip_norm) grads.scale(cfg.clip_norm / norm);
      }
      sgd_step(m, grads, job.lr);
      loss_sum += batch_loss;
      if (ctx.on_batch) ctx.on_batch(br, m);
      hist.batches.push_back(std::move(br));
    }
    rec.mean_loss = loss_sum / static_cast<double>(order.size());
    rec.checksums = checksums(m);

    if (ctx.dev) {
      const std::string& head = ctx.dev_head_id.empty() ? ctx.head_id : ctx.dev_head_id;
      rec.dev_wer = evaluate(m, head, *ctx.dev, ctx.dev_decode, "dev").wer();
    }
    hist.epochs.push_back(std::move(rec));

    if (cfg.patience > 0 && hist.epochs.back().dev_wer) {
      const double w = *hist.epochs.back().dev_wer;
      if (!best_dev || w < *best_dev) {
        best_dev = w;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        hist.stopped_early_at = epoch;
        break;
      }
    }
  }
  hist.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

std::vector<std::vector<CtcTarget>> reference_targets(const Model& m, const Manifest& corpus,
                                                      const std::string& head) {
  if (corpus.utterances.empty()) throw ValidationError("train: empty corpus");
  if (!m.has_head(head)) throw ValidationError("train: model has no head '" + head + "'");
  const Vocab& vocab = m.head_vocab(head);
  std::vector<std::vector<CtcTarget>> out;
  out.reserve(corpus.size());
  for (const auto& u : corpus.utterances) {
    out.push_back({{head, vocab.encode(u.transcript, "utterance '" + u.id + "'")}});
  }
  return out;
}

double fine_tune_lr(const TrainConfig& cfg) {
  return cfg.fine_tune_lr ? *cfg.fine_tune_lr : cfg.lr * cfg.fine_tune_scale;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("train.lr must be >= 0");
  if (batch_size == 0) throw ValidationError("train.batch_size must be >= 1");
  if (subsample_d && !(*subsample_d > 0.0 && *subsample_d <= 100.0)) {
    throw ValidationError("train.subsample_d must be in (0, 100]");
  }
  if (!(fine_tune_scale > 0.0)) throw ValidationError("train.fine_tune_scale must be > 0");
  if (fine_tune_lr && !(*fine_tune_lr >= 0.0)) {
    throw ValidationError("train.fine_tune_lr must be >= 0");
  }
  if (!(clip_norm >= 0.0)) throw ValidationError("train.clip_norm must be >= 0");
  if (loss == LossKind::kPlainCtc && distill) {
    throw ValidationError("train.distill given but train.loss is plain-CTC");
  }
  if (loss != LossKind::kPlainCtc) {
    if (!distill) throw ValidationError("train.loss " + std::string(loss_name(loss)) +
                                        " needs a train.distill block");
    const bool blended = distill->mode == DistillMode::kBlended;
    if (blended != (loss == LossKind::kBlended)) {
      throw ValidationError("train.loss does not match train.distill.mode");
    }
    distill->validate();
  }
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j = {{"lr", lr},
                      {"epochs", epochs},
                      {"batch_size", batch_size},
                      {"seed", seed},
                      {"loss", std::string(loss_name(loss))},
                      {"fine_tune_scale", fine_tune_scale},
                      {"clip_norm", clip_norm},
                      {"patience", patience},
                      {"warmup_epochs", warmup_epochs}};
  if (distill) j["distill"] = distill->to_json();
  if (subsample_d) j["subsample_d"] = *subsample_d;
  if (fine_tune_lr) j["fine_tune_lr"] = *fine_tune_lr;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (!j.is_object()) throw ValidationError("train: expected an object");
  static const std::set<std::string> known = {
      "lr",       "epochs",    "batch_size",      "seed",         "loss",
      "distill",  "subsample_d", "fine_tune_scale", "fine_tune_lr", "clip_norm",
      "patience", "warmup_epochs"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ValidationError("train." + k + ": unknown field");
  }
  try {
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.loss = parse_loss(j.value("loss", std::string("plain-CTC")));
    if (j.contains("distill")) c.distill = DistillConfig::from_json(j.at("distill"));
    if (j.contains("subsample_d")) c.subsample_d = j.at("subsample_d").get<double>();
    c.fine_tune_scale = j.value("fine_tune_scale", c.fine_tune_scale);
    if (j.contains("fine_tune_lr")) c.fine_tune_lr = j.at("fine_tune_lr").get<double>();
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.patience = j.value("patience", c.patience);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json TrainHistory::to_json(bool include_batches) const {
  nlohmann::json epochs_j = nlohmann::json::array();
  for (const auto& e : epochs) {
    nlohmann::json sums = nlohmann::json::object();
    for (const auto& [id, c] : e.checksums) sums[id] = hex64(c);
    nlohmann::json r = {{"epoch", e.epoch},
                        {"phase", e.phase},
                        {"mean_loss", e.mean_loss},
                        {"utterances", e.utterances},
                        {"lr", e.lr},
                        {"subset_hash", hex64(e.subset_hash)},
                        {"checksums", sums}};
    if (e.pseudo_label_hash) r["pseudo_label_hash"] = hex64(*e.pseudo_label_hash);
    r["dev_wer"] = e.dev_wer ? nlohmann::json(*e.dev_wer) : nlohmann::json(nullptr);
    epochs_j.push_back(std::move(r));
  }
  nlohmann::json init = nlohmann::json::object();
  for (const auto& [id, c] : initial_checksums) init[id] = hex64(c);
  nlohmann::json j = {{"initial_checksums", init}, {"epochs", epochs_j}};
  if (warmup_end_epoch) j["warmup_end_epoch"] = *warmup_end_epoch;
  if (pseudo_label_hash) j["pseudo_label_hash"] = hex64(*pseudo_label_hash);
  if (stopped_early_at) j["stopped_early_at"] = *stopped_early_at;
  if (include_batches) {
    nlohmann::json b = nlohmann::json::array();
    for (const auto& r : batches) {
      b.push_back({{"epoch", r.epoch}, {"batch", r.batch}, {"loss", r.loss}, {"parts", r.parts}});
    }
    j["batches"] = std::move(b);
  }
  return j;
}

std::vector<std::size_t> sample_subset(std::size_t n, std::optional<double> d_percent,
                                       std::size_t epoch, std::uint64_t seed) {
  if (n == 0) throw ValidationError("sample_subset: empty corpus");
  std::size_t take = n;
  if (d_percent) {
    const double d = *d_percent;
    if (!(d > 0.0 && d <= 100.0)) {
      throw ValidationError("sample_subset: D must be in (0, 100], got " + std::to_string(d));
    }
    // Integer arithmetic when D is whole keeps floor(N * D / 100) exact.
    if (d == std::floor(d)) {
      take = n * static_cast<std::size_t>(d) / 100;
    } else {
      take = static_cast<std::size_t>(std::floor(static_cast<double>(n) * d / 100.0));
    }
    if (take == 0) {
      throw ValidationError("sample_subset: D=" + std::to_string(d) + "% of " +
                            std::to_string(n) + " utterances is empty");
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, epoch));
  rng.shuffle(order);
  order.resize(take);
  return order;
}

TrainResult train(Model model, const Manifest& corpus, const TrainConfig& cfg,
                  const TrainContext& ctx) {
  cfg.validate();
  if (cfg.distill) throw ValidationError("train: distillation needs a base model (fine_tune)");
  Job job{corpus, reference_targets(model, corpus, ctx.head_id), cfg, cfg.lr, nullptr, {}};
  return run(std::move(model), std::move(job), ctx);
}

TrainResult fine_tune(const Model& base, const Manifest& corpus, const TrainConfig& cfg,
                      const TrainContext& ctx) {
  cfg.validate();
  Job job{corpus, reference_targets(base, corpus, ctx.head_id), cfg, fine_tune_lr(cfg), nullptr,
          {}};
  std::optional<TeacherSnapshot> teacher;
  if (cfg.distill) {
    teacher.emplace(base, ctx.head_id);
    job.teacher = &*teacher;
  }
  return run(base, std::move(job), ctx);
}

BatchObjective batch_objective(const Model& model, std::span<const Utterance> batch,
                               std::span<const std::vector<CtcTarget>> targets,
                               const TeacherSnapshot* teacher,
                               const std::optional<DistillConfig>& distill) {
  if (distill && !teacher) throw ValidationError("batch: a distillation loss needs a teacher");
  std::vector<const Utterance*> utts;
  std::vector<const std::vector<CtcTarget>*> tgts;
  for (const auto& u : batch) utts.push_back(&u);
  for (const auto& t : targets) tgts.push_back(&t);
  return objective(model, utts, tgts, teacher, distill);
}

std::uint64_t hash_labels(std::span<const LabelSeq> labels) {
  Fnv1a h;
  for (const auto& l : labels) {
    h.update_u64(l.size());
    for (int x : l) h.update_u64(static_cast<std::uint64_t>(x));
  }
  return h.digest();
}

TrainResult lwf_train(const Model& pretrained, const Manifest& cs_corpus, const TrainConfig& cfg,
                      const LwfOptions& opt, const TrainContext& ctx) {
  cfg.validate();
  if (cfg.distill) throw ValidationError("lwf: distillation losses are not supported");
  const auto heads = pretrained.head_ids();
  if (heads.size() != 1 || heads.front() != opt.main_head) {
    throw ValidationError("lwf: pretrained model must have exactly the head '" + opt.main_head +
                          "'");
  }
  if (cfg.warmup_epochs > cfg.epochs) {
    throw ValidationError("lwf: warmup_epochs exceeds epochs");
  }
  const Vocab& vocab = pretrained.head_vocab(opt.main_head);
  auto targets = reference_targets(pretrained, cs_corpus, opt.main_head);

  // Y_m: decoded once, before any update, and never refreshed.
  std::vector<LabelSeq> pseudo;
  pseudo.reserve(cs_corpus.size());
  for (const auto& u : cs_corpus.utterances) {
    pseudo.push_back(decode(pretrained, opt.main_head, u.feats, opt.pseudo_decode));
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    LabelSeq y_c = std::move(targets[i].front().labels);
    targets[i] = {{opt.main_head, pseudo[i]}, {opt.cs_head, std::move(y_c)}};
  }

  Model model = pretrained;
  const std::uint64_t head_seed =
      opt.head_seed ? opt.head_seed : mix_seed(cfg.seed, fnv1a(opt.cs_head));
  model.add_head(opt.cs_head, vocab, head_seed);

  const std::vector<std::string> frozen = {std::string(Model::kShared), opt.main_head};
  const std::string cs_head = opt.cs_head;
  const std::size_t warmup = cfg.warmup_epochs;
  Job job{cs_corpus, std::move(targets), cfg, fine_tune_lr(cfg), nullptr,
          [frozen, cs_head, warmup](Model& m, std::size_t epoch) -> std::string {
            const bool warm = epoch <= warmup;
            m.set_trainable(frozen, !warm);
            m.collection(cs_head).trainable = true;
            return warm ? "warmup" : "joint";
          }};
  TrainContext inner = ctx;
  if (inner.dev_head_id.empty()) inner.dev_head_id = opt.cs_head;
  TrainResult res = run(std::move(model), std::move(job), inner);
  res.model.set_trainable(frozen, true);
  res.history.warmup_end_epoch = warmup;
  res.history.pseudo_label_hash = hash_labels(pseudo);
  return res;
}

Model build_model(const ModelConfig& base, const Vocab& vocab, std::uint64_t seed) {
  ModelConfig cfg = base;
  if (cfg.heads.empty()) cfg.heads.push_back({std::string(kMainHead), vocab});
  for (auto& h : cfg.heads) h.vocab = vocab;
  return Model::build(cfg, seed);
}

}  // namespace cslab
