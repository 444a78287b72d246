#include "cslab/metrics.h"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <iomanip>
#include <sstream>
#include <thread>

#include "cslab/ctc.h"
#include "cslab/errors.h"
#include "cslab/hash.h"
#include "cslab/net.h"
#include "cslab/ngram.h"

namespace cslab {

double WerBreakdown::wer() const {
  if (ref_len == 0) throw ValidationError("wer: empty reference");
  return 100.0 * static_cast<double>(edits()) / static_cast<double>(ref_len);
}

WerBreakdown& WerBreakdown::operator+=(const WerBreakdown& o) {
  substitutions += o.substitutions;
  insertions += o.insertions;
  deletions += o.deletions;
  ref_len += o.ref_len;
  return *this;
}

nlohmann::json WerBreakdown::to_json() const {
  nlohmann::json j = {{"substitutions", substitutions},
                      {"insertions", insertions},
                      {"deletions", deletions},
                      {"ref_len", ref_len}};
  j["wer"] = ref_len ? nlohmann::json(wer()) : nlohmann::json(nullptr);
  return j;
}

WerBreakdown wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  if (ref.empty()) throw ValidationError("wer: empty reference");
  const std::size_t n = ref.size();
  const std::size_t m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }
  WerBreakdown b;
  b.ref_len = n;
  std::size_t i = n;
  std::size_t j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++b.substitutions;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++b.deletions;
      --i;
    } else {
      ++b.insertions;
      --j;
    }
  }
  return b;
}

namespace {

double cmi_from_counts(std::size_t a, std::size_t b) {
  const std::size_t n = a + b;
  if (n == 0) return 0.0;
  return 100.0 * static_cast<double>(n - std::max(a, b)) / static_cast<double>(n);
}

void count_tags(const std::vector<LangTag>& tags, std::size_t& a, std::size_t& b) {
  for (auto t : tags) {
    if (t == LangTag::kA) ++a;
    if (t == LangTag::kB) ++b;
  }
}

}  // namespace

double cmi_utterance(const std::vector<LangTag>& tags) {
  std::size_t a = 0;
  std::size_t b = 0;
  count_tags(tags, a, b);
  return cmi_from_counts(a, b);
}

nlohmann::json CmiValue::to_json() const {
  return {{"pooled", pooled}, {"mean_utterance", mean_utterance}};
}

CmiValue cmi_corpus(const Manifest& m) {
  if (m.utterances.empty()) throw ValidationError("cmi_corpus: empty manifest");
  CmiValue v;
  std::size_t a = 0;
  std::size_t b = 0;
  double sum = 0.0;
  for (const auto& u : m.utterances) {
    count_tags(u.lang_tags, a, b);
    v.per_utterance.push_back(cmi_utterance(u.lang_tags));
    sum += v.per_utterance.back();
  }
  v.pooled = cmi_from_counts(a, b);
  v.mean_utterance = sum / static_cast<double>(m.utterances.size());
  return v;
}

nlohmann::json DecodeConfig::to_json() const {
  nlohmann::json j = {{"kind", kind == DecodeKind::kGreedy ? "greedy" : "beam"}};
  if (kind == DecodeKind::kBeam) {
    j["beam"] = beam;
    if (lm) {
      j["lm_weight"] = lm_weight;
      j["lm"] = lm_path;
    }
  }
  return j;
}

DecodeConfig DecodeConfig::from_json(const nlohmann::json& j) {
  DecodeConfig c;
  try {
    const std::string kind = j.value("kind", std::string("greedy"));
    if (kind == "greedy") {
      c.kind = DecodeKind::kGreedy;
    } else if (kind == "beam") {
      c.kind = DecodeKind::kBeam;
    } else {
      throw ValidationError("decode.kind: expected greedy or beam, got '" + kind + "'");
    }
    c.beam = j.value("beam", c.beam);
    c.lm_weight = j.value("lm_weight", c.lm_weight);
    c.lm_path = j.value("lm", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("decode: ") + e.what());
  }
  if (c.beam == 0) throw ValidationError("decode.beam: must be >= 1");
  return c;
}

LabelSeq decode(const Model& model, std::string_view head_id, const Tensor& feats,
                const DecodeConfig& cfg) {
  const FramePosteriors post = model.forward_posteriors(feats, head_id);
  if (cfg.kind == DecodeKind::kGreedy) return greedy_decode(post);
  return beam_decode(post, cfg.lm, cfg.beam, cfg.lm_weight);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json utts = nlohmann::json::array();
  for (const auto& u : utterances) {
    nlohmann::json r = {{"id", u.id}, {"ref", u.ref}, {"hyp", u.hyp}};
    r.update(u.breakdown.to_json());
    if (u.error) r["error"] = *u.error;
    utts.push_back(std::move(r));
  }
  return {{"head", head_id},
          {"test_set", test_name},
          {"model_checksum", hex64(model_checksum)},
          {"decode", decode},
          {"wer", total.wer()},
          {"total", total.to_json()},
          {"failures", failures},
          {"cmi", cmi.to_json()},
          {"utterances", std::move(utts)}};
}

std::uint64_t EvalReport::hash() const { return fnv1a(to_json().dump()); }

EvalReport evaluate(const Model& model, std::string_view head_id, const Manifest& test,
                    const DecodeConfig& cfg, std::string test_name, std::size_t jobs) {
  if (!model.has_head(head_id)) {
    throw ValidationError("evaluate: model has no head '" + std::string(head_id) + "'");
  }
  if (test.utterances.empty()) throw ValidationError("evaluate: empty test set");
  const Vocab& vocab = model.head_vocab(head_id);
  for (const auto& u : test.utterances) vocab.encode(u.transcript, "utterance '" + u.id + "'");
  if (cfg.lm && cfg.lm->vocab_size() != vocab.size()) {
    throw ValidationError("evaluate: LM vocabulary does not match head '" +
                          std::string(head_id) + "'");
  }

  EvalReport rep;
  rep.head_id = std::string(head_id);
  rep.test_name = std::move(test_name);
  rep.model_checksum = model.checksum();
  rep.decode = cfg.to_json();
  rep.cmi = cmi_corpus(test);
  rep.utterances.resize(test.utterances.size());

  auto run_one = [&](std::size_t i) {
    const Utterance& u = test.utterances[i];
    UttResult& r = rep.utterances[i];
    r.id = u.id;
    r.ref = u.transcript;
    try {
      r.hyp = vocab.decode(decode(model, head_id, u.feats, cfg));
      r.breakdown = wer(r.ref, r.hyp);
    } catch (const std::exception& e) {
      r.hyp.clear();
      r.error = e.what();
      r.breakdown = WerBreakdown{0, 0, r.ref.size(), r.ref.size()};
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, test.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < test.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < test.size(); i = next++) run_one(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& r : rep.utterances) {
    rep.total += r.breakdown;
    if (r.error) ++rep.failures;
  }
  return rep;
}

std::string render_wer_table(const std::vector<std::string>& rows,
                             const std::vector<std::string>& cols, const WerMatrix& cells) {
  auto cell_text = [&](const std::string& r, const std::string& c) -> std::string {
    const auto row = cells.find(r);
    if (row == cells.end()) return "-";
    const auto it = row->second.find(c);
    if (it == row->second.end()) return "-";
    if (it->second.failed) return "FAIL";
    if (!it->second.wer) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", *it->second.wer);
    return buf;
  };
  std::size_t first = std::string("regime").size();
  for (const auto& r : rows) first = std::max(first, r.size());
  std::vector<std::size_t> widths;
  for (const auto& c : cols) {
    std::size_t w = std::max<std::size_t>(c.size(), 6);
    for (const auto& r : rows) w = std::max(w, cell_text(r, c).size());
    widths.push_back(w);
  }
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(first)) << "regime";
  for (std::size_t i = 0; i < cols.size(); ++i) {
    os << "  " << std::right << std::setw(static_cast<int>(widths[i])) << cols[i];
  }
  os << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(first)) << r;
    for (std::size_t i = 0; i < cols.size(); ++i) {
      os << "  " << std::right << std::setw(static_cast<int>(widths[i])) << cell_text(r, cols[i]);
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace cslab
