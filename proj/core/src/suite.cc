#include "cslab/suite.h"

#include <algorithm>
#include <condition_variable>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <mutex>
#include <set>
#include <thread>

#include "cslab/errors.h"
#include "cslab/hash.h"
#include "cslab/rng.h"

namespace cslab {

namespace {

namespace fs = std::filesystem;

std::vector<std::string> default_corpora(RegimeKind k) {
  switch (k) {
    case RegimeKind::kExp1: return {"mono-train"};
    case RegimeKind::kExp3: return {"mono-train", "cs-train"};
    default: return {"cs-train"};
  }
}

std::uint64_t file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw RuntimeError("cannot open '" + p.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a(bytes);
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw RuntimeError("cannot open '" + p.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw RuntimeError("'" + p.string() + "' is not valid JSON: " + e.what());
  }
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw RuntimeError("cannot write '" + tmp.string() + "'");
    out << j.dump(2) << '\n';
    if (!out) throw RuntimeError("write to '" + tmp.string() + "' failed");
  }
  fs::rename(tmp, p);
}

int group_of(LangTag t) {
  switch (t) {
    case LangTag::kShared: return 0;
    case LangTag::kA: return 1;
    case LangTag::kB: return 2;
    default: return 3;
  }
}

struct LoadedCorpus {
  Manifest manifest;
  std::uint64_t hash = 0;
};

enum class State { kPending, kRunning, kDone, kFailed };

}  // namespace

std::string_view regime_kind_name(RegimeKind k) {
  switch (k) {
    case RegimeKind::kExp1: return "Exp1";
    case RegimeKind::kExp2: return "Exp2";
    case RegimeKind::kExp3: return "Exp3";
    case RegimeKind::kExp4: return "Exp4";
    case RegimeKind::kExp5: return "Exp5";
    case RegimeKind::kLwf: return "LWF";
    case RegimeKind::kKldFt: return "KLD-FT";
  }
  return "?";
}

RegimeKind parse_regime_kind(std::string_view s) {
  for (auto k : {RegimeKind::kExp1, RegimeKind::kExp2, RegimeKind::kExp3, RegimeKind::kExp4,
                 RegimeKind::kExp5, RegimeKind::kLwf, RegimeKind::kKldFt}) {
    if (regime_kind_name(k) == s) return k;
  }
  throw ValidationError("unknown regime kind '" + std::string(s) +
                        "' (expected Exp1..Exp5, LWF or KLD-FT)");
}

bool needs_base(RegimeKind k) {
  return k == RegimeKind::kExp4 || k == RegimeKind::kExp5 || k == RegimeKind::kLwf ||
         k == RegimeKind::kKldFt;
}

void RegimeSpec::validate() const {
  const std::string where = "regime '" + id + "'";
  if (id.empty()) throw ValidationError("regime: empty id");
  if (id.find_first_of("/\\") != std::string::npos || id == "." || id == "..") {
    throw ValidationError(where + ": id must be usable as a directory name");
  }
  if (needs_base(kind) && !base) {
    throw ValidationError(where + ": " + std::string(regime_kind_name(kind)) +
                          " requires a base checkpoint");
  }
  if (!needs_base(kind) && base) {
    throw ValidationError(where + ": " + std::string(regime_kind_name(kind)) +
                          " trains from scratch and must not name a base");
  }
  if (kind == RegimeKind::kKldFt && !train.distill) {
    throw ValidationError(where + ": KLD-FT requires train.distill");
  }
  if (kind != RegimeKind::kKldFt && train.distill) {
    throw ValidationError(where + ": only KLD-FT accepts train.distill");
  }
  if (kind == RegimeKind::kLwf && train.subsample_d) {
    throw ValidationError(where + ": LWF does not support subsample_d");
  }
  try {
    train.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(where + ": " + e.what());
  }
}

nlohmann::json RegimeSpec::to_json() const {
  nlohmann::json j = {{"id", id},
                      {"kind", std::string(regime_kind_name(kind))},
                      {"train_corpora", train_corpora.empty() ? default_corpora(kind)
                                                              : train_corpora},
                      {"train", train.to_json()},
                      {"init_seed", init_seed}};
  if (dev_corpus) j["dev_corpus"] = *dev_corpus;
  if (base) j["base"] = *base;
  return j;
}

RegimeSpec RegimeSpec::from_json(const nlohmann::json& j) {
  RegimeSpec r;
  if (!j.is_object()) throw ValidationError("regime: expected an object");
  try {
    r.id = j.at("id").get<std::string>();
    r.kind = parse_regime_kind(j.at("kind").get<std::string>());
    if (j.contains("train_corpora")) {
      r.train_corpora = j.at("train_corpora").get<std::vector<std::string>>();
    }
    if (j.contains("dev_corpus")) r.dev_corpus = j.at("dev_corpus").get<std::string>();
    if (j.contains("base")) r.base = j.at("base").get<std::string>();
    if (j.contains("train")) r.train = TrainConfig::from_json(j.at("train"));
    r.init_seed = j.value("init_seed", r.init_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("regime: " + std::string(e.what()));
  }
  if (r.train_corpora.empty()) r.train_corpora = default_corpora(r.kind);
  r.validate();
  return r;
}

void SuiteSpec::validate() const {
  if (regimes.empty()) throw ValidationError("suite: no regimes");
  if (jobs == 0) throw ValidationError("suite: jobs must be >= 1");
  std::map<std::string, const RegimeSpec*> by_id;
  for (const auto& r : regimes) {
    r.validate();
    if (!by_id.emplace(r.id, &r).second) {
      throw ValidationError("suite: duplicate regime id '" + r.id + "'");
    }
    for (const auto& c : r.train_corpora.empty() ? default_corpora(r.kind) : r.train_corpora) {
      if (!corpora.count(c)) {
        throw ValidationError("regime '" + r.id + "': unknown corpus '" + c + "'");
      }
    }
    if (r.dev_corpus && !corpora.count(*r.dev_corpus)) {
      throw ValidationError("regime '" + r.id + "': unknown dev corpus '" + *r.dev_corpus + "'");
    }
  }
  for (const auto& r : regimes) {
    // Walk the base chain; a revisit means a cycle.
    std::set<std::string> seen = {r.id};
    const RegimeSpec* cur = &r;
    while (cur->base && by_id.count(*cur->base)) {
      if (!seen.insert(*cur->base).second) {
        throw ValidationError("suite: base cycle through regime '" + r.id + "'");
      }
      cur = by_id.at(*cur->base);
    }
  }
  std::set<std::string> names;
  for (const auto& t : tests) {
    if (!names.insert(t.name).second) {
      throw ValidationError("suite: duplicate test set '" + t.name + "'");
    }
    if (!corpora.count(t.corpus)) {
      throw ValidationError("test set '" + t.name + "': unknown corpus '" + t.corpus + "'");
    }
  }
}

Vocab vocab_from_manifests(std::span<const Manifest* const> manifests) {
  std::map<std::string, LangTag> seen;
  for (const Manifest* m : manifests) {
    for (const auto& u : m->utterances) {
      for (std::size_t i = 0; i < u.transcript.size(); ++i) {
        auto [it, inserted] = seen.emplace(u.transcript[i], u.lang_tags[i]);
        if (!inserted && it->second != u.lang_tags[i]) {
          throw ValidationError("symbol '" + u.transcript[i] +
                                "' carries different language tags across corpora");
        }
      }
    }
  }
  std::vector<std::pair<std::string, LangTag>> entries(seen.begin(), seen.end());
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    const int ga = group_of(a.second);
    const int gb = group_of(b.second);
    if (ga != gb) return ga < gb;
    if (a.first.size() != b.first.size()) return a.first.size() < b.first.size();
    return a.first < b.first;
  });
  return Vocab(std::move(entries));
}

std::string eval_head(RegimeKind kind, TestKind test) {
  if (kind == RegimeKind::kLwf && test == TestKind::kCodeSwitched) return std::string(kCsHead);
  return std::string(kMainHead);
}

WerMatrix SuiteReport::matrix() const {
  WerMatrix m;
  for (const auto& c : cells) {
    WerCell cell;
    cell.wer = c.wer;
    cell.failed = c.status == "failed";
    m[c.regime][c.test] = cell;
  }
  return m;
}

nlohmann::json SuiteReport::to_json() const {
  nlohmann::json rj = nlohmann::json::array();
  for (const auto& r : regimes) {
    nlohmann::json x = {{"id", r.id},
                        {"status", r.status},
                        {"checkpoint", r.checkpoint.string()},
                        {"history", r.history.string()},
                        {"checksum", hex64(r.checksum)}};
    if (r.error) x["error"] = *r.error;
    rj.push_back(std::move(x));
  }
  nlohmann::json cj = nlohmann::json::array();
  for (const auto& c : cells) {
    nlohmann::json x = {{"regime", c.regime},
                        {"test", c.test},
                        {"head", c.head},
                        {"status", c.status},
                        {"report", c.report.string()}};
    x["wer"] = c.wer ? nlohmann::json(*c.wer) : nlohmann::json(nullptr);
    if (c.error) x["error"] = *c.error;
    cj.push_back(std::move(x));
  }
  nlohmann::json cmi_j = nlohmann::json::object();
  for (const auto& [name, v] : cmi) cmi_j[name] = v.to_json();
  nlohmann::json vj = nlohmann::json::array();
  for (const auto& v : verdicts) {
    nlohmann::json x = {{"name", v.name}, {"detail", v.detail}};
    x["pass"] = v.pass ? nlohmann::json(*v.pass) : nlohmann::json(nullptr);
    vj.push_back(std::move(x));
  }
  return {{"regimes", rj}, {"cells", cj}, {"cmi", cmi_j}, {"verdicts", vj}};
}

std::vector<TrendVerdict> trend_verdicts(const std::vector<RegimeSpec>& specs,
                                         const std::vector<TestSetSpec>& tests,
                                         const WerMatrix& wer) {
  auto find_test = [&](TestKind k) -> const TestSetSpec* {
    for (const auto& t : tests) {
      if (t.kind == k) return &t;
    }
    return nullptr;
  };
  auto find_regime = [&](RegimeKind k, std::optional<double> d) -> const RegimeSpec* {
    for (const auto& r : specs) {
      if (r.kind != k) continue;
      const double rd = r.train.subsample_d.value_or(100.0);
      if (rd == d.value_or(100.0)) return &r;
    }
    return nullptr;
  };
  auto cell = [&](const RegimeSpec* r, const TestSetSpec* t) -> std::optional<double> {
    if (!r || !t) return std::nullopt;
    const auto row = wer.find(r->id);
    if (row == wer.end()) return std::nullopt;
    const auto c = row->second.find(t->name);
    if (c == row->second.end() || c->second.failed) return std::nullopt;
    return c->second.wer;
  };
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };

  const TestSetSpec* mono = find_test(TestKind::kMono);
  const TestSetSpec* cs = find_test(TestKind::kCodeSwitched);
  const RegimeSpec* exp1 = find_regime(RegimeKind::kExp1, std::nullopt);
  const RegimeSpec* exp4 = find_regime(RegimeKind::kExp4, std::nullopt);
  const RegimeSpec* lwf = find_regime(RegimeKind::kLwf, std::nullopt);
  const RegimeSpec* exp5 = find_regime(RegimeKind::kExp5, std::nullopt);
  const RegimeSpec* exp5_d25 = find_regime(RegimeKind::kExp5, 25.0);

  std::vector<TrendVerdict> out;
  {
    TrendVerdict v{"forgetting reproduced", std::nullopt, "needs Exp1 and Exp4 on mono and CS"};
    const auto m1 = cell(exp1, mono), m4 = cell(exp4, mono);
    const auto c1 = cell(exp1, cs), c4 = cell(exp4, cs);
    if (m1 && m4 && c1 && c4) {
      v.pass = *m4 >= *m1 + 2.0 && *c4 <= *c1 - 2.0;
      v.detail = "mono Exp4 " + fmt(*m4) + " vs Exp1 " + fmt(*m1) + " (need +2); CS Exp4 " +
                 fmt(*c4) + " vs Exp1 " + fmt(*c1) + " (need -2)";
    }
    out.push_back(std::move(v));
  }
  {
    TrendVerdict v{"LWF mitigates forgetting", std::nullopt, "needs Exp1, Exp4 and LWF"};
    const auto ml = cell(lwf, mono), m4 = cell(exp4, mono);
    const auto cl = cell(lwf, cs), c1 = cell(exp1, cs);
    if (ml && m4 && cl && c1) {
      v.pass = *ml <= *m4 && *cl <= *c1 - 2.0;
      v.detail = "mono LWF " + fmt(*ml) + " vs Exp4 " + fmt(*m4) + "; CS LWF " + fmt(*cl) +
                 " vs Exp1 " + fmt(*c1) + " (need -2)";
    }
    out.push_back(std::move(v));
  }
  {
    TrendVerdict v{"less CS data forgets less", std::nullopt,
                   "needs Exp5 at D=25 and D=100"};
    const auto m25 = cell(exp5_d25, mono), m100 = cell(exp5, mono);
    if (m25 && m100) {
      v.pass = *m25 < *m100;
      v.detail = "mono D=25 " + fmt(*m25) + " vs D=100 " + fmt(*m100);
    }
    out.push_back(std::move(v));
  }
  return out;
}

SuiteReport run_experiment_suite(const SuiteSpec& spec,
                                 const std::function<void(const std::string&)>& log_fn) {
  spec.validate();
  std::mutex log_mu;
  auto log = [&](const std::string& s) {
    if (!log_fn) return;
    std::lock_guard lock(log_mu);
    log_fn(s);
  };

  std::map<std::string, LoadedCorpus> corpora;
  for (const auto& [name, path] : spec.corpora) {
    corpora[name] = {load_manifest(path), file_hash(path)};
  }
  std::vector<const Manifest*> all;
  for (const auto& [name, c] : corpora) all.push_back(&c.manifest);
  const Vocab vocab = vocab_from_manifests(all);

  SuiteReport report;
  for (const auto& [name, c] : corpora) report.cmi[name] = cmi_corpus(c.manifest);
  fs::create_directories(spec.out_dir);

  const std::size_t n = spec.regimes.size();
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < n; ++i) index[spec.regimes[i].id] = i;
  report.regimes.resize(n);
  std::vector<std::vector<EvalOutcome>> cells(n);
  std::vector<State> state(n, State::kPending);

  auto process = [&](std::size_t i) -> bool {
    const RegimeSpec& r = spec.regimes[i];
    RegimeOutcome& out = report.regimes[i];
    out.id = r.id;
    const fs::path dir = spec.out_dir / r.id;
    out.checkpoint = dir / "model.ckpt";
    out.history = dir / "history.json";
    try {
      fs::create_directories(dir);
      std::optional<Model> base;
      nlohmann::json fp = {{"regime", r.to_json()},
                           {"model", spec.model.to_json()},
                           {"vocab", vocab.to_json()}};
      // The base is identified by its checksum, not by how it was referenced.
      fp["regime"].erase("base");
      if (r.base) {
        const fs::path base_path = index.count(*r.base)
                                       ? spec.out_dir / *r.base / "model.ckpt"
                                       : fs::path(*r.base);
        base = load_checkpoint(base_path);
        fp["base_checksum"] = hex64(base->checksum());
      }
      const std::vector<std::string> train_names =
          r.train_corpora.empty() ? default_corpora(r.kind) : r.train_corpora;
      for (const auto& c : train_names) fp["corpora"][c] = hex64(corpora.at(c).hash);
      if (r.dev_corpus) fp["dev"] = hex64(corpora.at(*r.dev_corpus).hash);

      const fs::path fp_path = dir / "fingerprint.json";
      bool reuse = false;
      if (fs::exists(out.checkpoint) && fs::exists(fp_path)) {
        try {
          reuse = read_json(fp_path) == fp;
        } catch (const RuntimeError&) {
          reuse = false;
        }
      }
      std::optional<Model> model;
      if (reuse) {
        model = load_checkpoint(out.checkpoint);
        out.status = "reused";
        log("regime " + r.id + ": reusing checkpoint");
      } else {
        log("regime " + r.id + ": training (" + std::string(regime_kind_name(r.kind)) + ")");
        fs::remove(fp_path);
        std::vector<Manifest> parts;
        for (const auto& c : train_names) parts.push_back(corpora.at(c).manifest);
        const Manifest train_set = pool(parts);
        TrainContext ctx;
        if (r.dev_corpus) ctx.dev = &corpora.at(*r.dev_corpus).manifest;
        ctx.dev_decode = spec.decode;
        ctx.dev_decode.lm = nullptr;
        ctx.dev_decode.kind = DecodeKind::kGreedy;
        const std::uint64_t init_seed =
            r.init_seed ? r.init_seed : mix_seed(r.train.seed, fnv1a(r.id));
        TrainResult res = [&] {
          switch (r.kind) {
            case RegimeKind::kExp1:
            case RegimeKind::kExp2:
            case RegimeKind::kExp3:
              return train(build_model(spec.model, vocab, init_seed), train_set, r.train, ctx);
            case RegimeKind::kExp4:
            case RegimeKind::kExp5:
            case RegimeKind::kKldFt:
              return fine_tune(*base, train_set, r.train, ctx);
            case RegimeKind::kLwf:
              return lwf_train(*base, train_set, r.train, LwfOptions{}, ctx);
          }
          throw RuntimeError("unhandled regime kind");
        }();
        save_checkpoint(res.model, out.checkpoint);
        nlohmann::json hist = res.history.to_json();
        hist["wall_seconds"] = res.history.wall_seconds;
        write_json(out.history, hist);
        write_json(fp_path, fp);
        out.wall_seconds = res.history.wall_seconds;
        model = std::move(res.model);
        out.status = "trained";
      }
      out.checksum = model->checksum();

      for (const auto& t : spec.tests) {
        EvalOutcome cell;
        cell.regime = r.id;
        cell.test = t.name;
        cell.head = eval_head(r.kind, t.kind);
        cell.report = dir / ("eval-" + t.name + ".json");
        try {
          const nlohmann::json efp = {{"model_checksum", hex64(out.checksum)},
                                      {"head", cell.head},
                                      {"decode", spec.decode.to_json()},
                                      {"test", hex64(corpora.at(t.corpus).hash)}};
          std::optional<nlohmann::json> prior;
          if (fs::exists(cell.report)) {
            try {
              auto j = read_json(cell.report);
              if (j.value("fingerprint", nlohmann::json()) == efp) prior = std::move(j);
            } catch (const RuntimeError&) {
            }
          }
          if (prior) {
            cell.wer = prior->at("report").at("wer").get<double>();
            cell.status = "reused";
          } else {
            const EvalReport rep = evaluate(*model, cell.head, corpora.at(t.corpus).manifest,
                                            spec.decode, t.name);
            write_json(cell.report, {{"fingerprint", efp},
                                     {"report_hash", hex64(rep.hash())},
                                     {"report", rep.to_json()}});
            cell.wer = rep.wer();
            cell.status = "evaluated";
          }
          log("regime " + r.id + " on " + t.name + ": WER " + std::to_string(*cell.wer));
        } catch (const std::exception& e) {
          cell.status = "failed";
          cell.error = e.what();
          log("regime " + r.id + " on " + t.name + ": FAILED " + e.what());
        }
        cells[i].push_back(std::move(cell));
      }
      return true;
    } catch (const std::exception& e) {
      out.status = "failed";
      out.error = e.what();
      log("regime " + r.id + ": FAILED " + e.what());
      for (const auto& t : spec.tests) {
        cells[i].push_back({r.id, t.name, eval_head(r.kind, t.kind), "failed",
                            "regime failed: " + std::string(e.what()), std::nullopt, {}});
      }
      return false;
    }
  };

  std::mutex mu;
  std::condition_variable cv;
  auto worker = [&] {
    std::unique_lock lock(mu);
    while (true) {
      std::optional<std::size_t> pick;
      bool running = false;
      for (std::size_t i = 0; i < n; ++i) {
        if (state[i] == State::kRunning) running = true;
        if (state[i] != State::kPending || pick) continue;
        const auto& r = spec.regimes[i];
        if (r.base && index.count(*r.base)) {
          const State b = state[index.at(*r.base)];
          if (b == State::kFailed) {
            state[i] = State::kFailed;
            report.regimes[i] = {r.id, "failed", "base regime '" + *r.base + "' failed", {}, {},
                                 0, 0.0};
            for (const auto& t : spec.tests) {
              cells[i].push_back({r.id, t.name, eval_head(r.kind, t.kind), "failed",
                                  "base regime failed", std::nullopt, {}});
            }
            cv.notify_all();
            continue;
          }
          if (b != State::kDone) continue;
        }
        pick = i;
      }
      if (pick) {
        state[*pick] = State::kRunning;
        lock.unlock();
        const bool ok = process(*pick);
        lock.lock();
        state[*pick] = ok ? State::kDone : State::kFailed;
        cv.notify_all();
        continue;
      }
      if (!running) break;
      cv.wait(lock);
    }
  };
  const std::size_t workers = std::min(spec.jobs, n);
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool_threads;
    for (std::size_t w = 0; w < workers; ++w) pool_threads.emplace_back(worker);
    for (auto& t : pool_threads) t.join();
  }

  for (auto& c : cells) {
    for (auto& e : c) report.cells.push_back(std::move(e));
  }
  report.verdicts = trend_verdicts(spec.regimes, spec.tests, report.matrix());
  return report;
}

}  // namespace cslab
