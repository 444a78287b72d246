// cslab: generate corpora, train regimes, evaluate checkpoints and run the
// full forgetting suite from one declarative JSON config.
//
// Exit codes: 0 success, 1 runtime failure, 2 config/validation failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>

#include <CLI11.hpp>

#include "cslab/corpus.h"
#include "cslab/errors.h"
#include "cslab/hash.h"
#include "cslab/metrics.h"
#include "cslab/net.h"
#include "cslab/ngram.h"
#include "cslab/rng.h"
#include "cslab/suite.h"
#include "plots.h"
#include "run_config.h"

namespace fs = std::filesystem;
using namespace cslab;
using namespace cslab::cli;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> sets;
};

RunConfig load(const Common& c) {
  return c.config.empty() ? default_run_config(c.sets, c.out)
                          : load_run_config(c.config, c.sets, c.out);
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw RuntimeError("cannot write '" + p.string() + "'");
  out << text;
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot open '" + p.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw RuntimeError("'" + p.string() + "': " + e.what());
  }
}

std::string file_digest(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a(bytes));
}

// Frozen copy of the resolved config inside the run directory.
void freeze_config(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  write_json(cfg.out_dir / "config.resolved.json", cfg.resolved);
}

std::function<void(const std::string&)> logger(const RunConfig& cfg) {
  auto path = std::make_shared<fs::path>(cfg.out_dir / "cslab.log");
  return [path](const std::string& line) {
    std::cerr << line << '\n';
    std::ofstream(*path, std::ios::app) << line << '\n';
  };
}

void require_corpora(const RunConfig& cfg) {
  for (const auto& n : cfg.corpus_names()) {
    if (!fs::exists(cfg.corpus_path(n))) {
      throw ValidationError("corpus '" + n + "' missing at " + cfg.corpus_path(n).string() +
                            " (run `cslab generate` first)");
    }
  }
}

Vocab corpus_vocab(const RunConfig& cfg, std::vector<Manifest>& storage) {
  storage.clear();
  for (const auto& n : cfg.corpus_names()) storage.push_back(load_manifest(cfg.corpus_path(n)));
  std::vector<const Manifest*> ptrs;
  for (const auto& m : storage) ptrs.push_back(&m);
  return vocab_from_manifests(ptrs);
}

void print_cmi(const std::string& name, const Manifest& m) {
  const CmiValue v = cmi_corpus(m);
  std::printf("%-12s %6zu utts  CMI pooled %6.2f  mean/utt %6.2f\n", name.c_str(), m.size(),
              v.pooled, v.mean_utterance);
}

int cmd_generate(const Common& common) {
  const RunConfig cfg = load(common);
  freeze_config(cfg);
  fs::create_directories(cfg.data_dir());
  const auto& plan = cfg.plan;
  nlohmann::json summary = {{"generator_hash", hex64(cfg.generator.hash())},
                            {"corpora", nlohmann::json::object()}};
  auto emit = [&](const std::string& prefix, GenMode mode, std::size_t n) {
    const Manifest all = generate(cfg.generator, n, mode);
    const auto parts =
        split(all, plan.split, mix_seed(cfg.generator.seed, fnv1a(prefix + "-split")));
    const char* names[] = {"train", "dev", "test"};
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const std::string name = prefix + "-" + names[i];
      const fs::path p = cfg.corpus_path(name);
      save_manifest(parts[i], p);
      print_cmi(name, parts[i]);
      const CmiValue v = cmi_corpus(parts[i]);
      summary["corpora"][name] = {{"path", p.string()},
                                  {"utterances", parts[i].size()},
                                  {"cmi", v.to_json()},
                                  {"fnv1a", file_digest(p)}};
    }
  };
  emit("mono", GenMode::kMonoA, plan.mono_utts);
  if (plan.mono_b_utts > 0) emit("monob", GenMode::kMonoB, plan.mono_b_utts);
  emit("cs", GenMode::kCodeSwitched, plan.cs_utts);
  write_json(cfg.data_dir() / "summary.json", summary);
  std::printf("wrote %zu manifests to %s\n", cfg.corpus_names().size(),
              cfg.data_dir().string().c_str());
  return 0;
}

SuiteSpec suite_spec(const RunConfig& cfg, const DecodeConfig& decode) {
  SuiteSpec s;
  s.out_dir = cfg.out_dir / "regimes";
  for (const auto& n : cfg.corpus_names()) s.corpora[n] = cfg.corpus_path(n);
  s.model = cfg.model;
  s.regimes = cfg.regimes;
  s.tests = cfg.tests;
  s.decode = decode;
  s.jobs = cfg.jobs;
  return s;
}

// Decode settings with an optional LM attached; `lm` keeps it alive.
DecodeConfig decode_with_lm(const RunConfig& cfg, const std::string& lm_path,
                            std::optional<double> lm_weight, std::optional<std::size_t> beam,
                            std::optional<NGramLM>& lm) {
  DecodeConfig d = cfg.decode;
  const std::string path = lm_path.empty() ? d.lm_path : lm_path;
  if (!path.empty()) {
    if (!fs::exists(path)) throw ValidationError("LM file '" + path + "' not found");
    lm = NGramLM::load(path);
    d.kind = DecodeKind::kBeam;
    d.lm = &*lm;
    d.lm_path = path;
  }
  if (lm_weight) d.lm_weight = *lm_weight;
  if (beam) {
    d.kind = DecodeKind::kBeam;
    d.beam = *beam;
  }
  if (d.beam == 0) throw ValidationError("--beam must be >= 1");
  return d;
}

int cmd_train(const Common& common, const std::string& regime_id) {
  const RunConfig cfg = load(common);
  require_corpora(cfg);
  RegimeSpec r = cfg.regime(regime_id);
  if (r.base) {
    bool is_regime = false;
    for (const auto& other : cfg.regimes) is_regime = is_regime || other.id == *r.base;
    const fs::path base = is_regime ? cfg.out_dir / "regimes" / *r.base / "model.ckpt"
                                    : fs::path(*r.base);
    if (!fs::exists(base)) {
      throw ValidationError("regime '" + r.id + "' needs base checkpoint " + base.string() +
                            (is_regime ? " (train regime '" + *r.base + "' first)" : ""));
    }
    r.base = base.string();
  }
  freeze_config(cfg);
  SuiteSpec s = suite_spec(cfg, cfg.decode);
  s.regimes = {r};
  s.tests.clear();
  s.jobs = 1;
  const SuiteReport rep = run_experiment_suite(s, logger(cfg));
  const auto& out = rep.regimes.front();
  if (out.status == "failed") throw RuntimeError(out.error.value_or("training failed"));
  nlohmann::json result = {{"regime", out.id},
                           {"status", out.status},
                           {"checkpoint", out.checkpoint.string()},
                           {"history", out.history.string()},
                           {"checksum", hex64(out.checksum)},
                           {"lr", read_json(out.history)["epochs"][0]["lr"]}};
  std::cout << result.dump(2) << '\n';
  return 0;
}

int cmd_evaluate(const Common& common, const std::string& checkpoint,
                 std::vector<std::string> tests, const std::string& head_override,
                 const std::string& lm_path, std::optional<double> lm_weight,
                 std::optional<std::size_t> beam) {
  const RunConfig cfg = load(common);
  if (!fs::exists(checkpoint)) {
    throw ValidationError("checkpoint '" + checkpoint + "' not found");
  }
  require_corpora(cfg);
  std::optional<NGramLM> lm;
  const DecodeConfig decode = decode_with_lm(cfg, lm_path, lm_weight, beam, lm);
  const Model model = load_checkpoint(checkpoint);
  if (tests.empty()) {
    for (const auto& t : cfg.tests) tests.push_back(t.name);
  }
  freeze_config(cfg);
  const std::string row = fs::path(checkpoint).parent_path().filename().string() + "/" +
                          fs::path(checkpoint).stem().string();
  WerMatrix matrix;
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& name : tests) {
    const TestSetSpec* spec = nullptr;
    for (const auto& t : cfg.tests) spec = t.name == name ? &t : spec;
    if (!spec) throw ValidationError("unknown test set '" + name + "'");
    std::string head = head_override;
    if (head.empty()) {
      head = spec->kind == TestKind::kCodeSwitched && model.has_head(kCsHead)
                 ? std::string(kCsHead)
                 : std::string(kMainHead);
    }
    const Manifest test = load_manifest(cfg.corpus_path(spec->corpus));
    const EvalReport rep = evaluate(model, head, test, decode, name, cfg.jobs);
    const fs::path out = cfg.out_dir / "eval" /
                         (fs::path(checkpoint).stem().string() + "__" + name + ".json");
    write_json(out, {{"checkpoint", checkpoint},
                     {"report_hash", hex64(rep.hash())},
                     {"report", rep.to_json()}});
    matrix[row][name] = WerCell{rep.wer(), false};
    summary.push_back({{"test", name},
                       {"head", head},
                       {"wer", rep.wer()},
                       {"report", out.string()},
                       {"report_hash", hex64(rep.hash())},
                       {"decode", rep.decode}});
  }
  const std::string table = render_wer_table({row}, tests, matrix);
  write_text(cfg.out_dir / "eval" / (fs::path(checkpoint).stem().string() + "__table.txt"),
             table);
  std::cout << table << summary.dump(2) << '\n';
  return 0;
}

std::vector<std::string> test_names(const RunConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& t : cfg.tests) out.push_back(t.name);
  return out;
}

std::vector<std::string> regime_ids(const RunConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& r : cfg.regimes) out.push_back(r.id);
  return out;
}

// Table, verdicts and plots from a stored suite report.
void render_report(const RunConfig& cfg, const nlohmann::json& report) {
  WerMatrix matrix;
  for (const auto& c : report.at("cells")) {
    WerCell cell;
    if (!c.at("wer").is_null()) cell.wer = c.at("wer").get<double>();
    cell.failed = c.at("status") == "failed";
    matrix[c.at("regime").get<std::string>()][c.at("test").get<std::string>()] = cell;
  }
  const auto rows = regime_ids(cfg);
  const auto cols = test_names(cfg);
  const std::string table = render_wer_table(rows, cols, matrix);
  std::string verdicts;
  for (const auto& v : trend_verdicts(cfg.regimes, cfg.tests, matrix)) {
    verdicts += v.name + ": " + (v.pass ? (*v.pass ? "yes" : "no") : "n/a") + " (" + v.detail +
                ")\n";
  }
  std::string cmi;
  for (const auto& [name, v] : report.at("cmi").items()) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-12s CMI pooled %6.2f  mean/utt %6.2f\n", name.c_str(),
                  v.at("pooled").get<double>(), v.at("mean_utterance").get<double>());
    cmi += buf;
  }
  write_text(cfg.out_dir / "wer_table.txt", table + "\n" + verdicts);
  write_text(cfg.out_dir / "plots" / "wer_bars.svg", wer_bars_svg(rows, cols, matrix));
  std::map<std::string, std::vector<double>> losses;
  for (const auto& r : report.at("regimes")) {
    const fs::path h = r.at("history").get<std::string>();
    if (r.at("status") == "failed" || !fs::exists(h)) continue;
    for (const auto& e : read_json(h).at("epochs")) {
      losses[r.at("id").get<std::string>()].push_back(e.at("mean_loss").get<double>());
    }
  }
  write_text(cfg.out_dir / "plots" / "loss_curves.svg", loss_curves_svg(losses));
  std::cout << table << '\n' << cmi << '\n' << verdicts;
}

int cmd_suite(const Common& common, const std::string& lm_path) {
  const RunConfig cfg = load(common);
  freeze_config(cfg);
  const auto log = logger(cfg);
  bool missing = false;
  for (const auto& n : cfg.corpus_names()) missing = missing || !fs::exists(cfg.corpus_path(n));
  if (missing) {
    log("corpora missing; generating them first");
    cmd_generate(common);
  }
  std::optional<NGramLM> lm;
  const DecodeConfig decode = decode_with_lm(cfg, lm_path, std::nullopt, std::nullopt, lm);
  const SuiteReport rep = run_experiment_suite(suite_spec(cfg, decode), log);
  nlohmann::json j = rep.to_json();
  j["config"] = (cfg.out_dir / "config.resolved.json").string();
  write_json(cfg.out_dir / "suite_report.json", j);
  render_report(cfg, j);
  std::size_t failed = 0;
  for (const auto& c : rep.cells) failed += c.status == "failed";
  if (failed) std::cerr << failed << " cell(s) failed; see suite_report.json\n";
  return failed ? 1 : 0;
}

int cmd_lm_train(const Common& common, std::optional<std::size_t> order,
                 std::optional<double> smoothing, std::string out) {
  const RunConfig cfg = load(common);
  require_corpora(cfg);
  std::vector<Manifest> manifests;
  const Vocab vocab = corpus_vocab(cfg, manifests);
  std::vector<LabelSeq> sentences;
  for (const auto& name : cfg.lm.corpora) {
    for (const auto& u : load_manifest(cfg.corpus_path(name)).utterances) {
      sentences.push_back(vocab.encode(u.transcript, "utterance '" + u.id + "'"));
    }
  }
  const NGramLM lm = train_ngram_lm(sentences, order.value_or(cfg.lm.order),
                                    smoothing.value_or(cfg.lm.smoothing), vocab.size());
  if (out.empty()) out = (cfg.out_dir / "lm.json").string();
  fs::create_directories(fs::path(out).parent_path().empty() ? fs::path(".")
                                                             : fs::path(out).parent_path());
  lm.save(out);
  std::cout << nlohmann::json{{"lm", out},
                              {"order", lm.order()},
                              {"smoothing", lm.smoothing()},
                              {"vocab_size", lm.vocab_size()},
                              {"sentences", sentences.size()}}
                   .dump(2)
            << '\n';
  return 0;
}

int cmd_report(const Common& common) {
  const RunConfig cfg = load(common);
  const fs::path p = cfg.out_dir / "suite_report.json";
  if (!fs::exists(p)) throw ValidationError("no suite report at " + p.string());
  render_report(cfg, read_json(p));
  return 0;
}

int fail(int code, const char* kind, const std::string& message) {
  const nlohmann::json err = {{"error", {{"kind", kind}, {"message", message}}},
                              {"exit_code", code}};
  std::cerr << err.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Catastrophic-forgetting lab for code-switched CTC recognition"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config, "Run config (JSON)");
    sub->add_option("-o,--out", common.out, "Output directory (overrides the config)");
    sub->add_option("--set", common.sets, "Scalar override, e.g. regimes.0.train.epochs=3");
  };

  auto* gen = app.add_subcommand("generate", "Generate the synthetic corpora");
  add_common(gen);

  std::string regime;
  auto* trn = app.add_subcommand("train", "Train one regime");
  add_common(trn);
  trn->add_option("regime", regime, "Regime id from the config")->required();

  std::string checkpoint, head, lm_path;
  std::vector<std::string> tests;
  std::optional<double> lm_weight;
  std::optional<std::size_t> beam;
  auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint on test sets");
  add_common(ev);
  ev->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("-t,--test", tests, "Test set name (repeatable; default: all)");
  ev->add_option("--head", head, "Output head (default: by test kind)");
  ev->add_option("--lm", lm_path, "n-gram LM for shallow fusion (enables beam search)");
  ev->add_option("--lm-weight", lm_weight, "LM weight");
  ev->add_option("--beam", beam, "Beam width (enables beam search)");

  std::size_t jobs = 0;
  auto* su = app.add_subcommand("suite", "Run every regime and evaluate on every test set");
  add_common(su);
  su->add_option("-j,--jobs", jobs, "Parallel regime cells");
  su->add_option("--lm", lm_path, "n-gram LM for shallow fusion");

  std::optional<std::size_t> order;
  std::optional<double> smoothing;
  std::string lm_out;
  auto* lmt = app.add_subcommand("lm-train", "Train the add-k n-gram LM");
  add_common(lmt);
  lmt->add_option("--order", order, "n-gram order");
  lmt->add_option("--smoothing", smoothing, "Add-k constant");
  lmt->add_option("--lm-out", lm_out, "Output file (default: <out>/lm.json)");

  auto* rep = app.add_subcommand("report", "Re-render table, verdicts and plots of a suite");
  add_common(rep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(2, "usage", e.what());
  }

  try {
    if (*gen) return cmd_generate(common);
    if (*trn) return cmd_train(common, regime);
    if (*ev) return cmd_evaluate(common, checkpoint, tests, head, lm_path, lm_weight, beam);
    if (*su) {
      if (jobs) common.sets.push_back("jobs=" + std::to_string(jobs));
      return cmd_suite(common, lm_path);
    }
    if (*lmt) return cmd_lm_train(common, order, smoothing, lm_out);
    if (*rep) return cmd_report(common);
  } catch (const ValidationError& e) {
    return fail(2, "validation", e.what());
  } catch (const std::exception& e) {
    return fail(1, "runtime", e.what());
  }
  return 0;
}
