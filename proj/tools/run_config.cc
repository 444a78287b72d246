#include "run_config.h"

#include <cstdlib>
#include <fstream>
#include <set>

#include "cslab/errors.h"

namespace cslab::cli {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kTopLevel = {"seed",  "output_dir", "generator", "corpora",
                                         "model", "decode",     "lm",        "train_defaults",
                                         "regimes", "tests",    "jobs"};

nlohmann::json default_regimes() {
  auto r = [](const char* id, const char* kind, const char* base) {
    nlohmann::json j = {{"id", id}, {"kind", kind}};
    if (base) j["base"] = base;
    return j;
  };
  return nlohmann::json::array({r("Exp1", "Exp1", nullptr), r("Exp2", "Exp2", nullptr),
                                r("Exp3", "Exp3", nullptr), r("Exp4", "Exp4", "Exp1"),
                                r("Exp5", "Exp5", "Exp3"), r("LWF", "LWF", "Exp1")});
}

nlohmann::json default_tests() {
  return nlohmann::json::array({{{"name", "mono-test"}, {"corpus", "mono-test"}, {"kind", "mono"}},
                                {{"name", "cs-test"}, {"corpus", "cs-test"}, {"kind", "cs"}}});
}

// Desk-scale training block; the library defaults follow the original
// large-corpus recipe, which is far too slow for models this small.
nlohmann::json default_train() {
  return {{"lr", 0.5}, {"epochs", 15}, {"batch_size", 16}, {"clip_norm", 5.0}};
}

void apply_override(nlohmann::json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValidationError("override '" + assignment + "': expected path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  if (value.is_structured()) {
    throw ValidationError("override '" + path + "': only scalar values can be overridden");
  }
  nlohmann::json* cur = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ValidationError("override '" + path + "': empty path component");
    if (cur->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(key);
      } catch (const std::exception&) {
        throw ValidationError("override '" + path + "': '" + key + "' is not an array index");
      }
      if (idx >= cur->size()) {
        throw ValidationError("override '" + path + "': index " + key + " out of range");
      }
      cur = &(*cur)[idx];
    } else {
      if (cur->is_null()) *cur = nlohmann::json::object();
      if (!cur->is_object()) {
        throw ValidationError("override '" + path + "': '" + key + "' is below a scalar");
      }
      cur = &(*cur)[key];
    }
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (cur->is_structured()) {
    throw ValidationError("override '" + path + "': target is not a scalar field");
  }
  *cur = std::move(value);
}

template <typename F>
auto at_path(const std::string& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

RunConfig resolve(nlohmann::json raw, const std::vector<std::string>& overrides,
                  const fs::path& out_override, const std::string& stem) {
  if (!raw.is_object()) throw ValidationError("config: top level must be an object");
  if (!raw.contains("regimes")) raw["regimes"] = default_regimes();
  if (!raw.contains("tests")) raw["tests"] = default_tests();
  for (const auto& o : overrides) apply_override(raw, o);
  for (const auto& [k, v] : raw.items()) {
    if (!kTopLevel.count(k)) throw ValidationError("config." + k + ": unknown field");
  }

  RunConfig c;
  c.seed = at_path("config.seed", [&] { return raw.value("seed", std::uint64_t{1}); });
  c.jobs = at_path("config.jobs", [&] { return raw.value("jobs", std::size_t{1}); });
  if (c.jobs == 0) throw ValidationError("config.jobs: must be >= 1");

  nlohmann::json gen = {{"sigma", 0.4}, {"confusion_distance", 0.3}, {"seed", c.seed}};
  if (raw.contains("generator")) {
    if (!raw["generator"].is_object()) throw ValidationError("config.generator: expected object");
    gen.update(raw["generator"]);
  }
  c.generator = at_path("config.generator", [&] {
    GenSpec g = GenSpec::from_json(gen);
    g.validate();
    return g;
  });

  if (raw.contains("corpora")) {
    at_path("config.corpora", [&] {
      const auto& j = raw["corpora"];
      c.plan.mono_utts = j.value("mono_utts", c.plan.mono_utts);
      c.plan.cs_utts = j.value("cs_utts", c.plan.cs_utts);
      c.plan.mono_b_utts = j.value("mono_b_utts", c.plan.mono_b_utts);
      if (j.contains("split")) c.plan.split = j["split"].get<std::vector<double>>();
      return 0;
    });
  }
  if (c.plan.mono_utts == 0 || c.plan.cs_utts == 0) {
    throw ValidationError("config.corpora: mono_utts and cs_utts must be >= 1");
  }
  if (c.plan.split.size() != 3) {
    throw ValidationError("config.corpora.split: expected three fractions (train, dev, test)");
  }

  nlohmann::json model = ModelConfig{}.to_json();
  model["input_dim"] = c.generator.feat_dim;
  if (raw.contains("model")) {
    if (!raw["model"].is_object()) throw ValidationError("config.model: expected object");
    model.update(raw["model"]);
  }
  model["heads"] = nlohmann::json::array();
  c.model = at_path("config.model", [&] {
    // Heads are attached per regime; validate the trunk with the corpus vocabulary.
    ModelConfig probe = ModelConfig::from_json(model);
    probe.heads = {{std::string(kMainHead), union_vocab(c.generator)}};
    probe.validate();
    return ModelConfig::from_json(model);
  });
  if (c.model.input_dim != c.generator.feat_dim) {
    throw ValidationError("config.model.input_dim: must equal generator.feat_dim");
  }

  if (raw.contains("decode")) {
    c.decode = at_path("config.decode", [&] { return DecodeConfig::from_json(raw["decode"]); });
  }
  if (raw.contains("lm")) {
    at_path("config.lm", [&] {
      const auto& j = raw["lm"];
      c.lm.order = j.value("order", c.lm.order);
      c.lm.smoothing = j.value("smoothing", c.lm.smoothing);
      if (j.contains("corpora")) c.lm.corpora = j["corpora"].get<std::vector<std::string>>();
      return 0;
    });
  }

  nlohmann::json train_defaults = default_train();
  if (raw.contains("train_defaults")) {
    if (!raw["train_defaults"].is_object()) {
      throw ValidationError("config.train_defaults: expected object");
    }
    train_defaults.update(raw["train_defaults"]);
  }
  train_defaults.emplace("seed", c.seed);
  if (!raw["regimes"].is_array()) throw ValidationError("config.regimes: expected array");
  for (std::size_t i = 0; i < raw["regimes"].size(); ++i) {
    const std::string where = "config.regimes[" + std::to_string(i) + "]";
    nlohmann::json r = raw["regimes"][i];
    if (!r.is_object()) throw ValidationError(where + ": expected object");
    nlohmann::json t = train_defaults;
    if (r.contains("train")) {
      if (!r["train"].is_object()) throw ValidationError(where + ".train: expected object");
      t.update(r["train"]);
    }
    r["train"] = t;
    c.regimes.push_back(at_path(where, [&] { return RegimeSpec::from_json(r); }));
    raw["regimes"][i] = c.regimes.back().to_json();
  }

  if (!raw["tests"].is_array()) throw ValidationError("config.tests: expected array");
  for (std::size_t i = 0; i < raw["tests"].size(); ++i) {
    const std::string where = "config.tests[" + std::to_string(i) + "]";
    c.tests.push_back(at_path(where, [&] {
      const auto& j = raw["tests"][i];
      TestSetSpec t;
      t.name = j.at("name").get<std::string>();
      t.corpus = j.value("corpus", t.name);
      const std::string kind = j.value("kind", std::string("mono"));
      if (kind == "mono") {
        t.kind = TestKind::kMono;
      } else if (kind == "cs") {
        t.kind = TestKind::kCodeSwitched;
      } else {
        throw ValidationError("kind: expected mono or cs, got '" + kind + "'");
      }
      return t;
    }));
  }

  if (!out_override.empty()) {
    c.out_dir = out_override;
  } else if (raw.contains("output_dir")) {
    c.out_dir = at_path("config.output_dir", [&] { return raw["output_dir"].get<std::string>(); });
  } else if (const char* root = std::getenv(kOutputRootEnv); root && *root) {
    c.out_dir = fs::path(root) / stem;
  } else {
    c.out_dir = fs::path("cslab-runs") / stem;
  }

  // Names must resolve against the generated corpora.
  const auto names = c.corpus_names();
  const std::set<std::string> known(names.begin(), names.end());
  SuiteSpec probe;
  for (const auto& n : names) probe.corpora[n] = c.corpus_path(n);
  probe.regimes = c.regimes;
  probe.tests = c.tests;
  probe.jobs = c.jobs;
  probe.validate();
  for (const auto& n : c.lm.corpora) {
    if (!known.count(n)) throw ValidationError("config.lm.corpora: unknown corpus '" + n + "'");
  }

  raw["seed"] = c.seed;
  raw["jobs"] = c.jobs;
  raw["generator"] = c.generator.to_json();
  raw["corpora"] = {{"mono_utts", c.plan.mono_utts},
                    {"cs_utts", c.plan.cs_utts},
                    {"mono_b_utts", c.plan.mono_b_utts},
                    {"split", c.plan.split}};
  nlohmann::json m = c.model.to_json();
  m.erase("heads");
  raw["model"] = m;
  raw["decode"] = c.decode.to_json();
  raw["lm"] = {{"order", c.lm.order}, {"smoothing", c.lm.smoothing}, {"corpora", c.lm.corpora}};
  raw["train_defaults"] = train_defaults;
  raw["output_dir"] = c.out_dir.string();
  c.resolved = std::move(raw);
  return c;
}

}  // namespace

std::vector<std::string> RunConfig::corpus_names() const {
  std::vector<std::string> out;
  auto add = [&](const std::string& prefix) {
    for (const char* part : {"train", "dev", "test"}) out.push_back(prefix + "-" + part);
  };
  add("mono");
  if (plan.mono_b_utts > 0) add("monob");
  add("cs");
  return out;
}

fs::path RunConfig::corpus_path(const std::string& name) const {
  return data_dir() / (name + ".jsonl");
}

const RegimeSpec& RunConfig::regime(const std::string& id) const {
  for (const auto& r : regimes) {
    if (r.id == id) return r;
  }
  throw ValidationError("no regime '" + id + "' in the config");
}

RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& overrides,
                          const fs::path& out_override) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path.string() + "'");
  nlohmann::json raw;
  try {
    raw = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("config '" + path.string() + "': " + e.what());
  }
  return resolve(std::move(raw), overrides, out_override, path.stem().string());
}

RunConfig default_run_config(const std::vector<std::string>& overrides,
                             const fs::path& out_override) {
  return resolve(nlohmann::json::object(), overrides, out_override, "default");
}

}  // namespace cslab::cli
