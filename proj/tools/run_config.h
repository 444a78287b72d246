#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cslab/corpus.h"
#include "cslab/metrics.h"
#include "cslab/net.h"
#include "cslab/suite.h"

namespace cslab::cli {

// Sizes of the generated corpora and how each is split into train/dev/test.
struct CorpusPlan {
  std::size_t mono_utts = 1000;
  std::size_t cs_utts = 800;
  std::size_t mono_b_utts = 0;
  std::vector<double> split = {0.8, 0.1, 0.1};
};

struct LmSpec {
  std::size_t order = 3;
  double smoothing = 0.1;
  std::vector<std::string> corpora = {"mono-train", "cs-train"};
};

// The declarative run description, with defaults filled in.
struct RunConfig {
  nlohmann::json resolved;
  std::uint64_t seed = 1;
  std::filesystem::path out_dir;
  GenSpec generator;
  CorpusPlan plan;
  ModelConfig model;
  DecodeConfig decode;
  LmSpec lm;
  std::vector<RegimeSpec> regimes;
  std::vector<TestSetSpec> tests;
  std::size_t jobs = 1;

  std::filesystem::path data_dir() const { return out_dir / "data"; }
  // Names of every corpus the plan produces (mono-train, ..., cs-test).
  std::vector<std::string> corpus_names() const;
  std::filesystem::path corpus_path(const std::string& name) const;
  const RegimeSpec& regime(const std::string& id) const;
};

inline constexpr const char* kOutputRootEnv = "CSLAB_OUTPUT_ROOT";

// Reads a JSON config, applies "a.b.c=value" scalar overrides, fills in
// defaults and validates everything. Errors name the offending field path.
// Output directory precedence: out_override, then "output_dir" in the file,
// then $CSLAB_OUTPUT_ROOT/<config stem>, then ./cslab-runs/<config stem>.
RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides,
                          const std::filesystem::path& out_override = {});

// Config with only defaults, as used when no file is given.
RunConfig default_run_config(const std::vector<std::string>& overrides,
                             const std::filesystem::path& out_override = {});

}  // namespace cslab::cli
