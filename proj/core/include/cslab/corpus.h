#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cslab/tensor.h"
#include "cslab/vocab.h"

namespace cslab {

struct Utterance {
  std::string id;
  Tensor feats;  // T0 x F
  std::vector<std::string> transcript;
  std::vector<LangTag> lang_tags;
  // Record fields this library does not interpret; written back unchanged.
  nlohmann::json extra = nlohmann::json::object();
};

// Synthetic bilingual "acoustics": every symbol owns a fixed random prototype
// vector and an utterance is the concatenation of its symbols' prototypes, each
// held for a random number of frames, plus Gaussian noise. The first
// `confusable` B symbols sit `confusion_distance` away from the A symbol with
// the same index, which makes the two languages acoustically confusable.
struct GenSpec {
  std::size_t vocab_a = 6;
  std::size_t vocab_b = 6;
  std::size_t shared = 2;
  double shared_prob = 0.15;  // per-token chance of drawing a shared symbol
  double switch_prob = 0.3;   // per-token chance of switching language (code-switched mode)
  std::size_t utt_len_min = 3;
  std::size_t utt_len_max = 6;
  std::size_t frames_min = 2;  // frames per symbol, uniform
  std::size_t frames_max = 4;
  double sigma = 0.1;
  std::size_t feat_dim = 8;
  std::size_t confusable = 3;
  double confusion_distance = 0.6;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static GenSpec from_json(const nlohmann::json& j);
  std::uint64_t hash() const;
};

enum class GenMode { kMonoA, kMonoB, kCodeSwitched };

std::string_view mode_name(GenMode mode);
GenMode parse_mode(std::string_view s);

// Blank, shared symbols s0.., language A a0.., language B b0.. .
Vocab union_vocab(const GenSpec& spec);

struct Manifest {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Utterance> utterances;

  std::size_t size() const { return utterances.size(); }
  std::size_t feat_dim() const;
};

// Deterministic per (spec, n_utts, mode). Prototypes depend only on the spec,
// so corpora generated from one spec in different modes share an acoustic
// space; utterance streams differ per mode.
Manifest generate(const GenSpec& spec, std::size_t n_utts, GenMode mode);

// Concatenation in argument order. Rejects duplicate ids and mismatched
// feature dimensions.
Manifest pool(std::span<const Manifest> parts);

// Disjoint, exhaustive, seed-deterministic partition. Fractions must be
// positive and sum to 1; a split that would be empty is an error.
std::vector<Manifest> split(const Manifest& m, std::span<const double> fractions,
                            std::uint64_t seed);

enum class FeatureStorage { kInline, kExternal };

// Line-delimited JSON: one header record {"header": true, ...meta}, then one
// record per utterance. External features go next to the manifest as raw
// little-endian float64 files with a (u64 T0, u64 F) header.
void save_manifest(const Manifest& m, const std::filesystem::path& path,
                   FeatureStorage storage = FeatureStorage::kInline);
Manifest load_manifest(const std::filesystem::path& path);

Tensor read_feature_file(const std::filesystem::path& path);
void write_feature_file(const Tensor& feats, const std::filesystem::path& path);

}  // namespace cslab
