#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cslab/autodiff.h"
#include "cslab/posteriors.h"
#include "cslab/tensor.h"
#include "cslab/vocab.h"

namespace cslab {

// One convolution layer of the frontend. Each layer is conv1d + bias + tanh.
// Output frames: T = ceil(T_in / stride) (zero "same" padding).
struct ConvSpec {
  std::size_t kernel = 3;
  std::size_t channels = 16;
  std::size_t stride = 1;
};

struct HeadSpec {
  std::string id;
  Vocab vocab;
};

struct ModelConfig {
  std::size_t input_dim = 8;
  std::vector<ConvSpec> conv = {ConvSpec{}, ConvSpec{}};
  std::size_t recurrent_layers = 2;
  std::size_t hidden_dim = 32;
  std::vector<HeadSpec> heads;

  void validate() const;
  std::size_t trunk_out() const { return 2 * hidden_dim; }
  std::size_t output_frames(std::size_t input_frames) const;
  const HeadSpec* find_head(std::string_view id) const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

// A disjoint group of parameters that is frozen or trained as a unit:
// the shared trunk or one task head.
struct ParamCollection {
  std::string id;
  bool trainable = true;
  std::vector<NamedTensor> params;

  std::size_t count() const;
  std::uint64_t checksum() const;
};

// Gradient buffers laid out like the model's collections.
struct Gradients {
  std::map<std::string, std::vector<Tensor>> by_collection;

  double squared_norm() const;
  void scale(double k);
};

class Model {
 public:
  static constexpr std::string_view kShared = "shared";

  static Model build(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // "shared" followed by head ids in lexicographic order.
  std::vector<std::string> collection_ids() const;
  const ParamCollection& collection(std::string_view id) const;
  ParamCollection& collection(std::string_view id);
  bool has_head(std::string_view id) const;
  const Vocab& head_vocab(std::string_view id) const;
  std::vector<std::string> head_ids() const;

  // New randomly initialized head; the trunk and existing heads are untouched.
  void add_head(const std::string& id, const Vocab& vocab, std::uint64_t seed);
  void set_trainable(std::span<const std::string> ids, bool flag);

  std::uint64_t checksum() const;
  std::uint64_t checksum(std::string_view collection_id) const;
  std::size_t parameter_count() const;
  // Verifies that every parameter name is unique across collections and that
  // collection sizes add up to the total. Throws RuntimeError otherwise.
  void audit() const;

  FramePosteriors forward_posteriors(const Tensor& feats, std::string_view head_id) const;

  Gradients zero_gradients() const;

 private:
  friend class ModelBinding;
  friend Model load_checkpoint(const std::filesystem::path& path);

  Model() = default;
  void validate_head_id(const std::string& id) const;

  ModelConfig config_;
  ParamCollection shared_;
  std::map<std::string, ParamCollection, std::less<>> heads_;
};

// Places a model's parameters on a tape and builds the forward computation.
// Trainable collections become parameter leaves when gradients are tracked;
// everything else is bound as constants.
class ModelBinding {
 public:
  ModelBinding(ad::Graph& graph, const Model& model, bool track_grads);

  // [T0 x F] features -> [T x 2H] trunk states.
  ad::Var trunk(const Tensor& feats);
  // Unnormalized head scores [T x V].
  ad::Var logits(ad::Var trunk_states, std::string_view head_id);

  // Adds d(root)/d(param) for every tracked parameter; backward() must have run.
  void accumulate(Gradients& into) const;

 private:
  ad::Var lstm_direction(ad::Var x, const std::string& prefix, bool reverse);
  ad::Var param(const ParamCollection& c, std::string_view name);

  ad::Graph& graph_;
  const Model& model_;
  bool track_grads_;
  // collection id -> bound leaf per parameter (same order as the collection)
  std::map<std::string, std::vector<ad::Var>, std::less<>> bound_;
};

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace cslab
