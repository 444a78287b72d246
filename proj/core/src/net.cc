#include "cslab/net.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "cslab/errors.h"
#include "cslab/hash.h"
#include "cslab/rng.h"

namespace cslab {

namespace {

Tensor uniform_init(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

ParamCollection make_head(const std::string& id, std::size_t trunk_out, const Vocab& vocab,
                          std::uint64_t seed) {
  Rng rng(mix_seed(seed, fnv1a("head:" + id)));
  ParamCollection c;
  c.id = id;
  c.params.push_back({"w", uniform_init({trunk_out, vocab.size()}, trunk_out, rng)});
  c.params.push_back({"b", Tensor({vocab.size()})});
  return c;
}

std::string lstm_prefix(std::size_t layer, bool reverse) {
  return "lstm" + std::to_string(layer) + (reverse ? ".bw" : ".fw");
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  if (input_dim == 0) throw ValidationError("model: input_dim must be >= 1");
  if (conv.empty()) throw ValidationError("model: at least one conv layer is required");
  for (std::size_t i = 0; i < conv.size(); ++i) {
    if (conv[i].kernel == 0 || conv[i].channels == 0 || conv[i].stride == 0) {
      throw ValidationError("model: conv layer " + std::to_string(i) +
                            " has a zero kernel, channel count or stride");
    }
  }
  if (recurrent_layers == 0) throw ValidationError("model: recurrent_layers must be >= 1");
  if (hidden_dim == 0) throw ValidationError("model: hidden_dim must be >= 1");
  if (heads.empty()) throw ValidationError("model: at least one head is required");
  std::set<std::string> ids;
  for (const auto& h : heads) {
    if (h.id.empty() || h.id == Model::kShared) {
      throw ValidationError("model: invalid head id '" + h.id + "'");
    }
    if (!ids.insert(h.id).second) {
      throw ValidationError("model: duplicate head id '" + h.id + "'");
    }
    if (h.vocab.size() < 2) {
      throw ValidationError("model: head '" + h.id + "' needs at least one non-blank symbol");
    }
  }
}

std::size_t ModelConfig::output_frames(std::size_t input_frames) const {
  std::size_t t = input_frames;
  for (const auto& c : conv) t = (t + c.stride - 1) / c.stride;
  return t;
}

const HeadSpec* ModelConfig::find_head(std::string_view id) const {
  for (const auto& h : heads) {
    if (h.id == id) return &h;
  }
  return nullptr;
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json convs = nlohmann::json::array();
  for (const auto& c : conv) {
    convs.push_back({{"kernel", c.kernel}, {"channels", c.channels}, {"stride", c.stride}});
  }
  nlohmann::json hs = nlohmann::json::array();
  for (const auto& h : heads) hs.push_back({{"id", h.id}, {"vocab", h.vocab.to_json()}});
  return {{"input_dim", input_dim},
          {"conv", convs},
          {"recurrent_layers", recurrent_layers},
          {"hidden_dim", hidden_dim},
          {"heads", hs}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  try {
    cfg.input_dim = j.value("input_dim", cfg.input_dim);
    if (j.contains("conv")) {
      cfg.conv.clear();
      for (const auto& c : j.at("conv")) {
        ConvSpec s;
        s.kernel = c.value("kernel", s.kernel);
        s.channels = c.value("channels", s.channels);
        s.stride = c.value("stride", s.stride);
        cfg.conv.push_back(s);
      }
    }
    cfg.recurrent_layers = j.value("recurrent_layers", cfg.recurrent_layers);
    cfg.hidden_dim = j.value("hidden_dim", cfg.hidden_dim);
    if (j.contains("heads")) {
      for (const auto& h : j.at("heads")) {
        cfg.heads.push_back({h.at("id").get<std::string>(), Vocab::from_json(h.at("vocab"))});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// ParamCollection / Gradients

std::size_t ParamCollection::count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

std::uint64_t ParamCollection::checksum() const {
  Fnv1a h;
  h.update(id);
  for (const auto& p : params) {
    h.update(p.name);
    h.update(p.value.data());
  }
  return h.digest();
}

double Gradients::squared_norm() const {
  double s = 0.0;
  for (const auto& [id, tensors] : by_collection) {
    for (const auto& t : tensors) {
      for (double v : t.data()) s += v * v;
    }
  }
  return s;
}

void Gradients::scale(double k) {
  for (auto& [id, tensors] : by_collection) {
    for (auto& t : tensors) {
      for (auto& v : t.data()) v *= k;
    }
  }
}

// ---------------------------------------------------------------------------
// Model

Model Model::build(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.config_ = cfg;
  m.shared_.id = std::string(kShared);
  Rng rng(mix_seed(seed, fnv1a("shared")));
  std::size_t in = cfg.input_dim;
  for (std::size_t i = 0; i < cfg.conv.size(); ++i) {
    const auto& c = cfg.conv[i];
    const std::string p = "conv" + std::to_string(i);
    m.shared_.params.push_back(
        {p + ".w", uniform_init({c.kernel * in, c.channels}, c.kernel * in, rng)});
    m.shared_.params.push_back({p + ".b", Tensor({c.channels})});
    in = c.channels;
  }
  const std::size_t h = cfg.hidden_dim;
  for (std::size_t l = 0; l < cfg.recurrent_layers; ++l) {
    for (bool reverse : {false, true}) {
      const std::string p = lstm_prefix(l, reverse);
      m.shared_.params.push_back({p + ".wx", uniform_init({in, 4 * h}, in, rng)});
      m.shared_.params.push_back({p + ".wh", uniform_init({h, 4 * h}, h, rng)});
      m.shared_.params.push_back({p + ".b", Tensor({4 * h})});
    }
    in = 2 * h;
  }
  for (const auto& head : cfg.heads) {
    m.heads_.emplace(head.id, make_head(head.id, cfg.trunk_out(), head.vocab, seed));
  }
  return m;
}

std::vector<std::string> Model::collection_ids() const {
  std::vector<std::string> ids{std::string(kShared)};
  for (const auto& [id, c] : heads_) ids.push_back(id);
  return ids;
}

const ParamCollection& Model::collection(std::string_view id) const {
  if (id == kShared) return shared_;
  auto it = heads_.find(id);
  if (it == heads_.end()) {
    throw ValidationError("model: unknown parameter collection '" + std::string(id) + "'");
  }
  return it->second;
}

ParamCollection& Model::collection(std::string_view id) {
  return const_cast<ParamCollection&>(std::as_const(*this).collection(id));
}

bool Model::has_head(std::string_view id) const { return heads_.find(id) != heads_.end(); }

const Vocab& Model::head_vocab(std::string_view id) const {
  const HeadSpec* h = config_.find_head(id);
  if (!h) throw ValidationError("model: unknown head '" + std::string(id) + "'");
  return h->vocab;
}

std::vector<std::string> Model::head_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, c] : heads_) ids.push_back(id);
  return ids;
}

void Model::validate_head_id(const std::string& id) const {
  if (id.empty() || id == kShared) {
    throw ValidationError("model: invalid head id '" + id + "'");
  }
  if (has_head(id)) throw ValidationError("model: head '" + id + "' already exists");
}

void Model::add_head(const std::string& id, const Vocab& vocab, std::uint64_t seed) {
  validate_head_id(id);
  if (vocab.size() < 2) {
    throw ValidationError("model: head '" + id + "' needs at least one non-blank symbol");
  }
  heads_.emplace(id, make_head(id, config_.trunk_out(), vocab, seed));
  config_.heads.push_back({id, vocab});
}

void Model::set_trainable(std::span<const std::string> ids, bool flag) {
  for (const auto& id : ids) collection(id);  // validate all before mutating
  for (const auto& id : ids) collection(id).trainable = flag;
}

std::uint64_t Model::checksum() const {
  Fnv1a h;
  for (const auto& id : collection_ids()) h.update_u64(collection(id).checksum());
  return h.digest();
}

std::uint64_t Model::checksum(std::string_view collection_id) const {
  return collection(collection_id).checksum();
}

std::size_t Model::parameter_count() const {
  std::size_t n = shared_.count();
  for (const auto& [id, c] : heads_) n += c.count();
  return n;
}

void Model::audit() const {
  std::set<std::string> names;
  std::size_t total = 0;
  std::size_t per_collection = 0;
  for (const auto& id : collection_ids()) {
    const auto& c = collection(id);
    per_collection += c.count();
    for (const auto& p : c.params) {
      total += p.value.size();
      if (!names.insert(id + "/" + p.name).second) {
        throw RuntimeError("model audit: parameter '" + id + "/" + p.name +
                           "' appears twice");
      }
    }
  }
  if (heads_.size() != config_.heads.size()) {
    throw RuntimeError("model audit: head table and config disagree");
  }
  if (total != per_collection || total != parameter_count()) {
    throw RuntimeError("model audit: parameter counts do not add up");
  }
}

FramePosteriors Model::forward_posteriors(const Tensor& feats, std::string_view head_id) const {
  if (!has_head(head_id)) {
    throw ValidationError("model: unknown head '" + std::string(head_id) + "'");
  }
  ad::Graph g;
  ModelBinding binding(g, *this, false);
  const ad::Var h = binding.trunk(feats);
  return FramePosteriors::from_logits(g.value(binding.logits(h, head_id)));
}

Gradients Model::zero_gradients() const {
  Gradients g;
  for (const auto& id : collection_ids()) {
    auto& v = g.by_collection[id];
    for (const auto& p : collection(id).params) v.emplace_back(p.value.shape());
  }
  return g;
}

// ---------------------------------------------------------------------------
// ModelBinding

ModelBinding::ModelBinding(ad::Graph& graph, const Model& model, bool track_grads)
    : graph_(graph), model_(model), track_grads_(track_grads) {
  for (const auto& id : model.collection_ids()) {
    const auto& c = model.collection(id);
    auto& vars = bound_[id];
    vars.reserve(c.params.size());
    const bool as_param = track_grads && c.trainable;
    for (const auto& p : c.params) {
      vars.push_back(as_param ? graph.parameter(p.value) : graph.constant(p.value));
    }
  }
}

ad::Var ModelBinding::param(const ParamCollection& c, std::string_view name) {
  const auto& vars = bound_.find(c.id)->second;
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    if (c.params[i].name == name) return vars[i];
  }
  throw RuntimeError("model: missing parameter '" + c.id + "/" + std::string(name) + "'");
}

ad::Var ModelBinding::trunk(const Tensor& feats) {
  const auto& cfg = model_.config();
  if (feats.rank() != 2 || feats.cols() != cfg.input_dim || feats.rows() == 0) {
    throw ValidationError("model: features must be [T0 x " + std::to_string(cfg.input_dim) +
                          "], got " + shape_str(feats.shape()));
  }
  const auto& shared = model_.collection(Model::kShared);
  ad::Var x = graph_.constant(feats);
  for (std::size_t i = 0; i < cfg.conv.size(); ++i) {
    const std::string p = "conv" + std::to_string(i);
    x = graph_.conv1d(x, param(shared, p + ".w"), cfg.conv[i].kernel, cfg.conv[i].stride);
    x = graph_.tanh(graph_.add(x, param(shared, p + ".b")));
  }
  for (std::size_t l = 0; l < cfg.recurrent_layers; ++l) {
    const ad::Var both[] = {lstm_direction(x, lstm_prefix(l, false), false),
                            lstm_direction(x, lstm_prefix(l, true), true)};
    x = graph_.concat(both, 1);
  }
  return x;
}

ad::Var ModelBinding::lstm_direction(ad::Var x, const std::string& prefix, bool reverse) {
  const auto& shared = model_.collection(Model::kShared);
  const std::size_t hd = model_.config().hidden_dim;
  const ad::Var wh = param(shared, prefix + ".wh");
  const ad::Var xw = graph_.add(graph_.matmul(x, param(shared, prefix + ".wx")),
                                param(shared, prefix + ".b"));
  const std::size_t steps = graph_.value(xw).rows();
  std::vector<ad::Var> outputs(steps);
  ad::Var h;
  ad::Var c;
  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t t = reverse ? steps - 1 - step : step;
    ad::Var gates = graph_.slice(xw, 0, t, t + 1);
    if (h.valid()) gates = graph_.add(gates, graph_.matmul(h, wh));
    const ad::Var in_gate = graph_.sigmoid(graph_.slice(gates, 1, 0, hd));
    const ad::Var forget = graph_.sigmoid(graph_.slice(gates, 1, hd, 2 * hd));
    const ad::Var cell_in = graph_.tanh(graph_.slice(gates, 1, 2 * hd, 3 * hd));
    const ad::Var out_gate = graph_.sigmoid(graph_.slice(gates, 1, 3 * hd, 4 * hd));
    const ad::Var written = graph_.mul(in_gate, cell_in);
    c = c.valid() ? graph_.add(graph_.mul(forget, c), written) : written;
    h = graph_.mul(out_gate, graph_.tanh(c));
    outputs[t] = h;
  }
  return graph_.concat(outputs, 0);
}

ad::Var ModelBinding::logits(ad::Var trunk_states, std::string_view head_id) {
  if (!model_.has_head(head_id)) {
    throw ValidationError("model: unknown head '" + std::string(head_id) + "'");
  }
  const auto& head = model_.collection(head_id);
  return graph_.add(graph_.matmul(trunk_states, param(head, "w")), param(head, "b"));
}

void ModelBinding::accumulate(Gradients& into) const {
  if (!track_grads_) return;
  for (const auto& [id, vars] : bound_) {
    const auto& c = model_.collection(id);
    if (!c.trainable) continue;
    auto& dst = into.by_collection.at(id);
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const Tensor& g = graph_.grad(vars[i]);
      for (std::size_t k = 0; k < g.size(); ++k) dst[i][k] += g[k];
    }
  }
}

}  // namespace cslab
