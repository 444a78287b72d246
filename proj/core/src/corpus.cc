#include "cslab/corpus.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "cslab/errors.h"
#include "cslab/hash.h"
#include "cslab/rng.h"

namespace cslab {

namespace {

struct SymbolTable {
  std::vector<std::string> shared, a, b;
  std::vector<Tensor> shared_proto, a_proto, b_proto;
};

Tensor random_unit(std::size_t dim, Rng& rng) {
  Tensor v({dim});
  double norm = 0.0;
  while (norm < 1e-12) {
    norm = 0.0;
    for (auto& x : v.data()) {
      x = rng.normal();
      norm += x * x;
    }
  }
  norm = std::sqrt(norm);
  for (auto& x : v.data()) x /= norm;
  return v;
}

Tensor random_proto(std::size_t dim, Rng& rng) {
  Tensor v({dim});
  for (auto& x : v.data()) x = rng.normal();
  return v;
}

SymbolTable make_symbols(const GenSpec& spec) {
  SymbolTable s;
  Rng rng(mix_seed(spec.seed, fnv1a("prototypes")));
  for (std::size_t i = 0; i < spec.shared; ++i) {
    s.shared.push_back("s" + std::to_string(i));
    s.shared_proto.push_back(random_proto(spec.feat_dim, rng));
  }
  for (std::size_t i = 0; i < spec.vocab_a; ++i) {
    s.a.push_back("a" + std::to_string(i));
    s.a_proto.push_back(random_proto(spec.feat_dim, rng));
  }
  for (std::size_t i = 0; i < spec.vocab_b; ++i) {
    s.b.push_back("b" + std::to_string(i));
    if (i < spec.confusable && i < spec.vocab_a) {
      Tensor p = s.a_proto[i];
      const Tensor dir = random_unit(spec.feat_dim, rng);
      for (std::size_t k = 0; k < p.size(); ++k) p[k] += spec.confusion_distance * dir[k];
      s.b_proto.push_back(std::move(p));
    } else {
      s.b_proto.push_back(random_proto(spec.feat_dim, rng));
    }
  }
  return s;
}

std::string id_prefix(GenMode mode) {
  switch (mode) {
    case GenMode::kMonoA: return "monoA";
    case GenMode::kMonoB: return "monoB";
    case GenMode::kCodeSwitched: return "cs";
  }
  return "utt";
}

[[noreturn]] void manifest_error(const std::filesystem::path& path, std::size_t line,
                                 const std::string& what) {
  throw ValidationError("manifest '" + path.string() + "' line " + std::to_string(line) +
                        ": " + what);
}

}  // namespace

void GenSpec::validate() const {
  if (vocab_a == 0 && vocab_b == 0 && shared == 0) {
    throw ValidationError("generator: empty vocabulary");
  }
  if (!(switch_prob >= 0.0 && switch_prob <= 1.0)) {
    throw ValidationError("generator: switch_prob must be in [0, 1]");
  }
  if (!(shared_prob >= 0.0 && shared_prob <= 1.0)) {
    throw ValidationError("generator: shared_prob must be in [0, 1]");
  }
  if (!(sigma >= 0.0)) throw ValidationError("generator: sigma must be >= 0");
  if (utt_len_min == 0 || utt_len_min > utt_len_max) {
    throw ValidationError("generator: need 1 <= utt_len_min <= utt_len_max");
  }
  if (frames_min == 0 || frames_min > frames_max) {
    throw ValidationError("generator: need 1 <= frames_min <= frames_max");
  }
  if (feat_dim == 0) throw ValidationError("generator: feat_dim must be >= 1");
}

nlohmann::json GenSpec::to_json() const {
  return {{"vocab_a", vocab_a},
          {"vocab_b", vocab_b},
          {"shared", shared},
          {"shared_prob", shared_prob},
          {"switch_prob", switch_prob},
          {"utt_len_min", utt_len_min},
          {"utt_len_max", utt_len_max},
          {"frames_min", frames_min},
          {"frames_max", frames_max},
          {"sigma", sigma},
          {"feat_dim", feat_dim},
          {"confusable", confusable},
          {"confusion_distance", confusion_distance},
          {"seed", seed}};
}

GenSpec GenSpec::from_json(const nlohmann::json& j) {
  GenSpec s;
  try {
    s.vocab_a = j.value("vocab_a", s.vocab_a);
    s.vocab_b = j.value("vocab_b", s.vocab_b);
    s.shared = j.value("shared", s.shared);
    s.shared_prob = j.value("shared_prob", s.shared_prob);
    s.switch_prob = j.value("switch_prob", s.switch_prob);
    s.utt_len_min = j.value("utt_len_min", s.utt_len_min);
    s.utt_len_max = j.value("utt_len_max", s.utt_len_max);
    s.frames_min = j.value("frames_min", s.frames_min);
    s.frames_max = j.value("frames_max", s.frames_max);
    s.sigma = j.value("sigma", s.sigma);
    s.feat_dim = j.value("feat_dim", s.feat_dim);
    s.confusable = j.value("confusable", s.confusable);
    s.confusion_distance = j.value("confusion_distance", s.confusion_distance);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("generator spec: ") + e.what());
  }
  return s;
}

std::uint64_t GenSpec::hash() const { return fnv1a(to_json().dump()); }

std::string_view mode_name(GenMode mode) {
  switch (mode) {
    case GenMode::kMonoA: return "monolingual-A";
    case GenMode::kMonoB: return "monolingual-B";
    case GenMode::kCodeSwitched: return "code-switched";
  }
  return "?";
}

GenMode parse_mode(std::string_view s) {
  if (s == "monolingual-A") return GenMode::kMonoA;
  if (s == "monolingual-B") return GenMode::kMonoB;
  if (s == "code-switched") return GenMode::kCodeSwitched;
  throw ValidationError("unknown generation mode '" + std::string(s) + "'");
}

Vocab union_vocab(const GenSpec& spec) {
  const SymbolTable s = make_symbols(spec);
  std::vector<std::pair<std::string, LangTag>> entries;
  for (const auto& x : s.shared) entries.emplace_back(x, LangTag::kShared);
  for (const auto& x : s.a) entries.emplace_back(x, LangTag::kA);
  for (const auto& x : s.b) entries.emplace_back(x, LangTag::kB);
  return Vocab(std::move(entries));
}

std::size_t Manifest::feat_dim() const {
  return utterances.empty() ? 0 : utterances.front().feats.cols();
}

Manifest generate(const GenSpec& spec, std::size_t n_utts, GenMode mode) {
  spec.validate();
  if (n_utts == 0) throw ValidationError("generator: n_utts must be >= 1");
  const SymbolTable sym = make_symbols(spec);
  const LangTag start = mode == GenMode::kMonoB ? LangTag::kB : LangTag::kA;
  auto pool_size = [&](LangTag l) { return l == LangTag::kA ? sym.a.size() : sym.b.size(); };
  if (pool_size(start) == 0 && spec.shared == 0) {
    throw ValidationError("generator: empty vocabulary for " + std::string(mode_name(mode)));
  }
  if (mode == GenMode::kCodeSwitched && (sym.a.empty() || sym.b.empty())) {
    throw ValidationError("generator: code-switched mode needs both languages");
  }

  Rng rng(mix_seed(spec.seed, fnv1a(mode_name(mode))));
  Manifest m;
  m.meta = {{"language_pair", "A-B"},
            {"mode", std::string(mode_name(mode))},
            {"generator", spec.to_json()},
            {"generator_hash", hex64(spec.hash())}};
  m.utterances.reserve(n_utts);
  for (std::size_t u = 0; u < n_utts; ++u) {
    Utterance utt;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "%s-%06zu", id_prefix(mode).c_str(), u);
    utt.id = idbuf;
    const std::size_t len = static_cast<std::size_t>(
        rng.between(static_cast<int>(spec.utt_len_min), static_cast<int>(spec.utt_len_max)));
    LangTag lang = start;
    std::vector<const Tensor*> protos;
    for (std::size_t i = 0; i < len; ++i) {
      if (mode == GenMode::kCodeSwitched && i > 0 && rng.bernoulli(spec.switch_prob)) {
        lang = lang == LangTag::kA ? LangTag::kB : LangTag::kA;
      }
      // Adjacent identical symbols would be acoustically inseparable, so redraw.
      while (true) {
        std::string name;
        const Tensor* proto = nullptr;
        LangTag tag = lang;
        const bool use_shared =
            spec.shared > 0 && (pool_size(lang) == 0 || rng.bernoulli(spec.shared_prob));
        if (use_shared) {
          const auto k = rng.below(sym.shared.size());
          name = sym.shared[k];
          proto = &sym.shared_proto[k];
          tag = LangTag::kShared;
        } else if (lang == LangTag::kA) {
          const auto k = rng.below(sym.a.size());
          name = sym.a[k];
          proto = &sym.a_proto[k];
        } else {
          const auto k = rng.below(sym.b.size());
          name = sym.b[k];
          proto = &sym.b_proto[k];
        }
        if (!utt.transcript.empty() && utt.transcript.back() == name) continue;
        utt.transcript.push_back(name);
        utt.lang_tags.push_back(tag);
        protos.push_back(proto);
        break;
      }
    }
    std::vector<double> frames;
    std::size_t rows = 0;
    for (const Tensor* p : protos) {
      const int dur =
          rng.between(static_cast<int>(spec.frames_min), static_cast<int>(spec.frames_max));
      for (int d = 0; d < dur; ++d) {
        for (double x : p->data()) frames.push_back(x + spec.sigma * rng.normal());
        ++rows;
      }
    }
    utt.feats = Tensor({rows, spec.feat_dim}, std::move(frames));
    m.utterances.push_back(std::move(utt));
  }
  return m;
}

Manifest pool(std::span<const Manifest> parts) {
  if (parts.empty()) throw ValidationError("pool: no manifests");
  if (parts.size() == 1) return parts[0];
  Manifest out;
  out.meta = {{"pooled_from", nlohmann::json::array()}};
  std::set<std::string> ids;
  std::size_t dim = 0;
  for (const auto& p : parts) {
    out.meta["pooled_from"].push_back(p.meta);
    for (const auto& u : p.utterances) {
      if (dim == 0) dim = u.feats.cols();
      if (u.feats.cols() != dim) {
        throw ValidationError("pool: feature dimension mismatch at '" + u.id + "'");
      }
      if (!ids.insert(u.id).second) {
        throw ValidationError("pool: duplicate utterance id '" + u.id + "'");
      }
      out.utterances.push_back(u);
    }
  }
  return out;
}

std::vector<Manifest> split(const Manifest& m, std::span<const double> fractions,
                            std::uint64_t seed) {
  if (fractions.empty()) throw ValidationError("split: no fractions");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ValidationError("split: fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("split: fractions must sum to 1");

  const std::size_t n = m.size();
  std::vector<std::size_t> sizes;
  std::size_t assigned = 0;
  for (double f : fractions) {
    sizes.push_back(static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9)));
    assigned += sizes.back();
  }
  for (std::size_t i = 0; assigned < n; i = (i + 1) % sizes.size(), ++assigned) ++sizes[i];
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] == 0) {
      throw ValidationError("split: part " + std::to_string(i) + " of " + std::to_string(n) +
                            " utterances would be empty");
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, fnv1a("split")));
  rng.shuffle(order);

  std::vector<Manifest> out;
  std::size_t offset = 0;
  for (std::size_t part = 0; part < sizes.size(); ++part) {
    std::vector<std::size_t> idx(order.begin() + offset, order.begin() + offset + sizes[part]);
    std::sort(idx.begin(), idx.end());
    Manifest s;
    s.meta = m.meta;
    s.meta["split"] = {{"index", part}, {"fraction", fractions[part]}, {"seed", seed}};
    for (auto i : idx) s.utterances.push_back(m.utterances[i]);
    out.push_back(std::move(s));
    offset += sizes[part];
  }
  return out;
}

void write_feature_file(const Tensor& feats, const std::filesystem::path& path) {
  std::vector<char> buf;
  auto put = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put(feats.rows());
  put(feats.cols());
  for (double v : feats.data()) put(std::bit_cast<std::uint64_t>(v));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot write feature file '" + path.string() + "'");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

Tensor read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open feature file '" + path.string() + "'");
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto get = [&](std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    }
    return v;
  };
  if (buf.size() < 16) throw RuntimeError("feature file '" + path.string() + "' is truncated");
  const std::uint64_t rows = get(0);
  const std::uint64_t cols = get(8);
  if (rows == 0 || cols == 0 || (buf.size() - 16) / 8 != rows * cols ||
      (buf.size() - 16) % 8 != 0) {
    throw RuntimeError("feature file '" + path.string() + "' has inconsistent size");
  }
  std::vector<double> data(rows * cols);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::bit_cast<double>(get(16 + 8 * i));
  return Tensor({rows, cols}, std::move(data));
}

void save_manifest(const Manifest& m, const std::filesystem::path& path,
                   FeatureStorage storage) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("cannot write manifest '" + path.string() + "'");
  nlohmann::json header = m.meta;
  header["header"] = true;
  out << header.dump() << '\n';
  const auto dir = path.parent_path();
  for (const auto& u : m.utterances) {
    nlohmann::json rec = u.extra;
    rec["id"] = u.id;
    rec.erase("feats");
    rec.erase("feats_path");
    if (storage == FeatureStorage::kInline) {
      nlohmann::json rows = nlohmann::json::array();
      for (std::size_t t = 0; t < u.feats.rows(); ++t) {
        const auto r = u.feats.row(t);
        rows.push_back(std::vector<double>(r.begin(), r.end()));
      }
      rec["feats"] = std::move(rows);
    } else {
      const std::string name = path.stem().string() + "." + u.id + ".f64";
      write_feature_file(u.feats, dir / name);
      rec["feats_path"] = name;
    }
    rec["transcript"] = u.transcript;
    nlohmann::json tags = nlohmann::json::array();
    for (auto t : u.lang_tags) tags.push_back(std::string(tag_name(t)));
    rec["lang_tags"] = std::move(tags);
    out << rec.dump() << '\n';
  }
  if (!out) throw RuntimeError("write to manifest '" + path.string() + "' failed");
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open manifest '" + path.string() + "'");
  Manifest m;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      manifest_error(path, lineno, std::string("invalid JSON: ") + e.what());
    }
    if (!rec.is_object()) manifest_error(path, lineno, "record is not an object");
    if (!have_header) {
      if (!rec.value("header", false)) manifest_error(path, lineno, "missing header record");
      rec.erase("header");
      m.meta = std::move(rec);
      have_header = true;
      continue;
    }
    try {
      Utterance u;
      if (!rec.contains("id") || !rec["id"].is_string()) {
        manifest_error(path, lineno, "missing string field 'id'");
      }
      u.id = rec["id"].get<std::string>();
      if (!ids.insert(u.id).second) manifest_error(path, lineno, "duplicate id '" + u.id + "'");
      if (!rec.contains("transcript")) manifest_error(path, lineno, "missing 'transcript'");
      if (!rec.contains("lang_tags")) manifest_error(path, lineno, "missing 'lang_tags'");
      u.transcript = rec["transcript"].get<std::vector<std::string>>();
      for (const auto& t : rec["lang_tags"]) {
        const LangTag tag = parse_tag(t.get<std::string>());
        if (tag == LangTag::kNone) manifest_error(path, lineno, "token without language tag");
        u.lang_tags.push_back(tag);
      }
      if (u.lang_tags.size() != u.transcript.size()) {
        manifest_error(path, lineno, "transcript and lang_tags differ in length");
      }
      if (rec.contains("feats")) {
        const auto& rows = rec["feats"];
        if (!rows.is_array() || rows.empty()) manifest_error(path, lineno, "empty 'feats'");
        const std::size_t cols = rows[0].size();
        std::vector<double> data;
        for (const auto& r : rows) {
          if (r.size() != cols || cols == 0) manifest_error(path, lineno, "ragged 'feats'");
          for (const auto& v : r) data.push_back(v.get<double>());
        }
        u.feats = Tensor({rows.size(), cols}, std::move(data));
      } else if (rec.contains("feats_path")) {
        u.feats = read_feature_file(path.parent_path() / rec["feats_path"].get<std::string>());
      } else {
        manifest_error(path, lineno, "record has neither 'feats' nor 'feats_path'");
      }
      if (!u.feats.all_finite()) manifest_error(path, lineno, "non-finite features");
      if (m.feat_dim() != 0 && u.feats.cols() != m.feat_dim()) {
        manifest_error(path, lineno, "feature dimension differs from earlier records");
      }
      for (const char* k : {"id", "feats", "feats_path", "transcript", "lang_tags"}) rec.erase(k);
      u.extra = std::move(rec);
      m.utterances.push_back(std::move(u));
    } catch (const nlohmann::json::exception& e) {
      manifest_error(path, lineno, e.what());
    } catch (const ValidationError& e) {
      const std::string what = e.what();
      if (what.rfind("manifest '", 0) == 0) throw;
      manifest_error(path, lineno, what);
    }
  }
  if (!have_header) throw ValidationError("manifest '" + path.string() + "' is empty");
  return m;
}

}  // namespace cslab
