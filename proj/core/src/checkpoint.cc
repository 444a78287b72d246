// Checkpoint container, little-endian throughout:
//
//   "LWFS" | u32 version
//   u64 len | config JSON        (model config without vocabularies, trainable flags)
//   u64 len | vocab JSON         ({head_id: vocab})
//   u32 entry count
//   per entry: str collection | str name | u32 rank | u64 dims... | u64 n | f64 x n
//   u64 FNV-1a of every preceding byte
//
// str is u32 length + bytes.

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "cslab/errors.h"
#include "cslab/hash.h"
#include "cslab/net.h"

namespace cslab {

namespace {

constexpr char kMagic[4] = {'L', 'W', 'F', 'S'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void blob(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const std::vector<char>& buf, std::size_t end) : buf_(buf), end_(end) {}

  void need(std::uint64_t n, const char* what) const {
    if (n > end_ - pos_) {
      throw RuntimeError(std::string("checkpoint truncated or corrupt: ") + what +
                         " needs " + std::to_string(n) + " bytes, " +
                         std::to_string(end_ - pos_) + " remain");
    }
  }
  std::uint64_t uint(int width, const char* what) {
    need(static_cast<std::uint64_t>(width), what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(uint(4, what)); }
  std::uint64_t u64(const char* what) { return uint(8, what); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string take(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(buf_.data() + pos_, static_cast<std::size_t>(n));
    pos_ += static_cast<std::size_t>(n);
    return s;
  }
  std::string str(const char* what) { return take(u32(what), what); }
  std::string blob(const char* what) { return take(u64(what), what); }
  bool done() const { return pos_ == end_; }

 private:
  const std::vector<char>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  nlohmann::json cfg = model.config().to_json();
  nlohmann::json vocab = nlohmann::json::object();
  nlohmann::json head_ids = nlohmann::json::array();
  for (const auto& h : model.config().heads) {
    vocab[h.id] = h.vocab.to_json();
    head_ids.push_back(h.id);
  }
  cfg["heads"] = head_ids;
  nlohmann::json trainable = nlohmann::json::object();
  for (const auto& id : model.collection_ids()) trainable[id] = model.collection(id).trainable;
  cfg["trainable"] = trainable;

  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.blob(cfg.dump());
  w.blob(vocab.dump());
  std::uint32_t entries = 0;
  for (const auto& id : model.collection_ids()) {
    entries += static_cast<std::uint32_t>(model.collection(id).params.size());
  }
  w.u32(entries);
  for (const auto& id : model.collection_ids()) {
    for (const auto& p : model.collection(id).params) {
      w.str(id);
      w.str(p.name);
      w.u32(static_cast<std::uint32_t>(p.value.rank()));
      for (auto d : p.value.shape()) w.u64(d);
      w.u64(p.value.size());
      for (double v : p.value.data()) w.f64(v);
    }
  }
  Fnv1a h;
  h.update(w.buffer().data(), w.buffer().size());
  w.u64(h.digest());

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot open '" + tmp + "' for writing");
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw RuntimeError("write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open checkpoint '" + path.string() + "'");
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 + 4 + 8) {
    throw RuntimeError("checkpoint truncated: '" + path.string() + "' is too short");
  }
  if (std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw RuntimeError("not a checkpoint (bad magic): '" + path.string() + "'");
  }
  const std::size_t body = buf.size() - 8;
  Reader r(buf, body);
  r.take(4, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) {
    throw RuntimeError("checkpoint version mismatch: file has " + std::to_string(version) +
                       ", reader supports " + std::to_string(kVersion));
  }
  Reader trailer(buf, buf.size());
  trailer.take(body, "body");
  Fnv1a h;
  h.update(buf.data(), body);
  if (trailer.u64("checksum") != h.digest()) {
    throw RuntimeError("checkpoint checksum mismatch: '" + path.string() + "' is corrupt");
  }

  nlohmann::json cfg_json;
  nlohmann::json vocab_json;
  try {
    cfg_json = nlohmann::json::parse(r.blob("config block"));
    vocab_json = nlohmann::json::parse(r.blob("vocab block"));
  } catch (const nlohmann::json::parse_error& e) {
    throw RuntimeError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }

  nlohmann::json full = cfg_json;
  full["heads"] = nlohmann::json::array();
  for (const auto& id : cfg_json.at("heads")) {
    const std::string hid = id.get<std::string>();
    if (!vocab_json.contains(hid)) {
      throw RuntimeError("checkpoint: no vocabulary for head '" + hid + "'");
    }
    full["heads"].push_back({{"id", hid}, {"vocab", vocab_json.at(hid)}});
  }
  ModelConfig cfg = ModelConfig::from_json(full);
  Model m = Model::build(cfg, 0);

  std::set<std::string> filled;
  const std::uint32_t entries = r.u32("entry count");
  for (std::uint32_t e = 0; e < entries; ++e) {
    const std::string coll = r.str("collection name");
    const std::string name = r.str("parameter name");
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 2) throw RuntimeError("checkpoint: bad rank for " + name);
    std::vector<std::size_t> shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u64("dimension"));
    const std::uint64_t n = r.u64("payload length");
    r.need(n * 8, "payload");
    if (!m.has_head(coll) && coll != Model::kShared) {
      throw RuntimeError("checkpoint: unknown collection '" + coll + "'");
    }
    auto& c = m.collection(coll);
    auto it = std::find_if(c.params.begin(), c.params.end(),
                           [&](const NamedTensor& p) { return p.name == name; });
    if (it == c.params.end()) {
      throw RuntimeError("checkpoint: unexpected parameter '" + coll + "/" + name + "'");
    }
    if (it->value.shape() != shape || it->value.size() != n) {
      throw RuntimeError("checkpoint: shape mismatch for '" + coll + "/" + name + "'");
    }
    for (std::uint64_t i = 0; i < n; ++i) it->value[i] = r.f64("payload");
    if (!filled.insert(coll + "/" + name).second) {
      throw RuntimeError("checkpoint: duplicate parameter '" + coll + "/" + name + "'");
    }
  }
  if (!r.done()) throw RuntimeError("checkpoint: trailing bytes after parameter table");
  std::size_t expected = 0;
  for (const auto& id : m.collection_ids()) expected += m.collection(id).params.size();
  if (filled.size() != expected) {
    throw RuntimeError("checkpoint: missing parameters (" + std::to_string(filled.size()) +
                       " of " + std::to_string(expected) + ")");
  }
  if (cfg_json.contains("trainable")) {
    for (const auto& [id, flag] : cfg_json.at("trainable").items()) {
      m.collection(id).trainable = flag.get<bool>();
    }
  }
  return m;
}

}  // namespace cslab
