#include "cslab/vocab.h"

#include <unordered_set>

#include "cslab/errors.h"

namespace cslab {

std::string_view tag_name(LangTag tag) {
  switch (tag) {
    case LangTag::kNone: return "-";
    case LangTag::kA: return "A";
    case LangTag::kB: return "B";
    case LangTag::kShared: return "shared";
  }
  return "?";
}

LangTag parse_tag(std::string_view s) {
  if (s == "A") return LangTag::kA;
  if (s == "B") return LangTag::kB;
  if (s == "shared") return LangTag::kShared;
  if (s == "-") return LangTag::kNone;
  throw ValidationError("unknown language tag '" + std::string(s) + "'");
}

Vocab::Vocab() : symbols_{std::string(kBlankSymbol)}, tags_{LangTag::kNone} {}

Vocab::Vocab(std::vector<std::pair<std::string, LangTag>> symbols) : Vocab() {
  std::unordered_set<std::string> seen{std::string(kBlankSymbol)};
  for (auto& [sym, tag] : symbols) {
    if (sym.empty()) throw ValidationError("vocab: empty symbol");
    if (!seen.insert(sym).second) {
      throw ValidationError("vocab: duplicate symbol '" + sym + "'");
    }
    if (tag == LangTag::kNone) {
      throw ValidationError("vocab: symbol '" + sym + "' needs a language tag");
    }
    symbols_.push_back(std::move(sym));
    tags_.push_back(tag);
  }
}

std::optional<int> Vocab::index_of(std::string_view symbol) const {
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    if (symbols_[i] == symbol) return static_cast<int>(i);
  }
  return std::nullopt;
}

LabelSeq Vocab::encode(const std::vector<std::string>& symbols,
                       std::string_view context) const {
  LabelSeq out;
  out.reserve(symbols.size());
  for (const auto& s : symbols) {
    auto idx = index_of(s);
    if (!idx || *idx == kBlank) {
      throw ValidationError(std::string(context) + ": token '" + s +
                            "' is not in the head vocabulary");
    }
    out.push_back(*idx);
  }
  return out;
}

std::vector<std::string> Vocab::decode(const LabelSeq& labels) const {
  std::vector<std::string> out;
  out.reserve(labels.size());
  for (int l : labels) out.push_back(symbol(l));
  return out;
}

std::vector<LangTag> Vocab::tags_of(const LabelSeq& labels) const {
  std::vector<LangTag> out;
  out.reserve(labels.size());
  for (int l : labels) out.push_back(tag(l));
  return out;
}

nlohmann::json Vocab::to_json() const {
  nlohmann::json syms = nlohmann::json::array();
  nlohmann::json tags = nlohmann::json::array();
  for (std::size_t i = 1; i < symbols_.size(); ++i) {
    syms.push_back(symbols_[i]);
    tags.push_back(std::string(tag_name(tags_[i])));
  }
  return {{"symbols", syms}, {"tags", tags}};
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("symbols") || !j.contains("tags")) {
    throw ValidationError("vocab: expected object with 'symbols' and 'tags'");
  }
  const auto& syms = j.at("symbols");
  const auto& tags = j.at("tags");
  if (!syms.is_array() || !tags.is_array() || syms.size() != tags.size()) {
    throw ValidationError("vocab: 'symbols' and 'tags' must be arrays of equal length");
  }
  std::vector<std::pair<std::string, LangTag>> entries;
  for (std::size_t i = 0; i < syms.size(); ++i) {
    entries.emplace_back(syms[i].get<std::string>(), parse_tag(tags[i].get<std::string>()));
  }
  return Vocab(std::move(entries));
}

}  // namespace cslab
