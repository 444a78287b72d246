#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace cslab {

// Language of a symbol. Blank carries no language.
enum class LangTag : std::uint8_t { kNone, kA, kB, kShared };

std::string_view tag_name(LangTag tag);
LangTag parse_tag(std::string_view s);

// Label sequence over vocabulary indices, blank excluded.
using LabelSeq = std::vector<int>;

// Output symbol inventory of one head. Index 0 is always the CTC blank.
class Vocab {
 public:
  static constexpr int kBlank = 0;
  static constexpr std::string_view kBlankSymbol = "<b>";

  Vocab();
  // Symbols after the blank, in index order starting at 1.
  explicit Vocab(std::vector<std::pair<std::string, LangTag>> symbols);

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(int i) const { return symbols_.at(static_cast<std::size_t>(i)); }
  LangTag tag(int i) const { return tags_.at(static_cast<std::size_t>(i)); }
  std::optional<int> index_of(std::string_view symbol) const;

  // Throws ValidationError naming `context` if a symbol is unknown or blank.
  LabelSeq encode(const std::vector<std::string>& symbols, std::string_view context) const;
  std::vector<std::string> decode(const LabelSeq& labels) const;
  std::vector<LangTag> tags_of(const LabelSeq& labels) const;

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.symbols_ == b.symbols_ && a.tags_ == b.tags_;
  }

 private:
  std::vector<std::string> symbols_;
  std::vector<LangTag> tags_;
};

}  // namespace cslab
