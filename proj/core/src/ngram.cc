#include "cslab/ngram.h"

#include <cmath>
#include <fstream>
#include <sstream>

#include "cslab/errors.h"

namespace cslab {

namespace {

std::string token_key(int t) {
  if (t == NGramLM::kBos) return "<s>";
  if (t == NGramLM::kEos) return "</s>";
  return std::to_string(t);
}

int parse_token(const std::string& s) {
  if (s == "<s>") return NGramLM::kBos;
  if (s == "</s>") return NGramLM::kEos;
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used == s.size() && v > 0) return v;
  } catch (const std::exception&) {
  }
  throw ValidationError("lm: bad token '" + s + "'");
}

std::string context_key(const std::vector<int>& ctx) {
  std::string out;
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    if (i) out += ' ';
    out += token_key(ctx[i]);
  }
  return out;
}

std::vector<int> parse_context(const std::string& key) {
  std::vector<int> out;
  std::istringstream is(key);
  std::string tok;
  while (is >> tok) out.push_back(parse_token(tok));
  return out;
}

}  // namespace

NGramLM::NGramLM(std::size_t order, double smoothing, std::size_t vocab_size)
    : order_(order), smoothing_(smoothing), vocab_size_(vocab_size) {
  if (order == 0) throw ValidationError("lm: order must be >= 1");
  if (!(smoothing > 0.0)) throw ValidationError("lm: smoothing must be > 0");
  if (vocab_size < 2) throw ValidationError("lm: vocabulary needs a non-blank symbol");
}

std::vector<int> NGramLM::context_of(const LabelSeq& history) const {
  const std::size_t n = order_ - 1;
  std::vector<int> ctx(n, kBos);
  const std::size_t take = std::min(n, history.size());
  for (std::size_t i = 0; i < take; ++i) {
    ctx[n - take + i] = history[history.size() - take + i];
  }
  return ctx;
}

void NGramLM::add_sentence(const LabelSeq& sentence) {
  LabelSeq history;
  for (std::size_t i = 0; i <= sentence.size(); ++i) {
    const int event = i < sentence.size() ? sentence[i] : kEos;
    if (event != kEos && (event <= 0 || static_cast<std::size_t>(event) >= vocab_size_)) {
      throw ValidationError("lm: symbol " + std::to_string(event) + " outside vocabulary");
    }
    const auto ctx = context_of(history);
    counts_[ctx][event] += 1.0;
    totals_[ctx] += 1.0;
    if (i < sentence.size()) history.push_back(event);
  }
}

double NGramLM::log_prob(int event, const LabelSeq& history) const {
  const auto ctx = context_of(history);
  double c = 0.0;
  double total = 0.0;
  if (auto it = counts_.find(ctx); it != counts_.end()) {
    if (auto e = it->second.find(event); e != it->second.end()) c = e->second;
    total = totals_.at(ctx);
  }
  const double k = smoothing_;
  return std::log((c + k) / (total + k * static_cast<double>(event_count())));
}

double NGramLM::sentence_log_prob(const LabelSeq& sentence) const {
  double lp = 0.0;
  LabelSeq history;
  for (int s : sentence) {
    lp += log_prob(s, history);
    history.push_back(s);
  }
  return lp + log_prob(kEos, history);
}

nlohmann::json NGramLM::to_json() const {
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [ctx, nexts] : counts_) {
    nlohmann::json row = nlohmann::json::object();
    for (const auto& [event, c] : nexts) row[token_key(event)] = c;
    counts[context_key(ctx)] = row;
  }
  return {{"order", order_},
          {"smoothing", smoothing_},
          {"vocab_size", vocab_size_},
          {"counts", counts}};
}

NGramLM NGramLM::from_json(const nlohmann::json& j) {
  try {
    NGramLM lm(j.at("order").get<std::size_t>(), j.at("smoothing").get<double>(),
               j.at("vocab_size").get<std::size_t>());
    for (const auto& [key, row] : j.at("counts").items()) {
      auto ctx = parse_context(key);
      if (ctx.size() != lm.order_ - 1) {
        throw ValidationError("lm: context '" + key + "' does not match order");
      }
      for (const auto& [ev, c] : row.items()) {
        const double v = c.get<double>();
        lm.counts_[ctx][parse_token(ev)] += v;
        lm.totals_[ctx] += v;
      }
    }
    return lm;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("lm file: ") + e.what());
  }
}

void NGramLM::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write LM file '" + path.string() + "'");
  out << to_json().dump(2) << '\n';
}

NGramLM NGramLM::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open LM file '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("LM file '" + path.string() + "': " + e.what());
  }
  return from_json(j);
}

NGramLM train_ngram_lm(const std::vector<LabelSeq>& transcripts, std::size_t order,
                       double smoothing, std::size_t vocab_size) {
  if (transcripts.empty()) throw ValidationError("lm: empty training corpus");
  NGramLM lm(order, smoothing, vocab_size);
  for (const auto& t : transcripts) lm.add_sentence(t);
  return lm;
}

}  // namespace cslab
