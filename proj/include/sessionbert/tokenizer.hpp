#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sessionbert/common.hpp"
#include "sessionbert/corpus.hpp"

namespace sessionbert {

using TokenId = int;
inline constexpr TokenId kIgnoreLabel = -1;

namespace token_id {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kMask = 4;
}  // namespace token_id

inline const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> kSpecials = [] {
    std::vector<std::string> v{std::string(tokens::kPad), std::string(tokens::kUnk),
                               std::string(tokens::kCls), std::string(tokens::kSep),
                               std::string(tokens::kMask)};
    for (auto m : tokens::kBlockMarkers) v.emplace_back(m);
    return v;
  }();
  return kSpecials;
}

inline constexpr std::string_view kVocabHeader = "#sessionbert-vocab v1";

// Token <-> id bijection. Specials occupy ids [0, num_special()).
class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // `regular` must not contain specials or duplicates.
  explicit Vocabulary(const std::vector<std::string>& regular) {
    for (const auto& s : special_tokens()) add(s);
    for (const auto& t : regular) {
      if (to_id_.count(t)) throw ValidationError("token", "duplicate or special token " + t);
      add(t);
    }
  }

  std::size_t size() const { return to_token_.size(); }
  static std::size_t num_special() { return special_tokens().size(); }
  static bool is_special(TokenId id) { return id >= 0 && id < static_cast<TokenId>(num_special()); }

  TokenId id(std::string_view token) const {
    auto it = to_id_.find(std::string(token));
    return it == to_id_.end() ? token_id::kUnk : it->second;
  }
  bool contains(std::string_view token) const { return to_id_.count(std::string(token)) > 0; }
  const std::string& token(TokenId id) const { return to_token_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return to_token_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.to_token_ == b.to_token_; }

 private:
  void add(const std::string& t) {
    to_id_.emplace(t, static_cast<TokenId>(to_token_.size()));
    to_token_.push_back(t);
  }

  std::unordered_map<std::string, TokenId> to_id_;
  std::vector<std::string> to_token_;
};

// Frequency-ranked vocabulary with lexicographic tie-break, truncated so that
// size() <= cap.
inline Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>& sequences,
                                   std::size_t cap = 30000, std::size_t min_count = 1) {
  if (sequences.empty()) throw std::invalid_argument("build_vocabulary: empty corpus");
  if (cap < Vocabulary::num_special())
    throw ValidationError("cap", "smaller than the number of special tokens");
  std::unordered_map<std::string, std::size_t> counts;
  const auto& specials = special_tokens();
  for (const auto& seq : sequences)
    for (const auto& t : seq) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [t, c] : counts)
    if (c >= min_count && std::find(specials.begin(), specials.end(), t) == specials.end())
      ranked.emplace_back(t, c);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  const std::size_t keep = std::min(ranked.size(), cap - Vocabulary::num_special());
  std::vector<std::string> regular;
  regular.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) regular.push_back(std::move(ranked[i].first));
  return Vocabulary(regular);
}

struct Encoding {
  std::vector<TokenId> input_ids;
  std::vector<int> attention_mask;
  std::size_t length() const { return input_ids.size(); }
  std::size_t num_real() const {
    return static_cast<std::size_t>(std::count(attention_mask.begin(), attention_mask.end(), 1));
  }
};

// Removes whole activities (token + its [SEP]) oldest-first until `body`
// fits in `budget`; if it still does not fit, cuts the tail.
inline std::vector<std::string> truncate_body(std::vector<std::string> body, std::size_t budget) {
  if (body.size() <= budget) return body;
  auto first = std::find(body.begin(), body.end(), tokens::kActivity);
  if (first != body.end()) {
    auto act_begin = first + 1;
    auto act_end = std::find(act_begin, body.end(), tokens::kDailyPage);
    std::size_t excess = body.size() - budget;
    std::size_t available = static_cast<std::size_t>(act_end - act_begin);
    std::size_t remove = 0;
    while (remove < available && remove < excess) {
      // One activity spans the token and, when present, its [SEP].
      std::size_t step = 1;
      if (remove + 1 < available && *(act_begin + static_cast<long>(remove) + 1) == tokens::kSep) step = 2;
      remove += step;
    }
    body.erase(act_begin, act_begin + static_cast<long>(remove));
  }
  if (body.size() > budget) body.resize(budget);
  return body;
}

// [CLS] body [SEP], padded with [PAD] to max_len.
inline Encoding encode(const std::vector<std::string>& body, const Vocabulary& vocab,
                       std::size_t max_len) {
  if (max_len < 8) throw ValidationError("max_len", "must be >= 8");
  const auto kept = truncate_body(body, max_len - 2);
  Encoding e;
  e.input_ids.reserve(max_len);
  e.input_ids.push_back(token_id::kCls);
  for (const auto& t : kept) e.input_ids.push_back(vocab.id(t));
  e.input_ids.push_back(token_id::kSep);
  e.attention_mask.assign(e.input_ids.size(), 1);
  e.input_ids.resize(max_len, token_id::kPad);
  e.attention_mask.resize(max_len, 0);
  return e;
}

// Inverse of encode for untruncated, fully in-vocabulary bodies.
inline std::vector<std::string> decode(const Encoding& e, const Vocabulary& vocab) {
  std::vector<std::string> out;
  const std::size_t n = e.num_real();
  for (std::size_t i = 1; i + 1 < n; ++i) out.push_back(vocab.token(e.input_ids[i]));
  return out;
}

struct MlmInstance {
  std::vector<TokenId> input_ids;
  std::vector<TokenId> label_ids;  // kIgnoreLabel where not selected
  std::vector<int> attention_mask;
};

inline bool is_maskable(TokenId id) { return id >= static_cast<TokenId>(Vocabulary::num_special()); }

// Selects each maskable position with probability mask_rate (at least one),
// then corrupts selections 80/10/10 into [MASK] / random token / unchanged.
inline MlmInstance mask_for_mlm(const Encoding& enc, std::size_t vocab_size, Rng& rng,
                                double mask_rate = 0.15) {
  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < enc.input_ids.size(); ++i)
    if (enc.attention_mask[i] && is_maskable(enc.input_ids[i])) maskable.push_back(i);
  if (maskable.empty()) throw std::invalid_argument("mask_for_mlm: no maskable tokens");
  const auto first_regular = Vocabulary::num_special();
  if (vocab_size <= first_regular) throw ValidationError("vocab_size", "no regular tokens");

  MlmInstance m{enc.input_ids, std::vector<TokenId>(enc.input_ids.size(), kIgnoreLabel),
                enc.attention_mask};
  std::vector<std::size_t> selected;
  for (auto pos : maskable)
    if (rng.bernoulli(mask_rate)) selected.push_back(pos);
  if (selected.empty()) selected.push_back(maskable[rng.below(maskable.size())]);
  for (auto pos : selected) {
    m.label_ids[pos] = enc.input_ids[pos];
    const double u = rng.uniform();
    if (u < 0.8) {
      m.input_ids[pos] = token_id::kMask;
    } else if (u < 0.9) {
      m.input_ids[pos] = static_cast<TokenId>(first_regular + rng.below(vocab_size - first_regular));
    }
  }
  return m;
}

inline void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << kVocabHeader << '\n';
  for (std::size_t i = 0; i < vocab.size(); ++i) out << vocab.token(static_cast<TokenId>(i)) << '\t' << i << '\n';
}

inline Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kVocabHeader)
    throw ParseError(1, "missing or unsupported vocabulary header");
  std::vector<std::string> toks;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(n, "expected token<TAB>id");
    std::size_t id = 0;
    try {
      id = std::stoul(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw ParseError(n, "bad id");
    }
    if (id != toks.size()) throw ParseError(n, "ids must be dense and ordered");
    toks.push_back(line.substr(0, tab));
  }
  const auto& specials = special_tokens();
  if (toks.size() < specials.size() || !std::equal(specials.begin(), specials.end(), toks.begin()))
    throw ParseError(2, "special tokens missing or out of order");
  return Vocabulary(std::vector<std::string>(toks.begin() + static_cast<long>(specials.size()), toks.end()));
}

}  // namespace sessionbert
