#pragma once

#include <algorithm>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "sessionbert/corpus.hpp"
#include "sessionbert/training.hpp"

namespace sessionbert {

inline constexpr std::size_t kDefaultWindow = 8;

struct UserHistory {
  std::deque<SessionRecord> window;  // oldest first
  std::set<std::string> adopted;     // over every ingested session
  std::set<std::string> ingested;    // session ids, for idempotent re-ingest
};

// Per-user window of the last X sessions plus the adopted-service set. When
// constructed with a log path, every accepted record is appended to the log;
// compact() rewrites the snapshot and truncates the log.
class HistoryStore {
 public:
  explicit HistoryStore(std::size_t window = kDefaultWindow) : window_(window) {
    if (window_ == 0) throw ValidationError("window", "must be >= 1");
  }

  // Opens (or creates) a persisted store under `dir`: snapshot.jsonl then
  // log.jsonl are replayed.
  static HistoryStore open(const std::filesystem::path& dir, std::size_t window = kDefaultWindow) {
    HistoryStore s(window);
    std::filesystem::create_directories(dir);
    s.dir_ = dir;
    if (std::filesystem::exists(s.snapshot_path())) s.load_snapshot(s.snapshot_path());
    if (std::filesystem::exists(s.log_path())) {
      for (auto& r : load_corpus(s.log_path().string())) s.apply(std::move(r));
    }
    s.log_.open(s.log_path(), std::ios::app);
    if (!s.log_) throw std::runtime_error("cannot open " + s.log_path().string());
    return s;
  }

  HistoryStore(HistoryStore&& o) noexcept
      : window_(o.window_), users_(std::move(o.users_)), dir_(std::move(o.dir_)), log_(std::move(o.log_)) {}

  // Returns false when the session id was already ingested for this user.
  bool record_session(const SessionRecord& r) {
    validate_record(r);
    std::unique_lock lock(mu_);
    if (!apply(r)) return false;
    if (log_.is_open()) {
      log_ << to_json(r).dump() << '\n';
      log_.flush();
    }
    return true;
  }

  bool has_user(const std::string& user_id) const {
    std::shared_lock lock(mu_);
    return users_.contains(user_id);
  }

  // Copy of one user's state, consistent with respect to concurrent writers.
  std::optional<UserHistory> snapshot(const std::string& user_id) const {
    std::shared_lock lock(mu_);
    const auto it = users_.find(user_id);
    if (it == users_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<std::string> user_ids() const {
    std::shared_lock lock(mu_);
    std::vector<std::string> out;
    for (const auto& [id, _] : users_) out.push_back(id);
    std::sort(out.begin(), out.end());
    return out;
  }

  std::size_t window() const { return window_; }

  void compact() {
    std::unique_lock lock(mu_);
    if (dir_.empty()) return;
    const auto tmp = dir_ / "snapshot.jsonl.tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      for (const auto& id : sorted_ids()) {
        const auto& u = users_.at(id);
        nlohmann::json meta{{"kind", "user_state"}, {"user_id", id}, {"adopted", u.adopted}, {"ingested", u.ingested}};
        out << meta.dump() << '\n';
        for (const auto& r : u.window) out << to_json(r).dump() << '\n';
      }
      if (!out) throw std::runtime_error("snapshot write failed");
    }
    std::filesystem::rename(tmp, snapshot_path());
    log_.close();
    log_.open(log_path(), std::ios::trunc);
  }

 private:
  std::filesystem::path snapshot_path() const { return dir_ / "snapshot.jsonl"; }
  std::filesystem::path log_path() const { return dir_ / "log.jsonl"; }

  std::vector<std::string> sorted_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, _] : users_) ids.push_back(id);
    std::sort(ids.begin(), ids.end());
    return ids;
  }

  bool apply(SessionRecord r) {
    auto& u = users_[r.user_id];
    if (!u.ingested.insert(r.session_id).second) return false;
    for (const auto& a : r.activities) u.adopted.insert(a.service);
    u.window.push_back(std::move(r));
    while (u.window.size() > window_) u.window.pop_front();
    return true;
  }

  void load_snapshot(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(lineno, e.what());
      }
      if (j.contains("kind") && j["kind"] == "user_state") {
        auto& u = users_[j.at("user_id").get<std::string>()];
        u.adopted = j.at("adopted").get<std::set<std::string>>();
        u.ingested = j.at("ingested").get<std::set<std::string>>();
        continue;
      }
      SessionRecord r = record_from_json(j);
      auto& u = users_[r.user_id];
      u.window.push_back(std::move(r));
      while (u.window.size() > window_) u.window.pop_front();
    }
  }

  std::size_t window_;
  std::unordered_map<std::string, UserHistory> users_;
  std::filesystem::path dir_;
  std::ofstream log_;
  mutable std::shared_mutex mu_;
};

enum class Strategy { Frequency, NameSim, DescSim };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::Frequency: return "frequency";
    case Strategy::NameSim: return "name_sim";
    case Strategy::DescSim: return "desc_sim";
  }
  return "?";
}

inline std::optional<Strategy> parse_strategy(std::string_view s) {
  if (s == "frequency") return Strategy::Frequency;
  if (s == "name_sim") return Strategy::NameSim;
  if (s == "desc_sim") return Strategy::DescSim;
  return std::nullopt;
}

enum class SimAggregate { Max, Mean };

struct ScoredService {
  std::string service;
  double score = 0;
  friend bool operator==(const ScoredService&, const ScoredService&) = default;
};

struct Recommendation {
  std::vector<ScoredService> services;  // score desc, id asc
  Strategy strategy = Strategy::Frequency;

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& s : services) out.push_back(s.service);
    return out;
  }
};

// Word vector for a whitespace-separated text: mean of the token embedding
// rows, L2-normalized. Unknown words use the [UNK] row.
template <typename S>
Eigen::RowVectorXd text_vector(const std::string& text, const Mat<S>& embedding, const Vocabulary& vocab) {
  Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(embedding.cols());
  std::istringstream words(text);
  std::string w;
  int n = 0;
  while (words >> w) {
    v += embedding.row(vocab.id(w)).template cast<double>();
    ++n;
  }
  if (n == 0) return v;
  const double norm = v.norm();
  return norm > 0 ? Eigen::RowVectorXd(v / norm) : v;
}

namespace detail {

inline void sort_scored(std::vector<ScoredService>& v) {
  std::sort(v.begin(), v.end(), [](const ScoredService& a, const ScoredService& b) {
    return a.score != b.score ? a.score > b.score : a.service < b.service;
  });
}

}  // namespace detail

// Scores the distinct candidates. `candidates` keeps multiplicity and must
// not contain adopted services.
template <typename S>
std::vector<ScoredService> rank_candidates(const std::vector<std::string>& candidates,
                                           const std::set<std::string>& adopted, Strategy strategy,
                                           const Mat<S>& embedding, const Vocabulary& vocab,
                                           const ServiceCatalog& catalog, SimAggregate agg = SimAggregate::Max) {
  std::map<std::string, int> mult;
  for (const auto& c : candidates) {
    if (adopted.contains(c)) throw ValidationError("candidates", "candidate " + c + " is already adopted");
    ++mult[c];
  }
  std::vector<ScoredService> out;
  if (strategy == Strategy::Frequency) {
    for (const auto& [s, m] : mult) out.push_back({s, static_cast<double>(m)});
    detail::sort_scored(out);
    return out;
  }
  auto text_of = [&](const std::string& service) -> const std::string& {
    const CatalogEntry* e = catalog.find(service);
    if (!e) throw ValidationError("catalog", "service " + service + " is not in the catalog");
    const std::string& t = strategy == Strategy::NameSim ? e->name : e->description;
    if (t.find_first_not_of(" \t") == std::string::npos)
      throw ValidationError(strategy == Strategy::NameSim ? "name" : "description",
                            "service " + service + " has no catalog text");
    return t;
  };
  std::vector<Eigen::RowVectorXd> adopted_vecs;
  for (const auto& a : adopted) adopted_vecs.push_back(text_vector(text_of(a), embedding, vocab));
  for (const auto& [s, m] : mult) {
    const Eigen::RowVectorXd v = text_vector(text_of(s), embedding, vocab);
    double score = 0;
    if (!adopted_vecs.empty()) {
      double best = -std::numeric_limits<double>::infinity(), sum = 0;
      for (const auto& a : adopted_vecs) {
        const double c = v.dot(a);
        best = std::max(best, c);
        sum += c;
      }
      score = agg == SimAggregate::Max ? best : sum / static_cast<double>(adopted_vecs.size());
    }
    out.push_back({s, score});
  }
  detail::sort_scored(out);
  return out;
}

struct RecommendConfig {
  Strategy strategy = Strategy::Frequency;
  std::size_t n = 5;
  std::size_t per_session_k = 5;
  SimAggregate aggregate = SimAggregate::Max;
};

// Top-N unadopted services pooled from the per-session top-k predictions
// over the user's window.
template <typename S>
Recommendation recommend_for_history(const UserHistory& h, const ModelState<S>& state, const Vocabulary& vocab,
                                     const ServiceCatalog& catalog, const RecommendConfig& cfg = {}) {
  if (cfg.n == 0) throw ValidationError("k", "must be >= 1");
  if (h.window.empty()) throw ValidationError("user_id", "user has no stored sessions");
  std::vector<std::string> candidates;
  for (const auto& session : h.window)
    for (const auto& p : predict_topk(session, state, vocab, cfg.per_session_k, Head::Service))
      if (!h.adopted.contains(p.label)) candidates.push_back(p.label);
  Recommendation rec;
  rec.strategy = cfg.strategy;
  rec.services = rank_candidates(candidates, h.adopted, cfg.strategy, state.params.tok_emb, vocab, catalog, cfg.aggregate);
  if (rec.services.size() > cfg.n) rec.services.resize(cfg.n);
  return rec;
}

class UnknownUserError : public std::out_of_range {
 public:
  explicit UnknownUserError(const std::string& user_id) : std::out_of_range("unknown user " + user_id) {}
};

template <typename S>
Recommendation recommend_new(const HistoryStore& store, const std::string& user_id, const ModelState<S>& state,
                             const Vocabulary& vocab, const ServiceCatalog& catalog, const RecommendConfig& cfg = {}) {
  const auto h = store.snapshot(user_id);
  if (!h) throw UnknownUserError(user_id);
  return recommend_for_history(*h, state, vocab, catalog, cfg);
}

// Globally most frequent services (by session count) not yet adopted.
class PopularityBaseline {
 public:
  explicit PopularityBaseline(const std::vector<SessionRecord>& records) {
    std::map<std::string, long> counts;
    for (const auto& r : records)
      for (const auto& s : r.services()) ++counts[s];
    for (const auto& [s, c] : counts) ranked_.push_back({s, static_cast<double>(c)});
    detail::sort_scored(ranked_);
  }

  Recommendation recommend(const std::set<std::string>& adopted, std::size_t n) const {
    Recommendation rec;
    for (const auto& s : ranked_) {
      if (rec.services.size() >= n) break;
      if (!adopted.contains(s.service)) rec.services.push_back(s);
    }
    return rec;
  }

 private:
  std::vector<ScoredService> ranked_;
};

}  // namespace sessionbert
