#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "sessionbert/common.hpp"

namespace sessionbert {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

// One service;page navigation step.
struct Activity {
  std::string service;
  std::string page;

  std::string token() const { return service + ";" + page; }
  friend bool operator==(const Activity&, const Activity&) = default;
  friend auto operator<=>(const Activity&, const Activity&) = default;
};

inline bool is_identifier(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s)
    if (c == ';' || c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f')
      return false;
  return true;
}

inline Activity parse_activity_token(std::string_view token) {
  const auto pos = token.find(';');
  if (pos == std::string_view::npos || token.find(';', pos + 1) != std::string_view::npos)
    throw ValidationError("activity", "not an activity token: " + std::string(token));
  Activity a{std::string(token.substr(0, pos)), std::string(token.substr(pos + 1))};
  if (!is_identifier(a.service) || !is_identifier(a.page))
    throw ValidationError("activity", "not an activity token: " + std::string(token));
  return a;
}

enum class BillingBucket { Low, Medium, High, VeryHigh };

inline std::string_view to_string(BillingBucket b) {
  switch (b) {
    case BillingBucket::Low: return "Low";
    case BillingBucket::Medium: return "Medium";
    case BillingBucket::High: return "High";
    case BillingBucket::VeryHigh: return "VeryHigh";
  }
  return "Low";
}

inline std::optional<BillingBucket> parse_bucket(std::string_view s) {
  if (s == "Low") return BillingBucket::Low;
  if (s == "Medium") return BillingBucket::Medium;
  if (s == "High") return BillingBucket::High;
  if (s == "VeryHigh") return BillingBucket::VeryHigh;
  return std::nullopt;
}

struct BilledService {
  std::string service;
  BillingBucket bucket = BillingBucket::Low;
  friend bool operator==(const BilledService&, const BilledService&) = default;
};

struct CatalogEntry {
  std::string service_id;
  std::string name;         // whitespace-separated tokens
  std::string description;  // whitespace-separated tokens
  std::vector<std::string> pages;
  friend bool operator==(const CatalogEntry&, const CatalogEntry&) = default;
};

class ServiceCatalog {
 public:
  ServiceCatalog() = default;
  explicit ServiceCatalog(std::vector<CatalogEntry> entries) : entries_(std::move(entries)) {
    validate();
  }

  const std::vector<CatalogEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  const CatalogEntry* find(const std::string& service_id) const {
    auto it = index_.find(service_id);
    return it == index_.end() ? nullptr : &entries_[it->second];
  }

  // Service that owns a page, or empty string.
  const std::string& owner_of(const std::string& page) const {
    static const std::string none;
    auto it = page_owner_.find(page);
    return it == page_owner_.end() ? none : it->second;
  }

  std::vector<Activity> all_activities() const {
    std::vector<Activity> out;
    for (const auto& e : entries_)
      for (const auto& p : e.pages) out.push_back({e.service_id, p});
    return out;
  }

  std::vector<std::string> service_ids() const {
    std::vector<std::string> ids;
    for (const auto& e : entries_) ids.push_back(e.service_id);
    return ids;
  }

  std::vector<std::string> page_ids() const {
    std::vector<std::string> ids;
    for (const auto& e : entries_) ids.insert(ids.end(), e.pages.begin(), e.pages.end());
    return ids;
  }

  friend bool operator==(const ServiceCatalog& a, const ServiceCatalog& b) {
    return a.entries_ == b.entries_;
  }

 private:
  void validate() {
    index_.clear();
    page_owner_.clear();
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      if (!is_identifier(e.service_id)) throw ValidationError("service_id", "invalid identifier");
      if (!index_.emplace(e.service_id, i).second)
        throw ValidationError("service_id", "duplicate service " + e.service_id);
      if (e.description.find_first_not_of(" \t") == std::string::npos)
        throw ValidationError("description", "empty description for " + e.service_id);
      for (const auto& p : e.pages) {
        if (!is_identifier(p)) throw ValidationError("pages", "invalid page id in " + e.service_id);
        if (!page_owner_.emplace(p, e.service_id).second)
          throw ValidationError("pages", "page " + p + " belongs to two services");
      }
    }
  }

  std::vector<CatalogEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::unordered_map<std::string, std::string> page_owner_;
};

struct TaskSpec {
  int task_id = 0;
  std::string name;
  std::vector<Activity> activity_pool;  // sorted, unique
  bool shared = false;                  // pool may overlap other tasks' pools
  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct PersonaSpec {
  int persona_id = 0;
  std::string name;
  std::vector<int> tasks;  // sorted, unique
  friend bool operator==(const PersonaSpec&, const PersonaSpec&) = default;
};

struct Taxonomy {
  std::vector<TaskSpec> tasks;
  std::vector<PersonaSpec> personas;

  // Services owned by a task's pool, in first-seen order.
  std::vector<std::string> task_services(int task_id) const {
    std::vector<std::string> out;
    for (const auto& a : tasks.at(static_cast<std::size_t>(task_id)).activity_pool)
      if (std::find(out.begin(), out.end(), a.service) == out.end()) out.push_back(a.service);
    return out;
  }

  void validate() const {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      if (tasks[i].task_id != static_cast<int>(i))
        throw ValidationError("task_id", "task ids must be dense from 0");
    }
    for (std::size_t i = 0; i < tasks.size(); ++i)
      for (std::size_t j = i + 1; j < tasks.size(); ++j) {
        if (tasks[i].shared || tasks[j].shared) continue;
        for (const auto& a : tasks[i].activity_pool)
          if (std::binary_search(tasks[j].activity_pool.begin(), tasks[j].activity_pool.end(), a))
            throw ValidationError("activity_pool", "undeclared overlap between tasks " +
                                                       tasks[i].name + " and " + tasks[j].name);
      }
    for (std::size_t i = 0; i < personas.size(); ++i) {
      const auto& p = personas[i];
      if (p.persona_id != static_cast<int>(i))
        throw ValidationError("persona_id", "persona ids must be dense from 0");
      if (p.tasks.empty()) throw ValidationError("tasks", "persona " + p.name + " has no tasks");
      for (int t : p.tasks)
        if (t < 0 || t >= static_cast<int>(tasks.size()))
          throw ValidationError("tasks", "persona " + p.name + " references unknown task");
    }
  }

  friend bool operator==(const Taxonomy&, const Taxonomy&) = default;
};

struct SessionRecord {
  std::string user_id;
  std::string session_id;
  int day = 0;
  std::vector<Activity> activities;
  std::string country;
  std::string city;
  std::vector<std::string> daily_pages;
  std::vector<std::string> daily_services;
  std::vector<BilledService> daily_billed;
  std::vector<BilledService> monthly_billed;
  std::optional<int> latent_persona;

  // Distinct services touched by the activities, in first-seen order.
  std::vector<std::string> services() const {
    std::vector<std::string> out;
    for (const auto& a : activities)
      if (std::find(out.begin(), out.end(), a.service) == out.end()) out.push_back(a.service);
    return out;
  }

  friend bool operator==(const SessionRecord&, const SessionRecord&) = default;
};

inline void validate_record(const SessionRecord& r) {
  if (r.user_id.empty()) throw ValidationError("user_id", "empty");
  if (r.session_id.empty()) throw ValidationError("session_id", "empty");
  if (r.day < 0) throw ValidationError("day", "negative");
  if (r.activities.empty()) throw ValidationError("activities", "session has no activities");
  for (const auto& a : r.activities)
    if (!is_identifier(a.service) || !is_identifier(a.page))
      throw ValidationError("activities", "invalid activity " + a.service + ";" + a.page);
  if (!is_identifier(r.country)) throw ValidationError("country", "invalid");
  if (!is_identifier(r.city)) throw ValidationError("city", "invalid");
  for (const auto& p : r.daily_pages)
    if (!is_identifier(p)) throw ValidationError("daily_pages", "invalid page id");
  for (const auto& s : r.daily_services)
    if (!is_identifier(s)) throw ValidationError("daily_services", "invalid service id");
  for (const auto& b : r.daily_billed)
    if (!is_identifier(b.service) || b.service.find(':') != std::string::npos)
      throw ValidationError("daily_billed", "invalid service id");
  for (const auto& b : r.monthly_billed)
    if (!is_identifier(b.service) || b.service.find(':') != std::string::npos)
      throw ValidationError("monthly_billed", "invalid service id");
}

struct GeneratorConfig {
  std::size_t num_users = 2000;
  std::pair<int, int> sessions_per_user_range{6, 12};
  std::pair<int, int> activities_per_session_range{4, 22};
  // Four active personas out of the seven-persona taxonomy.
  std::vector<double> persona_prior{0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0};
  double p_task = 0.9;
  std::size_t num_services = 20;
  std::size_t pages_per_service = 8;
  // Pages [0, pool_pages_per_service) of each service belong to task pools;
  // the rest are only ever reached through off-persona noise.
  std::size_t pool_pages_per_service = 5;
  std::size_t num_tasks = 12;
  int num_days = 16;
  // Of in-persona activities: share drawn from the session's focus service
  // and from the shared (explore) pools; the remainder goes to the user's
  // other adopted persona services.
  double focus_share = 0.55;
  double shared_share = 0.2;
  // Within a pool, page i is drawn with weight 1 / (i + 1)^page_zipf.
  double page_zipf = 1.0;
  std::uint64_t seed = 42;

  void validate() const {
    auto check_range = [](const char* name, std::pair<int, int> r) {
      if (r.first < 1 || r.second < r.first) throw ValidationError(name, "empty or non-positive range");
    };
    if (num_users == 0) throw ValidationError("num_users", "must be positive");
    check_range("sessions_per_user_range", sessions_per_user_range);
    check_range("activities_per_session_range", activities_per_session_range);
    if (persona_prior.empty()) throw ValidationError("persona_prior", "empty");
    double sum = 0;
    for (double p : persona_prior) {
      if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("persona_prior", "entry outside [0,1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("persona_prior", "must sum to 1");
    if (!(p_task >= 0.0 && p_task <= 1.0)) throw ValidationError("p_task", "outside [0,1]");
    if (num_services < 2) throw ValidationError("num_services", "need at least 2 services");
    if (pages_per_service == 0) throw ValidationError("pages_per_service", "must be positive");
    if (pool_pages_per_service == 0 || pool_pages_per_service > pages_per_service)
      throw ValidationError("pool_pages_per_service", "must be in [1, pages_per_service]");
    if (num_tasks < 2) throw ValidationError("num_tasks", "need a shared task and one specific task");
    if (num_tasks - 1 > num_services - 1)
      throw ValidationError("num_tasks", "more specific tasks than non-shared services");
    if (num_days < 1) throw ValidationError("num_days", "must be positive");
    if (!(focus_share >= 0 && shared_share >= 0 && focus_share + shared_share <= 1.0))
      throw ValidationError("focus_share", "focus_share + shared_share must lie in [0,1]");
    if (!(page_zipf >= 0.0)) throw ValidationError("page_zipf", "must be >= 0");
  }
};

struct Corpus {
  ServiceCatalog catalog;
  Taxonomy taxonomy;
  std::vector<SessionRecord> records;
};

// ---------------------------------------------------------------------------
// Flattening
// ---------------------------------------------------------------------------

namespace tokens {
inline constexpr std::string_view kPad = "[PAD]";
inline constexpr std::string_view kUnk = "[UNK]";
inline constexpr std::string_view kCls = "[CLS]";
inline constexpr std::string_view kSep = "[SEP]";
inline constexpr std::string_view kMask = "[MASK]";
inline constexpr std::string_view kActivity = "[activity]";
inline constexpr std::string_view kDailyPage = "[daily_page_token]";
inline constexpr std::string_view kLocation = "[location_token]";
inline constexpr std::string_view kDailyService = "[daily_service_token]";
inline constexpr std::string_view kDailyBilled = "[daily_billed_token]";
inline constexpr std::string_view kMonthlyBilled = "[monthly_billed_token]";

// Block markers in layout order.
inline constexpr std::array<std::string_view, 6> kBlockMarkers{
    kActivity, kDailyPage, kLocation, kDailyService, kDailyBilled, kMonthlyBilled};
}  // namespace tokens

inline std::string billed_token(const BilledService& b) {
  return b.service + ":" + std::string(to_string(b.bucket));
}

// Activities first, then the five context blocks, each block closed by [SEP].
inline std::vector<std::string> flatten_session(const SessionRecord& r) {
  std::vector<std::string> out;
  out.reserve(2 * r.activities.size() + r.daily_pages.size() + r.daily_services.size() + 24);
  const std::string sep(tokens::kSep);
  out.emplace_back(tokens::kActivity);
  for (const auto& a : r.activities) {
    out.push_back(a.token());
    out.push_back(sep);
  }
  out.emplace_back(tokens::kDailyPage);
  out.insert(out.end(), r.daily_pages.begin(), r.daily_pages.end());
  out.push_back(sep);
  out.emplace_back(tokens::kLocation);
  out.push_back(r.country);
  out.push_back(r.city);
  out.push_back(sep);
  out.emplace_back(tokens::kDailyService);
  out.insert(out.end(), r.daily_services.begin(), r.daily_services.end());
  out.push_back(sep);
  out.emplace_back(tokens::kDailyBilled);
  for (const auto& b : r.daily_billed) out.push_back(billed_token(b));
  out.push_back(sep);
  out.emplace_back(tokens::kMonthlyBilled);
  for (const auto& b : r.monthly_billed) out.push_back(billed_token(b));
  out.push_back(sep);
  return out;
}

// Recovers the activity list from a flattened sequence (inverse of the
// [activity] block of flatten_session).
inline std::vector<Activity> parse_flattened_activities(const std::vector<std::string>& toks) {
  std::vector<Activity> out;
  auto it = std::find(toks.begin(), toks.end(), tokens::kActivity);
  if (it == toks.end()) throw std::invalid_argument("no [activity] block");
  for (++it; it != toks.end() && *it != tokens::kDailyPage; ++it) {
    if (*it == tokens::kSep) continue;
    out.push_back(parse_activity_token(*it));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

namespace detail {

inline const std::vector<std::pair<std::string, std::vector<std::string>>>& locations() {
  static const std::vector<std::pair<std::string, std::vector<std::string>>> kLocations{
      {"US", {"Seattle", "Austin", "Boston"}},  {"DE", {"Berlin", "Munich", "Hamburg"}},
      {"JP", {"Tokyo", "Osaka", "Kyoto"}},      {"BR", {"SaoPaulo", "Rio", "Recife"}},
      {"IN", {"Mumbai", "Pune", "Delhi"}},
  };
  return kLocations;
}

// Nearest-rank quantile of an ascending-sorted vector.
inline int nearest_rank(const std::vector<int>& sorted, double q) {
  const auto n = sorted.size();
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return sorted[rank - 1];
}

// Top `limit` services by count (ties by id), bucketed by the quartile their
// count falls into among all counts of the window.
inline std::vector<BilledService> billed_from_counts(const std::map<std::string, int>& counts,
                                                     std::size_t limit) {
  if (counts.empty()) return {};
  std::vector<int> sorted;
  for (const auto& [_, c] : counts) sorted.push_back(c);
  std::sort(sorted.begin(), sorted.end());
  const int q1 = nearest_rank(sorted, 0.25), q2 = nearest_rank(sorted, 0.5),
            q3 = nearest_rank(sorted, 0.75);
  std::vector<std::pair<std::string, int>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<BilledService> out;
  for (std::size_t i = 0; i < ranked.size() && i < limit; ++i) {
    const int c = ranked[i].second;
    BillingBucket b = c <= q1   ? BillingBucket::Low
                      : c <= q2 ? BillingBucket::Medium
                      : c <= q3 ? BillingBucket::High
                                : BillingBucket::VeryHigh;
    out.push_back({ranked[i].first, b});
  }
  return out;
}

template <typename T>
void push_unique(std::vector<T>& v, const T& x) {
  if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
}

}  // namespace detail

// Catalog of s0..s{n-1}; service i owns pages p{i*pages}..; page ids are
// globally unique. Names are the service token itself and descriptions list
// the service's task-pool pages, so both live in the session vocabulary.
inline ServiceCatalog make_catalog(const GeneratorConfig& cfg) {
  std::vector<CatalogEntry> entries;
  for (std::size_t s = 0; s < cfg.num_services; ++s) {
    CatalogEntry e;
    e.service_id = "s" + std::to_string(s);
    e.name = e.service_id;
    std::string desc;
    for (std::size_t j = 0; j < cfg.pages_per_service; ++j) {
      const std::string page = "p" + std::to_string(s * cfg.pages_per_service + j);
      e.pages.push_back(page);
      if (j < cfg.pool_pages_per_service) desc += (desc.empty() ? "" : " ") + page;
    }
    e.description = desc;
    entries.push_back(std::move(e));
  }
  return ServiceCatalog(std::move(entries));
}

// Task num_tasks-1 is the shared "explore" task over service s0. Remaining
// services are dealt round-robin to the specific tasks. Persona i owns
// specific tasks 2i and 2i+1 (mod the specific-task count) plus explore, so
// later personas overlap earlier ones.
inline Taxonomy make_taxonomy(const GeneratorConfig& cfg, const ServiceCatalog& catalog) {
  Taxonomy tax;
  const std::size_t specific = cfg.num_tasks - 1;
  tax.tasks.resize(cfg.num_tasks);
  for (std::size_t t = 0; t < cfg.num_tasks; ++t) {
    tax.tasks[t].task_id = static_cast<int>(t);
    tax.tasks[t].name = t == specific ? "explore" : "task" + std::to_string(t);
    tax.tasks[t].shared = t == specific;
  }
  const auto& entries = catalog.entries();
  for (std::size_t s = 0; s < entries.size(); ++s) {
    const std::size_t task = s == 0 ? specific : (s - 1) % specific;
    for (std::size_t j = 0; j < cfg.pool_pages_per_service; ++j)
      tax.tasks[task].activity_pool.push_back({entries[s].service_id, entries[s].pages[j]});
  }
  for (auto& t : tax.tasks) std::sort(t.activity_pool.begin(), t.activity_pool.end());
  for (std::size_t i = 0; i < cfg.persona_prior.size(); ++i) {
    PersonaSpec p;
    p.persona_id = static_cast<int>(i);
    p.name = "persona" + std::to_string(i + 1);
    p.tasks = {static_cast<int>((2 * i) % specific), static_cast<int>((2 * i + 1) % specific),
               static_cast<int>(specific)};
    std::sort(p.tasks.begin(), p.tasks.end());
    p.tasks.erase(std::unique(p.tasks.begin(), p.tasks.end()), p.tasks.end());
    tax.personas.push_back(std::move(p));
  }
  tax.validate();
  return tax;
}

// Fills the daily/monthly context fields of one user's sessions (which must be
// in chronological order). "Daily" covers the user's sessions so far that day,
// "monthly" every session so far.
inline void fill_context(std::vector<SessionRecord*>& sessions) {
  std::map<std::string, int> monthly;
  std::map<std::string, int> daily;
  std::vector<std::string> day_pages, day_services;
  int current_day = -1;
  for (SessionRecord* r : sessions) {
    if (r->day != current_day) {
      current_day = r->day;
      daily.clear();
      day_pages.clear();
      day_services.clear();
    }
    for (const auto& a : r->activities) {
      ++daily[a.service];
      ++monthly[a.service];
      detail::push_unique(day_pages, a.page);
      detail::push_unique(day_services, a.service);
    }
    r->daily_pages = day_pages;
    r->daily_services = day_services;
    r->daily_billed = detail::billed_from_counts(daily, 3);
    r->monthly_billed = detail::billed_from_counts(monthly, 3);
  }
}

// Synthetic corpus with persona ground truth. Each user follows one persona,
// adopts that persona's services one by one over the day horizon, and each
// session centers on one adopted service.
inline Corpus generate_corpus(const GeneratorConfig& cfg) {
  cfg.validate();
  Corpus corpus;
  corpus.catalog = make_catalog(cfg);
  corpus.taxonomy = make_taxonomy(cfg, corpus.catalog);
  const auto& tax = corpus.taxonomy;
  const auto all_activities = corpus.catalog.all_activities();

  // Pool pages per service, for drawing activities of one service.
  std::map<std::string, std::vector<Activity>> service_pool;
  for (const auto& t : tax.tasks)
    for (const auto& a : t.activity_pool) service_pool[a.service].push_back(a);

  Rng rng(cfg.seed);
  const auto& locs = detail::locations();
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    Rng urng = rng.fork();
    char uid[16];
    std::snprintf(uid, sizeof uid, "u%05zu", u);
    const int persona = static_cast<int>(urng.categorical(cfg.persona_prior));
    const auto& loc = locs[urng.below(locs.size())];
    const std::string country = loc.first;
    const std::string city = loc.second[urng.below(loc.second.size())];

    std::vector<std::string> own_services;  // adoption order
    std::vector<Activity> shared_pool;
    for (int t : tax.personas[static_cast<std::size_t>(persona)].tasks) {
      const auto& task = tax.tasks[static_cast<std::size_t>(t)];
      if (task.shared) {
        shared_pool.insert(shared_pool.end(), task.activity_pool.begin(), task.activity_pool.end());
      } else {
        for (const auto& s : tax.task_services(t)) detail::push_unique(own_services, s);
      }
    }
    urng.shuffle(own_services);

    const int n_sessions = static_cast<int>(
        urng.between(cfg.sessions_per_user_range.first, cfg.sessions_per_user_range.second));
    std::vector<int> days(static_cast<std::size_t>(n_sessions));
    for (auto& d : days) d = static_cast<int>(urng.below(static_cast<std::size_t>(cfg.num_days)));
    std::sort(days.begin(), days.end());

    const std::size_t first = corpus.records.size();
    for (int s = 0; s < n_sessions; ++s) {
      SessionRecord r;
      r.user_id = uid;
      r.session_id = std::string(uid) + "-" + std::to_string(s);
      r.day = days[static_cast<std::size_t>(s)];
      r.country = country;
      r.city = city;
      r.latent_persona = persona;

      std::size_t unlocked = 0;
      if (!own_services.empty()) {
        const double progress =
            cfg.num_days > 1 ? static_cast<double>(r.day) / (cfg.num_days - 1) : 1.0;
        unlocked = 1 + static_cast<std::size_t>(
                           std::floor(progress * static_cast<double>(own_services.size() - 1)));
      }
      const std::string focus = unlocked ? own_services[urng.below(unlocked)] : std::string();

      const int n_act = static_cast<int>(urng.between(cfg.activities_per_session_range.first,
                                                      cfg.activities_per_session_range.second));
      for (int k = 0; k < n_act; ++k) {
        Activity a;
        if (urng.bernoulli(cfg.p_task)) {
          const double r2 = urng.uniform();
          const auto pick = [&](const std::vector<Activity>& pool) {
            std::vector<double> w(pool.size());
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::pow(static_cast<double>(i + 1), -cfg.page_zipf);
            return pool[urng.categorical(w)];
          };
          if (unlocked && (r2 < cfg.focus_share || shared_pool.empty())) {
            a = pick(service_pool[focus]);
          } else if (!shared_pool.empty() && (r2 < cfg.focus_share + cfg.shared_share || !unlocked)) {
            a = pick(shared_pool);
          } else {
            a = pick(service_pool[own_services[urng.below(unlocked)]]);
          }
        } else {
          a = all_activities[urng.below(all_activities.size())];
        }
        r.activities.push_back(std::move(a));
      }
      corpus.records.push_back(std::move(r));
    }
    std::vector<SessionRecord*> mine;
    for (std::size_t i = first; i < corpus.records.size(); ++i) mine.push_back(&corpus.records[i]);
    fill_context(mine);
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct CorpusSplit {
  std::vector<SessionRecord> train, val, test;
};

inline constexpr std::array<double, 3> kDefaultSplitRatios{0.663, 0.213, 0.124};

// Whole users go to one split, chosen by a seeded hash of user_id.
inline CorpusSplit split_corpus(const std::vector<SessionRecord>& records,
                                std::array<double, 3> ratios = kDefaultSplitRatios,
                                std::uint64_t seed = 0) {
  if (records.empty()) throw std::invalid_argument("split_corpus: empty corpus");
  for (double r : ratios)
    if (!(r >= 0.0)) throw ValidationError("ratios", "negative ratio");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
    throw ValidationError("ratios", "must sum to 1");
  CorpusSplit out;
  std::unordered_map<std::string, int> bucket_of;
  for (const auto& r : records) {
    auto [it, inserted] = bucket_of.try_emplace(r.user_id, 0);
    if (inserted) {
      std::uint64_t h = fnv1a(&seed, sizeof seed);
      h = fnv1a(r.user_id, h);
      // Final avalanche so that adjacent ids spread evenly.
      h ^= h >> 33;
      h *= 0xff51afd7ed558ccdULL;
      h ^= h >> 33;
      const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
      it->second = u < ratios[0] ? 0 : u < ratios[0] + ratios[1] ? 1 : 2;
      if (ratios[2] == 0.0 && it->second == 2) it->second = ratios[1] > 0 ? 1 : 0;
    }
    (it->second == 0 ? out.train : it->second == 1 ? out.val : out.test).push_back(r);
  }
  return out;
}

inline std::pair<std::vector<SessionRecord>, std::vector<SessionRecord>> split_by_day(
    const std::vector<SessionRecord>& records, int seen_days) {
  if (seen_days < 1) throw ValidationError("seen_days", "must be >= 1");
  std::pair<std::vector<SessionRecord>, std::vector<SessionRecord>> out;
  for (const auto& r : records) (r.day < seen_days ? out.first : out.second).push_back(r);
  return out;
}

// ---------------------------------------------------------------------------
// Line-delimited IO
// ---------------------------------------------------------------------------

inline json to_json(const SessionRecord& r) {
  json acts = json::array();
  for (const auto& a : r.activities) acts.push_back({a.service, a.page});
  auto billed = [](const std::vector<BilledService>& v) {
    json arr = json::array();
    for (const auto& b : v) arr.push_back({b.service, std::string(to_string(b.bucket))});
    return arr;
  };
  json j;
  j["user_id"] = r.user_id;
  j["session_id"] = r.session_id;
  j["day"] = r.day;
  j["activities"] = std::move(acts);
  j["country"] = r.country;
  j["city"] = r.city;
  j["daily_pages"] = r.daily_pages;
  j["daily_services"] = r.daily_services;
  j["daily_billed"] = billed(r.daily_billed);
  j["monthly_billed"] = billed(r.monthly_billed);
  j["latent_persona"] = r.latent_persona ? json(*r.latent_persona) : json(nullptr);
  return j;
}

// Throws ValidationError naming the first missing or ill-typed field.
inline SessionRecord record_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("record", "expected an object");
  auto field = [&](const char* name) -> const json& {
    auto it = j.find(name);
    if (it == j.end()) throw ValidationError(name, "missing field");
    return *it;
  };
  auto str = [&](const char* name) {
    const json& v = field(name);
    if (!v.is_string()) throw ValidationError(name, "expected a string");
    return v.get<std::string>();
  };
  auto str_list = [&](const char* name) {
    const json& v = field(name);
    if (!v.is_array()) throw ValidationError(name, "expected an array");
    std::vector<std::string> out;
    for (const auto& e : v) {
      if (!e.is_string()) throw ValidationError(name, "expected strings");
      out.push_back(e.get<std::string>());
    }
    return out;
  };
  auto billed = [&](const char* name) {
    const json& v = field(name);
    if (!v.is_array()) throw ValidationError(name, "expected an array");
    std::vector<BilledService> out;
    for (const auto& e : v) {
      if (!e.is_array() || e.size() != 2 || !e[0].is_string() || !e[1].is_string())
        throw ValidationError(name, "expected [service, bucket] pairs");
      auto b = parse_bucket(e[1].get<std::string>());
      if (!b) throw ValidationError(name, "unknown bucket \"" + e[1].get<std::string>() + "\"");
      out.push_back({e[0].get<std::string>(), *b});
    }
    return out;
  };

  SessionRecord r;
  r.user_id = str("user_id");
  r.session_id = str("session_id");
  const json& day = field("day");
  if (!day.is_number_integer()) throw ValidationError("day", "expected an integer");
  r.day = day.get<int>();
  const json& acts = field("activities");
  if (!acts.is_array()) throw ValidationError("activities", "expected an array");
  for (const auto& e : acts) {
    if (!e.is_array() || e.size() != 2 || !e[0].is_string() || !e[1].is_string())
      throw ValidationError("activities", "expected [service, page] pairs");
    r.activities.push_back({e[0].get<std::string>(), e[1].get<std::string>()});
  }
  r.country = str("country");
  r.city = str("city");
  r.daily_pages = str_list("daily_pages");
  r.daily_services = str_list("daily_services");
  r.daily_billed = billed("daily_billed");
  r.monthly_billed = billed("monthly_billed");
  if (auto it = j.find("latent_persona"); it != j.end() && !it->is_null()) {
    if (!it->is_number_integer()) throw ValidationError("latent_persona", "expected integer or null");
    r.latent_persona = it->get<int>();
  }
  validate_record(r);
  return r;
}

inline std::string record_to_line(const SessionRecord& r) { return to_json(r).dump(); }

namespace detail {
template <typename Fn>
void for_each_line(std::istream& in, Fn&& fn) {
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(n, e.what());
    }
    try {
      fn(j);
    } catch (const ValidationError& e) {
      throw ParseError(n, e.what());
    } catch (const json::exception& e) {
      throw ParseError(n, e.what());
    }
  }
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return in;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}
}  // namespace detail

inline std::vector<SessionRecord> read_records(std::istream& in) {
  std::vector<SessionRecord> out;
  detail::for_each_line(in, [&](const json& j) { out.push_back(record_from_json(j)); });
  return out;
}

inline std::vector<SessionRecord> load_corpus(const std::string& path) {
  auto in = detail::open_in(path);
  return read_records(in);
}

inline void write_records(std::ostream& out, const std::vector<SessionRecord>& records) {
  for (const auto& r : records) out << record_to_line(r) << '\n';
}

inline void save_corpus(const std::vector<SessionRecord>& records, const std::string& path) {
  auto out = detail::open_out(path);
  write_records(out, records);
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline void save_catalog(const ServiceCatalog& catalog, const std::string& path) {
  auto out = detail::open_out(path);
  for (const auto& e : catalog.entries()) {
    json j{{"service_id", e.service_id}, {"name", e.name}, {"description", e.description},
           {"pages", e.pages}};
    out << j.dump() << '\n';
  }
}

inline ServiceCatalog load_catalog(const std::string& path) {
  auto in = detail::open_in(path);
  std::vector<CatalogEntry> entries;
  detail::for_each_line(in, [&](const json& j) {
    entries.push_back({j.at("service_id").get<std::string>(), j.at("name").get<std::string>(),
                       j.at("description").get<std::string>(),
                       j.at("pages").get<std::vector<std::string>>()});
  });
  return ServiceCatalog(std::move(entries));
}

inline void save_taxonomy(const Taxonomy& tax, const std::string& path) {
  auto out = detail::open_out(path);
  for (const auto& t : tax.tasks) {
    json pool = json::array();
    for (const auto& a : t.activity_pool) pool.push_back({a.service, a.page});
    json j{{"kind", "task"}, {"task_id", t.task_id}, {"name", t.name},
           {"shared", t.shared}, {"activity_pool", pool}};
    out << j.dump() << '\n';
  }
  for (const auto& p : tax.personas) {
    json j{{"kind", "persona"}, {"persona_id", p.persona_id}, {"name", p.name}, {"tasks", p.tasks}};
    out << j.dump() << '\n';
  }
}

inline Taxonomy load_taxonomy(const std::string& path) {
  auto in = detail::open_in(path);
  Taxonomy tax;
  detail::for_each_line(in, [&](const json& j) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "task") {
      TaskSpec t;
      t.task_id = j.at("task_id").get<int>();
      t.name = j.at("name").get<std::string>();
      t.shared = j.value("shared", false);
      for (const auto& e : j.at("activity_pool"))
        t.activity_pool.push_back({e.at(0).get<std::string>(), e.at(1).get<std::string>()});
      std::sort(t.activity_pool.begin(), t.activity_pool.end());
      tax.tasks.push_back(std::move(t));
    } else if (kind == "persona") {
      PersonaSpec p;
      p.persona_id = j.at("persona_id").get<int>();
      p.name = j.at("name").get<std::string>();
      p.tasks = j.at("tasks").get<std::vector<int>>();
      std::sort(p.tasks.begin(), p.tasks.end());
      tax.personas.push_back(std::move(p));
    } else {
      throw ValidationError("kind", "unknown entry kind " + kind);
    }
  });
  tax.validate();
  return tax;
}

}  // namespace sessionbert
