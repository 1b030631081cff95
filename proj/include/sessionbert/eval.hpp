#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sessionbert/corpus.hpp"
#include "sessionbert/persona.hpp"

namespace sessionbert {

struct ClassMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::size_t support = 0;
};

template <typename Label>
struct MetricReport {
  double accuracy = 0;
  double f1_weighted = 0;
  std::map<Label, ClassMetrics> per_class;
};

// Accuracy and support-weighted F1. Classes that only appear in
// predictions are listed with support 0 and do not enter the weighted mean.
template <typename Label>
MetricReport<Label> classification_metrics(const std::vector<Label>& predictions, const std::vector<Label>& labels) {
  if (predictions.size() != labels.size()) throw ValidationError("predictions", "length differs from labels");
  if (labels.empty()) throw ValidationError("labels", "empty");
  std::map<Label, std::size_t> tp, predicted;
  MetricReport<Label> r;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++r.per_class[labels[i]].support;
    ++predicted[predictions[i]];
    r.per_class[predictions[i]];
    if (predictions[i] == labels[i]) {
      ++tp[labels[i]];
      ++correct;
    }
  }
  double weighted = 0;
  for (auto& [label, m] : r.per_class) {
    const double t = static_cast<double>(tp[label]);
    m.precision = predicted[label] ? t / static_cast<double>(predicted[label]) : 0.0;
    m.recall = m.support ? t / static_cast<double>(m.support) : 0.0;
    m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    weighted += m.f1 * static_cast<double>(m.support);
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  r.f1_weighted = weighted / static_cast<double>(labels.size());
  return r;
}

// Adjusted Rand index from the pair-counting contingency table.
template <typename A, typename B>
double clustering_agreement(const std::vector<A>& a, const std::vector<B>& b) {
  if (a.size() != b.size()) throw ValidationError("assignments", "length differs from latent labels");
  if (a.size() < 2) throw ValidationError("assignments", "need at least two points");
  std::map<std::pair<A, B>, double> cells;
  std::map<A, double> rows;
  std::map<B, double> cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++cells[{a[i], b[i]}];
    ++rows[a[i]];
    ++cols[b[i]];
  }
  auto pairs = [](double n) { return n * (n - 1) / 2; };
  double index = 0, sa = 0, sb = 0;
  for (const auto& [_, n] : cells) index += pairs(n);
  for (const auto& [_, n] : rows) sa += pairs(n);
  for (const auto& [_, n] : cols) sb += pairs(n);
  const double total = pairs(static_cast<double>(a.size()));
  const double expected = sa * sb / total;
  const double max_index = (sa + sb) / 2;
  if (max_index == expected) return 1.0;  // both partitions trivial and identical in shape
  return (index - expected) / (max_index - expected);
}

// Ranked service ids for a user given the sessions visible so far.
using Recommender = std::function<std::vector<std::string>(const std::vector<SessionRecord>& seen, std::size_t n)>;

struct HitReport {
  int seen_days = 0;
  std::map<std::size_t, double> hit_at;
  std::size_t eligible_users = 0;
};

// Users with a seen session and at least one service in the unseen part that
// never appeared in their seen sessions. Hit@N for every N comes from one
// top-max(N) list, so smaller N is a prefix.
inline HitReport hit_at_n(const std::vector<SessionRecord>& records, int seen_days, const std::vector<std::size_t>& ns,
                          const Recommender& recommend) {
  if (ns.empty()) throw ValidationError("n", "no cut-offs given");
  int last_day = -1;
  for (const auto& r : records) last_day = std::max(last_day, r.day);
  if (last_day < seen_days) throw ValidationError("seen_days", "corpus does not extend past the seen period");
  std::map<std::string, std::vector<const SessionRecord*>> by_user;
  for (const auto& r : records) by_user[r.user_id].push_back(&r);
  const std::size_t max_n = *std::max_element(ns.begin(), ns.end());

  HitReport rep;
  rep.seen_days = seen_days;
  std::map<std::size_t, std::size_t> hits;
  for (auto& [user, sessions] : by_user) {
    std::stable_sort(sessions.begin(), sessions.end(),
                     [](const SessionRecord* x, const SessionRecord* y) { return x->day < y->day; });
    std::vector<SessionRecord> seen;
    std::set<std::string> seen_services, fresh;
    for (const SessionRecord* r : sessions)
      if (r->day < seen_days) {
        seen.push_back(*r);
        for (const auto& a : r->activities) seen_services.insert(a.service);
      }
    if (seen.empty()) continue;
    for (const SessionRecord* r : sessions)
      if (r->day >= seen_days)
        for (const auto& a : r->activities)
          if (!seen_services.contains(a.service)) fresh.insert(a.service);
    if (fresh.empty()) continue;
    ++rep.eligible_users;
    const auto recs = recommend(seen, max_n);
    for (std::size_t n : ns) {
      const auto end = recs.begin() + static_cast<std::ptrdiff_t>(std::min(n, recs.size()));
      if (std::any_of(recs.begin(), end, [&](const std::string& s) { return fresh.contains(s); })) ++hits[n];
    }
  }
  if (rep.eligible_users == 0) throw ValidationError("seen_days", "no eligible users for this split");
  for (std::size_t n : ns)
    rep.hit_at[n] = static_cast<double>(hits[n]) / static_cast<double>(rep.eligible_users);
  return rep;
}

// Rows mirror the 6/10/12 day splits; columns Hit@5, Hit@3.
inline std::string format_hit_table(const std::vector<HitReport>& reports) {
  std::string out = "split\tHit@5\tHit@3\teligible_users\n";
  char buf[128];
  for (const auto& r : reports) {
    auto at = [&](std::size_t n) { return r.hit_at.contains(n) ? r.hit_at.at(n) : std::nan(""); };
    std::snprintf(buf, sizeof buf, "%d day\t%.4f\t%.4f\t%zu\n", r.seen_days, at(5), at(3), r.eligible_users);
    out += buf;
  }
  return out;
}

struct TailoringInput {
  std::vector<int> personas;               // assigned persona ids
  std::vector<std::string> recommended;    // service ids
};

// Share of (user, recommended service) pairs where some activity of the
// service maps to a task of one of the user's assigned personas.
inline double tailoring_report(const std::vector<TailoringInput>& users, const Taxonomy& tax,
                               const ActivityTaskMap& map) {
  std::map<std::string, std::set<int>> service_tasks;
  for (const auto& [token, task] : map.entries()) service_tasks[parse_activity_token(token).service].insert(task);
  std::map<int, std::set<int>> persona_tasks;
  for (const auto& p : tax.personas) persona_tasks[p.persona_id].insert(p.tasks.begin(), p.tasks.end());
  std::size_t tailored = 0, total = 0;
  for (const auto& u : users) {
    std::set<int> tasks;
    for (int p : u.personas)
      if (persona_tasks.contains(p)) tasks.insert(persona_tasks[p].begin(), persona_tasks[p].end());
    for (const auto& s : u.recommended) {
      ++total;
      const auto it = service_tasks.find(s);
      if (it != service_tasks.end() &&
          std::any_of(it->second.begin(), it->second.end(), [&](int t) { return tasks.contains(t); }))
        ++tailored;
    }
  }
  return total ? static_cast<double>(tailored) / static_cast<double>(total) : 0.0;
}

enum class MatchLabel { Match, NotMatched, Unclear };

struct MatchMetrics {
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
  double accuracy = 0;
  double sensitivity = 0;
  double specificity = 0;  // NaN: the TP/FN convention leaves no negatives
};

// One entry per sample holding every annotator's label. A sample is TP when
// all annotators say match and FN otherwise; unclear counts as not-match.
inline MatchMetrics match_label_metrics(const std::vector<std::vector<MatchLabel>>& samples) {
  if (samples.empty()) throw ValidationError("labels", "empty");
  MatchMetrics m;
  for (const auto& s : samples) {
    const bool unanimous = !s.empty() && std::all_of(s.begin(), s.end(), [](MatchLabel l) { return l == MatchLabel::Match; });
    ++(unanimous ? m.tp : m.fn);
  }
  const auto ratio = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : std::nan(""); };
  m.accuracy = ratio(m.tp + m.tn, m.tp + m.tn + m.fp + m.fn);
  m.sensitivity = ratio(m.tp, m.tp + m.fn);
  m.specificity = ratio(m.tn, m.tn + m.fp);
  return m;
}

inline std::vector<std::vector<MatchLabel>> single_annotator(const std::vector<MatchLabel>& labels) {
  std::vector<std::vector<MatchLabel>> out;
  for (auto l : labels) out.push_back({l});
  return out;
}

template <typename Label>
std::string format_metric_row(const std::string& name, const MetricReport<Label>& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s\t%.4f\t%.4f\n", name.c_str(), r.f1_weighted, r.accuracy);
  return buf;
}

}  // namespace sessionbert
