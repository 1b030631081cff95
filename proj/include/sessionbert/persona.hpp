#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sessionbert/corpus.hpp"
#include "sessionbert/segment.hpp"

namespace sessionbert {

struct ActivityCount {
  Activity activity;
  std::size_t count = 0;
};

// Descending count, ties broken by the "service;page" token.
inline std::vector<ActivityCount> top_activities(const std::vector<const SessionRecord*>& records, std::size_t n) {
  std::map<std::string, ActivityCount> counts;
  for (const SessionRecord* r : records)
    for (const auto& a : r->activities) {
      auto& c = counts[a.token()];
      c.activity = a;
      ++c.count;
    }
  std::vector<std::pair<std::string, ActivityCount>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second.count > b.second.count; });
  std::vector<ActivityCount> out;
  for (std::size_t i = 0; i < ranked.size() && i < n; ++i) out.push_back(ranked[i].second);
  return out;
}

inline std::vector<ActivityCount> top_activities(const std::vector<SessionRecord>& records, std::size_t n) {
  std::vector<const SessionRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  return top_activities(ptrs, n);
}

// Activity -> task id over a fixed activity set. Unmapped activities are
// absent rather than defaulted.
class ActivityTaskMap {
 public:
  ActivityTaskMap() = default;

  void set(const Activity& a, int task_id) { map_[a.token()] = task_id; }
  std::optional<int> task_of(const Activity& a) const {
    const auto it = map_.find(a.token());
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t size() const { return map_.size(); }
  const std::map<std::string, int>& entries() const { return map_; }

  void validate(const Taxonomy& tax) const {
    std::set<int> ids;
    for (const auto& t : tax.tasks) ids.insert(t.task_id);
    for (const auto& [token, task] : map_)
      if (!ids.contains(task)) throw ValidationError("task_id", "activity " + token + " maps to unknown task " + std::to_string(task));
  }

  friend bool operator==(const ActivityTaskMap&, const ActivityTaskMap&) = default;

 private:
  std::map<std::string, int> map_;
};

// Maps each of the top `n` activities to the task whose pool contains it.
// An activity in several pools goes to a non-shared task first, then to the
// smallest task id.
inline ActivityTaskMap build_activity_task_map(const std::vector<SessionRecord>& records, const Taxonomy& tax,
                                               std::size_t n = 200) {
  std::map<std::string, std::pair<bool, int>> owner;  // token -> (shared, task)
  for (const auto& t : tax.tasks)
    for (const auto& a : t.activity_pool) {
      const std::pair<bool, int> cand{t.shared, t.task_id};
      auto [it, inserted] = owner.emplace(a.token(), cand);
      if (!inserted && cand < it->second) it->second = cand;
    }
  ActivityTaskMap m;
  for (const auto& ac : top_activities(records, n)) {
    const auto it = owner.find(ac.activity.token());
    if (it != owner.end()) m.set(ac.activity, it->second.second);
  }
  return m;
}

inline void save_activity_task_map(const ActivityTaskMap& m, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& [token, task] : m.entries()) out << token << '\t' << task << '\n';
}

inline ActivityTaskMap load_activity_task_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  ActivityTaskMap m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(lineno, "expected service;page<TAB>task_id");
    try {
      std::size_t used = 0;
      const std::string id = line.substr(tab + 1);
      const int task = std::stoi(id, &used);
      if (used != id.size()) throw ParseError(lineno, "bad task id");
      m.set(parse_activity_token(line.substr(0, tab)), task);
    } catch (const ValidationError& e) {
      throw ParseError(lineno, e.what());
    } catch (const std::logic_error&) {
      throw ParseError(lineno, "bad task id");
    }
  }
  return m;
}

// num[i][k]: occurrences of task i's mapped activities in cluster k.
struct TaskClusterCounts {
  std::vector<std::vector<long>> num;  // T x K

  std::size_t tasks() const { return num.size(); }
  std::size_t clusters() const { return num.empty() ? 0 : num.front().size(); }
};

inline TaskClusterCounts count_task_clusters(const std::vector<SessionRecord>& records,
                                             const std::vector<int>& assignments, int k, const ActivityTaskMap& map,
                                             const Taxonomy& tax) {
  if (records.size() != assignments.size()) throw ValidationError("assignments", "length mismatch");
  std::map<int, std::size_t> row;
  for (std::size_t i = 0; i < tax.tasks.size(); ++i) row[tax.tasks[i].task_id] = i;
  TaskClusterCounts c;
  c.num.assign(tax.tasks.size(), std::vector<long>(static_cast<std::size_t>(k), 0));
  for (std::size_t s = 0; s < records.size(); ++s) {
    const int cluster = assignments[s];
    if (cluster < 0 || cluster >= k) throw ValidationError("assignments", "cluster out of range");
    for (const auto& a : records[s].activities)
      if (const auto t = map.task_of(a)) ++c.num[row.at(*t)][static_cast<std::size_t>(cluster)];
  }
  return c;
}

using Matrix = std::vector<std::vector<double>>;

// p[i][k] = num[i][k] / sum_j num[i][j]; all-zero rows stay zero.
inline Matrix task_cluster_probs(const TaskClusterCounts& counts) {
  Matrix p;
  for (const auto& row : counts.num) {
    long total = 0;
    for (long v : row) {
      if (v < 0) throw ValidationError("num", "negative count");
      total += v;
    }
    std::vector<double> out(row.size(), 0.0);
    if (total > 0)
      for (std::size_t k = 0; k < row.size(); ++k) out[k] = static_cast<double>(row[k]) / static_cast<double>(total);
    p.push_back(std::move(out));
  }
  return p;
}

struct PersonaMappingConfig {
  double eps_merge = 0.1;
  double tau_min = 0.05;
};

struct PersonaMapping {
  Matrix cluster_embeddings;              // K x T
  Matrix persona_onehots;                 // P x T
  Matrix scores;                          // K x P
  std::vector<int> persona_ids;           // column order of scores
  std::vector<std::vector<int>> assignment;  // cluster -> persona ids
  std::set<int> unassignable_personas;

  std::size_t clusters() const { return assignment.size(); }
};

inline std::vector<double> persona_onehot(const PersonaSpec& p, std::size_t num_tasks) {
  std::vector<double> h(num_tasks, 0.0);
  for (int t : p.tasks) {
    if (t < 0 || static_cast<std::size_t>(t) >= num_tasks) throw ValidationError("tasks", "persona task out of range");
    h[static_cast<std::size_t>(t)] = 1.0;
  }
  return h;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Per cluster: argmax persona by e_k . h_p, plus the runner-up when within
// eps_merge relative of the best. Personas whose best score over clusters is
// below tau_min are flagged unassignable. Task i is row i of `probs`.
inline PersonaMapping map_clusters_to_personas(const Matrix& probs, const std::vector<PersonaSpec>& personas,
                                               const PersonaMappingConfig& cfg = {}) {
  const std::size_t T = probs.size();
  if (T == 0) throw ValidationError("tasks", "no tasks");
  if (personas.empty()) throw ValidationError("personas", "no personas");
  const std::size_t K = probs.front().size();
  PersonaMapping m;
  m.cluster_embeddings.assign(K, std::vector<double>(T, 0.0));
  for (std::size_t i = 0; i < T; ++i) {
    if (probs[i].size() != K) throw ValidationError("probs", "ragged matrix");
    for (std::size_t k = 0; k < K; ++k) m.cluster_embeddings[k][i] = probs[i][k];
  }
  for (const auto& p : personas) {
    m.persona_onehots.push_back(persona_onehot(p, T));
    m.persona_ids.push_back(p.persona_id);
  }
  const std::size_t P = personas.size();
  m.scores.assign(K, std::vector<double>(P, 0.0));
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t p = 0; p < P; ++p) m.scores[k][p] = dot(m.cluster_embeddings[k], m.persona_onehots[p]);

  for (std::size_t k = 0; k < K; ++k) {
    std::vector<std::size_t> order(P);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return m.scores[k][a] > m.scores[k][b]; });
    std::vector<int> chosen;
    const double s1 = m.scores[k][order[0]];
    if (s1 > 0) {
      chosen.push_back(m.persona_ids[order[0]]);
      if (P > 1 && (s1 - m.scores[k][order[1]]) / s1 <= cfg.eps_merge) chosen.push_back(m.persona_ids[order[1]]);
    }
    m.assignment.push_back(std::move(chosen));  // empty when the cluster scores zero everywhere
  }
  for (std::size_t p = 0; p < P; ++p) {
    double best = 0;
    for (std::size_t k = 0; k < K; ++k) best = std::max(best, m.scores[k][p]);
    if (best < cfg.tau_min) m.unassignable_personas.insert(m.persona_ids[p]);
  }
  return m;
}

// Table 1 shaped: one row per cluster with its scores, persona(s) and top
// activities, then the unassignable personas.
inline std::string format_persona_table(const PersonaMapping& m,
                                        const std::vector<std::vector<ActivityCount>>& top_per_cluster = {}) {
  std::string out = "cluster";
  for (int id : m.persona_ids) out += "\tscore_p" + std::to_string(id);
  out += "\tpersonas\tflags\ttop_activities\n";
  char buf[32];
  for (std::size_t k = 0; k < m.clusters(); ++k) {
    out += std::to_string(k);
    for (double s : m.scores[k]) {
      std::snprintf(buf, sizeof buf, "\t%.4f", s);
      out += buf;
    }
    out += '\t';
    for (std::size_t i = 0; i < m.assignment[k].size(); ++i)
      out += (i ? "+" : "") + std::to_string(m.assignment[k][i]);
    if (m.assignment[k].empty()) out += "-";
    out += m.assignment[k].size() > 1 ? "\tmerged\t" : m.assignment[k].empty() ? "\tempty\t" : "\t-\t";
    if (k < top_per_cluster.size())
      for (std::size_t i = 0; i < top_per_cluster[k].size(); ++i)
        out += (i ? "," : "") + top_per_cluster[k][i].activity.token();
    out += '\n';
  }
  out += "unassignable";
  for (int id : m.unassignable_personas) out += "\t" + std::to_string(id);
  out += '\n';
  return out;
}

// Persistence: one line per cluster "cluster<TAB>id[,id...]" and one
// "unassignable<TAB>id,..." line. Scores are report-only.
inline void save_persona_mapping(const PersonaMapping& m, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "sessionbert-persona-mapping v1\n";
  auto join = [](const auto& ids) {
    std::string s;
    for (int id : ids) s += (s.empty() ? "" : ",") + std::to_string(id);
    return s;
  };
  for (std::size_t k = 0; k < m.clusters(); ++k) out << "cluster\t" << k << '\t' << join(m.assignment[k]) << '\n';
  out << "unassignable\t" << join(m.unassignable_personas) << '\n';
}

inline PersonaMapping load_persona_mapping(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "sessionbert-persona-mapping v1")
    throw std::runtime_error("unsupported persona mapping header");
  auto split_ids = [](const std::string& s) {
    std::vector<int> ids;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) ids.push_back(std::stoi(tok));
    return ids;
  };
  PersonaMapping m;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::stringstream ls(line);
    std::string kind, a, b;
    std::getline(ls, kind, '\t');
    std::getline(ls, a, '\t');
    std::getline(ls, b, '\t');
    try {
      if (kind == "cluster") {
        if (std::stoul(a) != m.assignment.size()) throw ParseError(lineno, "clusters out of order");
        m.assignment.push_back(split_ids(b));
      } else if (kind == "unassignable") {
        for (int id : split_ids(a)) m.unassignable_personas.insert(id);
      } else if (!kind.empty()) {
        throw ParseError(lineno, "unknown line kind " + kind);
      }
    } catch (const std::logic_error&) {
      throw ParseError(lineno, "bad id");
    }
  }
  return m;
}

struct UserPersona {
  std::vector<int> personas;
  int cluster = 0;
  double confidence = 0;
  std::vector<double> cluster_confidences;  // (1 + cos_k) / sum_j (1 + cos_j)
};

// Nearest centroid to the renormalized mean of the user's session
// embeddings.
inline UserPersona assign_user_persona_from_embeddings(const std::vector<std::vector<double>>& session_embeddings,
                                                       const ClusterModel& clusters, const PersonaMapping& mapping) {
  if (session_embeddings.empty()) throw ValidationError("sessions", "user has no sessions");
  const std::size_t d = session_embeddings.front().size();
  if (static_cast<Eigen::Index>(d) != clusters.centroids.cols()) throw ValidationError("d_model", "embedding size mismatch");
  if (mapping.clusters() != static_cast<std::size_t>(clusters.k)) throw ValidationError("mapping", "cluster count mismatch");
  std::vector<double> u(d, 0.0);
  for (const auto& e : session_embeddings)
    for (std::size_t j = 0; j < d; ++j) u[j] += e[j];
  double norm = 0;
  for (double v : u) norm += v * v;
  norm = std::sqrt(norm);
  if (!(norm > 0)) throw NumericalError("user embedding has zero norm");
  for (double& v : u) v /= norm;

  UserPersona out;
  out.cluster = assign_cluster(u, clusters);
  double total = 0;
  for (int k = 0; k < clusters.k; ++k) {
    double cos = 0;
    for (std::size_t j = 0; j < d; ++j) cos += u[j] * clusters.centroids(k, static_cast<Eigen::Index>(j));
    out.cluster_confidences.push_back(1.0 + cos);
    total += 1.0 + cos;
  }
  for (double& c : out.cluster_confidences) c /= total;
  out.confidence = out.cluster_confidences[static_cast<std::size_t>(out.cluster)];
  out.personas = mapping.assignment[static_cast<std::size_t>(out.cluster)];
  return out;
}

template <typename S>
UserPersona assign_user_persona(const std::vector<SessionRecord>& user_sessions, const ModelState<S>& state,
                                const Vocabulary& vocab, const ClusterModel& clusters, const PersonaMapping& mapping) {
  if (user_sessions.empty()) throw ValidationError("sessions", "user has no sessions");
  std::vector<std::vector<double>> embs;
  for (const auto& r : user_sessions) embs.push_back(embed_session(r, state, vocab).vector);
  return assign_user_persona_from_embeddings(embs, clusters, mapping);
}

}  // namespace sessionbert
