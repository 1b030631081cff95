#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "sessionbert/checkpoint.hpp"
#include "sessionbert/model.hpp"
#include "sessionbert/training.hpp"

namespace sessionbert {

using Embeddings = Mat<double>;  // one unit-norm row per session

struct SessionEmbedding {
  std::vector<double> vector;
  std::string session_id;
  std::string user_id;
};

// Mean of the non-pad final hidden states, L2-normalized.
template <typename S>
SessionEmbedding embed_session(const SessionRecord& record, const ModelState<S>& state, const Vocabulary& vocab) {
  const auto enc = encode(flatten_session(record), vocab, static_cast<std::size_t>(state.config.max_len));
  const Mat<double> pooled = pooled_representation(enc, state).template cast<double>();
  const double norm = pooled.norm();
  if (!(norm > 0) || !std::isfinite(norm)) throw NumericalError("degenerate session embedding");
  SessionEmbedding e;
  e.vector.assign(pooled.data(), pooled.data() + pooled.size());
  for (auto& v : e.vector) v /= norm;
  e.session_id = record.session_id;
  e.user_id = record.user_id;
  return e;
}

template <typename S>
Embeddings embed_sessions(const std::vector<SessionRecord>& records, const ModelState<S>& state,
                          const Vocabulary& vocab) {
  Embeddings out(static_cast<Eigen::Index>(records.size()), state.config.d_model);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto e = embed_session(records[i], state, vocab);
    out.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(e.vector.data(), static_cast<Eigen::Index>(e.vector.size()));
  }
  return out;
}

inline Embeddings normalize_rows(Embeddings x) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double n = x.row(i).norm();
    if (n > 0) x.row(i) /= n;
  }
  return x;
}

struct ClusterModel {
  int k = 0;
  Mat<double> centroids;  // k x d, unit rows
  std::uint64_t seed = 0;
  double inertia = 0;     // sum over points of 1 - x.c for the assigned centroid
};

struct KMeansResult {
  ClusterModel model;
  std::vector<int> assignments;
  std::vector<double> objective_history;  // after each assignment step
  int iterations = 0;
};

// Nearest centroid by cosine distance; ties go to the smallest index.
inline int assign_cluster(std::span<const double> x, const ClusterModel& m) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < m.k; ++c) {
    double dot = 0;
    for (std::size_t j = 0; j < x.size(); ++j) dot += x[j] * m.centroids(c, static_cast<Eigen::Index>(j));
    const double d = 1.0 - dot;
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

namespace detail {

// Assigns every row; returns the objective.
inline double assign_all(const Embeddings& x, const Mat<double>& centroids, std::vector<int>& assign,
                         std::vector<double>& dist) {
  const Mat<double> dots = x * centroids.transpose();
  double obj = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::Index best = 0;
    double best_d = 1.0 - dots(i, 0);
    for (Eigen::Index c = 1; c < dots.cols(); ++c) {
      const double d = 1.0 - dots(i, c);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    assign[static_cast<std::size_t>(i)] = static_cast<int>(best);
    dist[static_cast<std::size_t>(i)] = best_d;
    obj += best_d;
  }
  return obj;
}

inline Mat<double> round_to_f32(const Mat<double>& m) {
  Mat<double> out = m.cast<float>().cast<double>();
  return out;
}

}  // namespace detail

// Spherical k-means with k-means++ seeding. Empty clusters are reseeded
// with the point farthest from its centroid. The objective is checked to be
// non-increasing at every iteration.
inline KMeansResult kmeans_fit(const Embeddings& embeddings, int k, std::uint64_t seed, int max_iter = 100,
                               double tol = 1e-6) {
  const auto n = embeddings.rows();
  if (k < 2) throw ValidationError("k", "must be >= 2");
  if (k > n) throw ValidationError("k", "exceeds the number of points");
  const Embeddings x = normalize_rows(embeddings);
  Rng rng(seed);

  Mat<double> centroids(k, x.cols());
  std::vector<double> nearest(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  Eigen::Index first = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(n)));
  centroids.row(0) = x.row(first);
  for (int c = 1; c < k; ++c) {
    const Eigen::VectorXd dots = x * centroids.row(c - 1).transpose();
    std::vector<double> w(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      auto& d = nearest[static_cast<std::size_t>(i)];
      d = std::min(d, std::max(0.0, 1.0 - dots(i)));
      w[static_cast<std::size_t>(i)] = d * d;
    }
    const bool all_zero = std::all_of(w.begin(), w.end(), [](double v) { return v <= 0; });
    const auto pick = all_zero ? rng.below(static_cast<std::size_t>(n)) : rng.categorical(w);
    centroids.row(c) = x.row(static_cast<Eigen::Index>(pick));
  }

  KMeansResult r;
  std::vector<int> assign(static_cast<std::size_t>(n));
  std::vector<double> dist(static_cast<std::size_t>(n));
  for (int it = 0; it < max_iter; ++it) {
    const double obj = detail::assign_all(x, centroids, assign, dist);
    if (!r.objective_history.empty() && obj > r.objective_history.back() + 1e-9 * (1.0 + std::abs(obj)))
      throw NumericalError("k-means objective increased");
    r.objective_history.push_back(obj);
    r.iterations = it + 1;

    Mat<double> sums = Mat<double>::Zero(k, x.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    Mat<double> next = centroids;
    std::vector<char> taken(static_cast<std::size_t>(n), 0);
    for (int c = 0; c < k; ++c) {
      const double norm = sums.row(c).norm();
      if (counts[static_cast<std::size_t>(c)] > 0 && norm > 1e-12) {
        next.row(c) = sums.row(c) / norm;
        continue;
      }
      // Reseed with the farthest point not already used for a reseed.
      Eigen::Index far = -1;
      for (Eigen::Index i = 0; i < n; ++i)
        if (!taken[static_cast<std::size_t>(i)] && (far < 0 || dist[static_cast<std::size_t>(i)] > dist[static_cast<std::size_t>(far)]))
          far = i;
      taken[static_cast<std::size_t>(far)] = 1;
      next.row(c) = x.row(far);
    }
    const double moved = (next - centroids).rowwise().norm().maxCoeff();
    centroids = std::move(next);
    if (moved < tol) break;
  }
  // Centroids are persisted as f32; fit results use the stored values.
  centroids = detail::round_to_f32(centroids);
  r.model.k = k;
  r.model.seed = seed;
  r.model.inertia = detail::assign_all(x, centroids, assign, dist);
  r.model.centroids = std::move(centroids);
  r.assignments = std::move(assign);
  return r;
}

// Mean silhouette under cosine distance. Cluster mean distances use
// 1 - x.mean(C), which is exact for unit vectors and avoids the n x n matrix.
inline double silhouette(const Embeddings& embeddings, const std::vector<int>& assignments) {
  const auto n = embeddings.rows();
  if (static_cast<std::size_t>(n) != assignments.size()) throw ValidationError("assignments", "length mismatch");
  const int k = assignments.empty() ? 0 : *std::max_element(assignments.begin(), assignments.end()) + 1;
  std::vector<int> counts(static_cast<std::size_t>(std::max(k, 0)), 0);
  for (int a : assignments) {
    if (a < 0) throw ValidationError("assignments", "negative cluster id");
    ++counts[static_cast<std::size_t>(a)];
  }
  if (std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; }) < 2)
    throw ValidationError("assignments", "silhouette needs at least two clusters");
  const Embeddings x = normalize_rows(embeddings);
  Mat<double> sums = Mat<double>::Zero(k, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) sums.row(assignments[static_cast<std::size_t>(i)]) += x.row(i);
  const Mat<double> dots = x * sums.transpose();  // n x k
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int own = assignments[static_cast<std::size_t>(i)];
    const int own_count = counts[static_cast<std::size_t>(own)];
    if (own_count == 1) continue;  // singleton scores 0
    const double self = x.row(i).squaredNorm();
    const double a = std::max(0.0, (own_count - 1) - (dots(i, own) - self)) / (own_count - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      const int cnt = counts[static_cast<std::size_t>(c)];
      if (c == own || cnt == 0) continue;
      b = std::min(b, std::max(0.0, 1.0 - dots(i, c) / cnt));
    }
    const double denom = std::max(a, b);
    total += denom > 0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

struct SweepRow {
  int k = 0;
  double silhouette = 0;
  double runtime_ms = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  int selected_k = 0;
  std::vector<KMeansResult> fits;
};

// One fit + silhouette per k; selected_k maximizes silhouette (smallest k on ties).
inline SweepResult sweep_k(const Embeddings& embeddings, int k_min = 3, int k_max = 9, std::uint64_t seed = 0,
                           int max_iter = 100, double tol = 1e-6) {
  if (k_min > k_max) throw ValidationError("k_range", "empty range");
  SweepResult s;
  double best = -std::numeric_limits<double>::infinity();
  for (int k = k_min; k <= k_max; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    auto fit = kmeans_fit(embeddings, k, seed, max_iter, tol);
    const double score = silhouette(embeddings, fit.assignments);
    const auto t1 = std::chrono::steady_clock::now();
    s.rows.push_back({k, score, std::chrono::duration<double, std::milli>(t1 - t0).count()});
    if (score > best) {
      best = score;
      s.selected_k = k;
    }
    s.fits.push_back(std::move(fit));
  }
  return s;
}

inline std::string format_sweep_table(const SweepResult& s, bool with_runtime = true) {
  std::string out = with_runtime ? "k\tsilhouette\truntime_ms\n" : "k\tsilhouette\n";
  char buf[96];
  for (const auto& r : s.rows) {
    if (with_runtime)
      std::snprintf(buf, sizeof buf, "%d\t%.6f\t%.1f\n", r.k, r.silhouette, r.runtime_ms);
    else
      std::snprintf(buf, sizeof buf, "%d\t%.6f\n", r.k, r.silhouette);
    out += buf;
  }
  out += "selected_k\t" + std::to_string(s.selected_k) + "\n";
  return out;
}

inline constexpr std::string_view kClusterHeader = "sessionbert-clusters v1";

// Text header (version, k, d_model, seed, inertia) then k*d little-endian f32.
inline void save_cluster_model(const ClusterModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  char inertia[64];
  std::snprintf(inertia, sizeof inertia, "%.17g", m.inertia);
  out << kClusterHeader << "\nk " << m.k << "\nd_model " << m.centroids.cols() << "\nseed " << m.seed
      << "\ninertia " << inertia << "\n";
  std::vector<float> data(static_cast<std::size_t>(m.centroids.size()));
  for (Eigen::Index i = 0; i < m.centroids.size(); ++i) data[static_cast<std::size_t>(i)] = static_cast<float>(m.centroids.data()[i]);
  detail::to_little_endian(data);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline ClusterModel load_cluster_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kClusterHeader) throw std::runtime_error("unsupported cluster model header");
  ClusterModel m;
  long d = 0;
  std::string key;
  auto read_kv = [&](const char* expect, auto& value) {
    if (!(in >> key >> value) || key != expect) throw std::runtime_error(std::string("cluster model: expected ") + expect);
  };
  read_kv("k", m.k);
  read_kv("d_model", d);
  read_kv("seed", m.seed);
  read_kv("inertia", m.inertia);
  in.get();  // newline
  if (m.k < 2 || d < 1) throw std::runtime_error("cluster model: bad dimensions");
  std::vector<float> data(static_cast<std::size_t>(m.k) * static_cast<std::size_t>(d));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != data.size() * sizeof(float))
    throw std::runtime_error("cluster model: truncated centroid block");
  detail::to_little_endian(data);
  m.centroids.resize(m.k, d);
  for (std::size_t i = 0; i < data.size(); ++i) m.centroids.data()[i] = static_cast<double>(data[i]);
  return m;
}

}  // namespace sessionbert
