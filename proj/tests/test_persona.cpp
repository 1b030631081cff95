#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "sessionbert/corpus.hpp"
#include "sessionbert/persona.hpp"

using namespace sessionbert;

namespace {

SessionRecord with_activities(std::vector<Activity> acts) {
  SessionRecord r;
  r.user_id = "u";
  r.session_id = "u-0";
  r.activities = std::move(acts);
  r.country = "US";
  r.city = "Seattle";
  return r;
}

PersonaSpec persona(int id, std::vector<int> tasks) {
  PersonaSpec p;
  p.persona_id = id;
  p.name = "persona" + std::to_string(id);
  p.tasks = std::move(tasks);
  return p;
}

ClusterModel axis_clusters(int k, int d) {
  ClusterModel m;
  m.k = k;
  m.centroids = Mat<double>::Zero(k, d);
  for (int i = 0; i < k; ++i) m.centroids(i, i) = 1.0;
  return m;
}

}  // namespace

TEST(TopActivities, TieBreakAndFullRanking) {
  std::vector<Activity> acts;
  for (int i = 0; i < 5; ++i) acts.push_back({"a", "x"});
  for (int i = 0; i < 3; ++i) acts.push_back({"c", "x"});
  for (int i = 0; i < 3; ++i) acts.push_back({"b", "x"});
  const std::vector<SessionRecord> records{with_activities(acts)};
  const auto top2 = top_activities(records, 2);
  ASSERT_EQ(top2.size(), 2u);
  EXPECT_EQ(top2[0].activity.token(), "a;x");
  EXPECT_EQ(top2[0].count, 5u);
  EXPECT_EQ(top2[1].activity.token(), "b;x");
  EXPECT_EQ(top_activities(records, 50).size(), 3u);
}

TEST(TopActivities, ClusterTopTenFollowsLatentPersona) {
  GeneratorConfig g;
  g.num_users = 300;
  const auto c = generate_corpus(g);
  for (int p = 0; p < 4; ++p) {
    std::set<std::string> pool;
    for (int t : c.taxonomy.personas[static_cast<std::size_t>(p)].tasks)
      for (const auto& a : c.taxonomy.tasks[static_cast<std::size_t>(t)].activity_pool) pool.insert(a.token());
    std::vector<const SessionRecord*> mine;
    for (const auto& r : c.records)
      if (r.latent_persona == p) mine.push_back(&r);
    int inside = 0;
    for (const auto& ac : top_activities(mine, 10)) inside += pool.contains(ac.activity.token());
    EXPECT_GE(inside, 9) << "persona " << p;
  }
}

TEST(ActivityTaskMap, BuildValidateAndFile) {
  GeneratorConfig g;
  g.num_users = 100;
  const auto c = generate_corpus(g);
  const auto m = build_activity_task_map(c.records, c.taxonomy, 200);
  EXPECT_NO_THROW(m.validate(c.taxonomy));
  EXPECT_GT(m.size(), 0u);
  EXPECT_LE(m.size(), 200u);
  // Pool activities map to their task; off-pool pages are absent, not defaulted.
  EXPECT_EQ(m.task_of(c.taxonomy.tasks[0].activity_pool[0]), 0);
  EXPECT_FALSE(m.task_of({"s1", "p15"}).has_value());

  const auto path = std::filesystem::temp_directory_path() / "sessionbert_activity_map.tsv";
  save_activity_task_map(m, path.string());
  EXPECT_EQ(load_activity_task_map(path.string()).entries(), m.entries());
  {
    std::ofstream out(path);
    out << "s1;p8\t3\ns1;p9\tx\n";
  }
  try {
    load_activity_task_map(path.string());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  std::filesystem::remove(path);
}

TEST(TaskClusterProbs, WorkedExample) {
  const auto p = task_cluster_probs({{{2, 0}, {1, 3}}});
  ASSERT_EQ(p.size(), 2u);
  EXPECT_DOUBLE_EQ(p[0][0], 1.0);
  EXPECT_DOUBLE_EQ(p[0][1], 0.0);
  EXPECT_DOUBLE_EQ(p[1][0], 0.25);
  EXPECT_DOUBLE_EQ(p[1][1], 0.75);
}

TEST(TaskClusterProbs, ZeroRowsAndNormalization) {
  const auto p = task_cluster_probs({{{0, 0, 0}, {0, 7, 0}, {3, 5, 9}}});
  EXPECT_EQ(p[0], (std::vector<double>{0, 0, 0}));
  EXPECT_DOUBLE_EQ(p[1][1], 1.0);
  EXPECT_NEAR(p[2][0] + p[2][1] + p[2][2], 1.0, 1e-9);
  EXPECT_THROW(task_cluster_probs({{{-1, 2}}}), ValidationError);
}

TEST(TaskClusterProbs, RowScalingInvariance) {
  const TaskClusterCounts a{{{3, 1, 4}, {1, 5, 9}}};
  const TaskClusterCounts b{{{3, 1, 4}, {7, 35, 63}}};
  const auto pa = task_cluster_probs(a), pb = task_cluster_probs(b);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(pa[i][k], pb[i][k], 1e-15);
}

TEST(CountTaskClusters, CountsMappedActivitiesOnly) {
  Taxonomy tax;
  tax.tasks = {{0, "t0", {{"s1", "p1"}}, false}, {1, "t1", {{"s2", "p2"}}, false}};
  ActivityTaskMap m;
  m.set({"s1", "p1"}, 0);
  m.set({"s2", "p2"}, 1);
  const std::vector<SessionRecord> records{
      with_activities({{"s1", "p1"}, {"s1", "p1"}}),
      with_activities({{"s1", "p1"}, {"s2", "p2"}, {"s2", "p2"}, {"s2", "p2"}, {"s9", "p9"}})};
  const auto c = count_task_clusters(records, {0, 1}, 2, m, tax);
  EXPECT_EQ(c.num, (std::vector<std::vector<long>>{{2, 1}, {0, 3}}));
}

TEST(Mapping, DotProductArgmax) {
  // e_0 = [1.0, 0.25]; A owns task 0, B owns task 1.
  const Matrix probs{{1.0}, {0.25}};
  const auto m = map_clusters_to_personas(probs, {persona(0, {0}), persona(1, {1})});
  EXPECT_DOUBLE_EQ(m.scores[0][0], 1.0);
  EXPECT_DOUBLE_EQ(m.scores[0][1], 0.25);
  EXPECT_EQ(m.assignment[0], (std::vector<int>{0}));
  EXPECT_EQ(m.cluster_embeddings[0].size(), 2u);
}

TEST(Mapping, ScoreEqualsSumOverPersonaTasks) {
  const Matrix probs{{0.1, 0.9}, {0.5, 0.5}, {0.3, 0.7}, {1.0, 0.0}};
  const std::vector<PersonaSpec> ps{persona(0, {0, 2}), persona(1, {1, 3}), persona(2, {0, 1, 2, 3})};
  const auto m = map_clusters_to_personas(probs, ps);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t p = 0; p < ps.size(); ++p) {
      double direct = 0;
      for (int t : ps[p].tasks) direct += probs[static_cast<std::size_t>(t)][k];
      EXPECT_NEAR(m.scores[k][p], direct, 1e-12);
    }
}

TEST(Mapping, MergeRule) {
  // One cluster, tasks chosen so persona scores are (0.48, 0.47, 0.05).
  const Matrix probs{{0.48}, {0.47}, {0.05}};
  const auto m = map_clusters_to_personas(probs, {persona(0, {0}), persona(1, {1}), persona(2, {2})});
  EXPECT_EQ(m.assignment[0], (std::vector<int>{0, 1}));
  // (0.48 - 0.30) / 0.48 = 0.375 > 0.1: no merge.
  const auto single = map_clusters_to_personas({{0.48}, {0.30}}, {persona(0, {0}), persona(1, {1})});
  EXPECT_EQ(single.assignment[0], (std::vector<int>{0}));
}

TEST(Mapping, UnassignableFlag) {
  const Matrix probs{{0.9, 0.8}, {0.1, 0.2}, {0.04, 0.01}};
  const auto m = map_clusters_to_personas(probs, {persona(0, {0}), persona(1, {1}), persona(2, {2})});
  EXPECT_EQ(m.unassignable_personas, (std::set<int>{2}));
  EXPECT_THROW(map_clusters_to_personas({}, {persona(0, {0})}), ValidationError);
}

TEST(Mapping, FileRoundTripAndTable) {
  const Matrix probs{{0.48, 0.1}, {0.47, 0.9}, {0.01, 0.0}};
  const auto m = map_clusters_to_personas(probs, {persona(0, {0}), persona(1, {1}), persona(2, {2})});
  const auto path = std::filesystem::temp_directory_path() / "sessionbert_mapping.tsv";
  save_persona_mapping(m, path.string());
  const auto back = load_persona_mapping(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(back.assignment, m.assignment);
  EXPECT_EQ(back.unassignable_personas, m.unassignable_personas);
  const auto table = format_persona_table(m);
  EXPECT_NE(table.find("unassignable"), std::string::npos);
}

TEST(UserPersona, ExactCentroidMatch) {
  const auto clusters = axis_clusters(3, 4);
  PersonaMapping mapping;
  mapping.assignment = {{0}, {1}, {2, 3}};
  const auto u = assign_user_persona_from_embeddings({{0, 0, 1, 0}}, clusters, mapping);
  EXPECT_EQ(u.cluster, 2);
  EXPECT_EQ(u.personas, (std::vector<int>{2, 3}));
  double sum = 0;
  for (double c : u.cluster_confidences) {
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0);
    sum += c;
  }
  EXPECT_NEAR(sum, 1.0, 1e-9);
  EXPECT_DOUBLE_EQ(u.confidence, *std::max_element(u.cluster_confidences.begin(), u.cluster_confidences.end()));
  // cos = (1, 0, 0) for the other clusters: 2 / (2 + 1 + 1).
  EXPECT_NEAR(u.confidence, 0.5, 1e-12);
}

TEST(UserPersona, MeanOfSessionsAndErrors) {
  const auto clusters = axis_clusters(2, 2);
  PersonaMapping mapping;
  mapping.assignment = {{0}, {1}};
  const auto u = assign_user_persona_from_embeddings({{1, 0}, {0.6, 0.8}, {0.8, 0.6}}, clusters, mapping);
  EXPECT_EQ(u.cluster, 0);
  EXPECT_THROW(assign_user_persona_from_embeddings({}, clusters, mapping), ValidationError);
}
