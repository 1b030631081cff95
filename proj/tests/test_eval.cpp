#include <gtest/gtest.h>

#include <cmath>

#include "sessionbert/eval.hpp"

using namespace sessionbert;

namespace {

SessionRecord session(const std::string& user, int day, std::vector<std::string> services) {
  SessionRecord r;
  r.user_id = user;
  r.session_id = user + "-" + std::to_string(day) + "-" + std::to_string(services.size());
  r.day = day;
  for (auto& s : services) r.activities.push_back({s, "p1"});
  r.country = "US";
  r.city = "Seattle";
  return r;
}

// ARI from the four pair counts (same/same, same/diff, diff/same, diff/diff).
double ari_by_pairs(const std::vector<int>& x, const std::vector<int>& y) {
  double a = 0, b = 0, c = 0, d = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const bool sx = x[i] == x[j], sy = y[i] == y[j];
      if (sx && sy) ++a;
      else if (sx) ++b;
      else if (sy) ++c;
      else ++d;
    }
  return 2 * (a * d - b * c) / ((a + b) * (b + d) + (a + c) * (c + d));
}

}  // namespace

TEST(ClassificationMetrics, WorkedExample) {
  const std::vector<std::string> labels{"a", "a", "b"}, preds{"a", "b", "b"};
  const auto r = classification_metrics(preds, labels);
  EXPECT_NEAR(r.accuracy, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.per_class.at("a").f1, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.per_class.at("b").f1, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.f1_weighted, 2.0 / 3.0, 1e-12);
}

TEST(ClassificationMetrics, PerfectAndBounds) {
  const std::vector<int> y{0, 1, 2, 2, 1};
  const auto r = classification_metrics(y, y);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  EXPECT_DOUBLE_EQ(r.f1_weighted, 1.0);
  std::size_t support = 0;
  for (const auto& [_, m] : r.per_class) support += m.support;
  EXPECT_EQ(support, y.size());
}

TEST(ClassificationMetrics, WeightedDiffersFromAccuracyWhenSkewed) {
  // Majority guess: acc 3/4; F1(a) = 2 * 0.75 / 1.75, F1(b) = 0.
  const auto r = classification_metrics<std::string>({"a", "a", "a", "a"}, {"a", "a", "a", "b"});
  EXPECT_DOUBLE_EQ(r.accuracy, 0.75);
  EXPECT_NEAR(r.f1_weighted, 0.75 * (1.5 / 1.75), 1e-12);
  EXPECT_LT(r.f1_weighted, r.accuracy);
}

TEST(ClassificationMetrics, SymmetricErrorsGiveAccuracy) {
  // Two classes with equal supports, one error each way.
  const auto r = classification_metrics<int>({0, 1, 0, 1, 1, 0}, {0, 0, 0, 1, 1, 1});
  EXPECT_NEAR(r.f1_weighted, r.accuracy, 1e-12);
}

TEST(ClassificationMetrics, PredictedOnlyClassHasZeroSupport) {
  const auto r = classification_metrics<std::string>({"a", "z"}, {"a", "b"});
  EXPECT_EQ(r.per_class.at("z").support, 0u);
  EXPECT_DOUBLE_EQ(r.per_class.at("z").f1, 0.0);
  EXPECT_DOUBLE_EQ(r.f1_weighted, 0.5);
  EXPECT_THROW(classification_metrics<int>({1}, {1, 2}), ValidationError);
  EXPECT_THROW(classification_metrics<int>({}, {}), ValidationError);
}

TEST(Ari, IdenticalAndRelabeled) {
  const std::vector<int> a{0, 0, 1, 1, 2, 2, 2};
  EXPECT_DOUBLE_EQ(clustering_agreement(a, a), 1.0);
  const std::vector<std::string> relabeled{"x", "x", "q", "q", "m", "m", "m"};
  EXPECT_DOUBLE_EQ(clustering_agreement(a, relabeled), 1.0);
}

TEST(Ari, SixPointContingencyExample) {
  // Index 2, expected 6 * 3 / 15 = 1.2, max (6 + 3) / 2 = 4.5: ARI = 8 / 33.
  const std::vector<int> x{0, 0, 0, 1, 1, 1}, y{0, 0, 1, 1, 2, 2};
  EXPECT_NEAR(clustering_agreement(x, y), 8.0 / 33.0, 1e-12);
  EXPECT_NEAR(ari_by_pairs(x, y), 8.0 / 33.0, 1e-12);
}

TEST(Ari, MatchesPairCountingOracle) {
  Rng rng(21);
  for (int t = 0; t < 50; ++t) {
    std::vector<int> x, y;
    for (int i = 0; i < 40; ++i) {
      x.push_back(static_cast<int>(rng.below(4)));
      y.push_back(rng.uniform() < 0.6 ? x.back() : static_cast<int>(rng.below(5)));
    }
    EXPECT_NEAR(clustering_agreement(x, y), ari_by_pairs(x, y), 1e-12);
  }
  EXPECT_THROW(clustering_agreement(std::vector<int>{1}, std::vector<int>{1}), ValidationError);
}

TEST(HitAtN, IntersectionAndEligibility) {
  const std::vector<SessionRecord> records{
      session("u1", 0, {"s1"}), session("u1", 12, {"s3"}),          // adopts s3: hit at rank 3
      session("u2", 1, {"s2"}), session("u2", 11, {"s2"}),          // nothing new: not eligible
      session("u3", 2, {"s1"}), session("u3", 13, {"s9"}),          // adopts s9: miss
      session("u4", 11, {"s4"})};                                   // no seen session
  const Recommender rec = [](const std::vector<SessionRecord>& seen, std::size_t n) {
    EXPECT_FALSE(seen.empty());
    for (const auto& r : seen) EXPECT_LT(r.day, 10);
    std::vector<std::string> out{"s5", "s6", "s3", "s7", "s8"};
    out.resize(std::min(n, out.size()));
    return out;
  };
  const auto h = hit_at_n(records, 10, {3, 5}, rec);
  EXPECT_EQ(h.eligible_users, 2u);
  EXPECT_DOUBLE_EQ(h.hit_at.at(3), 0.5);
  EXPECT_DOUBLE_EQ(h.hit_at.at(5), 0.5);
  const auto h2 = hit_at_n(records, 10, {2}, rec);
  EXPECT_DOUBLE_EQ(h2.hit_at.at(2), 0.0);
  EXPECT_THROW(hit_at_n(records, 20, {3}, rec), ValidationError);
  EXPECT_THROW(hit_at_n({session("u", 0, {"s1"}), session("u", 11, {"s1"})}, 10, {3}, rec), ValidationError);
  EXPECT_NE(format_hit_table({h}).find("10 day"), std::string::npos);
}

TEST(HitAtN, MonotoneInN) {
  std::vector<SessionRecord> records;
  Rng rng(4);
  for (int u = 0; u < 30; ++u)
    for (int d = 0; d < 14; d += 3)
      records.push_back(session("u" + std::to_string(u), d, {"s" + std::to_string(rng.below(12))}));
  const Recommender rec = [&](const std::vector<SessionRecord>& seen, std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back("s" + std::to_string((seen.size() * 7 + i * 5) % 12));
    return out;
  };
  const auto h = hit_at_n(records, 6, {1, 3, 5, 8}, rec);
  EXPECT_LE(h.hit_at.at(1), h.hit_at.at(3));
  EXPECT_LE(h.hit_at.at(3), h.hit_at.at(5));
  EXPECT_LE(h.hit_at.at(5), h.hit_at.at(8));
}

TEST(Tailoring, AllOwnedAndNoneOwned) {
  Taxonomy tax;
  tax.tasks = {{0, "t0", {{"s1", "p1"}}, false}, {1, "t1", {{"s2", "p2"}}, false}};
  PersonaSpec everything;
  everything.persona_id = 0;
  everything.tasks = {0, 1};
  PersonaSpec none;
  none.persona_id = 1;
  tax.personas = {everything, none};
  ActivityTaskMap m;
  m.set({"s1", "p1"}, 0);
  m.set({"s2", "p2"}, 1);
  EXPECT_DOUBLE_EQ(tailoring_report({{{0}, {"s1", "s2"}}}, tax, m), 1.0);
  EXPECT_DOUBLE_EQ(tailoring_report({{{1}, {"s1", "s2"}}}, tax, m), 0.0);
  EXPECT_DOUBLE_EQ(tailoring_report({{{0}, {"s1", "s7"}}}, tax, m), 0.5);
}

TEST(MatchLabels, UnanimousMatchIsPositive) {
  const auto all = match_label_metrics(single_annotator({MatchLabel::Match, MatchLabel::Match}));
  EXPECT_DOUBLE_EQ(all.accuracy, 1.0);
  EXPECT_DOUBLE_EQ(all.sensitivity, 1.0);
  EXPECT_TRUE(std::isnan(all.specificity));
  const auto none = match_label_metrics(single_annotator({MatchLabel::NotMatched, MatchLabel::Unclear}));
  EXPECT_DOUBLE_EQ(none.accuracy, 0.0);
  // Unanimity: one dissenting annotator makes the sample a miss.
  const auto mixed = match_label_metrics({{MatchLabel::Match, MatchLabel::Match},
                                          {MatchLabel::Match, MatchLabel::Unclear},
                                          {MatchLabel::Match, MatchLabel::Match},
                                          {MatchLabel::NotMatched, MatchLabel::Match}});
  EXPECT_EQ(mixed.tp, 2u);
  EXPECT_EQ(mixed.fn, 2u);
  EXPECT_DOUBLE_EQ(mixed.accuracy, 0.5);
  EXPECT_THROW(match_label_metrics({}), ValidationError);
}
