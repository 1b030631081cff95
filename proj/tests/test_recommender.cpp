#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include "sessionbert/recommender.hpp"
#include "fixture.hpp"

using namespace sessionbert;
using namespace sessionbert::testing;

namespace {

SessionRecord session(const std::string& user, const std::string& id, std::vector<std::string> services) {
  SessionRecord r;
  r.user_id = user;
  r.session_id = id;
  for (auto& s : services) r.activities.push_back({s, s + "p0"});
  r.country = "US";
  r.city = "Seattle";
  return r;
}

// Four named services over a 4-dim embedding table:
// alpha = e1, beta = e1 + e2, gamma = e3, delta = 2 e1, eps = e4.
struct TextTable {
  Vocabulary vocab = build_vocabulary({{"alpha", "beta", "gamma", "delta", "eps"}});
  Mat<double> emb = Mat<double>::Zero(static_cast<Eigen::Index>(vocab.size()), 4);
  ServiceCatalog catalog{{{"sa", "alpha", "alpha", {}},
                          {"sb", "beta", "beta", {}},
                          {"sc", "gamma delta", "gamma", {}},
                          {"sd", "eps", "eps", {}}}};

  TextTable() {
    emb(vocab.id("alpha"), 0) = 1;
    emb(vocab.id("beta"), 0) = 1;
    emb(vocab.id("beta"), 1) = 1;
    emb(vocab.id("gamma"), 2) = 1;
    emb(vocab.id("delta"), 0) = 2;
    emb(vocab.id("eps"), 3) = 1;
  }
};

}  // namespace

TEST(HistoryStore, RingEvictionKeepsNewest) {
  HistoryStore store(8);
  for (int i = 1; i <= 9; ++i) EXPECT_TRUE(store.record_session(session("u", "u-" + std::to_string(i), {"s1"})));
  const auto h = store.snapshot("u");
  ASSERT_EQ(h->window.size(), 8u);
  EXPECT_EQ(h->window.front().session_id, "u-2");
  EXPECT_EQ(h->window.back().session_id, "u-9");
}

TEST(HistoryStore, ReingestIsIgnored) {
  HistoryStore store(3);
  store.record_session(session("u", "u-1", {"s1"}));
  EXPECT_FALSE(store.record_session(session("u", "u-1", {"s5"})));
  const auto h = store.snapshot("u");
  EXPECT_EQ(h->window.size(), 1u);
  EXPECT_EQ(h->adopted, (std::set<std::string>{"s1"}));
}

TEST(HistoryStore, AdoptedIsUnionOverEverySession) {
  HistoryStore store(1);
  store.record_session(session("u", "u-1", {"s1"}));
  store.record_session(session("u", "u-2", {"s2"}));
  const auto h = store.snapshot("u");
  EXPECT_EQ(h->window.size(), 1u);
  EXPECT_EQ(h->adopted, (std::set<std::string>{"s1", "s2"}));
  EXPECT_FALSE(store.snapshot("nobody").has_value());
  EXPECT_THROW(HistoryStore(0), ValidationError);
}

TEST(HistoryStore, PersistsThroughLogAndSnapshot) {
  const auto dir = std::filesystem::temp_directory_path() / "sessionbert_store_test";
  std::filesystem::remove_all(dir);
  {
    auto store = HistoryStore::open(dir, 2);
    store.record_session(session("u", "u-1", {"s1"}));
    store.record_session(session("u", "u-2", {"s2"}));
    store.compact();
    store.record_session(session("u", "u-3", {"s3"}));
    store.record_session(session("v", "v-1", {"s4"}));
  }
  const auto back = HistoryStore::open(dir, 2);
  const auto h = back.snapshot("u");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->window.size(), 2u);
  EXPECT_EQ(h->window.back().session_id, "u-3");
  EXPECT_EQ(h->adopted, (std::set<std::string>{"s1", "s2", "s3"}));
  EXPECT_EQ(back.user_ids(), (std::vector<std::string>{"u", "v"}));
  std::filesystem::remove_all(dir);
}

TEST(RankCandidates, FrequencyCountsAndTies) {
  const TextTable t;
  const auto r = rank_candidates<double>({"sb", "sa", "sb", "sc", "sa", "sb"}, {}, Strategy::Frequency, t.emb, t.vocab,
                                         t.catalog);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0], (ScoredService{"sb", 3}));
  EXPECT_EQ(r[1], (ScoredService{"sa", 2}));
  EXPECT_EQ(r[2], (ScoredService{"sc", 1}));
  const auto tie = rank_candidates<double>({"sc", "sa"}, {}, Strategy::Frequency, t.emb, t.vocab, t.catalog);
  EXPECT_EQ(tie[0].service, "sa");
  EXPECT_THROW(rank_candidates<double>({"sa"}, {"sa"}, Strategy::Frequency, t.emb, t.vocab, t.catalog),
               ValidationError);
}

TEST(RankCandidates, FrequencyPermutationInvariant) {
  const TextTable t;
  std::vector<std::string> c{"sa", "sb", "sb", "sc", "sd", "sd", "sd", "sa"};
  const auto ref = rank_candidates<double>(c, {}, Strategy::Frequency, t.emb, t.vocab, t.catalog);
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    for (std::size_t j = c.size() - 1; j > 0; --j) std::swap(c[j], c[rng.below(j + 1)]);
    EXPECT_EQ(rank_candidates<double>(c, {}, Strategy::Frequency, t.emb, t.vocab, t.catalog), ref);
  }
}

TEST(RankCandidates, NameSimHandExample) {
  const TextTable t;
  // Adopted alpha = e1. sb: (1,1,0,0)/sqrt2 -> 1/sqrt2. sc: mean of e3 and
  // 2 e1 = (1,0,0.5,0) -> 1/sqrt(1.25). sd: e4 -> 0.
  const auto r = rank_candidates<double>({"sb", "sc", "sd"}, {"sa"}, Strategy::NameSim, t.emb, t.vocab, t.catalog);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0].service, "sc");
  EXPECT_NEAR(r[0].score, 1 / std::sqrt(1.25), 1e-12);
  EXPECT_EQ(r[1].service, "sb");
  EXPECT_NEAR(r[1].score, 1 / std::sqrt(2.0), 1e-12);
  EXPECT_EQ(r[2].service, "sd");
  EXPECT_NEAR(r[2].score, 0.0, 1e-12);

  // Max over adopted: adding eps lifts sd to 1; mean halves it.
  const auto mx = rank_candidates<double>({"sb", "sc"}, {"sa", "sd"}, Strategy::NameSim, t.emb, t.vocab, t.catalog);
  EXPECT_NEAR(mx[0].score, 1 / std::sqrt(1.25), 1e-12);
  const auto mean = rank_candidates<double>({"sb"}, {"sa", "sd"}, Strategy::NameSim, t.emb, t.vocab, t.catalog,
                                            SimAggregate::Mean);
  EXPECT_NEAR(mean[0].score, 0.5 / std::sqrt(2.0), 1e-12);

  // Description text: sc's description is gamma alone, orthogonal to alpha.
  const auto d = rank_candidates<double>({"sb", "sc"}, {"sa"}, Strategy::DescSim, t.emb, t.vocab, t.catalog);
  EXPECT_EQ(d[0].service, "sb");
  EXPECT_NEAR(d[1].score, 0.0, 1e-12);
}

TEST(RankCandidates, IdenticalNameScoresOne) {
  TextTable t;
  t.catalog = ServiceCatalog({{"sa", "alpha", "alpha", {}}, {"sz", "alpha", "eps", {}}});
  const auto r = rank_candidates<double>({"sz"}, {"sa"}, Strategy::NameSim, t.emb, t.vocab, t.catalog);
  EXPECT_NEAR(r[0].score, 1.0, 1e-6);
}

TEST(RankCandidates, MissingTextNamesTheService) {
  TextTable t;
  t.catalog = ServiceCatalog({{"sa", "alpha", "alpha", {}}, {"sn", "", "eps", {}}});
  try {
    rank_candidates<double>({"sn"}, {"sa"}, Strategy::NameSim, t.emb, t.vocab, t.catalog);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("sn"), std::string::npos);
  }
  EXPECT_THROW(rank_candidates<double>({"nope"}, {"sa"}, Strategy::NameSim, t.emb, t.vocab, t.catalog),
               ValidationError);
}

TEST(Recommend, CountAndFilterExample) {
  const TextTable t;
  // Candidate multiset {sa, sa, sb, sc} with sc adopted.
  const auto r = rank_candidates<double>({"sa", "sa", "sb"}, {"sc"}, Strategy::Frequency, t.emb, t.vocab, t.catalog);
  std::vector<std::string> ids;
  for (const auto& s : r) ids.push_back(s.service);
  EXPECT_EQ(ids, (std::vector<std::string>{"sa", "sb"}));
}

TEST(Recommend, AllAdoptedGivesEmpty) {
  const auto& f = fixture();
  HistoryStore store;
  auto r = f.split.test[0];
  r.user_id = "all";
  for (const auto& e : f.corpus.catalog.entries()) r.activities.push_back({e.service_id, e.pages.front()});
  store.record_session(r);
  EXPECT_TRUE(recommend_new(store, "all", finetuned(), f.vocab, f.corpus.catalog).services.empty());
  EXPECT_THROW(recommend_new(store, "ghost", finetuned(), f.vocab, f.corpus.catalog), UnknownUserError);
}

TEST(Recommend, PinnedUserMatchesOracle) {
  const auto& f = fixture();
  const std::string user = f.split.test[0].user_id;
  HistoryStore store;
  // Two sessions leave most of the catalog unadopted.
  int taken = 0;
  for (const auto& r : f.split.test)
    if (r.user_id == user && taken < 2) {
      store.record_session(r);
      ++taken;
    }
  const auto rec = recommend_new(store, user, finetuned(), f.vocab, f.corpus.catalog);

  // Oracle: pool per-session top-5 by hand, drop adopted, count, sort.
  const auto h = store.snapshot(user);
  std::map<std::string, int> counts;
  for (const auto& s : h->window)
    for (const auto& p : predict_topk(s, finetuned(), f.vocab, 5, Head::Service))
      if (!h->adopted.contains(p.label)) ++counts[p.label];
  std::vector<std::pair<int, std::string>> order;
  for (const auto& [s, c] : counts) order.emplace_back(-c, s);
  std::sort(order.begin(), order.end());
  std::vector<std::string> expect;
  for (std::size_t i = 0; i < std::min<std::size_t>(5, order.size()); ++i) expect.push_back(order[i].second);
  EXPECT_EQ(rec.ids(), expect);
  EXPECT_EQ(rec.ids(), (std::vector<std::string>{"s2", "s7"}));
}

TEST(Recommend, FilterSoundnessOverRandomStores) {
  const auto& f = fixture();
  Rng rng(17);
  for (int u = 0; u < 30; ++u) {
    HistoryStore store(1 + rng.below(10));
    const std::string user = "r" + std::to_string(u);
    const std::size_t n = 1 + rng.below(12);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = f.corpus.records[rng.below(f.corpus.records.size())];
      r.user_id = user;
      r.session_id = user + "-" + std::to_string(i);
      store.record_session(r);
    }
    const auto adopted = store.snapshot(user)->adopted;
    for (auto st : {Strategy::Frequency, Strategy::NameSim, Strategy::DescSim}) {
      RecommendConfig cfg;
      cfg.strategy = st;
      cfg.n = 1 + rng.below(8);
      const auto rec = recommend_new(store, user, finetuned(), f.vocab, f.corpus.catalog, cfg);
      EXPECT_LE(rec.services.size(), cfg.n);
      for (const auto& s : rec.services) EXPECT_FALSE(adopted.contains(s.service)) << s.service;
      for (std::size_t i = 1; i < rec.services.size(); ++i) {
        const auto& a = rec.services[i - 1];
        const auto& b = rec.services[i];
        EXPECT_TRUE(a.score > b.score || (a.score == b.score && a.service < b.service));
      }
      EXPECT_EQ(rec.services, recommend_new(store, user, finetuned(), f.vocab, f.corpus.catalog, cfg).services);
    }
  }
}

TEST(Recommend, EvictedSessionsDoNotMatter) {
  const auto& f = fixture();
  std::vector<SessionRecord> sessions(f.corpus.records.begin(), f.corpus.records.begin() + 6);
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    sessions[i].user_id = "w";
    sessions[i].session_id = "w-" + std::to_string(i);
  }
  HistoryStore a(3), b(3);
  for (const auto& s : sessions) a.record_session(s);
  // Same adopted set, different evicted content: reorder the first three
  // sessions' activities.
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    auto s = sessions[i];
    if (i < 3) std::reverse(s.activities.begin(), s.activities.end());
    b.record_session(s);
  }
  EXPECT_EQ(recommend_new(a, "w", finetuned(), f.vocab, f.corpus.catalog).services,
            recommend_new(b, "w", finetuned(), f.vocab, f.corpus.catalog).services);
}

TEST(Popularity, SkipsAdopted) {
  const std::vector<SessionRecord> records{session("a", "a-1", {"s1", "s2"}), session("b", "b-1", {"s1"}),
                                           session("c", "c-1", {"s3", "s1", "s2"})};
  const PopularityBaseline base(records);
  EXPECT_EQ(base.recommend({}, 2).ids(), (std::vector<std::string>{"s1", "s2"}));
  EXPECT_EQ(base.recommend({"s1"}, 5).ids(), (std::vector<std::string>{"s2", "s3"}));
}
