#include <gtest/gtest.h>

#include <atomic>
#include <map>
#include <thread>

#include "sessionbert/segment.hpp"
#include "sessionbert/service.hpp"
#include "fixture.hpp"

using namespace sessionbert;
using namespace sessionbert::testing;

namespace {

std::unique_ptr<ServiceState> make_state(std::size_t window = kDefaultWindow) {
  const auto& f = fixture();
  const auto emb = embed_sessions(f.split.train, finetuned(), f.vocab);
  auto fit = kmeans_fit(emb, 2, 1);
  PersonaMapping mapping;
  mapping.assignment = {{0}, {1}};
  return std::make_unique<ServiceState>(ServiceState{finetuned(), f.vocab, f.corpus.catalog, fit.model, mapping,
                                                     HistoryStore(window), "test"});
}

std::vector<SessionRecord> sessions_of(const std::string& user) {
  std::vector<SessionRecord> out;
  for (const auto& r : fixture().corpus.records)
    if (r.user_id == user) out.push_back(r);
  return out;
}

std::string body(const SessionRecord& r) { return to_json(r).dump(); }

}  // namespace

TEST(Ingest, WindowGrowsThenStays) {
  auto s = make_state(3);
  const auto user = fixture().corpus.records[0].user_id;
  const auto sessions = sessions_of(user);
  ASSERT_GE(sessions.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto r = handle_ingest(*s, body(sessions[i]));
    EXPECT_EQ(r.status, 200);
    EXPECT_EQ(r.body["user_id"], user);
    EXPECT_EQ(r.body["stored_sessions"], std::min<std::size_t>(i + 1, 3));
  }
  const auto dup = handle_ingest(*s, body(sessions[3]));
  EXPECT_EQ(dup.status, 200);
  EXPECT_EQ(dup.body["stored_sessions"], 3);
}

TEST(Ingest, MalformedBodies) {
  auto s = make_state();
  auto j = to_json(fixture().corpus.records[0]);
  j.erase("activities");
  const auto missing = handle_ingest(*s, j.dump());
  EXPECT_EQ(missing.status, 400);
  EXPECT_EQ(missing.body["field"], "activities");
  EXPECT_EQ(handle_ingest(*s, "{not json").status, 400);
  EXPECT_EQ(handle_ingest(*s, std::string(kMaxBodyBytes + 1, ' ')).status, 413);
  EXPECT_TRUE(s->store.user_ids().empty());
}

TEST(Query, RecommendationsAndErrors) {
  auto s = make_state();
  const auto user = fixture().corpus.records[0].user_id;
  for (const auto& r : sessions_of(user)) handle_ingest(*s, body(r));
  const auto adopted = s->store.snapshot(user)->adopted;

  for (const char* strategy : {"frequency", "name_sim", "desc_sim"}) {
    const auto r = handle_recommendations(*s, user, "5", strategy);
    ASSERT_EQ(r.status, 200) << r.body.dump();
    EXPECT_EQ(r.body["strategy"], strategy);
    EXPECT_LE(r.body["services"].size(), 5u);
    for (const auto& item : r.body["services"]) EXPECT_FALSE(adopted.contains(item["service"].get<std::string>()));
  }
  EXPECT_EQ(handle_recommendations(*s, "nobody", "", "").status, 404);
  const auto bad = handle_recommendations(*s, user, "", "popular");
  EXPECT_EQ(bad.status, 400);
  EXPECT_EQ(bad.body["field"], "strategy");
  EXPECT_EQ(handle_recommendations(*s, user, "0", "").status, 400);
  EXPECT_EQ(handle_recommendations(*s, user, "3x", "").status, 400);
  // k above the catalog size returns the whole filtered ranking.
  const auto all = handle_recommendations(*s, user, "1000", "");
  const auto five = handle_recommendations(*s, user, "5", "");
  EXPECT_EQ(all.status, 200);
  EXPECT_GE(all.body["services"].size(), five.body["services"].size());
}

TEST(Query, PersonaConfidenceInRange) {
  auto s = make_state();
  const auto user = fixture().corpus.records[0].user_id;
  for (const auto& r : sessions_of(user)) handle_ingest(*s, body(r));
  const auto p = handle_persona(*s, user);
  ASSERT_EQ(p.status, 200);
  const double c = p.body["confidence"];
  EXPECT_GE(c, 0.0);
  EXPECT_LE(c, 1.0);
  EXPECT_FALSE(p.body["personas"].empty());
  EXPECT_EQ(handle_persona(*s, "nobody").status, 404);
  EXPECT_EQ(handle_health(*s).body["status"], "ok");
}

TEST(Query, DeterministicGivenStore) {
  auto a = make_state(), b = make_state();
  const auto user = fixture().corpus.records[5].user_id;
  for (const auto& r : sessions_of(user)) {
    handle_ingest(*a, body(r));
    handle_ingest(*b, body(r));
  }
  EXPECT_EQ(handle_recommendations(*a, user, "", "").body, handle_recommendations(*b, user, "", "").body);
  EXPECT_EQ(handle_persona(*a, user).body, handle_persona(*b, user).body);
}

TEST(Concurrency, MixedRequestsKeepInvariants) {
  const auto& f = fixture();
  std::map<std::string, std::vector<SessionRecord>> by_user;
  for (const auto& r : f.corpus.records) by_user[r.user_id].push_back(r);
  std::vector<std::string> readers, writers;
  for (const auto& [u, _] : by_user) (readers.size() <= writers.size() ? readers : writers).push_back(u);

  auto s = make_state(4);
  for (const auto& u : readers)
    for (const auto& r : by_user[u]) handle_ingest(*s, body(r));
  std::map<std::string, nlohmann::json> reference;
  for (const auto& u : readers) reference[u] = handle_recommendations(*s, u, "", "").body;

  // Each writer user is owned by one thread so its ingest order is fixed;
  // reader queries interleave freely.
  std::atomic<int> mismatches{0}, failures{0};
  std::vector<std::thread> threads;
  const std::size_t nthreads = 8;
  for (std::size_t t = 0; t < nthreads; ++t)
    threads.emplace_back([&, t] {
      for (std::size_t w = t; w < writers.size(); w += nthreads)
        for (const auto& r : by_user[writers[w]]) {
          if (handle_ingest(*s, body(r)).status != 200) ++failures;
          const auto& u = readers[(w + r.day) % readers.size()];
          if (handle_recommendations(*s, u, "", "").body != reference[u]) ++mismatches;
        }
    });
  for (auto& th : threads) th.join();
  EXPECT_EQ(failures.load(), 0);
  EXPECT_EQ(mismatches.load(), 0);

  for (const auto& u : writers) {
    const auto h = s->store.snapshot(u);
    ASSERT_TRUE(h);
    EXPECT_LE(h->window.size(), 4u);
    std::set<std::string> expect;
    for (const auto& r : by_user[u])
      for (const auto& a : r.activities) expect.insert(a.service);
    EXPECT_EQ(h->adopted, expect);
    EXPECT_EQ(h->window.back().session_id, by_user[u].back().session_id);
  }
}

TEST(Http, RoutesOverLoopback) {
  auto s = make_state();
  httplib::Server server;
  install_routes(server, *s);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  const auto& rec = fixture().corpus.records[0];
  auto post = cli.Post("/v1/sessions", body(rec), "application/json");
  ASSERT_TRUE(post);
  EXPECT_EQ(post->status, 200);
  auto get = cli.Get("/v1/users/" + rec.user_id + "/recommendations?k=3&strategy=frequency");
  ASSERT_TRUE(get);
  EXPECT_EQ(get->status, 200);
  EXPECT_EQ(nlohmann::json::parse(get->body), handle_recommendations(*s, rec.user_id, "3", "frequency").body);
  auto missing = cli.Get("/v1/users/nobody/persona");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  auto health = cli.Get("/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(nlohmann::json::parse(health->body)["model_version"], "test");
  auto big = cli.Post("/v1/sessions", std::string(kMaxBodyBytes + 10, 'x'), "application/json");
  ASSERT_TRUE(big);
  EXPECT_EQ(big->status, 413);

  server.stop();
  th.join();
}
