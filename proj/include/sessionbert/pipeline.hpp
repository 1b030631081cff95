#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "sessionbert/checkpoint.hpp"
#include "sessionbert/config.hpp"
#include "sessionbert/eval.hpp"
#include "sessionbert/persona.hpp"
#include "sessionbert/recommender.hpp"
#include "sessionbert/segment.hpp"
#include "sessionbert/training.hpp"

namespace sessionbert::pipeline {

using Log = std::function<void(const std::string&)>;

inline void quiet(const std::string&) {}

// Corpus + split + vocabulary, the inputs every training step shares.
struct Workspace {
  Corpus corpus;
  CorpusSplit split;
  Vocabulary vocab;
};

inline void require_file(const std::filesystem::path& p, const std::string& what) {
  if (!std::filesystem::exists(p)) throw ValidationError(what, p.string() + " not found");
}

inline Corpus load_corpus_artifacts(const PipelineConfig& cfg) {
  require_file(cfg.path(cfg.corpus), "corpus");
  require_file(cfg.path(cfg.catalog), "catalog");
  require_file(cfg.path(cfg.taxonomy), "taxonomy");
  Corpus c;
  c.records = load_corpus(cfg.path(cfg.corpus).string());
  c.catalog = load_catalog(cfg.path(cfg.catalog).string());
  c.taxonomy = load_taxonomy(cfg.path(cfg.taxonomy).string());
  return c;
}

inline Workspace make_workspace(Corpus corpus, const PipelineConfig& cfg, std::optional<Vocabulary> vocab = {}) {
  Workspace ws;
  ws.corpus = std::move(corpus);
  ws.split = split_corpus(ws.corpus.records, cfg.split_ratios, cfg.split_seed);
  if (vocab) {
    ws.vocab = std::move(*vocab);
  } else {
    std::vector<std::vector<std::string>> seqs;
    for (const auto& r : ws.split.train) seqs.push_back(flatten_session(r));
    ws.vocab = build_vocabulary(seqs, cfg.vocab_cap);
  }
  return ws;
}

inline Workspace load_workspace(const PipelineConfig& cfg) {
  auto corpus = load_corpus_artifacts(cfg);
  require_file(cfg.path(cfg.vocab), "vocab");
  return make_workspace(std::move(corpus), cfg, load_vocabulary(cfg.path(cfg.vocab).string()));
}

inline ModelConfig model_config_for(const PipelineConfig& cfg, const Workspace& ws, int max_len, std::uint64_t seed) {
  ModelConfig mc = cfg.model;
  mc.vocab_size = static_cast<int>(ws.vocab.size());
  mc.num_services = static_cast<int>(ws.corpus.catalog.size());
  mc.num_pages = static_cast<int>(ws.corpus.catalog.page_ids().size());
  mc.max_len = max_len;
  mc.seed = seed;
  return mc;
}

inline ModelState<float> fresh_state(const PipelineConfig& cfg, const Workspace& ws, int max_len, std::uint64_t seed) {
  return ModelState<float>::create(model_config_for(cfg, ws, max_len, seed), ws.corpus.catalog.service_ids(),
                                   ws.corpus.catalog.page_ids());
}

// Fine-tuning starts with fresh optimizer moments.
inline ModelState<float> for_finetuning(ModelState<float> s) {
  s.adam_m.set_zero();
  s.adam_v.set_zero();
  s.step = 0;
  return s;
}

inline std::string format_epochs(const std::string& phase, const TrainResult<float>& r) {
  std::string out = "phase\tepoch\ttrain_loss\tval_loss\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "%s\t0\t-\t%.6f\n", phase.c_str(), r.initial_val_loss);
  out += buf;
  for (const auto& e : r.epochs) {
    std::snprintf(buf, sizeof buf, "%s\t%d\t%.6f\t%.6f\n", phase.c_str(), e.epoch, e.train_loss, e.val_loss);
    out += buf;
  }
  return out;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

inline TrainResult<float> pretrain_model(const PipelineConfig& cfg, const Workspace& ws, int max_len,
                                         std::uint64_t seed, const Log& log = quiet) {
  TrainConfig tc = cfg.pretrain;
  tc.mode = TrainMode::PretrainMlm;
  tc.seed = cfg.pretrain.seed + seed;
  return train<float>(ws.split.train, ws.split.val, ws.vocab, fresh_state(cfg, ws, max_len, cfg.model.seed + seed), tc,
                      [&](const EpochMetrics& m) {
                        log("pretrain epoch " + std::to_string(m.epoch) + " train " + std::to_string(m.train_loss) +
                            " val " + std::to_string(m.val_loss));
                      });
}

inline TrainResult<float> finetune_model(const PipelineConfig& cfg, const Workspace& ws, ModelState<float> init,
                                         TrainMode mode, std::uint64_t seed, const Log& log = quiet) {
  TrainConfig tc = cfg.finetune;
  tc.mode = mode;
  tc.seed = cfg.finetune.seed + seed;
  return train<float>(ws.split.train, ws.split.val, ws.vocab, for_finetuning(std::move(init)), tc,
                      [&](const EpochMetrics& m) {
                        log(std::string(to_string(mode)) + " epoch " + std::to_string(m.epoch) + " train " +
                            std::to_string(m.train_loss) + " val " + std::to_string(m.val_loss));
                      });
}

struct HeadScores {
  MetricReport<int> service;
  MetricReport<int> page;
};

inline HeadScores score_heads(const ModelState<float>& s, const std::vector<Example>& test) {
  std::vector<int> svc, pg;
  for (const auto& e : test) {
    svc.push_back(e.service);
    pg.push_back(e.page);
  }
  return {classification_metrics(predict_labels(s, test, Head::Service), svc),
          classification_metrics(predict_labels(s, test, Head::Page), pg)};
}

// ---------------------------------------------------------------------------
// Model study behind Tables 2 to 5
// ---------------------------------------------------------------------------

struct StudyRun {
  int max_len = 0;
  std::uint64_t seed = 0;
  std::string variant;  // sessionbert | bert | service_only | page_only
  double service_f1 = 0, service_acc = 0, page_f1 = 0, page_acc = 0;
};

struct ModelStudy {
  std::vector<StudyRun> runs;
  int base_max_len = 0;
  // Seed-0 SessionBERT artifacts at base_max_len, kept for the other reports.
  std::optional<ModelState<float>> pretrained;
  std::optional<ModelState<float>> finetuned;
  double pretrain_seconds = 0;
  double mlm_accuracy = 0;

  std::vector<const StudyRun*> select(int max_len, const std::string& variant) const {
    std::vector<const StudyRun*> out;
    for (const auto& r : runs)
      if (r.max_len == max_len && r.variant == variant) out.push_back(&r);
    return out;
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

inline double median_of(const std::vector<const StudyRun*>& runs, double StudyRun::*field) {
  std::vector<double> v;
  for (const auto* r : runs) v.push_back(r->*field);
  return median(v);
}

// For each max_len and seed: pretrain + multitask fine-tune (sessionbert) and
// multitask fine-tune from random init (bert). At base_max_len also the two
// single-task fine-tunes from the same pretrained model.
inline ModelStudy run_model_study(const PipelineConfig& cfg, const Workspace& ws, const std::vector<int>& max_lens,
                                  const std::vector<std::uint64_t>& seeds, int base_max_len, const Log& log = quiet) {
  ModelStudy study;
  study.base_max_len = base_max_len;
  auto record = [&](int len, std::uint64_t seed, const std::string& variant, const HeadScores& h) {
    study.runs.push_back({len, seed, variant, h.service.f1_weighted, h.service.accuracy, h.page.f1_weighted, h.page.accuracy});
    char buf[200];
    std::snprintf(buf, sizeof buf, "len %d seed %llu %s: service f1 %.4f acc %.4f page f1 %.4f acc %.4f", len,
                  static_cast<unsigned long long>(seed), variant.c_str(), h.service.f1_weighted, h.service.accuracy,
                  h.page.f1_weighted, h.page.accuracy);
    log(buf);
  };
  for (int len : max_lens) {
    for (std::uint64_t seed : seeds) {
      const auto t0 = std::chrono::steady_clock::now();
      auto pre = pretrain_model(cfg, ws, len, seed, log);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      auto ft = finetune_model(cfg, ws, pre.state, TrainMode::FinetuneMultitask, seed, log);
      const auto test = finetune_set(ws.split.test, ws.vocab, ft.state);
      record(len, seed, "sessionbert", score_heads(ft.state, test));
      auto bert = finetune_model(cfg, ws, fresh_state(cfg, ws, len, cfg.model.seed + seed), TrainMode::FinetuneMultitask,
                                 seed, log);
      record(len, seed, "bert", score_heads(bert.state, test));
      if (len == base_max_len) {
        const auto svc = finetune_model(cfg, ws, pre.state, TrainMode::FinetuneService, seed, log);
        record(len, seed, "service_only", score_heads(svc.state, test));
        const auto pg = finetune_model(cfg, ws, pre.state, TrainMode::FinetunePage, seed, log);
        record(len, seed, "page_only", score_heads(pg.state, test));
        if (seed == seeds.front()) {
          study.pretrain_seconds = secs;
          study.mlm_accuracy = mlm_accuracy(
              pre.state, mlm_eval_set(ws.split.val, ws.vocab, static_cast<std::size_t>(len), cfg.pretrain.seed ^ 0x5eedULL,
                                      cfg.pretrain.mask_rate));
          study.pretrained = std::move(pre.state);
          study.finetuned = std::move(ft.state);
        }
      }
    }
  }
  return study;
}

inline std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// Table 2: SessionBERT vs randomly initialised BERT, multitask, base length.
inline std::string table2(const ModelStudy& s) {
  std::string out = "model\tservice_f1\tservice_acc\tpage_f1\tpage_acc\n";
  for (const char* v : {"sessionbert", "bert"}) {
    const auto runs = s.select(s.base_max_len, v);
    out += std::string(v) + "\t" + fmt4(median_of(runs, &StudyRun::service_f1)) + "\t" +
           fmt4(median_of(runs, &StudyRun::service_acc)) + "\t" + fmt4(median_of(runs, &StudyRun::page_f1)) + "\t" +
           fmt4(median_of(runs, &StudyRun::page_acc)) + "\n";
  }
  return out;
}

// Tables 3 and 4: one head across sequence lengths.
inline std::string table_seq_len(const ModelStudy& s, bool service) {
  const auto f1 = service ? &StudyRun::service_f1 : &StudyRun::page_f1;
  const auto acc = service ? &StudyRun::service_acc : &StudyRun::page_acc;
  std::set<int> lens;
  for (const auto& r : s.runs) lens.insert(r.max_len);
  std::string out = "max_len\tsessionbert_f1\tsessionbert_acc\tbert_f1\tbert_acc\tf1_gap\n";
  for (int len : lens) {
    const auto a = s.select(len, "sessionbert"), b = s.select(len, "bert");
    out += std::to_string(len) + "\t" + fmt4(median_of(a, f1)) + "\t" + fmt4(median_of(a, acc)) + "\t" +
           fmt4(median_of(b, f1)) + "\t" + fmt4(median_of(b, acc)) + "\t" +
           fmt4(median_of(a, f1) - median_of(b, f1)) + "\n";
  }
  return out;
}

// Table 5: multitask vs separately trained heads.
inline std::string table5(const ModelStudy& s) {
  const auto mt = s.select(s.base_max_len, "sessionbert");
  const auto so = s.select(s.base_max_len, "service_only");
  const auto po = s.select(s.base_max_len, "page_only");
  std::string out = "head\tmultitask_f1\tmultitask_acc\tseparate_f1\tseparate_acc\n";
  out += "service\t" + fmt4(median_of(mt, &StudyRun::service_f1)) + "\t" + fmt4(median_of(mt, &StudyRun::service_acc)) +
         "\t" + fmt4(median_of(so, &StudyRun::service_f1)) + "\t" + fmt4(median_of(so, &StudyRun::service_acc)) + "\n";
  out += "page\t" + fmt4(median_of(mt, &StudyRun::page_f1)) + "\t" + fmt4(median_of(mt, &StudyRun::page_acc)) + "\t" +
         fmt4(median_of(po, &StudyRun::page_f1)) + "\t" + fmt4(median_of(po, &StudyRun::page_acc)) + "\n";
  return out;
}

inline std::string study_runs_table(const ModelStudy& s) {
  std::string out = "max_len\tseed\tvariant\tservice_f1\tservice_acc\tpage_f1\tpage_acc\n";
  for (const auto& r : s.runs)
    out += std::to_string(r.max_len) + "\t" + std::to_string(r.seed) + "\t" + r.variant + "\t" + fmt4(r.service_f1) +
           "\t" + fmt4(r.service_acc) + "\t" + fmt4(r.page_f1) + "\t" + fmt4(r.page_acc) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Embeddings, segmentation and personas
// ---------------------------------------------------------------------------

struct EmbeddingSet {
  std::vector<std::string> session_ids;
  std::vector<std::string> user_ids;
  Embeddings vectors;
};

inline EmbeddingSet embed_corpus(const std::vector<SessionRecord>& records, const ModelState<float>& state,
                                 const Vocabulary& vocab) {
  EmbeddingSet e;
  e.vectors = embed_sessions(records, state, vocab);
  for (const auto& r : records) {
    e.session_ids.push_back(r.session_id);
    e.user_ids.push_back(r.user_id);
  }
  return e;
}

inline constexpr std::string_view kEmbeddingHeader = "sessionbert-embeddings v1";

// Header, "n d", n lines of session_id<TAB>user_id, then n*d little-endian f32.
inline void save_embeddings(const EmbeddingSet& e, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << kEmbeddingHeader << '\n' << e.vectors.rows() << ' ' << e.vectors.cols() << '\n';
  for (std::size_t i = 0; i < e.session_ids.size(); ++i) out << e.session_ids[i] << '\t' << e.user_ids[i] << '\n';
  std::vector<float> data(static_cast<std::size_t>(e.vectors.size()));
  for (Eigen::Index i = 0; i < e.vectors.size(); ++i) data[static_cast<std::size_t>(i)] = static_cast<float>(e.vectors.data()[i]);
  detail::to_little_endian(data);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
}

inline EmbeddingSet load_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kEmbeddingHeader) throw std::runtime_error("unsupported embeddings header");
  long n = 0, d = 0;
  if (!(in >> n >> d) || n < 0 || d < 1) throw std::runtime_error("embeddings: bad dimensions");
  std::getline(in, line);
  EmbeddingSet e;
  for (long i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("embeddings: truncated id block");
    const auto tab = line.find('\t');
    e.session_ids.push_back(line.substr(0, tab));
    e.user_ids.push_back(tab == std::string::npos ? std::string() : line.substr(tab + 1));
  }
  std::vector<float> data(static_cast<std::size_t>(n * d));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != data.size() * sizeof(float)) throw std::runtime_error("embeddings: truncated");
  detail::to_little_endian(data);
  e.vectors.resize(n, d);
  for (std::size_t i = 0; i < data.size(); ++i) e.vectors.data()[i] = data[i];
  return e;
}

struct PersonaArtifacts {
  ActivityTaskMap activity_map;
  TaskClusterCounts counts;
  Matrix probs;
  PersonaMapping mapping;
  std::vector<std::vector<ActivityCount>> top_per_cluster;
};

inline PersonaArtifacts map_personas(const std::vector<SessionRecord>& records, const std::vector<int>& assignments,
                                     int k, const Taxonomy& tax, const PipelineConfig& cfg) {
  PersonaArtifacts a;
  a.activity_map = build_activity_task_map(records, tax, cfg.top_activities);
  a.counts = count_task_clusters(records, assignments, k, a.activity_map, tax);
  a.probs = task_cluster_probs(a.counts);
  a.mapping = map_clusters_to_personas(a.probs, tax.personas, cfg.persona);
  std::vector<std::vector<const SessionRecord*>> members(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < records.size(); ++i) members[static_cast<std::size_t>(assignments[i])].push_back(&records[i]);
  for (const auto& m : members) a.top_per_cluster.push_back(top_activities(m, 10));
  return a;
}

// Each user's most recent `window` sessions, in day order.
inline std::map<std::string, std::vector<SessionRecord>> recent_sessions(const std::vector<SessionRecord>& records,
                                                                         std::size_t window) {
  std::map<std::string, std::vector<SessionRecord>> by_user;
  for (const auto& r : records) by_user[r.user_id].push_back(r);
  for (auto& [_, v] : by_user) {
    std::stable_sort(v.begin(), v.end(), [](const SessionRecord& a, const SessionRecord& b) { return a.day < b.day; });
    if (v.size() > window) v.erase(v.begin(), v.end() - static_cast<std::ptrdiff_t>(window));
  }
  return by_user;
}

struct PersonaAccuracy {
  std::size_t users = 0;
  std::size_t matched = 0;
  double mean_confidence = 0;
  double rate() const { return users ? static_cast<double>(matched) / static_cast<double>(users) : 0.0; }
};

inline PersonaAccuracy persona_accuracy(const std::vector<SessionRecord>& records, const ModelState<float>& state,
                                        const Vocabulary& vocab, const ClusterModel& clusters,
                                        const PersonaMapping& mapping, std::size_t window,
                                        std::map<std::string, UserPersona>* per_user = nullptr) {
  PersonaAccuracy acc;
  double conf = 0;
  for (const auto& [user, sessions] : recent_sessions(records, window)) {
    const auto p = assign_user_persona(sessions, state, vocab, clusters, mapping);
    ++acc.users;
    conf += p.confidence;
    const auto latent = sessions.front().latent_persona;
    if (latent && std::find(p.personas.begin(), p.personas.end(), *latent) != p.personas.end()) ++acc.matched;
    if (per_user) (*per_user)[user] = p;
  }
  acc.mean_confidence = acc.users ? conf / static_cast<double>(acc.users) : 0.0;
  return acc;
}

// ---------------------------------------------------------------------------
// Recommendation evaluation (Table 6)
// ---------------------------------------------------------------------------

inline UserHistory history_from(const std::vector<SessionRecord>& sessions, std::size_t window) {
  HistoryStore store(window);
  for (const auto& r : sessions) store.record_session(r);
  return *store.snapshot(sessions.front().user_id);
}

inline Recommender model_recommender(const ModelState<float>& state, const Vocabulary& vocab,
                                     const ServiceCatalog& catalog, const PipelineConfig& cfg) {
  return [&state, &vocab, &catalog, &cfg](const std::vector<SessionRecord>& seen, std::size_t n) {
    RecommendConfig rc = cfg.recommend;
    rc.n = n;
    return recommend_for_history(history_from(seen, cfg.window), state, vocab, catalog, rc).ids();
  };
}

inline Recommender popularity_recommender(const PopularityBaseline& base) {
  return [&base](const std::vector<SessionRecord>& seen, std::size_t n) {
    std::set<std::string> adopted;
    for (const auto& r : seen)
      for (const auto& a : r.activities) adopted.insert(a.service);
    return base.recommend(adopted, n).ids();
  };
}

struct HitStudy {
  std::vector<HitReport> model;
  std::vector<HitReport> popularity;
};

inline HitStudy run_hit_study(const Workspace& ws, const ModelState<float>& state, const PipelineConfig& cfg) {
  const PopularityBaseline base(ws.split.train);
  HitStudy h;
  const auto rec = model_recommender(state, ws.vocab, ws.corpus.catalog, cfg);
  const auto pop = popularity_recommender(base);
  for (int d : cfg.seen_days) {
    h.model.push_back(hit_at_n(ws.split.test, d, cfg.hit_n, rec));
    h.popularity.push_back(hit_at_n(ws.split.test, d, cfg.hit_n, pop));
  }
  return h;
}

inline std::string table6(const HitStudy& h) {
  std::string out = "model\t" + format_hit_table(h.model);
  std::string pop = format_hit_table(h.popularity);
  pop = pop.substr(pop.find('\n') + 1);
  // Prefix data rows with the recommender name.
  auto tag = [](const std::string& body, const std::string& name) {
    std::string r, line;
    std::istringstream in(body);
    while (std::getline(in, line)) r += name + "\t" + line + "\n";
    return r;
  };
  const std::string model_rows = out.substr(out.find('\n') + 1);
  return "recommender\tsplit\tHit@5\tHit@3\teligible_users\n" + tag(model_rows, "sessionbert") + tag(pop, "popularity");
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline void cmd_generate(const PipelineConfig& cfg, const Log& log = quiet) {
  const Corpus c = generate_corpus(cfg.generator);
  std::filesystem::create_directories(cfg.work_dir);
  save_corpus(c.records, cfg.path(cfg.corpus).string());
  save_catalog(c.catalog, cfg.path(cfg.catalog).string());
  save_taxonomy(c.taxonomy, cfg.path(cfg.taxonomy).string());
  log("generated " + std::to_string(c.records.size()) + " sessions");
}

inline void cmd_build_vocab(const PipelineConfig& cfg, const Log& log = quiet) {
  const auto ws = make_workspace(load_corpus_artifacts(cfg), cfg);
  save_vocabulary(ws.vocab, cfg.path(cfg.vocab).string());
  log("vocabulary size " + std::to_string(ws.vocab.size()));
}

inline void cmd_pretrain(const PipelineConfig& cfg, const Log& log = quiet) {
  const auto ws = load_workspace(cfg);
  const auto r = pretrain_model(cfg, ws, cfg.model.max_len, 0, log);
  save_checkpoint(r.state, cfg.path(cfg.pretrained).string());
  write_text(cfg.path(cfg.reports) / "pretrain_loss.tsv", format_epochs("pretrain", r));
}

inline void cmd_finetune(const PipelineConfig& cfg, const Log& log = quiet) {
  const auto ws = load_workspace(cfg);
  require_file(cfg.path(cfg.pretrained), "pretrained");
  auto pre = load_checkpoint<float>(cfg.path(cfg.pretrained).string());
  const auto r = finetune_model(cfg, ws, std::move(pre), cfg.finetune.mode, 0, log);
  save_checkpoint(r.state, cfg.path(cfg.finetuned).string());
  std::string report = format_epochs(std::string(to_string(cfg.finetune.mode)), r);
  report += "skipped_single_activity\t" + std::to_string(r.skipped_single_activity) + "\n";
  write_text(cfg.path(cfg.reports) / "finetune_loss.tsv", report);
}

inline ModelState<float> load_embedding_model(const PipelineConfig& cfg) {
  const auto& name = cfg.embed_checkpoint == "finetuned" ? cfg.finetuned : cfg.pretrained;
  require_file(cfg.path(name), cfg.embed_checkpoint);
  return load_checkpoint<float>(cfg.path(name).string());
}

inline void cmd_embed(const PipelineConfig& cfg, const Log& log = quiet) {
  const auto ws = load_workspace(cfg);
  const auto state = load_embedding_model(cfg);
  save_embeddings(embed_corpus(ws.corpus.records, state, ws.vocab), cfg.path(cfg.embeddings).string());
  log("embedded " + std::to_string(ws.corpus.records.size()) + " sessions");
}

inline void cmd_segment(const PipelineConfig& cfg, const Log& log = quiet) {
  require_file(cfg.path(cfg.embeddings), "embeddings");
  const auto e = load_embeddings(cfg.path(cfg.embeddings).string());
  const auto sweep = sweep_k(e.vectors, cfg.k_min, cfg.k_max, cfg.segment_seed, cfg.kmeans_max_iter, cfg.kmeans_tol);
  const auto& fit = sweep.fits[static_cast<std::size_t>(sweep.selected_k - cfg.k_min)];
  save_cluster_model(fit.model, cfg.path(cfg.clusters).string());
  std::string assign = "session_id\tuser_id\tcluster\n";
  for (std::size_t i = 0; i < e.session_ids.size(); ++i)
    assign += e.session_ids[i] + "\t" + e.user_ids[i] + "\t" + std::to_string(fit.assignments[i]) + "\n";
  write_text(cfg.path(cfg.assignments), assign);
  write_text(cfg.path(cfg.reports) / "sweep.tsv", format_sweep_table(sweep, true));
  log("selected k = " + std::to_string(sweep.selected_k));
}

inline std::map<std::string, int> load_assignments(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::map<std::string, int> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string sid, uid;
    int c = 0;
    if (std::getline(ls, sid, '\t') && std::getline(ls, uid, '\t') && (ls >> c)) out[sid] = c;
  }
  return out;
}

inline void cmd_map_personas(const PipelineConfig& cfg, const Log& log = quiet) {
  const auto corpus = load_corpus_artifacts(cfg);
  require_file(cfg.path(cfg.assignments), "assignments");
  require_file(cfg.path(cfg.clusters), "clusters");
  const auto clusters = load_cluster_model(cfg.path(cfg.clusters).string());
  const auto by_session = load_assignments(cfg.path(cfg.assignments).string());
  std::vector<SessionRecord> records;
  std::vector<int> assignments;
  for (const auto& r : corpus.records)
    if (const auto it = by_session.find(r.session_id); it != by_session.end()) {
      records.push_back(r);
      assignments.push_back(it->second);
    }
  const auto a = map_personas(records, assignments, clusters.k, corpus.taxonomy, cfg);
  save_activity_task_map(a.activity_map, cfg.path(cfg.activity_map).string());
  save_persona_mapping(a.mapping, cfg.path(cfg.mapping).string());
  write_text(cfg.path(cfg.reports) / "table1_personas.tsv", format_persona_table(a.mapping, a.top_per_cluster));
  log("mapped " + std::to_string(clusters.k) + " clusters");
}

inline void cmd_recommend(const PipelineConfig& cfg, const std::optional<std::string>& user, std::ostream& out) {
  const auto ws = load_workspace(cfg);
  require_file(cfg.path(cfg.finetuned), "finetuned");
  const auto state = load_checkpoint<float>(cfg.path(cfg.finetuned).string());
  HistoryStore store(cfg.window);
  auto ordered = ws.corpus.records;
  std::stable_sort(ordered.begin(), ordered.end(), [](const SessionRecord& a, const SessionRecord& b) {
    return a.user_id != b.user_id ? a.user_id < b.user_id : a.day < b.day;
  });
  for (const auto& r : ordered) store.record_session(r);
  const auto users = user ? std::vector<std::string>{*user} : store.user_ids();
  for (const auto& u : users) {
    const auto rec = recommend_new(store, u, state, ws.vocab, ws.corpus.catalog, cfg.recommend);
    nlohmann::json items = nlohmann::json::array();
    for (const auto& s : rec.services) items.push_back({{"service", s.service}, {"score", s.score}});
    out << nlohmann::json{{"user_id", u}, {"strategy", std::string(to_string(rec.strategy))}, {"services", items}}.dump()
        << '\n';
  }
}

// Trains every model the tables need, then writes Tables 1 to 6 shaped
// reports plus segmentation and persona summaries under the reports dir.
inline void cmd_evaluate(const PipelineConfig& cfg, const Log& log = quiet) {
  const auto ws = load_workspace(cfg);
  const auto dir = cfg.path(cfg.reports);
  std::vector<int> lens = cfg.ablation_max_len;
  if (std::find(lens.begin(), lens.end(), cfg.model.max_len) == lens.end()) lens.insert(lens.begin(), cfg.model.max_len);
  const auto study = run_model_study(cfg, ws, lens, cfg.eval_seeds, cfg.model.max_len, log);
  write_text(dir / "study_runs.tsv", study_runs_table(study));
  write_text(dir / "table2_multitask.tsv", table2(study));
  write_text(dir / "table3_service_seq_len.tsv", table_seq_len(study, true));
  write_text(dir / "table4_page_seq_len.tsv", table_seq_len(study, false));
  write_text(dir / "table5_multitask_vs_separate.tsv", table5(study));

  const auto& pretrained = *study.pretrained;
  const auto& finetuned = *study.finetuned;
  const auto emb = embed_corpus(ws.corpus.records, cfg.embed_checkpoint == "finetuned" ? finetuned : pretrained, ws.vocab);
  const auto sweep = sweep_k(emb.vectors, cfg.k_min, cfg.k_max, cfg.segment_seed, cfg.kmeans_max_iter, cfg.kmeans_tol);
  write_text(dir / "segmentation_sweep.tsv", format_sweep_table(sweep, false));
  const auto& fit = sweep.fits[static_cast<std::size_t>(sweep.selected_k - cfg.k_min)];
  std::vector<int> latent;
  for (const auto& r : ws.corpus.records) latent.push_back(r.latent_persona.value_or(-1));
  const double ari = clustering_agreement(fit.assignments, latent);

  const auto personas = map_personas(ws.corpus.records, fit.assignments, fit.model.k, ws.corpus.taxonomy, cfg);
  write_text(dir / "table1_personas.tsv", format_persona_table(personas.mapping, personas.top_per_cluster));
  const auto& embed_model = cfg.embed_checkpoint == "finetuned" ? finetuned : pretrained;
  std::map<std::string, UserPersona> per_user;
  const auto pacc =
      persona_accuracy(ws.corpus.records, embed_model, ws.vocab, fit.model, personas.mapping, cfg.window, &per_user);

  const auto hits = run_hit_study(ws, finetuned, cfg);
  write_text(dir / "table6_hit_at_n.tsv", table6(hits));

  // Tailoring on the 10-day split users (or the first configured split).
  const int split_day = std::find(cfg.seen_days.begin(), cfg.seen_days.end(), 10) != cfg.seen_days.end()
                            ? 10
                            : cfg.seen_days.front();
  std::vector<TailoringInput> tailored_model, tailored_pop;
  const PopularityBaseline base(ws.split.train);
  const auto rec = model_recommender(finetuned, ws.vocab, ws.corpus.catalog, cfg);
  const auto pop = popularity_recommender(base);
  std::map<std::string, std::vector<SessionRecord>> seen;
  for (const auto& r : ws.split.test)
    if (r.day < split_day) seen[r.user_id].push_back(r);
  for (auto& [user, sessions] : seen) {
    std::stable_sort(sessions.begin(), sessions.end(), [](const auto& a, const auto& b) { return a.day < b.day; });
    const auto& p = per_user.at(user).personas;
    tailored_model.push_back({p, rec(sessions, cfg.recommend.n)});
    tailored_pop.push_back({p, pop(sessions, cfg.recommend.n)});
  }

  nlohmann::json summary = nlohmann::json::array();
  summary.push_back({{"metric", "mlm_accuracy"}, {"value", study.mlm_accuracy}});
  summary.push_back({{"metric", "selected_k"}, {"value", sweep.selected_k}});
  summary.push_back({{"metric", "ari"}, {"value", ari}});
  summary.push_back({{"metric", "persona_user_accuracy"}, {"value", pacc.rate()}});
  summary.push_back({{"metric", "persona_mean_confidence"}, {"value", pacc.mean_confidence}});
  summary.push_back({{"metric", "tailoring_sessionbert"}, {"value", tailoring_report(tailored_model, ws.corpus.taxonomy, personas.activity_map)}});
  summary.push_back({{"metric", "tailoring_popularity"}, {"value", tailoring_report(tailored_pop, ws.corpus.taxonomy, personas.activity_map)}});
  std::string lines;
  for (const auto& j : summary) lines += j.dump() + "\n";
  write_text(dir / "summary.jsonl", lines);
  log("reports written to " + dir.string());
}

}  // namespace sessionbert::pipeline
