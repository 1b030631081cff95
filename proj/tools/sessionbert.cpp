// Command-line driver for the full pipeline.
#include <csignal>
#include <iostream>

#include "CLI11.hpp"
#include "sessionbert/pipeline.hpp"
#include "sessionbert/service.hpp"

using namespace sessionbert;

namespace {

httplib::Server* g_server = nullptr;

void stop_server(int) {
  if (g_server) g_server->stop();
}

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string checkpoint, clusters, mapping, vocab, catalog, store_path;
};

int serve(const PipelineConfig& cfg, ServeOptions opt) {
  auto pick = [&](std::string& flag, const std::string& fallback) {
    if (flag.empty()) flag = cfg.path(fallback).string();
  };
  pick(opt.checkpoint, cfg.finetuned);
  pick(opt.clusters, cfg.clusters);
  pick(opt.mapping, cfg.mapping);
  pick(opt.vocab, cfg.vocab);
  pick(opt.catalog, cfg.catalog);
  pick(opt.store_path, "store");
  for (const auto& [name, p] : {std::pair{"checkpoint", opt.checkpoint}, {"clusters", opt.clusters},
                                {"mapping", opt.mapping}, {"vocab", opt.vocab}, {"catalog", opt.catalog}})
    pipeline::require_file(p, name);

  ServiceState state{load_checkpoint<float>(opt.checkpoint),
                     load_vocabulary(opt.vocab),
                     load_catalog(opt.catalog),
                     load_cluster_model(opt.clusters),
                     load_persona_mapping(opt.mapping),
                     HistoryStore::open(opt.store_path, cfg.window),
                     {}};
  state.model_version = "step-" + std::to_string(state.model.step);
  httplib::Server server;
  install_routes(server, state);
  g_server = &server;
  std::signal(SIGINT, stop_server);
  std::signal(SIGTERM, stop_server);
  std::cerr << "listening on " << opt.host << ":" << opt.port << "\n";
  if (!server.listen(opt.host, opt.port)) {
    std::cerr << "error: cannot listen on " << opt.host << ":" << opt.port << "\n";
    return 1;
  }
  state.store.compact();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SessionBERT pipeline: corpus generation, training, segmentation, personas, recommendation"};
  app.require_subcommand(1);
  std::string config_file;
  std::vector<std::string> overrides;
  std::string work_dir;
  app.add_option("-c,--config", config_file, "key = value config file");
  app.add_option("-s,--set", overrides, "override one config key, key=value (repeatable)");
  app.add_option("-w,--work-dir", work_dir, "directory for artifacts (config key work_dir)");

  auto* gen = app.add_subcommand("generate", "write the synthetic corpus, catalog and taxonomy");
  auto* vocab = app.add_subcommand("build-vocab", "build the vocabulary from the training split");
  auto* pre = app.add_subcommand("pretrain", "masked-token pretraining");
  auto* ft = app.add_subcommand("finetune", "fine-tune the service/page heads");
  auto* emb = app.add_subcommand("embed", "session embeddings for the whole corpus");
  auto* seg = app.add_subcommand("segment", "k sweep and cluster model");
  auto* map = app.add_subcommand("map-personas", "map clusters to personas");
  auto* rec = app.add_subcommand("recommend", "new-service recommendations per user");
  auto* eval = app.add_subcommand("evaluate", "train comparison models and write all reports");
  auto* srv = app.add_subcommand("serve", "HTTP service");

  std::string user;
  rec->add_option("--user", user, "only this user");
  ServeOptions so;
  srv->add_option("--host", so.host, "bind address");
  srv->add_option("--port", so.port, "port");
  srv->add_option("--checkpoint", so.checkpoint, "fine-tuned checkpoint");
  srv->add_option("--clusters", so.clusters, "cluster model");
  srv->add_option("--mapping", so.mapping, "persona mapping");
  srv->add_option("--vocab", so.vocab, "vocabulary");
  srv->add_option("--catalog", so.catalog, "service catalog");
  srv->add_option("--store-path", so.store_path, "history store directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const pipeline::Log log = [](const std::string& m) { std::cerr << m << "\n"; };
  try {
    PipelineConfig cfg;
    if (!config_file.empty()) load_config_file(cfg, config_file);
    for (const auto& o : overrides) apply_setting(cfg, o);
    if (!work_dir.empty()) cfg.work_dir = work_dir;
    cfg.validate();

    if (*gen) pipeline::cmd_generate(cfg, log);
    else if (*vocab) pipeline::cmd_build_vocab(cfg, log);
    else if (*pre) pipeline::cmd_pretrain(cfg, log);
    else if (*ft) pipeline::cmd_finetune(cfg, log);
    else if (*emb) pipeline::cmd_embed(cfg, log);
    else if (*seg) pipeline::cmd_segment(cfg, log);
    else if (*map) pipeline::cmd_map_personas(cfg, log);
    else if (*rec) pipeline::cmd_recommend(cfg, user.empty() ? std::nullopt : std::optional(user), std::cout);
    else if (*eval) pipeline::cmd_evaluate(cfg, log);
    else if (*srv) return serve(cfg, so);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
