#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sessionbert/corpus.hpp"
#include "sessionbert/model.hpp"
#include "sessionbert/persona.hpp"
#include "sessionbert/recommender.hpp"
#include "sessionbert/training.hpp"

namespace sessionbert {

// Every knob of the pipeline. Paths are relative to `work_dir` unless
// absolute.
struct PipelineConfig {
  std::string work_dir = "work";
  std::string corpus = "corpus.jsonl";
  std::string catalog = "catalog.jsonl";
  std::string taxonomy = "taxonomy.jsonl";
  std::string vocab = "vocab.txt";
  std::string pretrained = "pretrained.ckpt";
  std::string finetuned = "finetuned.ckpt";
  std::string embeddings = "embeddings.jsonl";
  std::string clusters = "clusters.bin";
  std::string assignments = "assignments.tsv";
  std::string activity_map = "activity_map.tsv";
  std::string mapping = "mapping.txt";
  std::string reports = "reports";

  GeneratorConfig generator;
  std::size_t vocab_cap = 30000;
  ModelConfig model;
  TrainConfig pretrain;
  TrainConfig finetune;
  std::array<double, 3> split_ratios = kDefaultSplitRatios;
  std::uint64_t split_seed = 0;

  std::string embed_checkpoint = "pretrained";  // pretrained | finetuned
  int k_min = 3;
  int k_max = 9;
  std::uint64_t segment_seed = 0;
  int kmeans_max_iter = 100;
  double kmeans_tol = 1e-6;

  std::size_t top_activities = 200;
  PersonaMappingConfig persona;

  std::size_t window = kDefaultWindow;
  RecommendConfig recommend;

  std::vector<int> seen_days{6, 10, 12};
  std::vector<std::size_t> hit_n{3, 5};
  std::vector<int> ablation_max_len{64, 128};
  std::vector<std::uint64_t> eval_seeds{0, 1, 2};

  PipelineConfig() {
    pretrain.mode = TrainMode::PretrainMlm;
    finetune.mode = TrainMode::FinetuneMultitask;
    finetune.batch_size = 1;
  }

  std::filesystem::path path(const std::string& p) const {
    const std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : std::filesystem::path(work_dir) / fp;
  }

  void validate() const {
    generator.validate();
    if (model.num_layers < 1) throw ValidationError("model.num_layers", "must be >= 1");
    if (model.num_heads < 1 || model.d_model % model.num_heads != 0)
      throw ValidationError("model.num_heads", "must divide model.d_model");
    if (model.max_len < 8) throw ValidationError("model.max_len", "must be >= 8");
    if (!(model.dropout >= 0 && model.dropout < 1)) throw ValidationError("model.dropout", "must be in [0,1)");
    pretrain.validate();
    finetune.validate();
    if (finetune.mode == TrainMode::PretrainMlm) throw ValidationError("finetune.mode", "must be a fine-tuning mode");
    if (k_min < 2 || k_max < k_min) throw ValidationError("segment.k_min", "need 2 <= k_min <= k_max");
    if (embed_checkpoint != "pretrained" && embed_checkpoint != "finetuned")
      throw ValidationError("embed.checkpoint", "must be pretrained or finetuned");
    if (window == 0) throw ValidationError("recommend.window", "must be >= 1");
    if (recommend.n == 0) throw ValidationError("recommend.n", "must be >= 1");
    if (seen_days.empty()) throw ValidationError("eval.seen_days", "must not be empty");
    if (hit_n.empty()) throw ValidationError("eval.hit_n", "must not be empty");
    if (eval_seeds.empty()) throw ValidationError("eval.seeds", "must not be empty");
  }
};

namespace detail {

template <typename T>
T parse_value(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else {
    if (!(in >> out) || !(in >> std::ws).eof()) throw ValidationError(key, "cannot parse '" + v + "'");
  }
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_value<T>(key, item));
  return out;
}

}  // namespace detail

// Setters keyed by config name. Values are strings as they appear in the
// file or on the command line.
inline std::map<std::string, std::function<void(PipelineConfig&, const std::string&)>> config_setters() {
  using C = PipelineConfig;
  std::map<std::string, std::function<void(C&, const std::string&)>> m;
  auto bind = [&](const std::string& key, auto member) {
    m[key] = [key, member](C& c, const std::string& v) {
      auto& field = member(c);
      field = detail::parse_value<std::remove_reference_t<decltype(field)>>(key, v);
    };
  };
  bind("work_dir", [](C& c) -> auto& { return c.work_dir; });
  bind("paths.corpus", [](C& c) -> auto& { return c.corpus; });
  bind("paths.catalog", [](C& c) -> auto& { return c.catalog; });
  bind("paths.taxonomy", [](C& c) -> auto& { return c.taxonomy; });
  bind("paths.vocab", [](C& c) -> auto& { return c.vocab; });
  bind("paths.pretrained", [](C& c) -> auto& { return c.pretrained; });
  bind("paths.finetuned", [](C& c) -> auto& { return c.finetuned; });
  bind("paths.embeddings", [](C& c) -> auto& { return c.embeddings; });
  bind("paths.clusters", [](C& c) -> auto& { return c.clusters; });
  bind("paths.assignments", [](C& c) -> auto& { return c.assignments; });
  bind("paths.activity_map", [](C& c) -> auto& { return c.activity_map; });
  bind("paths.mapping", [](C& c) -> auto& { return c.mapping; });
  bind("paths.reports", [](C& c) -> auto& { return c.reports; });

  bind("generator.num_users", [](C& c) -> auto& { return c.generator.num_users; });
  bind("generator.sessions_min", [](C& c) -> auto& { return c.generator.sessions_per_user_range.first; });
  bind("generator.sessions_max", [](C& c) -> auto& { return c.generator.sessions_per_user_range.second; });
  bind("generator.activities_min", [](C& c) -> auto& { return c.generator.activities_per_session_range.first; });
  bind("generator.activities_max", [](C& c) -> auto& { return c.generator.activities_per_session_range.second; });
  bind("generator.p_task", [](C& c) -> auto& { return c.generator.p_task; });
  bind("generator.num_services", [](C& c) -> auto& { return c.generator.num_services; });
  bind("generator.pages_per_service", [](C& c) -> auto& { return c.generator.pages_per_service; });
  bind("generator.pool_pages_per_service", [](C& c) -> auto& { return c.generator.pool_pages_per_service; });
  bind("generator.num_tasks", [](C& c) -> auto& { return c.generator.num_tasks; });
  bind("generator.num_days", [](C& c) -> auto& { return c.generator.num_days; });
  bind("generator.focus_share", [](C& c) -> auto& { return c.generator.focus_share; });
  bind("generator.shared_share", [](C& c) -> auto& { return c.generator.shared_share; });
  bind("generator.page_zipf", [](C& c) -> auto& { return c.generator.page_zipf; });
  bind("generator.seed", [](C& c) -> auto& { return c.generator.seed; });
  m["generator.persona_prior"] = [](C& c, const std::string& v) {
    c.generator.persona_prior = detail::parse_list<double>("generator.persona_prior", v);
  };

  bind("vocab.cap", [](C& c) -> auto& { return c.vocab_cap; });
  bind("split.seed", [](C& c) -> auto& { return c.split_seed; });
  m["split.ratios"] = [](C& c, const std::string& v) {
    const auto r = detail::parse_list<double>("split.ratios", v);
    if (r.size() != 3) throw ValidationError("split.ratios", "expected train,val,test");
    std::copy(r.begin(), r.end(), c.split_ratios.begin());
  };

  bind("model.num_layers", [](C& c) -> auto& { return c.model.num_layers; });
  bind("model.num_heads", [](C& c) -> auto& { return c.model.num_heads; });
  bind("model.d_model", [](C& c) -> auto& { return c.model.d_model; });
  bind("model.d_ff", [](C& c) -> auto& { return c.model.d_ff; });
  bind("model.max_len", [](C& c) -> auto& { return c.model.max_len; });
  bind("model.dropout", [](C& c) -> auto& { return c.model.dropout; });
  bind("model.seed", [](C& c) -> auto& { return c.model.seed; });

  for (const char* phase : {"pretrain", "finetune"}) {
    const std::string p = phase;
    auto tc = [p](C& c) -> TrainConfig& { return p == "pretrain" ? c.pretrain : c.finetune; };
    bind(p + ".epochs", [tc](C& c) -> auto& { return tc(c).epochs; });
    bind(p + ".learning_rate", [tc](C& c) -> auto& { return tc(c).learning_rate; });
    bind(p + ".batch_size", [tc](C& c) -> auto& { return tc(c).batch_size; });
    bind(p + ".seed", [tc](C& c) -> auto& { return tc(c).seed; });
    bind(p + ".mask_rate", [tc](C& c) -> auto& { return tc(c).mask_rate; });
    bind(p + ".beta1", [tc](C& c) -> auto& { return tc(c).beta1; });
    bind(p + ".beta2", [tc](C& c) -> auto& { return tc(c).beta2; });
    bind(p + ".epsilon", [tc](C& c) -> auto& { return tc(c).epsilon; });
  }
  m["finetune.mode"] = [](C& c, const std::string& v) {
    try {
      c.finetune.mode = parse_train_mode(v);
    } catch (const ValidationError&) {
      throw ValidationError("finetune.mode", "unknown mode '" + v + "'");
    }
  };

  bind("embed.checkpoint", [](C& c) -> auto& { return c.embed_checkpoint; });
  bind("segment.k_min", [](C& c) -> auto& { return c.k_min; });
  bind("segment.k_max", [](C& c) -> auto& { return c.k_max; });
  bind("segment.seed", [](C& c) -> auto& { return c.segment_seed; });
  bind("segment.max_iter", [](C& c) -> auto& { return c.kmeans_max_iter; });
  bind("segment.tol", [](C& c) -> auto& { return c.kmeans_tol; });

  bind("persona.top_activities", [](C& c) -> auto& { return c.top_activities; });
  bind("persona.eps_merge", [](C& c) -> auto& { return c.persona.eps_merge; });
  bind("persona.tau_min", [](C& c) -> auto& { return c.persona.tau_min; });

  bind("recommend.window", [](C& c) -> auto& { return c.window; });
  bind("recommend.n", [](C& c) -> auto& { return c.recommend.n; });
  bind("recommend.per_session_k", [](C& c) -> auto& { return c.recommend.per_session_k; });
  m["recommend.strategy"] = [](C& c, const std::string& v) {
    const auto s = parse_strategy(v);
    if (!s) throw ValidationError("recommend.strategy", "unknown strategy '" + v + "'");
    c.recommend.strategy = *s;
  };
  m["recommend.aggregate"] = [](C& c, const std::string& v) {
    if (v == "max") c.recommend.aggregate = SimAggregate::Max;
    else if (v == "mean") c.recommend.aggregate = SimAggregate::Mean;
    else throw ValidationError("recommend.aggregate", "must be max or mean");
  };

  m["eval.seen_days"] = [](C& c, const std::string& v) { c.seen_days = detail::parse_list<int>("eval.seen_days", v); };
  m["eval.hit_n"] = [](C& c, const std::string& v) { c.hit_n = detail::parse_list<std::size_t>("eval.hit_n", v); };
  m["eval.ablation_max_len"] = [](C& c, const std::string& v) {
    c.ablation_max_len = detail::parse_list<int>("eval.ablation_max_len", v);
  };
  m["eval.seeds"] = [](C& c, const std::string& v) {
    c.eval_seeds = detail::parse_list<std::uint64_t>("eval.seeds", v);
  };
  return m;
}

// Applies one "key=value" assignment. Unknown keys are errors.
inline void apply_setting(PipelineConfig& c, const std::string& assignment) {
  static const auto setters = config_setters();
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ValidationError(assignment, "expected key=value");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  const std::string key = trim(assignment.substr(0, eq));
  const auto it = setters.find(key);
  if (it == setters.end()) throw ValidationError(key, "unknown config key");
  it->second(c, trim(assignment.substr(eq + 1)));
}

// key = value lines; '#' starts a comment.
inline void load_config_file(PipelineConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config", "cannot open " + path);
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    apply_setting(c, line);
  }
}

}  // namespace sessionbert
