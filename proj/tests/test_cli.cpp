#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr together
};

Run run(const std::string& args) {
  const std::string cmd = std::string(SESSIONBERT_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (const std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) r.output.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Small enough that the whole pipeline runs in seconds.
fs::path tiny_config(const fs::path& dir) {
  fs::create_directories(dir);
  const auto path = dir / "tiny.conf";
  std::ofstream out(path);
  out << "generator.num_users = 30\n"
         "model.num_layers = 1\nmodel.num_heads = 2\nmodel.d_model = 16\nmodel.d_ff = 32\n"
         "model.max_len = 32   # short sessions only\n"
         "pretrain.epochs = 1\nfinetune.epochs = 1\nfinetune.batch_size = 8\n"
         "pretrain.learning_rate = 1e-3\nfinetune.learning_rate = 1e-3\n"
         "segment.k_min = 2\nsegment.k_max = 3\n"
         "eval.ablation_max_len = 16,32\neval.seeds = 0\n";
  return path;
}

}  // namespace

TEST(Cli, UnknownCommandIsUsageError) {
  const auto r = run("frobnicate");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(run("").code, 2);
}

TEST(Cli, HelpExitsZero) {
  const auto r = run("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("evaluate"), std::string::npos);
}

TEST(Cli, ConfigErrorsNameTheField) {
  const auto dir = fs::temp_directory_path() / "sessionbert_cli_cfg";
  auto r = run("-w " + dir.string() + " --set model.d_model=30 generate");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("num_heads"), std::string::npos) << r.output;
  r = run("-w " + dir.string() + " --set no.such.key=1 generate");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("no.such.key"), std::string::npos);
  r = run("-w " + dir.string() + " --set recommend.strategy=popular generate");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("recommend.strategy"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "corpus.jsonl"));
}

TEST(Cli, MissingCorpusNamesCorpus) {
  const auto dir = fs::temp_directory_path() / "sessionbert_cli_empty";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto r = run("-w " + dir.string() + " pretrain");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("corpus"), std::string::npos) << r.output;
  fs::remove_all(dir);
}

TEST(Cli, PipelineEndToEndIsReproducible) {
  const auto dir = fs::temp_directory_path() / "sessionbert_cli_pipeline";
  fs::remove_all(dir);
  const auto conf = tiny_config(dir);
  const std::string base = "-c " + conf.string() + " -w " + dir.string() + " ";
  for (const char* cmd : {"generate", "build-vocab", "pretrain", "finetune", "embed", "segment", "map-personas"}) {
    const auto r = run(base + cmd);
    ASSERT_EQ(r.code, 0) << cmd << "\n" << r.output;
  }
  for (const char* f : {"corpus.jsonl", "catalog.jsonl", "taxonomy.jsonl", "vocab.txt", "pretrained.ckpt",
                        "finetuned.ckpt", "embeddings.jsonl", "clusters.bin", "assignments.tsv", "activity_map.tsv",
                        "mapping.txt"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;

  const auto rec = run(base + "recommend");
  ASSERT_EQ(rec.code, 0) << rec.output;
  EXPECT_FALSE(rec.output.empty());

  // Same config and seeds: identical bytes.
  const auto corpus = slurp(dir / "corpus.jsonl");
  const auto ckpt = slurp(dir / "finetuned.ckpt");
  ASSERT_EQ(run(base + "generate").code, 0);
  ASSERT_EQ(run(base + "finetune").code, 0);
  EXPECT_EQ(slurp(dir / "corpus.jsonl"), corpus);
  EXPECT_EQ(slurp(dir / "finetuned.ckpt"), ckpt);

  // Flags override the file.
  ASSERT_EQ(run(base + "--set generator.num_users=31 generate").code, 0);
  EXPECT_NE(slurp(dir / "corpus.jsonl"), corpus);
  fs::remove_all(dir);
}

TEST(Cli, EvaluateWritesStableReports) {
  const auto dir = fs::temp_directory_path() / "sessionbert_cli_eval";
  fs::remove_all(dir);
  const auto conf = tiny_config(dir);
  const std::string base = "-c " + conf.string() + " -w " + dir.string() + " ";
  ASSERT_EQ(run(base + "generate").code, 0);
  ASSERT_EQ(run(base + "build-vocab").code, 0);
  auto r = run(base + "evaluate");
  ASSERT_EQ(r.code, 0) << r.output;
  std::map<std::string, std::string> first;
  for (const auto& e : fs::directory_iterator(dir / "reports")) first[e.path().filename().string()] = slurp(e.path());
  for (const char* f : {"table1_personas.tsv", "table2_multitask.tsv", "table3_service_seq_len.tsv",
                        "table4_page_seq_len.tsv", "table5_multitask_vs_separate.tsv", "table6_hit_at_n.tsv"})
    EXPECT_TRUE(first.contains(f)) << f;

  r = run(base + "evaluate");
  ASSERT_EQ(r.code, 0) << r.output;
  for (const auto& [name, text] : first) EXPECT_EQ(slurp(dir / "reports" / name), text) << name;
  fs::remove_all(dir);
}
