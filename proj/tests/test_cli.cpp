#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "esrs/app.hpp"
#include "support/fixtures.hpp"

namespace esrs {
namespace {

using testing::slurp;
using testing::spit;
using testing::TempDir;

TEST(RunConfig, ParsesCommentsAndWhitespace) {
  std::istringstream in("# header\nseed = 42   # trailing\n\n  hidden=8\r\nvariant = ctx_dec_off\n");
  const auto c = RunConfig::parse(in);
  EXPECT_EQ(c.u64("seed"), 42u);
  EXPECT_EQ(c.size("hidden"), 8u);
  EXPECT_EQ(c.str("variant"), "ctx_dec_off");
  EXPECT_EQ(c.str("model"), "esim");
}

TEST(RunConfig, RejectsUnknownKeysAndBadLines) {
  std::istringstream unknown("seed = 1\nhiden = 8\n");
  try {
    RunConfig::parse(unknown);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("hiden"), std::string::npos);
  }
  std::istringstream no_eq("seed 1\n");
  EXPECT_THROW(RunConfig::parse(no_eq), ParseError);
  RunConfig c;
  EXPECT_THROW(c.set("nope", "1"), ConfigError);
  c.set("hidden", "-3");
  EXPECT_THROW(c.size("hidden"), ConfigError);
  c.set("embeddings_trainable", "maybe");
  EXPECT_THROW(c.flag("embeddings_trainable"), ConfigError);
  EXPECT_THROW(RunConfig::load("/nonexistent/run.cfg"), IoError);
}

TEST(RunConfig, EchoRoundTrips) {
  RunConfig c;
  c.set("seed", "9");
  c.set("embedding_files", "a.txt, b.txt");
  std::ostringstream out;
  c.echo(out);
  std::istringstream back(out.str());
  EXPECT_EQ(RunConfig::parse(back), c);
  EXPECT_EQ(c.list("embedding_files"), (std::vector<std::string>{"a.txt", "b.txt"}));
  EXPECT_EQ(out.str().find("seed = 9\n") != std::string::npos, true);
}

/// A generated corpus with small trained models of both kinds, built once.
class Pipeline : public ::testing::Test {
 protected:
  static TempDir* dir;
  static RunConfig base;

  static void SetUpTestSuite() {
    dir = new TempDir;
    base.set("seed", "13");
    base.set("hidden", "4");
    base.set("embed_dim", "4");
    base.set("heads", "2");
    base.set("batch_size", "16");
    base.set("max_epochs", "2");
    base.set("learning_rate", "0.01");
    base.set("synthetic_train_dialogues", "16");
    base.set("synthetic_dev_cases", "5");
    base.set("synthetic_test_cases", "6");
    base.set("synthetic_candidates", "5");
    base.set("train_file", dir->file("corpus/train.jsonl"));
    base.set("examples_file", dir->file("prep/examples.jsonl"));
    base.set("dev_file", dir->file("corpus/dev_sets.jsonl"));
    app::cmd_generate(base, dir->file("corpus"));
    app::cmd_prepare(base, dir->file("prep"));
    app::cmd_train(base, dir->file("esim"));
    auto s = base;
    s.set("model", "sentenc");
    app::cmd_train(s, dir->file("sentenc"));
  }
  static void TearDownTestSuite() {
    delete dir;
    dir = nullptr;
  }

  static std::string file(const std::string& name) { return dir->file(name); }
};

TempDir* Pipeline::dir = nullptr;
RunConfig Pipeline::base;

TEST_F(Pipeline, PrepareCountsAndRerun) {
  auto c = base;
  c.set("negative_ratio", "4");
  TempDir out;
  const auto m = app::cmd_prepare(c, out.file("a"));
  const std::size_t pos = m.at("positives");
  EXPECT_EQ(m.at("negatives").get<std::size_t>(), 4 * pos);
  EXPECT_EQ(m.at("total").get<std::size_t>(), 5 * pos);
  EXPECT_EQ(read_jsonl_file<Example>(out.file("a/examples.jsonl")).size(), 5 * pos);
  app::cmd_prepare(c, out.file("b"));
  EXPECT_EQ(slurp(out.file("a/examples.jsonl")), slurp(out.file("b/examples.jsonl")));
  EXPECT_EQ(slurp(out.file("a/manifest.json")), slurp(out.file("b/manifest.json")));
  std::istringstream echo(slurp(out.file("a/config.txt")));
  EXPECT_EQ(RunConfig::parse(echo), c);
}

TEST_F(Pipeline, TrainingIsDeterministic) {
  TempDir out;
  app::cmd_train(base, out.file("again"));
  EXPECT_EQ(slurp(out.file("again/model.ckpt")), slurp(file("esim/model.ckpt")));
  EXPECT_EQ(slurp(out.file("again/history.jsonl")), slurp(file("esim/history.jsonl")));
  std::istringstream hist(slurp(file("esim/history.jsonl")));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(hist, line)) ++lines;
  EXPECT_EQ(lines, 2u);
}

TEST_F(Pipeline, RankAndEvaluateAreDeterministic) {
  TempDir out;
  app::RankFlags f{file("esim/model.ckpt"), file("corpus/test_sets.jsonl"), 1, 64};
  app::cmd_rank(base, f, out.file("r1"));
  f.workers = 3;
  f.chunk = 2;
  app::cmd_rank(base, f, out.file("r2"));
  EXPECT_EQ(slurp(out.file("r1/scores.tsv")), slurp(out.file("r2/scores.tsv")));
  EXPECT_EQ(slurp(out.file("r1/rankings.jsonl")), slurp(out.file("r2/rankings.jsonl")));

  app::EvaluateFlags e;
  e.gold = file("corpus/test_sets.jsonl");
  e.scores = out.file("r1/scores.tsv");
  const auto a = app::cmd_evaluate(e, out.file("e1"));
  e.scores.clear();
  e.rankings = out.file("r1/rankings.jsonl");
  const auto b = app::cmd_evaluate(e, out.file("e2"));
  EXPECT_EQ(a.cases, 6u);
  // Scores pass through TSV at 9 significant digits, rankings at full precision.
  EXPECT_EQ(a.mrr, b.mrr);
  EXPECT_EQ(a.r1, b.r1);
  app::cmd_evaluate(e, out.file("e3"));
  EXPECT_EQ(slurp(out.file("e2/report.json")), slurp(out.file("e3/report.json")));
}

TEST_F(Pipeline, RerankWithFullDepthEqualsRank) {
  TempDir out;
  app::RankFlags rf{file("esim/model.ckpt"), file("corpus/test_sets.jsonl"), 1, 64};
  app::cmd_rank(base, rf, out.file("rank"));
  app::RerankFlags f{file("sentenc/model.ckpt"), file("esim/model.ckpt"), file("corpus/test_sets.jsonl"), 5, 1, 64};
  app::cmd_rerank(base, f, out.file("rerank"));
  EXPECT_EQ(slurp(out.file("rerank/rankings.jsonl")), slurp(out.file("rank/rankings.jsonl")));
  f.k = 2;
  app::cmd_rerank(base, f, out.file("rerank2"));
  for (const auto& r : app::read_rankings(out.file("rerank2/rankings.jsonl"))) EXPECT_EQ(r.order.size(), 5u);
}

TEST_F(Pipeline, RetrieveWithCacheMatchesWithout) {
  TempDir out;
  app::RetrieveFlags f{file("sentenc/model.ckpt"), file("corpus/test_sets.jsonl"), 3, 1, 256, ""};
  app::cmd_retrieve(base, f, out.file("plain"));
  f.cache = out.file("enc.cache");
  app::cmd_retrieve(base, f, out.file("cold"));
  ASSERT_TRUE(std::filesystem::exists(f.cache));
  app::cmd_retrieve(base, f, out.file("warm"));
  EXPECT_EQ(slurp(out.file("plain/topk.tsv")), slurp(out.file("cold/topk.tsv")));
  EXPECT_EQ(slurp(out.file("cold/topk.tsv")), slurp(out.file("warm/topk.tsv")));
  for (const auto& r : app::read_rankings(out.file("warm/rankings.jsonl"))) EXPECT_EQ(r.order.size(), 3u);
  f.checkpoint = file("esim/model.ckpt");
  EXPECT_THROW(app::cmd_retrieve(base, f, out.file("wrong")), ContractError);
}

TEST_F(Pipeline, EnsembleOfOneTableIsIdentity) {
  TempDir out;
  app::RankFlags f{file("esim/model.ckpt"), file("corpus/test_sets.jsonl"), 1, 64};
  app::cmd_rank(base, f, out.file("r"));
  app::cmd_ensemble({out.file("r/scores.tsv")}, out.file("ens"));
  EXPECT_EQ(slurp(out.file("ens/scores.tsv")), slurp(out.file("r/scores.tsv")));
  app::cmd_ensemble({out.file("r/scores.tsv"), out.file("r/scores.tsv")}, out.file("ens2"));
  EXPECT_EQ(slurp(out.file("ens2/scores.tsv")), slurp(out.file("r/scores.tsv")));
}

std::vector<CandidateSet> evaluate_gold() {
  CandidateSet a{"a", {{"A", {"x"}}}, {{"p"}, {"q"}, {"r"}}, {0}};
  CandidateSet b{"b", {{"A", {"y"}}}, {{"p"}, {"q"}, {"r"}}, {1}};
  return {a, b};
}

TEST(Evaluate, HandComputedFixture) {
  TempDir dir;
  write_jsonl_file(dir.file("gold.jsonl"), evaluate_gold());
  spit(dir.file("s.tsv"), "a\t0\t0.2\na\t1\t0.9\na\t2\t0.1\nb\t0\t0.1\nb\t1\t0.8\nb\t2\t0.3\n");
  app::EvaluateFlags f;
  f.gold = dir.file("gold.jsonl");
  f.scores = dir.file("s.tsv");
  const auto r = app::cmd_evaluate(f, dir.file("out"));
  EXPECT_EQ(r.cases, 2u);
  EXPECT_DOUBLE_EQ(r.r1, 0.5);
  EXPECT_DOUBLE_EQ(r.r10, 1.0);
  EXPECT_DOUBLE_EQ(r.mrr, 0.75);
  EXPECT_DOUBLE_EQ(r.map, 0.75);
  const auto j = nlohmann::json::parse(slurp(dir.file("out/report.json")));
  EXPECT_EQ(j.at("MRR").get<double>(), 0.75);
  EXPECT_TRUE(j.at("threshold").is_null());

  f.threshold = 0.85;
  const auto t = app::cmd_evaluate(f, dir.file("out_t"));
  ASSERT_TRUE(t.threshold.has_value());
  EXPECT_EQ(*t.threshold, 0.85);

  f.select_threshold = true;
  EXPECT_THROW(app::cmd_evaluate(f, dir.file("bad")), ConfigError);
  f.threshold.reset();
  EXPECT_THROW(app::cmd_evaluate(f, dir.file("bad")), ConfigError);
  f.dev_scores = dir.file("s.tsv");
  f.dev_gold = dir.file("gold.jsonl");
  const auto s = app::cmd_evaluate(f, dir.file("out_s"));
  ASSERT_TRUE(s.threshold.has_value());
  EXPECT_GE(*s.threshold, 0.5);
  EXPECT_LE(*s.threshold, 0.99);

  app::EvaluateFlags both;
  both.gold = f.gold;
  both.scores = f.scores;
  both.rankings = f.scores;
  EXPECT_THROW(app::cmd_evaluate(both, dir.file("bad")), ConfigError);
  both.rankings.clear();
  spit(dir.file("orphan.tsv"), "zz\t0\t0.5\n");
  both.scores = dir.file("orphan.tsv");
  EXPECT_THROW(app::cmd_evaluate(both, dir.file("bad")), ContractError);
}

#ifdef ESRS_CLI_PATH
int run_cli(const std::string& args, const std::string& err_file) {
  const std::string cmd = std::string(ESRS_CLI_PATH) + " " + args + " >/dev/null 2>" + err_file;
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Binary, ExitCodesAndSingleLineErrors) {
  TempDir dir;
  write_jsonl_file(dir.file("gold.jsonl"), evaluate_gold());
  spit(dir.file("s.tsv"), "a\t0\t0.2\na\t1\t0.9\na\t2\t0.1\nb\t0\t0.1\nb\t1\t0.8\nb\t2\t0.3\n");
  const auto err = dir.file("err.txt");
  EXPECT_EQ(run_cli("evaluate -o " + dir.file("ok") + " --gold " + dir.file("gold.jsonl") + " --scores " +
                        dir.file("s.tsv"),
                    err),
            0);
  EXPECT_EQ(slurp(err), "");
  EXPECT_NE(run_cli("evaluate -o " + dir.file("bad") + " --gold " + dir.file("missing.jsonl") + " --scores " +
                        dir.file("s.tsv"),
                    err),
            0);
  const auto msg = slurp(err);
  EXPECT_EQ(msg.rfind("error: ", 0), 0u) << msg;
  EXPECT_EQ(std::count(msg.begin(), msg.end(), '\n'), 1) << msg;
  spit(dir.file("bad.cfg"), "colour = red\n");
  EXPECT_EQ(run_cli("generate -c " + dir.file("bad.cfg") + " -o " + dir.file("g"), err), 1);
  EXPECT_NE(slurp(err).find("error: parse: "), std::string::npos) << slurp(err);
  EXPECT_EQ(run_cli("frobnicate", err), 2);
}
#endif

}  // namespace
}  // namespace esrs
