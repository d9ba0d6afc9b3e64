#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "esrs/app.hpp"

namespace {

esrs::RunConfig load_config(const std::string& path) {
  return path.empty() ? esrs::RunConfig{} : esrs::RunConfig::load(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"ESIM and Siamese response selection"};
  cli.require_subcommand(1);

  std::string config, out;
  std::size_t workers = 1;

  auto* generate = cli.add_subcommand("generate", "write a synthetic keyword-linked corpus");
  auto* prepare = cli.add_subcommand("prepare", "augment dialogues and sample negatives");
  auto* trn = cli.add_subcommand("train", "train a model, keep the best dev checkpoint");
  for (auto* c : {generate, prepare, trn}) {
    c->add_option("-c,--config", config, "run configuration file")->required();
    c->add_option("-o,--out", out, "output directory")->required();
  }
  trn->add_option("--workers", workers, "threads for dev scoring");

  esrs::app::RankFlags rank_flags;
  auto* rnk = cli.add_subcommand("rank", "score and rank candidate sets");
  rnk->add_option("-c,--config", config, "run configuration file");
  rnk->add_option("-o,--out", out, "output directory")->required();
  rnk->add_option("--checkpoint", rank_flags.checkpoint)->required();
  rnk->add_option("--candidates", rank_flags.candidates)->required();
  rnk->add_option("--workers", rank_flags.workers);
  rnk->add_option("--chunk", rank_flags.chunk);

  esrs::app::RetrieveFlags retrieve_flags;
  auto* ret = cli.add_subcommand("retrieve", "top-k retrieval with a sentence-encoding model");
  ret->add_option("-c,--config", config, "run configuration file");
  ret->add_option("-o,--out", out, "output directory")->required();
  ret->add_option("--checkpoint", retrieve_flags.checkpoint)->required();
  ret->add_option("--pool", retrieve_flags.pool)->required();
  ret->add_option("-k", retrieve_flags.k);
  ret->add_option("--workers", retrieve_flags.workers);
  ret->add_option("--chunk", retrieve_flags.chunk);
  ret->add_option("--cache", retrieve_flags.cache, "encoding cache file");

  esrs::app::RerankFlags rerank_flags;
  auto* rr = cli.add_subcommand("rerank", "retrieve with sentenc, rerank the top k with esim");
  rr->add_option("-c,--config", config, "run configuration file");
  rr->add_option("-o,--out", out, "output directory")->required();
  rr->add_option("--sentenc", rerank_flags.sentenc)->required();
  rr->add_option("--esim", rerank_flags.esim)->required();
  rr->add_option("--pool", rerank_flags.pool)->required();
  rr->add_option("-k", rerank_flags.k);
  rr->add_option("--workers", rerank_flags.workers);
  rr->add_option("--chunk", rerank_flags.chunk);

  esrs::app::EvaluateFlags eval_flags;
  double threshold = 0.0;
  auto* ev = cli.add_subcommand("evaluate", "R@k, MRR and MAP against gold candidate sets");
  ev->add_option("-o,--out", out, "output directory")->required();
  ev->add_option("--gold", eval_flags.gold)->required();
  ev->add_option("--scores", eval_flags.scores);
  ev->add_option("--rankings", eval_flags.rankings);
  auto* thr = ev->add_option("--threshold", threshold);
  ev->add_flag("--select-threshold", eval_flags.select_threshold);
  ev->add_option("--dev-scores", eval_flags.dev_scores);
  ev->add_option("--dev-gold", eval_flags.dev_gold);

  std::vector<std::string> tables;
  auto* ens = cli.add_subcommand("ensemble", "average score tables");
  ens->add_option("-o,--out", out, "output directory")->required();
  ens->add_option("tables", tables)->required();

  try {
    cli.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return cli.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*generate) {
      esrs::app::cmd_generate(load_config(config), out);
    } else if (*prepare) {
      const auto m = esrs::app::cmd_prepare(load_config(config), out);
      std::cout << m.dump() << "\n";
    } else if (*trn) {
      esrs::app::cmd_train(load_config(config), out, workers);
    } else if (*rnk) {
      esrs::app::cmd_rank(load_config(config), rank_flags, out);
    } else if (*ret) {
      esrs::app::cmd_retrieve(load_config(config), retrieve_flags, out);
    } else if (*rr) {
      esrs::app::cmd_rerank(load_config(config), rerank_flags, out);
    } else if (*ev) {
      if (thr->count()) eval_flags.threshold = threshold;
      const auto r = esrs::app::cmd_evaluate(eval_flags, out);
      std::cout << r.to_json().dump() << "\n";
    } else if (*ens) {
      esrs::app::cmd_ensemble(tables, out);
    }
  } catch (const esrs::Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
