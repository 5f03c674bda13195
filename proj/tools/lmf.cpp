// lmf: predict LoRA adapters for new datasets from a bank of trained ones.
//
//   lmf distances    --bank DIR --metric js
//   lmf coefficients --bank DIR --metric js --method normalized --output coeffs.json
//   lmf predict      --bank DIR --coefficients coeffs.json --query-id ID --output out.safetensors
//   lmf heatmap      --coefficients coeffs.json --output coeffs.pgm
//   lmf pipeline     --bank DIR --query q.jsonl --output out.safetensors
//   lmf score        --input pairs.jsonl

#include <cstdlib>
#include <fstream>
#include <map>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "lmf/evalmetrics.hpp"
#include "lmf/parallel.hpp"
#include "lmf/pipeline.hpp"

namespace {

struct Flags {
  std::string config, bank, query, metric, method, cache_dir, output, coefficients, query_id,
      checkpoint, bandwidth;
  std::size_t workers = 0, vocab = 0, hidden = 0;
  std::uint64_t seed = 0;
  double epsilon = 0.0, learning_rate = 0.0;
  int epochs = 0;
  bool no_train = false;

  std::map<std::string, CLI::Option*> opts;
};

void add_pipeline_flags(CLI::App* app, Flags& f) {
  f.opts["config"] = app->add_option("--config", f.config, "JSON file mirroring the pipeline config");
  f.opts["bank"] = app->add_option("--bank", f.bank, "bank directory (datasets/, adapters/)");
  f.opts["query"] = app->add_option("--query", f.query, "query token dataset (.jsonl)");
  f.opts["metric"] = app->add_option("--metric", f.metric, "wd, kl, js or mmd")
                         ->check(CLI::IsMember({"wd", "kl", "js", "mmd"}));
  f.opts["method"] = app->add_option("--method", f.method, "attentional, normalized or neural")
                         ->check(CLI::IsMember({"attentional", "normalized", "neural"}));
  f.opts["workers"] = app->add_option("--workers", f.workers, "worker threads")->check(CLI::PositiveNumber);
  f.opts["seed"] = app->add_option("--seed", f.seed, "seed for MMD subsampling and MLP init");
  f.opts["cache-dir"] = app->add_option("--cache-dir", f.cache_dir, "cache directory (default $LMF_CACHE_DIR)");
  f.opts["output"] = app->add_option("--output", f.output, "output file");
  f.opts["vocab-size"] = app->add_option("--vocab-size", f.vocab, "vocab for token files without meta");
  f.opts["epsilon"] = app->add_option("--epsilon", f.epsilon, "KL/JS smoothing");
  f.opts["bandwidth"] = app->add_option("--bandwidth", f.bandwidth, "MMD bandwidth or 'median'");
  f.opts["coefficients"] = app->add_option("--coefficients", f.coefficients, "coefficient JSON file");
  f.opts["query-id"] = app->add_option("--query-id", f.query_id, "row to predict");
  f.opts["checkpoint"] = app->add_option("--checkpoint", f.checkpoint, "MLP checkpoint path");
  f.opts["no-train"] = app->add_flag("--no-train", f.no_train, "fail instead of training a missing MLP");
  f.opts["hidden"] = app->add_option("--hidden", f.hidden, "MLP hidden width")->check(CLI::PositiveNumber);
  f.opts["epochs"] = app->add_option("--epochs", f.epochs, "MLP training epochs")->check(CLI::PositiveNumber);
  f.opts["lr"] = app->add_option("--lr", f.learning_rate, "MLP learning rate");
}

lmf::PipelineConfig resolve(const Flags& f) {
  auto given = [&](const char* name) {
    auto it = f.opts.find(name);
    return it != f.opts.end() && it->second->count() > 0;
  };
  lmf::PipelineConfig c = given("config") ? lmf::load_pipeline_config(f.config) : lmf::PipelineConfig{};
  if (!given("config")) c.workers = lmf::default_workers();
  if (!given("cache-dir") && !given("config")) {
    if (const char* env = std::getenv("LMF_CACHE_DIR"); env != nullptr && *env != '\0') c.cache_dir = env;
  }
  if (given("bank")) c.bank_dir = f.bank;
  if (given("query")) c.query_path = f.query;
  if (given("metric")) c.metric.tag = lmf::parse_metric(f.metric);
  if (given("method")) c.method = lmf::parse_method(f.method);
  if (given("workers")) c.workers = f.workers;
  if (given("seed")) c.seed = f.seed;
  if (given("cache-dir")) c.cache_dir = f.cache_dir;
  if (given("output")) c.output_path = f.output;
  if (given("vocab-size")) c.vocab_size = f.vocab;
  if (given("epsilon")) c.metric.epsilon = f.epsilon;
  if (given("bandwidth")) {
    if (f.bandwidth == "median") {
      c.metric.bandwidth.reset();
    } else {
      c.metric.bandwidth = std::stod(f.bandwidth);
    }
  }
  if (given("coefficients")) c.coefficients_path = f.coefficients;
  if (given("query-id")) c.query_id = f.query_id;
  if (given("checkpoint")) c.checkpoint = f.checkpoint;
  if (given("no-train")) c.no_train = f.no_train;
  if (given("hidden")) c.hidden = f.hidden;
  if (given("epochs")) c.epochs = f.epochs;
  if (given("lr")) c.learning_rate = f.learning_rate;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Predict LoRA adapters as mixtures of a pre-trained adapter bank"};
  app.require_subcommand(1);

  Flags distances_flags, coefficients_flags, predict_flags, pipeline_flags;
  auto* distances = app.add_subcommand("distances", "pairwise divergence matrix over the bank (cached)");
  add_pipeline_flags(distances, distances_flags);
  auto* coefficients = app.add_subcommand("coefficients", "mixture coefficients from the distance cache");
  add_pipeline_flags(coefficients, coefficients_flags);
  auto* predict = app.add_subcommand("predict", "combine bank adapters with one coefficient row");
  add_pipeline_flags(predict, predict_flags);
  auto* pipeline = app.add_subcommand("pipeline", "gather, preprocess, distances, coefficients, predict");
  add_pipeline_flags(pipeline, pipeline_flags);

  std::string heat_in, heat_out;
  auto* heatmap = app.add_subcommand("heatmap", "grayscale PGM of a coefficient matrix");
  heatmap->add_option("--coefficients", heat_in, "coefficient JSON file")->required();
  heatmap->add_option("--output", heat_out, "output .pgm")->required();

  std::string score_in, score_out;
  auto* score = app.add_subcommand("score", "Rouge-L and exact match over candidate/reference pairs");
  score->add_option("--input", score_in, "line-delimited {candidate, reference}")->required();
  score->add_option("--output", score_out, "write the JSON summary here as well");

  CLI11_PARSE(app, argc, argv);

  try {
    if (distances->parsed()) {
      auto r = lmf::cmd_distances(resolve(distances_flags));
      nlohmann::ordered_json out = {{"cache_file", r.cache_file.string()},
                                    {"cache_hit", r.cache_hit},
                                    {"pair_evaluations", r.pair_evaluations},
                                    {"wall_seconds", r.wall_seconds},
                                    {"warning", r.version_warning}};
      std::cout << out.dump() << '\n';
    } else if (coefficients->parsed()) {
      auto r = lmf::cmd_coefficients(resolve(coefficients_flags));
      nlohmann::ordered_json out = {{"json", r.json_path.string()},
                                    {"csv", r.csv_path.string()},
                                    {"trained", r.trained}};
      std::cout << out.dump() << '\n';
    } else if (predict->parsed()) {
      auto c = resolve(predict_flags);
      if (!c.query_id) throw lmf::Error(lmf::ErrorCode::kInvalidArgument, "predict needs --query-id");
      auto path = lmf::cmd_predict(c, *c.query_id);
      std::cout << nlohmann::json{{"adapter", path.string()}}.dump() << '\n';
    } else if (pipeline->parsed()) {
      std::cout << lmf::cmd_pipeline(resolve(pipeline_flags)).to_json() << '\n';
    } else if (heatmap->parsed()) {
      lmf::cmd_heatmap(heat_in, heat_out);
      std::cout << nlohmann::json{{"image", heat_out}}.dump() << '\n';
    } else if (score->parsed()) {
      auto text = lmf::to_json(lmf::score_batch(score_in));
      if (!score_out.empty()) {
        std::ofstream(score_out, std::ios::trunc) << text << '\n';
      }
      std::cout << text << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << lmf::error_json(e) << '\n';
    return 1;
  }
  return 0;
}
