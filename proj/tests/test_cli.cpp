#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mixformer/cli.hpp"

using namespace mixformer;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mixformer_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "mixformer");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

RunConfig tiny_gen() {
  RunConfig rc;
  rc.set("gen.users", "80");
  rc.set("gen.items", "200");
  rc.set("gen.requests", "120");
  rc.set("gen.max_seq", "16");
  rc.set("model.preset", "desk-small");
  rc.set("model.max_seq_len", "16");
  return rc;
}

}  // namespace

TEST_CASE("gen writes readable, reproducible artifacts") {
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  const auto res = cli::cmd_gen(tiny_gen(), a);
  const cli::DataDir dd = cli::load_data(a);
  CHECK(dd.train.requests.size() == res.train_requests);
  REQUIRE(dd.holdout_oracle.has_value());
  CHECK(oracle_auc(*dd.holdout_oracle, dd.holdout) == doctest::Approx(res.oracle_auc_holdout).epsilon(1e-12));
  CHECK(slurp(a / "schema.txt").rfind("# ", 0) == 0);

  // Re-running from the embedded config reproduces every file.
  cli::cmd_gen(RunConfig::load(a / "gen.cfg"), b);
  for (const char* f : {"schema.txt", "train.bin", "holdout.bin", "holdout.oracle.csv", "gen_summary.csv"})
    CHECK(slurp(a / f) == slurp(b / f));
}

TEST_CASE("train, resume and eval") {
  const auto data = scratch("train_data"), out = scratch("train_out");
  cli::cmd_gen(tiny_gen(), data);
  RunConfig rc = tiny_gen();
  rc.set("train.epochs", "1");
  rc.set("train.batch", "64");
  const auto res = cli::cmd_train(rc, data, out);
  CHECK(res.steps > 0);
  CHECK(res.holdout.auc.size() == 2);
  for (const char* f : {"model.ckpt", "train_log.csv", "metrics.csv", "run.cfg"}) CHECK(fs::exists(out / f));
  CHECK(slurp(out / "metrics.csv").find("# model.heads = 4") != std::string::npos);

  // Resuming a finished run applies no further steps.
  const auto again = cli::cmd_train(rc, data, scratch("train_resume"), out / "model.ckpt");
  CHECK(again.steps == res.steps);
  CHECK(again.holdout.auc == res.holdout.auc);

  const MetricSummary ev = cli::cmd_eval(rc, data, out / "model.ckpt", out / "eval.csv");
  CHECK(ev.auc == res.holdout.auc);
}

TEST_CASE("flops command") {
  RunConfig rc;
  rc.set("model.preset", "desk-small");
  rc.set("flops.axis", "sequence");
  std::ostringstream os;
  cli::cmd_flops(rc, os);
  const std::string text = os.str();
  CHECK(text.find("heads,layers,head_dim,seq_len,params,flops") != std::string::npos);
  CHECK(text.find("\n4,2,32,10000,") != std::string::npos);
}

TEST_CASE("bench-rlb needs decoupling") {
  const auto data = scratch("bench_data");
  cli::cmd_gen(tiny_gen(), data);
  const auto dd = cli::load_data(data);
  RunConfig rc = tiny_gen();
  rc.set("bench.requests", "3");
  rc.set("bench.k", "4");
  CHECK_THROWS_AS(cli::cmd_bench_rlb(rc, dd.holdout, std::nullopt), ConfigError);
  rc.set("decouple.enabled", "true");
  const auto b = cli::cmd_bench_rlb(rc, dd.holdout, std::nullopt);
  CHECK(b.max_rel_dev <= 1e-9);
  CHECK(b.savings.front().second == 0.0);
  for (std::size_t i = 1; i < b.savings.size(); ++i) CHECK(b.savings[i].second > b.savings[i - 1].second);
}

TEST_CASE("exit codes") {
  CHECK(run({"--help"}) == 0);
  CHECK(run({"--preset", "paper-small", "flops"}) == 2);
  CHECK(run({"--preset", "no-such-preset", "flops"}) == 2);
  CHECK(run({"--set", "model.heads=3", "flops"}) == 2);
  CHECK(run({"train", "--data", scratch("missing").string()}) == 3);
  CHECK(run({"--bogus-flag"}) == 2);
}
