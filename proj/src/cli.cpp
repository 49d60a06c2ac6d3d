#include "mixformer/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "mixformer/decouple.hpp"
#include "mixformer/errors.hpp"

namespace mixformer::cli {
namespace {

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw DataError("cannot write " + p.string());
  return os;
}

void comment_lines(std::ostream& os, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) os << "# " << line << '\n';
}

std::uint64_t run_seed(const RunConfig& rc) { return rc.get_u64("seed", 1); }

TrainOptions train_options(const RunConfig& rc) {
  TrainOptions o = TrainOptions::from_run_config(rc);
  if (!rc.has("train.seed")) o.seed = run_seed(rc);
  return o;
}

/// rc plus every derived default, so the embedded config is complete.
RunConfig resolved(RunConfig rc, const ModelConfig& m, const TrainOptions& o) {
  rc.merge(m.to_run_config());
  rc.merge(o.to_run_config());
  return rc;
}

void write_metrics_rows(std::ostream& os, const std::string& model, const MetricSummary& m,
                        const FeatureSchema& s) {
  for (std::size_t j = 0; j < m.auc.size(); ++j)
    os << model << ',' << s.tasks[j] << ',' << m.auc[j] << ',' << m.uauc[j] << ',' << m.logloss << ','
       << m.n_users << '\n';
}

double oracle_mean_auc(const Matrix& probs, const Dataset& d) { return oracle_auc(probs, d); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Copy of r with k candidates cycled from the whole dataset.
Request widen(const Request& r, const Dataset& d, std::size_t k, std::size_t salt) {
  const FeatureSchema& s = d.schema;
  const std::size_t w = s.item_fields().size();
  Request out = r;
  out.candidates.clear();
  out.labels.clear();
  std::size_t req = salt, slot = 0;
  while (out.n_candidates(s) < k) {
    const Request& src = d.requests[req % d.requests.size()];
    const std::size_t n = src.n_candidates(s);
    if (n > 0) {
      const auto c = src.candidate(s, slot % n);
      out.candidates.insert(out.candidates.end(), c.begin(), c.begin() + static_cast<std::ptrdiff_t>(w));
    }
    ++req;
    ++slot;
  }
  return out;
}

}  // namespace

// ---- shared plumbing -------------------------------------------------------

RunConfig resolve(const std::optional<fs::path>& config_file, const std::vector<std::string>& overrides,
                  const std::optional<std::uint64_t>& seed, const std::optional<std::string>& preset_name) {
  RunConfig rc = config_file ? RunConfig::load(*config_file) : RunConfig{};
  for (const auto& o : overrides) rc.apply_override(o);
  if (seed) rc.set("seed", std::to_string(*seed));
  if (preset_name) {
    preset(*preset_name);  // validates the name
    rc.set("model.preset", *preset_name);
  }
  return rc;
}

ModelConfig model_config(const RunConfig& rc, const FeatureSchema& schema) {
  RunConfig with_tasks = rc;
  if (!rc.has("model.tasks")) with_tasks.set("model.tasks", std::to_string(schema.n_tasks()));
  ModelConfig c = ModelConfig::from_run_config(with_tasks);
  c.validate();
  return c;
}

DataDir load_data(const fs::path& dir) {
  DataDir d;
  d.schema = FeatureSchema::load(dir / "schema.txt");
  d.train = read_dataset(dir / "train.bin", d.schema);
  d.holdout = read_dataset(dir / "holdout.bin", d.schema);
  if (fs::exists(dir / "holdout.oracle.csv"))
    d.holdout_oracle = read_oracle_csv(dir / "holdout.oracle.csv", d.schema.n_tasks());
  return d;
}

std::string header_text(const RunConfig& rc) { return rc.serialize(); }

// ---- gen -------------------------------------------------------------------

GenResult cmd_gen(const RunConfig& rc_in, const fs::path& out) {
  RunConfig rc = rc_in;
  if (rc.has("seed") && !rc.has("gen.seed")) rc.set("gen.seed", rc.get_string("seed", "1"));
  GenResult res;
  res.spec = GeneratorSpec::from_run_config(rc);
  if (rc.get_bool("gen.calibrate", true))
    res.spec = calibrate_temperature(res.spec, rc.get_double("gen.oracle_lo", 0.84), rc.get_double("gen.oracle_hi", 0.86));
  const GeneratedData gd = generate(res.spec);
  rc.merge(res.spec.to_run_config());
  const std::string header = header_text(rc);

  fs::create_directories(out);
  {
    auto os = open_out(out / "schema.txt");
    comment_lines(os, header);
    os << gd.train.schema.to_text();
  }
  write_dataset(out / "train.bin", gd.train);
  write_dataset(out / "holdout.bin", gd.holdout);
  write_oracle_csv(out / "train.oracle.csv", gd.train_oracle, gd.train.schema, header);
  write_oracle_csv(out / "holdout.oracle.csv", gd.holdout_oracle, gd.holdout.schema, header);
  {
    auto os = open_out(out / "gen.cfg");
    os << rc.serialize();
  }

  res.oracle_auc_train = oracle_mean_auc(gd.train_oracle, gd.train);
  res.oracle_auc_holdout = oracle_mean_auc(gd.holdout_oracle, gd.holdout);
  res.train_requests = gd.train.requests.size();
  res.holdout_requests = gd.holdout.requests.size();
  auto os = open_out(out / "gen_summary.csv");
  comment_lines(os, header);
  os.precision(10);
  os << "split,requests,impressions,oracle_auc\n";
  os << "train," << res.train_requests << ',' << gd.train.impressions() << ',' << res.oracle_auc_train << '\n';
  os << "holdout," << res.holdout_requests << ',' << gd.holdout.impressions() << ',' << res.oracle_auc_holdout
     << '\n';
  return res;
}

// ---- train / eval ----------------------------------------------------------

TrainResult cmd_train(const RunConfig& rc_in, const fs::path& data, const fs::path& out,
                      const std::optional<fs::path>& resume) {
  const DataDir dd = load_data(data);
  const TrainOptions o = train_options(rc_in);
  Model m = resume ? Model::load(*resume) : Model(model_config(rc_in, dd.schema), dd.schema, run_seed(rc_in));
  if (!(m.schema() == dd.schema)) throw DataError("checkpoint schema does not match " + data.string());
  const RunConfig rc = resolved(rc_in, m.config(), o);
  const std::string header = header_text(rc);

  ModelLearner l(m);
  TrainResult res;
  res.log = train(l, dd.train, o, &dd.holdout);
  res.steps = m.train_steps;
  res.holdout = evaluate(l, dd.holdout, o.weighted_uauc);
  if (rc.get_bool("train.baseline", false))
    res.baseline = baseline_score(dd.train, dd.holdout, o, run_seed(rc));
  if (dd.holdout_oracle) res.oracle_auc = oracle_mean_auc(*dd.holdout_oracle, dd.holdout);

  fs::create_directories(out);
  m.save(out / "model.ckpt");
  {
    auto os = open_out(out / "train_log.csv");
    write_train_log_csv(os, res.log, header);
  }
  {
    auto os = open_out(out / "run.cfg");
    os << rc.serialize();
  }
  auto os = open_out(out / "metrics.csv");
  comment_lines(os, header);
  os.precision(10);
  os << "model,task,auc,uauc,logloss,n_users\n";
  write_metrics_rows(os, "mixformer", res.holdout, dd.schema);
  if (res.baseline) write_metrics_rows(os, "baseline", *res.baseline, dd.schema);
  if (res.oracle_auc) os << "oracle,mean," << *res.oracle_auc << ",,,\n";
  return res;
}

MetricSummary cmd_eval(const RunConfig& rc_in, const fs::path& data, const fs::path& checkpoint,
                       const fs::path& out) {
  const DataDir dd = load_data(data);
  Model m = Model::load(checkpoint);
  const TrainOptions o = train_options(rc_in);
  const RunConfig rc = resolved(rc_in, m.config(), o);
  const bool on_train = rc.get_string("eval.split", "holdout") == "train";
  ModelLearner l(m);
  const MetricSummary s = evaluate(l, on_train ? dd.train : dd.holdout, o.weighted_uauc);
  auto os = open_out(out);
  comment_lines(os, header_text(rc));
  os.precision(10);
  os << "model,task,auc,uauc,logloss,n_users\n";
  write_metrics_rows(os, "mixformer", s, dd.schema);
  return s;
}

// ---- flops -----------------------------------------------------------------

void cmd_flops(const RunConfig& rc_in, std::ostream& os) {
  RunConfig rc = rc_in;
  // Defaults: the desk generator's schema.
  const FeatureSchema desk = GeneratorSpec{}.schema();
  InputDims in{rc.get_u64("flops.d_user", desk.d_user()), rc.get_u64("flops.d_item", desk.d_item()),
               rc.get_u64("flops.action_width", desk.action_width())};
  RunConfig mrc = rc;
  if (!rc.has("model.tasks")) mrc.set("model.tasks", "2");
  const ModelConfig cfg = ModelConfig::from_run_config(mrc);
  cfg.validate();
  const std::size_t k = rc.get_u64("flops.candidates", 8);
  const std::size_t batch = rc.get_u64("flops.batch", k);
  const std::size_t steps = rc.get_u64("flops.steps", cfg.max_seq_len);
  const bool rlb = rc.get_bool("flops.rlb", false);
  const std::string axis = rc.get_string("flops.axis", "none");
  rc.merge(cfg.to_run_config());
  for (const auto& [key, v] : std::vector<std::pair<std::string, std::uint64_t>>{
           {"flops.d_user", in.d_user}, {"flops.d_item", in.d_item}, {"flops.action_width", in.action_width},
           {"flops.candidates", k}, {"flops.batch", batch}, {"flops.steps", steps}})
    rc.set(key, std::to_string(v));
  rc.set("flops.rlb", rlb ? "true" : "false");
  rc.set("flops.axis", axis);

  if (axis == "none") {
    write_report_csv(os, count_flops(cfg, in, steps, k, batch, rlb), header_text(rc));
    return;
  }
  ScalingAxis ax;
  std::vector<std::size_t> points;
  if (axis == "dense") {
    ax = ScalingAxis::kDense;
    points = {cfg.head_dim / 2, cfg.head_dim, cfg.head_dim * 2, cfg.head_dim * 4};
  } else if (axis == "sequence") {
    ax = ScalingAxis::kSequence;
    points = kSequencePoints;
  } else {
    throw ConfigError("flops.axis must be none, dense or sequence (got '" + axis + "')");
  }
  if (rc.has("flops.points")) {
    points.clear();
    std::istringstream in_pts(rc.get_string("flops.points", ""));
    std::string tok;
    while (std::getline(in_pts, tok, ',')) {
      try {
        points.push_back(std::stoul(tok));
      } catch (const std::exception&) {
        throw ConfigError("flops.points: '" + tok + "' is not a number");
      }
    }
  }
  write_scaling_csv(os, scaling_report(cfg, in, ax, points, k, batch, rlb), header_text(rc));
}

// ---- bench-rlb -------------------------------------------------------------

RlbBench cmd_bench_rlb(const RunConfig& rc_in, const Dataset& data, const std::optional<fs::path>& out) {
  RunConfig rc = rc_in;
  const std::optional<fs::path> ckpt =
      rc.has("bench.checkpoint") ? std::optional<fs::path>(rc.get_string("bench.checkpoint", "")) : std::nullopt;
  Model m = ckpt ? Model::load(*ckpt) : Model(model_config(rc, data.schema), data.schema, run_seed(rc));
  if (!m.decoupled()) throw ConfigError("bench-rlb needs decouple.enabled = true");
  if (data.requests.empty()) throw DataError("bench-rlb: no requests");
  rc.merge(m.config().to_run_config());
  const std::size_t n_req = std::min<std::size_t>(rc.get_u64("bench.requests", 20), data.requests.size());
  const std::size_t wall_k = rc.get_u64("bench.k", 32);
  rc.set("bench.requests", std::to_string(n_req));
  rc.set("bench.k", std::to_string(wall_k));

  RlbBench b;
  b.wall_k = wall_k;
  for (std::size_t i = 0; i < n_req; ++i) {
    const Request& r = data.requests[i];
    const Matrix shared = rlb_forward(m, r);
    for (std::size_t c = 0; c < r.n_candidates(data.schema); ++c) {
      const Matrix one = forward_decoupled(m, r, c);
      for (std::size_t j = 0; j < one.cols(); ++j) {
        const double d = std::abs(shared(c, j) - one(0, j));
        b.max_abs_dev = std::max(b.max_abs_dev, d);
        b.max_rel_dev = std::max(b.max_rel_dev, d / std::max(1.0, std::abs(one(0, j))));
      }
    }
  }
  const InputDims in = InputDims::of(data.schema);
  for (std::size_t k = 1; k <= 128; k *= 2) b.savings.emplace_back(k, rlb_savings(m.config(), in, m.config().max_seq_len, k));

  std::vector<Request> wide;
  for (std::size_t i = 0; i < n_req; ++i) wide.push_back(widen(data.requests[i], data, wall_k, i * wall_k));
  auto t0 = std::chrono::steady_clock::now();
  double sink = 0.0;
  for (const Request& r : wide) sink += rlb_forward(m, r)(0, 0);
  b.seconds_rlb = seconds_since(t0);
  t0 = std::chrono::steady_clock::now();
  for (const Request& r : wide)
    for (std::size_t c = 0; c < wall_k; ++c) sink += forward_decoupled(m, r, c)(0, 0);
  b.seconds_per_candidate = seconds_since(t0);
  if (!std::isfinite(sink)) throw NumericError("bench-rlb: non-finite logits");

  if (out) {
    auto os = open_out(*out);
    comment_lines(os, header_text(rc));
    os.precision(10);
    os << "metric,k,value\n";
    os << "max_abs_deviation,," << b.max_abs_dev << '\n';
    os << "max_rel_deviation,," << b.max_rel_dev << '\n';
    for (const auto& [k, s] : b.savings) os << "flops_savings," << k << ',' << s << '\n';
    os << "seconds_rlb," << wall_k << ',' << b.seconds_rlb << '\n';
    os << "seconds_per_candidate," << wall_k << ',' << b.seconds_per_candidate << '\n';
    os << "speedup," << wall_k << ',' << b.speedup() << '\n';
  }
  return b;
}

// ---- ablate ----------------------------------------------------------------

std::vector<AblationResult> cmd_ablate(const RunConfig& rc_in, const fs::path& data, const fs::path& out) {
  const DataDir dd = load_data(data);
  const TrainOptions o = train_options(rc_in);
  const ModelConfig base = model_config(rc_in, dd.schema);
  const RunConfig rc = resolved(rc_in, base, o);
  const std::uint64_t seed = run_seed(rc);

  Model bm(base, dd.schema, seed);
  ModelLearner bl(bm);
  train(bl, dd.train, o);
  const MetricSummary base_metrics = evaluate(bl, dd.holdout, o.weighted_uauc);

  std::vector<AblationResult> rows;
  for (const auto& name : ablation_names())
    rows.push_back(run_ablation(name, base, base_metrics, dd.train, dd.holdout, o, seed));

  std::ostringstream header;
  header << header_text(rc);
  header << "base auc = " << base_metrics.mean_auc() << ", base uauc = " << base_metrics.mean_uauc() << '\n';
  auto os = open_out(out);
  write_ablation_csv(os, rows, header.str());
  return rows;
}

// ---- command line ----------------------------------------------------------

int run(int argc, char** argv) {
  if (const char* env = std::getenv("MIXFORMER_THREADS")) {
#ifdef _OPENMP
    const int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(n);
#endif
  }

  CLI::App app{"MixFormer desk toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<std::string> config_file, preset_name, out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  app.add_option("--config", config_file, "plain-text key = value config");
  app.add_option("--seed", seed, "run seed (model init, shuffling, generator)");
  app.add_option("--preset", preset_name, "model preset: " + [] {
    std::string s;
    for (const auto& n : preset_names()) s += (s.empty() ? "" : ", ") + n;
    return s;
  }());
  app.add_option("--out", out, "output directory or file");
  app.add_option("--set", overrides, "key=value override (repeatable)");

  std::string data_dir;
  std::optional<std::string> checkpoint, resume;
  std::optional<std::string> axis;
  std::optional<std::size_t> candidates;
  bool rlb = false;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--data", data_dir, "data directory")->required();
  train_cmd->add_option("--resume", resume, "checkpoint to continue from");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--data", data_dir, "data directory")->required();
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  auto* flops = app.add_subcommand("flops", "analytic flops report");
  flops->add_option("--axis", axis, "none | dense | sequence");
  flops->add_flag("--rlb", rlb, "count with request-level batching");
  flops->add_option("--candidates", candidates, "candidates per request (K)");
  auto* bench = app.add_subcommand("bench-rlb", "RLB equivalence, flops savings and wall clock");
  bench->add_option("--data", data_dir, "data directory")->required();
  bench->add_option("--checkpoint", checkpoint, "model checkpoint (default: fresh model)");
  bench->add_option("--candidates", candidates, "K for the wall-clock comparison");
  auto* ablate = app.add_subcommand("ablate", "train the six ablation variants");
  ablate->add_option("--data", data_dir, "data directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::kConfig);
  }

  try {
    const std::optional<fs::path> cfg_path = config_file ? std::optional<fs::path>(*config_file) : std::nullopt;
    RunConfig rc = resolve(cfg_path, overrides, seed, preset_name);
    const auto need_out = [&](const char* fallback) { return fs::path(out ? *out : fallback); };

    if (gen->parsed()) {
      const auto r = cmd_gen(rc, need_out("data"));
      std::cout << "temperature " << r.spec.temperature << "\noracle_auc train " << r.oracle_auc_train
                << " holdout " << r.oracle_auc_holdout << '\n';
    } else if (train_cmd->parsed()) {
      const auto r = cmd_train(rc, data_dir, need_out("run"),
                               resume ? std::optional<fs::path>(*resume) : std::nullopt);
      std::cout << "steps " << r.steps << "\nholdout auc " << r.holdout.mean_auc() << " uauc "
                << r.holdout.mean_uauc() << '\n';
      if (r.baseline) std::cout << "baseline auc " << r.baseline->mean_auc() << '\n';
      if (r.oracle_auc) std::cout << "oracle auc " << *r.oracle_auc << '\n';
    } else if (eval->parsed()) {
      const auto s = cmd_eval(rc, data_dir, *checkpoint, need_out("metrics.csv"));
      std::cout << "auc " << s.mean_auc() << " uauc " << s.mean_uauc() << '\n';
    } else if (flops->parsed()) {
      if (axis) rc.set("flops.axis", *axis);
      if (rlb) rc.set("flops.rlb", "true");
      if (candidates) rc.set("flops.candidates", std::to_string(*candidates));
      if (out) {
        auto os = open_out(*out);
        cmd_flops(rc, os);
      } else {
        cmd_flops(rc, std::cout);
      }
    } else if (bench->parsed()) {
      if (checkpoint) rc.set("bench.checkpoint", *checkpoint);
      if (candidates) rc.set("bench.k", std::to_string(*candidates));
      const DataDir dd = load_data(data_dir);
      const auto b = cmd_bench_rlb(rc, dd.holdout, need_out("bench_rlb.csv"));
      std::cout << "max deviation " << b.max_abs_dev << "\nspeedup at K=" << b.wall_k << ": " << b.speedup()
                << "x\n";
    } else if (ablate->parsed()) {
      const auto rows = cmd_ablate(rc, data_dir, need_out("ablation.csv"));
      for (const auto& r : rows)
        std::cout << r.name << " delta_auc " << r.delta_auc << (r.losses_finite ? "" : " (non-finite loss)") << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kConfig);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kNumeric);
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  } catch (const LookupError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  } catch (const MetricError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
  return static_cast<int>(ExitCode::kOk);
}

}  // namespace mixformer::cli
