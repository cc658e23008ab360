#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lain/config.hpp"
#include "lain/data.hpp"
#include "lain/grad_check.hpp"
#include "lain/metrics.hpp"
#include "lain/model.hpp"
#include "lain/trainer.hpp"

namespace lain {

enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_usage = 2 };

/// Raised for bad flags or inputs; maps to exit code 2.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

namespace cli {

namespace fs = std::filesystem;

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory " + dir + ": " + ec.message());
  const fs::path probe = fs::path(dir) / ".lain-write-probe";
  {
    std::ofstream os(probe);
    if (!os) throw UsageError("output directory is not writable: " + dir);
  }
  fs::remove(probe, ec);
}

inline void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

inline void echo(std::ostream& out, const std::string& command, const nlohmann::json& config) {
  out << "command: " << command << '\n' << "config: " << config.dump() << '\n';
}

inline DatasetBundle load_data(const std::string& path) {
  try {
    return load_dataset(path);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
}

/// Checkpoint parameters placed into a model built from `cfg` (when given)
/// so that shape disagreements surface as CheckpointError.
inline LainModel load_model(const std::string& path, const std::optional<ModelConfig>& cfg) {
  if (!cfg) return LainModel::load(path);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read checkpoint " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint " + path + ": " + e.what());
  }
  j["config"] = to_json(*cfg);
  return LainModel::from_json(j);
}

inline std::string model_label(const std::string& checkpoint_path) {
  const fs::path p(checkpoint_path);
  if (p.filename() == "checkpoint.json" && p.has_parent_path() && !p.parent_path().filename().empty()) {
    return p.parent_path().filename().string();
  }
  return p.stem().string();
}

inline nlohmann::json trace_json(const std::string& model, const AttentionTrace& t) {
  return {{"model", model},       {"user_id", t.user_id}, {"branch", t.branch},   {"user_length", t.user_length},
          {"bucket", bucket_name(t.bucket)}, {"tau", t.tau}, {"degenerate", t.degenerate},
          {"weights", t.weights}, {"logits", t.logits}};
}

inline AttentionTrace trace_from_json(const nlohmann::json& j, std::span<const std::int64_t> bounds) {
  AttentionTrace t;
  t.user_id = j.value("user_id", "");
  t.branch = j.value("branch", "");
  t.user_length = j.at("user_length").get<std::int64_t>();
  t.bucket = bucket_of(t.user_length, bounds);
  t.tau = j.value("tau", 1.0);
  t.degenerate = j.value("degenerate", false);
  t.weights = j.at("weights").get<std::vector<double>>();
  if (j.contains("logits")) t.logits = j["logits"].get<std::vector<double>>();
  return t;
}

/// Re-softmaxes the recorded logits at a fixed temperature.
inline void apply_counterfactual_tau(AttentionTrace& t, double tau) {
  if (t.logits.empty()) throw UsageError("counterfactual temperature needs recorded logits");
  t.weights = softmax_temp(t.logits, tau);
  t.tau = tau;
  t.degenerate = false;
}

struct GiniRow {
  std::string model, metric;
  std::map<std::string, std::optional<double>> bucket;
  std::optional<double> variance, range;
};

/// Mean Gini and entropy per bucket over one model's traces.
inline std::vector<GiniRow> gini_rows(const std::string& model, std::span<const AttentionTrace> traces,
                                      std::span<const std::int64_t> bounds) {
  std::map<std::string, double> sum_g, sum_h;
  std::map<std::string, std::size_t> n;
  for (const auto& t : traces) {
    if (t.degenerate || t.weights.empty()) continue;
    const std::string b = bucket_name(bucket_of(t.user_length, bounds));
    sum_g[b] += *gini(t.weights);
    sum_h[b] += *entropy(t.weights);
    ++n[b];
  }
  GiniRow g{model, "gini", {}, {}, {}}, h{model, "entropy", {}, {}, {}};
  for (const char* b : {"short", "medium", "long"}) {
    if (n[b] == 0) {
      g.bucket[b].reset();
      h.bucket[b].reset();
      continue;
    }
    g.bucket[b] = sum_g[b] / static_cast<double>(n[b]);
    h.bucket[b] = sum_h[b] / static_cast<double>(n[b]);
  }
  for (GiniRow* r : {&g, &h}) {
    std::vector<double> xs;
    for (const char* b : {"short", "medium", "long"})
      if (r->bucket[b]) xs.push_back(*r->bucket[b]);
    if (xs.size() != 3) continue;
    const double mu = (xs[0] + xs[1] + xs[2]) / 3.0;
    double v = 0.0;
    for (double x : xs) v += (x - mu) * (x - mu);
    r->variance = v / 3.0;
    r->range = *std::max_element(xs.begin(), xs.end()) - *std::min_element(xs.begin(), xs.end());
  }
  return {g, h};
}

inline std::string gini_csv(const std::vector<GiniRow>& rows) {
  std::ostringstream os;
  os << "model,metric,short,medium,long,variance,range\n";
  for (const auto& r : rows) {
    os << r.model << ',' << r.metric;
    for (const char* b : {"short", "medium", "long"}) os << ',' << fmt_metric(r.bucket.at(b));
    os << ',' << fmt_metric(r.variance) << ',' << fmt_metric(r.range) << '\n';
  }
  return os.str();
}

/// Four samples spanning the length buckets over a small vocabulary.
inline std::vector<Sample> grad_check_batch(std::uint64_t seed, std::size_t vocab) {
  Rng rng(seed_for(seed, "grad-check-batch"));
  std::vector<Sample> out;
  const std::int64_t lengths[] = {5, 60, 150, 420};
  for (std::size_t i = 0; i < 4; ++i) {
    Sample s;
    s.user_id = "u" + std::to_string(i);
    s.target_item = 1 + static_cast<std::int64_t>(rng.below(vocab - 1));
    for (std::int64_t j = 0; j < lengths[i]; ++j) s.behaviors.push_back(1 + static_cast<std::int64_t>(rng.below(vocab - 1)));
    s.length = lengths[i];
    s.label = i % 2 == 0 ? 1.0 : 0.0;
    s.timestamp = static_cast<std::int64_t>(i);
    out.push_back(std::move(s));
  }
  return out;
}

struct Flags {
  std::vector<std::string> config_files;
  std::optional<std::string> out, data, spec_file, plan_file;
  std::vector<std::string> checkpoints;
  std::optional<std::string> variant, traces;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> users, items, max_per_param;
  std::optional<double> tol, counterfactual_tau;
  bool dropout = false, resume = false;
};

inline RunConfig merged_config(const Flags& f) {
  RunConfig c;
  for (const auto& path : f.config_files) apply_config_file(c, path);
  if (f.variant) c.variant = *f.variant;
  if (f.seed) c.seed = *f.seed;
  if (f.users) c.data.n_users = *f.users;
  if (f.items) c.data.n_items = *f.items;
  if (f.tol) c.grad.tol = *f.tol;
  if (f.max_per_param) c.grad.max_per_param = *f.max_per_param;
  return c;
}

inline int cmd_gen_data(const Flags& f, std::ostream& out) {
  RunConfig c = merged_config(f);
  if (f.seed) c.data.seed = *f.seed;
  if (f.spec_file) {
    try {
      c.data.cohorts = load_cohort_spec(*f.spec_file);
    } catch (const DataError& e) {
      throw UsageError(e.what());
    }
  }
  c.data.bucket_bounds = c.model.bucket_bounds;
  validate(c.data);
  nlohmann::json cfg = to_json(c)["data"];
  echo(out, "gen-data", cfg);
  ensure_dir(*f.out);
  DatasetBundle b = generate_synthetic(c.data);
  out << "dataset_digest: " << hex64(bundle_digest(b)) << '\n';
  save_dataset_dir(b, *f.out, c.model.bucket_bounds);
  out << "wrote " << b.train.size() << " train, " << b.valid.size() << " valid, " << b.test.size()
      << " test samples to " << *f.out << '\n';
  return exit_ok;
}

inline int cmd_train(const Flags& f, std::ostream& out) {
  RunConfig c = merged_config(f);
  const ModelConfig mc = apply_variant(c.model, c.variant);
  DatasetBundle data = load_data(*f.data);
  const std::string digest = hex64(bundle_digest(data));
  nlohmann::json cfg = {{"variant", c.variant}, {"seed", c.seed}, {"model", to_json(mc)}, {"train", to_json(c.train)},
                        {"data", *f.data}};
  echo(out, "train", cfg);
  out << "dataset_digest: " << digest << '\n';
  ensure_dir(*f.out);

  LainModel model(mc, data.vocab_size, data.L0, c.seed);
  const ParameterReport pr = model.count_parameters();
  TrainResult r = train(model, data, c.train, c.seed, [&](const EpochRecord& e) {
    out << "epoch " << e.epoch << " train_loss " << fmt_double(e.train_loss) << " valid_auc "
        << (e.valid_auc ? fmt_double(*e.valid_auc) : std::string("undefined")) << '\n';
  });
  for (const auto& n : r.notices) out << "notice: " << n << '\n';

  model.save((fs::path(*f.out) / "checkpoint.json").string());
  write_file(fs::path(*f.out) / "history.csv", history_csv(r.history));
  nlohmann::json run = {{"config", cfg},
                        {"dataset_digest", digest},
                        {"L0", model.L0()},
                        {"parameters",
                         {{"shared", pr.shared}, {"sle", pr.sle}, {"lcp", pr.lcp}, {"lma", pr.lma}, {"total", pr.total}}},
                        {"lain_fraction", pr.lain_fraction},
                        {"tau_fixed_one", !mc.use_temp()},
                        {"best_epoch", r.best_epoch},
                        {"best_valid_auc", r.best_valid_auc},
                        {"epochs_run", r.history.size()},
                        {"model_digest", hex64(model.digest())},
                        {"history_digest", hex64(history_digest(r.history))}};
  write_file(fs::path(*f.out) / "run.json", run.dump(2) + "\n");
  out << "best_epoch " << r.best_epoch << " best_valid_auc " << fmt_double(r.best_valid_auc) << '\n';
  out << "lain_fraction " << fmt_double(pr.lain_fraction) << '\n';
  return exit_ok;
}

inline int cmd_eval(const Flags& f, std::ostream& out) {
  std::optional<ModelConfig> override_cfg;
  if (!f.config_files.empty() || f.variant) {
    RunConfig c = merged_config(f);
    override_cfg = apply_variant(c.model, c.variant);
  }
  DatasetBundle data = load_data(*f.data);
  LainModel model = load_model(f.checkpoints.front(), override_cfg);
  const std::string digest = hex64(bundle_digest(data));
  nlohmann::json cfg = {{"checkpoint", f.checkpoints.front()},
                        {"data", *f.data},
                        {"model", to_json(model.config())},
                        {"model_digest", hex64(model.digest())}};
  echo(out, "eval", cfg);
  out << "dataset_digest: " << digest << '\n';
  ensure_dir(*f.out);
  Evaluation ev = evaluate(model, data.test);
  ev.report.config = cfg;
  ev.report.dataset_digest = digest;
  write_file(fs::path(*f.out) / "report.json", to_json(ev.report).dump(2) + "\n");
  write_file(fs::path(*f.out) / "report.csv", to_csv(ev.report));
  out << to_csv(ev.report);
  return exit_ok;
}

inline int cmd_audit(const Flags& f, std::ostream& out) {
  if (f.checkpoints.empty() == !f.traces) throw UsageError("audit-attention needs either --checkpoint or --traces");
  if (f.counterfactual_tau && !(*f.counterfactual_tau > 0.0)) throw UsageError("--counterfactual-tau must be positive");
  nlohmann::json cfg = {{"checkpoints", f.checkpoints}};
  if (f.traces) cfg["traces"] = *f.traces;
  if (f.data) cfg["data"] = *f.data;
  if (f.counterfactual_tau) cfg["counterfactual_tau"] = *f.counterfactual_tau;
  echo(out, "audit-attention", cfg);

  std::vector<GiniRow> rows;
  std::ostringstream trace_lines;
  const std::vector<std::int64_t> default_bounds{100, 200};
  auto audit = [&](const std::string& label, std::vector<AttentionTrace>& traces, std::span<const std::int64_t> bounds) {
    for (auto& t : traces) {
      if (f.counterfactual_tau && !t.degenerate) apply_counterfactual_tau(t, *f.counterfactual_tau);
      trace_lines << trace_json(label, t).dump() << '\n';
    }
    for (auto& r : gini_rows(label, traces, bounds)) rows.push_back(std::move(r));
  };

  if (f.traces) {
    std::ifstream is(*f.traces);
    if (!is) throw UsageError("cannot read traces file " + *f.traces);
    {
      Fnv1a fh;
      fh.str(std::string(std::istreambuf_iterator<char>(is), {}));
      out << "traces_digest: " << hex64(fh.value()) << '\n';
    }
    is.clear();
    is.seekg(0);
    std::map<std::string, std::vector<AttentionTrace>> by_model;
    std::vector<std::string> order;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        const std::string m = j.value("model", "traces");
        if (!by_model.count(m)) order.push_back(m);
        by_model[m].push_back(trace_from_json(j, default_bounds));
      } catch (const std::exception& e) {
        throw UsageError(*f.traces + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    ensure_dir(*f.out);
    for (const auto& m : order) audit(m, by_model[m], default_bounds);
  } else {
    if (!f.data) throw UsageError("audit-attention with --checkpoint needs --data");
    DatasetBundle data = load_data(*f.data);
    out << "dataset_digest: " << hex64(bundle_digest(data)) << '\n';
    ensure_dir(*f.out);
    for (const auto& path : f.checkpoints) {
      LainModel model = LainModel::load(path);
      out << "checkpoint " << path << " model_digest " << hex64(model.digest()) << '\n';
      std::vector<AttentionTrace> traces;
      model.predict(data.test, &traces);
      audit(model_label(path), traces, model.config().bucket_bounds);
    }
  }
  write_file(fs::path(*f.out) / "gini_by_bucket.csv", gini_csv(rows));
  write_file(fs::path(*f.out) / "traces.jsonl", trace_lines.str());
  out << gini_csv(rows);
  return exit_ok;
}

inline int cmd_grad_check(const Flags& f, std::ostream& out) {
  RunConfig c = merged_config(f);
  const ModelConfig mc = apply_variant(c.model, c.variant);
  constexpr std::size_t vocab = 300;
  const std::vector<Sample> batch = grad_check_batch(c.seed, vocab);
  Fnv1a h;
  for (const auto& s : batch) hash_sample(h, s);
  nlohmann::json cfg = {{"variant", c.variant}, {"seed", c.seed}, {"model", to_json(mc)}, {"vocab_size", vocab},
                        {"dropout", f.dropout},
                        {"grad_check",
                         {{"h", c.grad.h}, {"tol", c.grad.tol}, {"abs_floor", c.grad.abs_floor},
                          {"max_per_param", c.grad.max_per_param}}}};
  echo(out, "grad-check", cfg);
  out << "batch_digest: " << hex64(h.value()) << '\n';

  LainModel model(mc, vocab, 150.0, c.seed);
  std::vector<const Sample*> ptrs;
  for (const auto& s : batch) ptrs.push_back(&s);
  std::vector<double> y;
  for (const auto& s : batch) y.push_back(s.label);
  Objective obj = [&](Tape& t) {
    ForwardOptions fo;
    fo.training = f.dropout;
    BatchOutput o = model.forward(t, ptrs, fo);
    return bce_loss(t, o.probs, y);
  };
  GradCheckOptions opt = c.grad;
  opt.seed = c.seed;
  const GradCheckReport rep = grad_check(obj, model.params(), opt);

  std::map<std::string, std::pair<std::size_t, double>> per;
  std::map<std::string, std::size_t> bad, kinks;
  std::vector<std::string> order;
  for (const auto& e : rep.entries) {
    if (!per.count(e.name)) order.push_back(e.name);
    auto& [n, worst] = per[e.name];
    ++n;
    worst = std::max(worst, e.rel_error);
    if (!e.ok) ++bad[e.name];
    if (e.kink) ++kinks[e.name];
  }
  out << std::left << std::setw(24) << "parameter" << std::right << std::setw(10) << "checked" << std::setw(14)
      << "max_rel_err" << std::setw(8) << "kinks" << std::setw(8) << "status" << '\n';
  for (const auto& name : order) {
    const auto& [n, worst] = per[name];
    out << std::left << std::setw(24) << name << std::right << std::setw(10) << n << std::setw(14) << std::setprecision(3)
        << std::scientific << worst << std::defaultfloat << std::setw(8) << kinks[name] << std::setw(8) << (bad[name] ? "FAIL" : "ok") << '\n';
  }
  out << "checked " << rep.entries.size() << " scalars, max_rel_error " << std::scientific << rep.max_rel_error()
      << std::defaultfloat << ", failures " << rep.failures() << ", kink-refined steps " << rep.kinks() << '\n';

  if (f.out) {
    ensure_dir(*f.out);
    std::ostringstream csv;
    csv << "name,index,analytic,numeric,rel_error,step,kink,ok\n";
    csv.precision(17);
    for (const auto& e : rep.entries)
      csv << e.name << ',' << e.index << ',' << e.analytic << ',' << e.numeric << ',' << e.rel_error << ','
          << e.step << ',' << (e.kink ? 1 : 0) << ',' << (e.ok ? 1 : 0) << '\n';
    write_file(fs::path(*f.out) / "grad_check.csv", csv.str());
  }
  if (!rep.passed()) {
    const auto* w = rep.worst();
    out << "FAIL: worst offender " << w->name << "[" << w->index << "] analytic " << w->analytic << " numeric "
        << w->numeric << " rel_error " << w->rel_error << '\n';
    return exit_failure;
  }
  out << "PASS\n";
  return exit_ok;
}

inline int cmd_ablate(const Flags& f, std::ostream& out) {
  std::ifstream is(*f.plan_file);
  if (!is) throw UsageError("cannot read plan file " + *f.plan_file);
  nlohmann::json pj;
  try {
    is >> pj;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("malformed plan file: " + std::string(e.what()));
  }
  ExperimentPlan plan = plan_from_json(pj);
  validate(plan.data);
  echo(out, "ablate", pj);
  ensure_dir(*f.out);
  MatrixResult r = run_experiment_matrix(plan, *f.out, f.resume, [&](const CellResult& c) {
    out << "cell " << cell_name(c.variant, c.seed) << (c.resumed ? " resumed" : "")
        << (c.report ? "" : " FAILED: " + c.error);
    if (c.report) out << " dataset_digest " << c.report->dataset_digest;
    out << '\n';
  });
  out << r.summary_csv;
  return r.any_failed() ? exit_failure : exit_ok;
}

}  // namespace cli

/// Entry point shared by the lain binary and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Length-adaptive interest network toolkit"};
  app.require_subcommand(1);
  cli::Flags f;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--out", f.out, "Output directory")->required();
  gen->add_option("--users", f.users, "Number of users");
  gen->add_option("--items", f.items, "Number of items");
  gen->add_option("--seed", f.seed, "Generator seed");
  gen->add_option("--spec-file", f.spec_file, "Cohort spec JSON");
  gen->add_option("--config", f.config_files, "INI config file");

  auto* tr = app.add_subcommand("train", "Train one model");
  tr->add_option("--data", f.data, "Dataset directory or JSONL file")->required();
  tr->add_option("--config", f.config_files, "INI config file");
  tr->add_option("--variant", f.variant, "full | no-lcp | no-qk | no-temp | no-lma | no-short | baseline");
  tr->add_option("--seed", f.seed, "Training seed");
  tr->add_option("--out", f.out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  ev->add_option("--data", f.data, "Dataset directory or JSONL file")->required();
  ev->add_option("--checkpoint", f.checkpoints, "Checkpoint file")->required()->expected(1);
  ev->add_option("--config", f.config_files, "INI config file; its model section must match the checkpoint");
  ev->add_option("--variant", f.variant, "Variant applied to --config");
  ev->add_option("--out", f.out, "Output directory")->required();

  auto* au = app.add_subcommand("audit-attention", "Attention concentration per length bucket");
  au->add_option("--data", f.data, "Dataset directory or JSONL file");
  au->add_option("--checkpoint", f.checkpoints, "Checkpoint file (repeatable)");
  au->add_option("--traces", f.traces, "Audit an existing traces.jsonl instead of checkpoints");
  au->add_option("--counterfactual-tau", f.counterfactual_tau, "Re-softmax recorded logits at this temperature");
  au->add_option("--out", f.out, "Output directory")->required();

  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the full model");
  gc->add_option("--config", f.config_files, "INI config file");
  gc->add_option("--variant", f.variant, "Model variant");
  gc->add_option("--seed", f.seed, "Seed for weights and batch");
  gc->add_option("--tol", f.tol, "Relative error tolerance");
  gc->add_option("--max-per-param", f.max_per_param, "Scalars checked per tensor, 0 for all");
  gc->add_flag("--dropout", f.dropout, "Keep dropout active (the check must refuse)");
  gc->add_option("--out", f.out, "Directory for grad_check.csv");

  auto* ab = app.add_subcommand("ablate", "Run an experiment matrix");
  ab->add_option("--plan-file", f.plan_file, "Plan JSON")->required();
  ab->add_option("--out-dir", f.out, "Output directory")->required();
  ab->add_flag("--resume", f.resume, "Skip cells recorded in the manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_usage;
  }

  try {
    if (*gen) return cli::cmd_gen_data(f, out);
    if (*tr) return cli::cmd_train(f, out);
    if (*ev) return cli::cmd_eval(f, out);
    if (*au) return cli::cmd_audit(f, out);
    if (*gc) return cli::cmd_grad_check(f, out);
    if (*ab) return cli::cmd_ablate(f, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return exit_usage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return exit_usage;
  } catch (const SpecError& e) {
    err << "error: " << e.what() << '\n';
    return exit_usage;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return exit_usage;
  } catch (const LookupError& e) {
    err << "error: " << e.what() << '\n';
    return exit_usage;
  } catch (const OracleInvalidError& e) {
    err << "error: oracle invalid: " << e.what() << '\n';
    return exit_usage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return exit_failure;
  }
  return exit_usage;
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"lain"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace lain
