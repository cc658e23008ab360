#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lain/data.hpp"
#include "lain/grad_check.hpp"
#include "lain/metrics.hpp"
#include "lain/model.hpp"
#include "lain/optim.hpp"

namespace lain {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t batch_size = 256;
  std::size_t max_epochs = 30;
  std::size_t patience = 3;
  AdamConfig adam;
  bool conflict_probe = false;
  std::size_t probe_batch = 256;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size}, {"max_epochs", c.max_epochs}, {"patience", c.patience},
          {"lr", c.adam.lr},            {"beta1", c.adam.beta1},      {"beta2", c.adam.beta2},
          {"eps", c.adam.eps},          {"conflict_probe", c.conflict_probe}, {"probe_batch", c.probe_batch}};
}

struct ConflictProbe {
  double inner_product = 0.0;
  double cosine = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> valid_auc;
  std::optional<ConflictProbe> conflict;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_valid_auc = 0.0;
  std::vector<std::string> notices;
};

/// Inner product and cosine between the gradients of two objectives with
/// respect to `params`.
inline ConflictProbe gradient_conflict(const Objective& fa, const Objective& fb, std::span<Parameter* const> params) {
  auto grads = [&](const Objective& f) {
    for (Parameter* p : params) p->tensor.zero_grad();
    {
      Tape t;
      Var out = f(t);
      t.backward(out);
    }
    std::vector<double> g;
    for (Parameter* p : params) g.insert(g.end(), p->tensor.grad().begin(), p->tensor.grad().end());
    for (Parameter* p : params) p->tensor.drop_grad();
    return g;
  };
  const auto ga = grads(fa);
  const auto gb = grads(fb);
  double ip = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < ga.size(); ++i) {
    ip += ga[i] * gb[i];
    na += ga[i] * ga[i];
    nb += gb[i] * gb[i];
  }
  ConflictProbe r;
  r.inner_product = ip;
  r.cosine = (na > 0.0 && nb > 0.0) ? ip / (std::sqrt(na) * std::sqrt(nb)) : 0.0;
  return r;
}

/// Eval-mode BCE of a batch, as a tape objective.
inline Objective batch_objective(LainModel& model, std::span<const Sample> batch) {
  return [&model, batch](Tape& t) {
    std::vector<const Sample*> ptrs;
    std::vector<double> y;
    for (const auto& s : batch) {
      ptrs.push_back(&s);
      y.push_back(s.label);
    }
    BatchOutput out = model.forward(t, ptrs);
    return bce_loss(t, out.probs, y);
  };
}

/// Shared-parameter gradient agreement between a short-user batch and a
/// long-user batch. Empty when either batch is empty.
inline std::optional<ConflictProbe> gradient_conflict_probe(LainModel& model, std::span<const Sample> batch_short,
                                                            std::span<const Sample> batch_long) {
  if (batch_short.empty() || batch_long.empty()) return std::nullopt;
  auto shared = model.shared_parameters();
  return gradient_conflict(batch_objective(model, batch_short), batch_objective(model, batch_long), shared);
}

inline std::vector<Parameter*> trainable_parameters(ParameterStore& store) {
  std::vector<Parameter*> ps;
  store.for_each([&](Parameter& p) {
    if (p.trainable) ps.push_back(&p);
  });
  return ps;
}

/// One optimization step on `batch`; returns the batch loss.
inline double train_step(LainModel& model, std::span<const Sample* const> batch, OptimizerState& opt,
                         const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->tensor.zero_grad();
  Tape t;
  ForwardOptions fo;
  fo.training = true;
  BatchOutput out = model.forward(t, batch, fo);
  std::vector<double> y;
  y.reserve(batch.size());
  for (const Sample* s : batch) y.push_back(s->label);
  Var loss = bce_loss(t, out.probs, y);
  const double value = t.item(loss);
  t.backward(loss);
  adam_step(params, opt);
  return value;
}

inline std::optional<double> validation_auc(LainModel& model, std::span<const Sample> valid) {
  const auto p = model.predict(valid);
  std::vector<double> y;
  for (const auto& s : valid) y.push_back(s.label);
  return auc(p, y);
}

/// Adam on shuffled mini-batches with early stopping on validation AUC. On
/// return the model holds the parameters of the best validation epoch.
inline TrainResult train(LainModel& model, const DatasetBundle& data, const TrainConfig& cfg, std::uint64_t seed,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (data.train.empty()) throw TrainingError("training split is empty");
  if (data.valid.empty()) throw TrainingError("validation split is empty");
  if (cfg.batch_size == 0) throw TrainingError("batch_size must be positive");
  if (cfg.max_epochs == 0) throw TrainingError("max_epochs must be positive");

  TrainResult result;
  OptimizerState opt;
  opt.cfg = cfg.adam;
  const auto params = trainable_parameters(model.params());

  std::vector<Sample> probe_short, probe_long;
  if (cfg.conflict_probe) {
    const auto& b = model.config().bucket_bounds;
    std::vector<const Sample*> s, l;
    for (const auto& x : data.train) {
      if (x.length < b[0]) s.push_back(&x);
      else if (x.length >= b[1]) l.push_back(&x);
    }
    Rng prng(seed_for(seed, "probe"));
    prng.shuffle(s);
    prng.shuffle(l);
    for (std::size_t i = 0; i < std::min(cfg.probe_batch, s.size()); ++i) probe_short.push_back(*s[i]);
    for (std::size_t i = 0; i < std::min(cfg.probe_batch, l.size()); ++i) probe_long.push_back(*l[i]);
    if (probe_short.empty() || probe_long.empty()) {
      result.notices.push_back("conflict probe skipped: no short or no long training samples");
    }
  }

  std::vector<Tensor> best;
  std::optional<double> best_auc;
  std::size_t wait = 0;
  std::vector<const Sample*> order;
  for (const auto& s : data.train) order.push_back(&s);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng(seed_for(seed, "shuffle/" + std::to_string(epoch)));
    std::vector<const Sample*> ep = order;
    shuffle_rng.shuffle(ep);
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < ep.size(); i += cfg.batch_size) {
      const std::size_t e = std::min(ep.size(), i + cfg.batch_size);
      std::span<const Sample* const> batch(ep.data() + i, e - i);
      loss_sum += train_step(model, batch, opt, params) * static_cast<double>(batch.size());
    }
    for (Parameter* p : params) p->tensor.drop_grad();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(ep.size());
    rec.valid_auc = validation_auc(model, data.valid);
    if (!probe_short.empty() && !probe_long.empty()) {
      rec.conflict = gradient_conflict_probe(model, probe_short, probe_long);
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (epoch == 1 && !rec.valid_auc) {
      throw TrainingError("validation AUC is undefined after epoch 1: the validation split holds a single class");
    }
    if (rec.valid_auc && (!best_auc || *rec.valid_auc > *best_auc)) {
      best_auc = rec.valid_auc;
      result.best_epoch = epoch;
      best.clear();
      model.params().for_each([&](const Parameter& p) { best.push_back(p.tensor); });
      wait = 0;
    } else if (++wait >= cfg.patience) {
      break;
    }
  }
  std::size_t i = 0;
  model.params().for_each([&](Parameter& p) { p.tensor = best[i++]; });
  result.best_valid_auc = *best_auc;
  return result;
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string history_csv(const std::vector<EpochRecord>& h) {
  std::ostringstream os;
  os << "epoch,train_loss,valid_auc,conflict_cosine\n";
  for (const auto& r : h) {
    os << r.epoch << ',' << fmt_double(r.train_loss) << ',' << (r.valid_auc ? fmt_double(*r.valid_auc) : "") << ','
       << (r.conflict ? fmt_double(r.conflict->cosine) : "") << '\n';
  }
  return os.str();
}

inline std::uint64_t history_digest(const std::vector<EpochRecord>& h) {
  Fnv1a f;
  f.str(history_csv(h));
  return f.value();
}

struct Evaluation {
  BucketedReport report;
  std::vector<AttentionTrace> traces;
  std::vector<double> predictions;
};

inline Evaluation evaluate(LainModel& model, std::span<const Sample> samples) {
  Evaluation ev;
  ev.predictions = model.predict(samples, &ev.traces);
  ev.report = bucketed_report(samples, ev.predictions, ev.traces, model.config().bucket_bounds);
  return ev;
}

// --- experiment matrix --------------------------------------------------------

struct ExperimentPlan {
  std::vector<std::string> variants = variant_names();
  std::vector<std::uint64_t> seeds{0};
  GeneratorConfig data;             // used unless data_path is set
  std::optional<std::string> data_path;
  ModelConfig model;
  TrainConfig train;
};

inline ExperimentPlan plan_from_json(const nlohmann::json& j) {
  ExperimentPlan p;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    if (k == "variants") p.variants = v.get<std::vector<std::string>>();
    else if (k == "seeds") p.seeds = v.get<std::vector<std::uint64_t>>();
    else if (k == "data_path") p.data_path = v.get<std::string>();
    else if (k == "data") {
      for (auto d = v.begin(); d != v.end(); ++d) {
        if (d.key() == "users") p.data.n_users = d.value().get<std::size_t>();
        else if (d.key() == "items") p.data.n_items = d.value().get<std::size_t>();
        else if (d.key() == "seed") p.data.seed = d.value().get<std::uint64_t>();
        else if (d.key() == "length_effect") p.data.length_effect = d.value().get<double>();
        else if (d.key() == "cohorts") {
          p.data.cohorts.clear();
          for (const auto& c : d.value()) p.data.cohorts.push_back(cohort_from_json(c));
        } else throw ConfigError("unknown plan data key: " + d.key());
      }
    } else if (k == "model") p.model = model_config_from_json(v);
    else if (k == "train") {
      for (auto d = v.begin(); d != v.end(); ++d) {
        if (d.key() == "batch_size") p.train.batch_size = d.value().get<std::size_t>();
        else if (d.key() == "max_epochs") p.train.max_epochs = d.value().get<std::size_t>();
        else if (d.key() == "patience") p.train.patience = d.value().get<std::size_t>();
        else if (d.key() == "lr") p.train.adam.lr = d.value().get<double>();
        else throw ConfigError("unknown plan train key: " + d.key());
      }
    } else throw ConfigError("unknown plan key: " + k);
  }
  if (p.variants.empty() || p.seeds.empty()) throw ConfigError("plan needs at least one variant and one seed");
  for (const auto& v : p.variants) apply_variant(p.model, v);
  return p;
}

inline std::string cell_name(const std::string& variant, std::uint64_t seed) {
  return variant + "__seed" + std::to_string(seed);
}

struct CellResult {
  std::string variant;
  std::uint64_t seed = 0;
  std::optional<BucketedReport> report;
  std::string error;
  bool resumed = false;
};

struct MatrixResult {
  std::vector<CellResult> cells;
  std::string summary_csv;
  bool any_failed() const {
    return std::any_of(cells.begin(), cells.end(), [](const CellResult& c) { return !c.report; });
  }
};

/// Trains `variant` with `seed`, evaluating the best-validation model on the
/// test split.
inline Evaluation run_cell(const DatasetBundle& data, const ModelConfig& base, const std::string& variant,
                           std::uint64_t seed, const TrainConfig& tc, TrainResult* tr = nullptr) {
  ModelConfig mc = apply_variant(base, variant);
  LainModel model(mc, data.vocab_size, data.L0, seed);
  TrainResult r = train(model, data, tc, seed);
  if (tr) *tr = r;
  Evaluation ev = evaluate(model, data.test);
  ev.report.config = {{"variant", variant}, {"seed", seed}, {"model", to_json(mc)}, {"train", to_json(tc)},
                      {"best_epoch", r.best_epoch}, {"best_valid_auc", r.best_valid_auc},
                      {"tau_fixed_one", !mc.use_temp()}};
  ev.report.dataset_digest = hex64(bundle_digest(data));
  return ev;
}

inline std::string format_percent(double x) {
  std::ostringstream os;
  os << std::showpos << std::fixed << std::setprecision(2) << 100.0 * x << '%';
  return os.str();
}

/// mean, sample std and relative gain over the baseline variant for each
/// (variant, bucket, metric).
inline std::string summarize(const std::vector<CellResult>& cells) {
  using Key = std::tuple<std::string, std::string, std::string>;
  std::map<Key, std::vector<double>> values;
  std::vector<std::string> variants;
  for (const auto& c : cells) {
    if (!c.report) continue;
    if (std::find(variants.begin(), variants.end(), c.variant) == variants.end()) variants.push_back(c.variant);
    for (const auto& row : report_rows()) {
      const auto& m = c.report->buckets.at(row);
      const std::pair<const char*, std::optional<double>> metrics[] = {
          {"auc", m.auc}, {"gauc", m.gauc}, {"logloss", m.logloss}, {"mean_gini", m.mean_gini},
          {"mean_entropy", m.mean_entropy}};
      for (const auto& [name, v] : metrics) {
        if (v) values[{c.variant, row, name}].push_back(*v);
      }
    }
    if (c.report->gini_variance) values[{c.variant, "across", "gini_variance"}].push_back(*c.report->gini_variance);
    if (c.report->gini_range) values[{c.variant, "across", "gini_range"}].push_back(*c.report->gini_range);
  }
  auto stats = [](const std::vector<double>& v) {
    double mu = 0.0;
    for (double x : v) mu += x;
    mu /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mu) * (x - mu);
    const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    return std::pair{mu, sd};
  };
  std::ostringstream os;
  os << "variant,bucket,metric,mean,std,rel_gain_vs_baseline\n";
  for (const auto& variant : variants) {
    for (const auto& [key, v] : values) {
      const auto& [var, bucket, metric] = key;
      if (var != variant) continue;
      const auto [mu, sd] = stats(v);
      std::string gain;
      auto base = values.find({"baseline", bucket, metric});
      if (base != values.end()) {
        const double b = stats(base->second).first;
        if (b != 0.0) gain = format_percent((mu - b) / std::abs(b));
      }
      os << variant << ',' << bucket << ',' << metric << ',' << fmt_double(mu) << ',' << fmt_double(sd) << ',' << gain
         << '\n';
    }
  }
  return os.str();
}

/// Runs every (variant, seed) cell, writing reports/<variant>__seed<s>.json,
/// manifest.json and summary.csv under `out_dir`. With `resume`, cells listed
/// as complete in the manifest are loaded instead of recomputed.
inline MatrixResult run_experiment_matrix(const ExperimentPlan& plan, const std::string& out_dir, bool resume = false,
                                          const std::function<void(const CellResult&)>& on_cell = {}) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "reports", ec);
  if (ec) throw DataError("cannot create " + out_dir + ": " + ec.message());
  const fs::path manifest_path = fs::path(out_dir) / "manifest.json";
  nlohmann::json manifest = {{"completed", nlohmann::json::array()}};
  if (resume && fs::exists(manifest_path)) {
    std::ifstream is(manifest_path);
    is >> manifest;
  }
  auto completed = [&](const std::string& name) {
    for (const auto& c : manifest["completed"])
      if (c.get<std::string>() == name) return true;
    return false;
  };

  std::optional<DatasetBundle> data;
  auto need_data = [&]() -> const DatasetBundle& {
    if (!data) data = plan.data_path ? load_dataset(*plan.data_path) : generate_synthetic(plan.data);
    return *data;
  };

  MatrixResult result;
  for (const auto& variant : plan.variants) {
    for (auto seed : plan.seeds) {
      CellResult cell;
      cell.variant = variant;
      cell.seed = seed;
      const std::string name = cell_name(variant, seed);
      const fs::path report_path = fs::path(out_dir) / "reports" / (name + ".json");
      if (resume && completed(name) && fs::exists(report_path)) {
        std::ifstream is(report_path);
        nlohmann::json j;
        is >> j;
        cell.report = report_from_json(j);
        cell.resumed = true;
      } else {
        try {
          Evaluation ev = run_cell(need_data(), plan.model, variant, seed, plan.train);
          std::ofstream os(report_path, std::ios::binary);
          os << to_json(ev.report).dump(2) << '\n';
          cell.report = std::move(ev.report);
          manifest["completed"].push_back(name);
          std::ofstream ms(manifest_path, std::ios::binary);
          ms << manifest.dump(2) << '\n';
        } catch (const std::exception& e) {
          cell.error = e.what();
        }
      }
      if (on_cell) on_cell(cell);
      result.cells.push_back(std::move(cell));
    }
  }
  result.summary_csv = summarize(result.cells);
  std::ofstream os(fs::path(out_dir) / "summary.csv", std::ios::binary);
  os << result.summary_csv;
  return result;
}

}  // namespace lain
