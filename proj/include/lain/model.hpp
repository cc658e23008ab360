#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "lain/attention.hpp"
#include "lain/autodiff.hpp"
#include "lain/length_encoder.hpp"
#include "lain/nn.hpp"
#include "lain/prompting.hpp"

namespace lain {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t d = 64;
  std::size_t d_f = 32;
  std::size_t k = 4;
  std::size_t hidden = 512;  // SLE and prompt-generator width
  std::size_t short_window = 20;
  std::size_t gsu_topk = 50;
  std::size_t max_len = 1000;
  std::vector<std::size_t> head_dims{128, 64};
  double dropout = 0.2;
  double gamma_init = 0.5;
  double beta_init = 0.01;
  double ln_eps = 1e-5;
  bool lcp = true;
  bool qk_cond = true;
  bool temp_scale = true;
  bool lma = true;
  bool short_branch = true;
  std::vector<std::int64_t> bucket_bounds{100, 200};

  bool use_qk() const { return lma && qk_cond; }
  bool use_temp() const { return lma && temp_scale; }
  // SLE, and h_len in the fusion vector, exist whenever any length-aware
  // component does. The baseline is therefore free of length parameters.
  bool uses_length() const { return lcp || use_qk() || use_temp(); }

  std::size_t fusion_width() const { return d * ((short_branch ? 1 : 0) + 2 + (uses_length() ? 1 : 0)); }

  /// LMA subsumes its two parts.
  void normalize() {
    if (!lma) {
      qk_cond = false;
      temp_scale = false;
    }
  }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError(what);
    };
    need(d > 0 && d_f > 0 && hidden > 0, "d, d_f and hidden must be positive");
    need(k > 0, "k must be positive");
    need(short_window > 0 && gsu_topk > 0 && max_len > 0, "window sizes must be positive");
    need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
    need(bucket_bounds.size() == 2 && bucket_bounds[0] < bucket_bounds[1], "bucket_bounds must be strictly increasing");
    need(lma || (!qk_cond && !temp_scale), "lma=false requires qk_cond=false and temp_scale=false");
    for (auto h : head_dims) need(h > 0, "head layer widths must be positive");
  }
};

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"full", "no-lcp", "no-qk", "no-temp", "no-lma", "no-short", "baseline"};
  return names;
}

/// Ablation presets. Hyperparameters other than the switches are kept.
inline ModelConfig apply_variant(ModelConfig c, std::string_view name) {
  c.lcp = c.qk_cond = c.temp_scale = c.lma = c.short_branch = true;
  if (name == "full") {
  } else if (name == "no-lcp") {
    c.lcp = false;
  } else if (name == "no-qk") {
    c.qk_cond = false;
  } else if (name == "no-temp") {
    c.temp_scale = false;
  } else if (name == "no-lma") {
    c.lma = false;
  } else if (name == "no-short") {
    c.short_branch = false;
  } else if (name == "baseline") {
    c.lcp = false;
    c.lma = false;
  } else {
    std::string valid;
    for (const auto& n : variant_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown variant '" + std::string(name) + "'; valid variants: " + valid);
  }
  c.normalize();
  return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"d", c.d},
                        {"d_f", c.d_f},
                        {"k", c.k},
                        {"hidden", c.hidden},
                        {"short_window", c.short_window},
                        {"gsu_topk", c.gsu_topk},
                        {"max_len", c.max_len},
                        {"head_dims", c.head_dims},
                        {"dropout", c.dropout},
                        {"gamma_init", c.gamma_init},
                        {"beta_init", c.beta_init},
                        {"ln_eps", c.ln_eps},
                        {"lcp", c.lcp},
                        {"qk_cond", c.qk_cond},
                        {"temp_scale", c.temp_scale},
                        {"lma", c.lma},
                        {"short_branch", c.short_branch},
                        {"bucket_bounds", c.bucket_bounds}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    if (k == "d") c.d = v.get<std::size_t>();
    else if (k == "d_f") c.d_f = v.get<std::size_t>();
    else if (k == "k") c.k = v.get<std::size_t>();
    else if (k == "hidden") c.hidden = v.get<std::size_t>();
    else if (k == "short_window") c.short_window = v.get<std::size_t>();
    else if (k == "gsu_topk") c.gsu_topk = v.get<std::size_t>();
    else if (k == "max_len") c.max_len = v.get<std::size_t>();
    else if (k == "head_dims") c.head_dims = v.get<std::vector<std::size_t>>();
    else if (k == "dropout") c.dropout = v.get<double>();
    else if (k == "gamma_init") c.gamma_init = v.get<double>();
    else if (k == "beta_init") c.beta_init = v.get<double>();
    else if (k == "ln_eps") c.ln_eps = v.get<double>();
    else if (k == "lcp") c.lcp = v.get<bool>();
    else if (k == "qk_cond") c.qk_cond = v.get<bool>();
    else if (k == "temp_scale") c.temp_scale = v.get<bool>();
    else if (k == "lma") c.lma = v.get<bool>();
    else if (k == "short_branch") c.short_branch = v.get<bool>();
    else if (k == "bucket_bounds") c.bucket_bounds = v.get<std::vector<std::int64_t>>();
    else throw ConfigError("unknown model config key: " + k);
  }
  c.validate();
  return c;
}

/// One impression.
struct Sample {
  std::string user_id;
  std::int64_t target_item = 0;
  std::vector<std::int64_t> behaviors;  // chronological, oldest first
  std::int64_t length = 0;              // raw history length before truncation
  double label = 0.0;
  std::int64_t timestamp = 0;

  bool operator==(const Sample&) const = default;
};

/// Rows of `table` for `ids`; id 0 is the padding row.
inline Var embed_sequence(Tape& t, Var table, std::span<const std::int64_t> ids) { return gather_rows(t, table, ids, 0); }

namespace detail {
// Keeps the `topk` best-scoring candidates (ties prefer later positions) and
// returns them in ascending position order.
inline std::vector<std::size_t> top_positions(std::vector<std::size_t> valid, const std::vector<double>& score,
                                              std::size_t topk) {
  if (valid.size() > topk) {
    std::partial_sort(valid.begin(), valid.begin() + static_cast<std::ptrdiff_t>(topk), valid.end(),
                      [&](std::size_t a, std::size_t b) { return score[a] != score[b] ? score[a] > score[b] : a > b; });
    valid.resize(topk);
  }
  std::sort(valid.begin(), valid.end());
  return valid;
}
}  // namespace detail

/// Indices (ascending, i.e. chronological) of the `topk` valid positions with
/// the largest inner product against `target`. Ties prefer later positions.
inline std::vector<std::size_t> gsu_retrieve(std::span<const double> target, const Tensor& seq,
                                             std::span<const std::uint8_t> mask, std::size_t topk) {
  if (topk == 0) throw std::invalid_argument("gsu topk must be >= 1");
  const std::size_t n = seq.size() == 0 ? 0 : seq.rows(), d = seq.cols();
  if (n > 0 && d != target.size()) {
    throw DimensionError("gsu_retrieve: target width " + std::to_string(target.size()) + " vs sequence " +
                         shape_str(seq.shape()));
  }
  if (!mask.empty() && mask.size() != n) throw DimensionError("gsu_retrieve: mask length mismatch");
  std::vector<std::size_t> valid;
  std::vector<double> score(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    if (!mask.empty() && !mask[j]) continue;
    valid.push_back(j);
    const double* row = seq.data().data() + j * d;
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += row[c] * target[c];
    score[j] = s;
  }
  return detail::top_positions(std::move(valid), score, topk);
}

/// gsu_retrieve over the rows `ids` of an embedding table, without copying.
inline std::vector<std::size_t> gsu_select(std::span<const double> target, const Tensor& table,
                                           std::span<const std::int64_t> ids, std::size_t topk) {
  if (topk == 0) throw std::invalid_argument("gsu topk must be >= 1");
  const std::size_t d = table.cols();
  std::vector<std::size_t> valid(ids.size());
  std::vector<double> score(ids.size(), 0.0);
  for (std::size_t j = 0; j < ids.size(); ++j) {
    valid[j] = j;
    const double* row = table.data().data() + static_cast<std::size_t>(ids[j]) * d;
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += row[c] * target[c];
    score[j] = s;
  }
  return detail::top_positions(std::move(valid), score, topk);
}

struct ParameterReport {
  std::size_t shared = 0, sle = 0, lcp = 0, lma = 0, total = 0;
  double lain_fraction = 0.0;
  std::string formula;
};

struct ForwardOptions {
  bool training = false;
  std::vector<AttentionTrace>* traces = nullptr;
};

struct BatchOutput {
  Var logits;  // [B x 1]
  Var probs;   // [B x 1], clamped to [1e-7, 1 - 1e-7]
  std::vector<double> tau;  // temperature used per sample
};

/// Two-branch target-attention CTR model with optional length-aware parts.
class LainModel {
 public:
  LainModel(ModelConfig cfg, std::size_t vocab_size, double L0, std::uint64_t seed)
      : cfg_(std::move(cfg)), vocab_(vocab_size), seed_(seed), dropout_rng_(seed_for(seed, "dropout")) {
    cfg_.validate();
    if (vocab_ < 2) throw ConfigError("vocabulary must hold the padding row and at least one item");
    build(L0);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  std::size_t vocab_size() const { return vocab_; }
  std::uint64_t seed() const { return seed_; }
  double L0() const { return temp_ ? temp_->L0() : L0_; }
  const SpectralLengthEncoder* length_encoder() const { return sle_ ? &*sle_ : nullptr; }
  const PromptGenerator* prompt_generator() const { return prompts_ ? &*prompts_ : nullptr; }
  const TemperatureParams* temperature() const { return temp_ ? &*temp_ : nullptr; }
  const QueryKeyConditioner* conditioner() const { return qk_ ? &*qk_ : nullptr; }
  Rng& dropout_rng() { return dropout_rng_; }

  double temperature_for(std::int64_t length) const { return temp_ ? (*temp_)(static_cast<double>(length)) : 1.0; }

  /// Parameters excluding the length-aware components.
  std::vector<Parameter*> shared_parameters() {
    std::vector<Parameter*> out;
    params_.for_each([&](Parameter& p) {
      if (p.name.rfind("embedding", 0) == 0 || p.name.rfind("head", 0) == 0) out.push_back(&p);
    });
    return out;
  }

  /// Batched forward pass. Length-dependent pieces are computed once per
  /// distinct length in the batch; each branch is one fused attention node.
  BatchOutput forward(Tape& t, std::span<const Sample* const> batch, const ForwardOptions& opt = {}) {
    const std::size_t B = batch.size();
    if (B == 0) throw std::invalid_argument("forward: empty batch");
    const std::size_t d = cfg_.d;
    for (const Sample* s : batch) validate_sample(*s);
    Var table = t.param(*embedding_);

    std::vector<double> lengths;
    std::vector<std::size_t> slot(B, 0);
    std::vector<std::int64_t> slot_ids(B, 0);
    Var h_all, prompts_all, e_all, taus;
    if (cfg_.uses_length()) {
      for (const Sample* s : batch) lengths.push_back(static_cast<double>(s->length));
      std::sort(lengths.begin(), lengths.end());
      lengths.erase(std::unique(lengths.begin(), lengths.end()), lengths.end());
      for (std::size_t b = 0; b < B; ++b) {
        slot[b] = static_cast<std::size_t>(
            std::lower_bound(lengths.begin(), lengths.end(), static_cast<double>(batch[b]->length)) - lengths.begin());
        slot_ids[b] = static_cast<std::int64_t>(slot[b]);
      }
      h_all = sle_->encode(t, lengths);
      if (cfg_.lcp) prompts_all = prompts_->generate(t, h_all);
      if (cfg_.use_qk()) e_all = dense_forward(t, h_all, qk_->emb);
      if (cfg_.use_temp()) taus = temp_->record(t, lengths);
    }

    std::vector<std::int64_t> targets(B);
    for (std::size_t b = 0; b < B; ++b) targets[b] = batch[b]->target_item;
    Var target = embed_sequence(t, table, targets);

    BranchBatch branch;
    branch.table = table;
    branch.query = target;
    branch.slot = slot;
    if (cfg_.lcp) {
      branch.prompts = prompts_all;
      branch.k = cfg_.k;
    }
    if (cfg_.use_qk()) {
      Var e_rows = gather_rows(t, e_all, slot_ids, -1);
      auto [u, shift] = fold_query_key(t, target, e_rows, t.param(*qk_->w_q), t.param(*qk_->w_k));
      branch.query = u;
      branch.shift = shift;
    }
    if (cfg_.use_temp()) branch.tau = taus;

    std::vector<std::vector<std::int64_t>> short_ids(B), long_ids(B);
    const Tensor& tab = embedding_->tensor;
    for (std::size_t b = 0; b < B; ++b) {
      const Sample& s = *batch[b];
      const std::size_t n_all = s.behaviors.size();
      const std::size_t keep = std::min(n_all, cfg_.max_len);
      std::span<const std::int64_t> hist(s.behaviors.data() + (n_all - keep), keep);
      const std::size_t w = std::min(keep, cfg_.short_window);
      short_ids[b].assign(hist.end() - static_cast<std::ptrdiff_t>(w), hist.end());
      std::span<const double> tv(tab.data().data() + static_cast<std::size_t>(s.target_item) * d, d);
      for (std::size_t j : gsu_select(tv, tab, hist, cfg_.gsu_topk)) {
        long_ids[b].push_back(hist[j]);
        t.note_branch(j);
      }
    }

    BatchOutput result;
    result.tau.resize(B, 1.0);
    if (cfg_.use_temp()) {
      for (std::size_t b = 0; b < B; ++b) result.tau[b] = t.value(taus)[slot[b]];
    }
    std::vector<BranchRecord> short_rec, long_rec;
    const bool want = opt.traces != nullptr;
    std::vector<Var> parts;
    if (cfg_.short_branch) {
      branch.ids = std::move(short_ids);
      parts.push_back(batched_branch_attention(t, branch, want ? &short_rec : nullptr));
    }
    branch.ids = std::move(long_ids);
    parts.push_back(batched_branch_attention(t, branch, want ? &long_rec : nullptr));
    parts.push_back(target);
    if (cfg_.uses_length()) parts.push_back(gather_rows(t, h_all, slot_ids, -1));

    if (want) {
      const std::size_t k = cfg_.lcp ? cfg_.k : 0;
      for (std::size_t b = 0; b < B; ++b) {
        const Sample& s = *batch[b];
        auto add = [&](const BranchRecord& r, const char* name) {
          AttentionTrace tr = trace_from_record(r, k);
          tr.user_id = s.user_id;
          tr.branch = name;
          tr.user_length = s.length;
          tr.bucket = bucket_of(s.length, cfg_.bucket_bounds);
          opt.traces->push_back(std::move(tr));
        };
        if (cfg_.short_branch) add(short_rec[b], "short");
        add(long_rec[b], "long");
      }
    }

    Var fused = concat_cols(t, parts);
    Rng* rng = opt.training ? &dropout_rng_ : nullptr;
    result.logits = mlp_forward(t, fused, head_, cfg_.dropout, rng);
    result.probs = clamped_sigmoid(t, result.logits, 1e-7);
    return result;
  }

  /// Eval-mode click probabilities, batched.
  std::vector<double> predict(std::span<const Sample> samples, std::vector<AttentionTrace>* traces = nullptr,
                              std::size_t batch_size = 256) {
    std::vector<double> out;
    out.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); i += batch_size) {
      const std::size_t e = std::min(samples.size(), i + batch_size);
      std::vector<const Sample*> batch;
      for (std::size_t j = i; j < e; ++j) batch.push_back(&samples[j]);
      Tape t;
      ForwardOptions fo;
      fo.traces = traces;
      BatchOutput r = forward(t, batch, fo);
      const auto& p = t.value(r.probs).data();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  ParameterReport count_parameters() const {
    ParameterReport r;
    params_.for_each([&](const Parameter& p) {
      const std::size_t n = p.tensor.size();
      if (p.name.rfind("sle.", 0) == 0) r.sle += n;
      else if (p.name.rfind("lcp.", 0) == 0) r.lcp += n;
      else if (p.name.rfind("lma.", 0) == 0) r.lma += n;
      else r.shared += n;
    });
    // The head columns that read h_len belong to the length encoder's cost.
    if (cfg_.uses_length()) {
      const std::size_t cols = cfg_.head_dims.empty() ? 1 : cfg_.head_dims.front();
      r.shared -= cfg_.d * cols;
      r.sle += cfg_.d * cols;
    }
    r.total = r.shared + r.sle + r.lcp + r.lma;
    r.lain_fraction = r.total ? static_cast<double>(r.sle + r.lcp + r.lma) / static_cast<double>(r.total) : 0.0;
    r.formula =
        "shared = V*d + sum_l (in_l*out_l + out_l) over head layers excluding h_len columns; "
        "sle = d_f + (2*d_f*H + H) + 2*H + (H*H + H) + (H*d + d) + d*head0; "
        "lcp = (d*H + H) + (H*k*d + k*d); "
        "lma = [qk] (d*d + d) + 2*(2*d*d) + [temp] 2";
    return r;
  }

  /// Closed-form count for a configuration, independent of any instance.
  static ParameterReport expected_parameters(const ModelConfig& c, std::size_t vocab) {
    ParameterReport r;
    std::size_t in = c.fusion_width();
    r.shared = vocab * c.d;
    for (std::size_t w : c.head_dims) {
      r.shared += dense_param_count(in, w);
      in = w;
    }
    r.shared += dense_param_count(in, 1);
    if (c.uses_length()) {
      const std::size_t head0 = c.head_dims.empty() ? 1 : c.head_dims.front();
      r.shared -= c.d * head0;
      r.sle = SpectralLengthEncoder::param_count({c.d, c.d_f, c.hidden, c.ln_eps}) + c.d * head0;
    }
    if (c.lcp) r.lcp = PromptGenerator::param_count(c.d, c.hidden, c.k);
    if (c.use_qk()) r.lma += QueryKeyConditioner::param_count(c.d);
    if (c.use_temp()) r.lma += 2;
    r.total = r.shared + r.sle + r.lcp + r.lma;
    r.lain_fraction = static_cast<double>(r.sle + r.lcp + r.lma) / static_cast<double>(r.total);
    return r;
  }

  // --- checkpoints ---------------------------------------------------------

  nlohmann::json checkpoint_json() const {
    nlohmann::json j;
    j["format"] = "lain-checkpoint-v1";
    j["config"] = to_json(cfg_);
    j["vocab_size"] = vocab_;
    j["L0"] = L0();
    j["seed"] = seed_;
    auto& ps = j["parameters"] = nlohmann::json::array();
    params_.for_each([&](const Parameter& p) {
      ps.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"data", p.tensor.data()}});
    });
    return j;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot write checkpoint " + path);
    os << checkpoint_json().dump() << '\n';
    if (!os) throw CheckpointError("failed writing checkpoint " + path);
  }

  static LainModel from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "lain-checkpoint-v1") throw CheckpointError("not a lain checkpoint");
    LainModel m(model_config_from_json(j.at("config")), j.at("vocab_size").get<std::size_t>(), j.at("L0").get<double>(),
                j.at("seed").get<std::uint64_t>());
    std::size_t seen = 0;
    for (const auto& pj : j.at("parameters")) {
      const auto name = pj.at("name").get<std::string>();
      if (!m.params_.contains(name)) throw CheckpointError("checkpoint parameter " + name + " not in model");
      Parameter& p = m.params_.get(name);
      const auto shape = pj.at("shape").get<Shape>();
      if (shape != p.tensor.shape()) {
        throw CheckpointError("parameter " + name + ": checkpoint shape " + shape_str(shape) + " vs model shape " +
                              shape_str(p.tensor.shape()));
      }
      p.tensor = Tensor(shape, pj.at("data").get<std::vector<double>>());
      ++seen;
    }
    if (seen != m.params_.size()) throw CheckpointError("checkpoint is missing parameters");
    return m;
  }

  static LainModel load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot read checkpoint " + path);
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError("malformed checkpoint " + path + ": " + e.what());
    }
    return from_json(j);
  }

  /// Copies parameter values from `other` where names and shapes match.
  std::size_t copy_matching(const LainModel& other) {
    std::size_t n = 0;
    params_.for_each([&](Parameter& p) {
      if (!other.params_.contains(p.name)) return;
      const Parameter& q = other.params_.get(p.name);
      if (q.tensor.shape() != p.tensor.shape()) return;
      p.tensor = q.tensor;
      p.tensor.drop_grad();
      ++n;
    });
    return n;
  }

  std::uint64_t digest() const {
    Fnv1a h;
    params_.for_each([&](const Parameter& p) {
      h.str(p.name);
      for (double v : p.tensor.data()) h.f64(v);
    });
    return h.value();
  }

 private:
  void build(double L0) {
    L0_ = L0;
    embedding_ = &params_.add("embedding", xavier_uniform(vocab_, cfg_.d, seed_, "embedding"));
    std::fill_n(embedding_->tensor.data().begin(), cfg_.d, 0.0);
    if (cfg_.uses_length()) {
      sle_.emplace(params_, LengthEncoderConfig{cfg_.d, cfg_.d_f, cfg_.hidden, cfg_.ln_eps}, seed_);
    }
    if (cfg_.lcp) prompts_.emplace(params_, cfg_.d, cfg_.hidden, cfg_.k, seed_);
    if (cfg_.use_qk()) qk_.emplace(params_, cfg_.d, seed_);
    if (cfg_.use_temp()) temp_.emplace(params_, cfg_.gamma_init, cfg_.beta_init, L0);
    std::size_t in = cfg_.fusion_width();
    for (std::size_t i = 0; i < cfg_.head_dims.size(); ++i) {
      head_.push_back(make_dense(params_, "head" + std::to_string(i), in, cfg_.head_dims[i], seed_, Activation::relu));
      in = cfg_.head_dims[i];
    }
    head_.push_back(make_dense(params_, "head" + std::to_string(cfg_.head_dims.size()), in, 1, seed_));
  }

  void validate_sample(const Sample& s) const {
    auto check = [&](std::int64_t id) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_) {
        throw LookupError("item id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab_));
      }
    };
    check(s.target_item);
    for (auto id : s.behaviors) check(id);
    if (s.length < static_cast<std::int64_t>(std::min(s.behaviors.size(), cfg_.max_len))) {
      throw std::invalid_argument("sample raw length " + std::to_string(s.length) + " is shorter than its history");
    }
  }

  ModelConfig cfg_;
  std::size_t vocab_;
  std::uint64_t seed_;
  double L0_ = 0.0;
  Rng dropout_rng_;
  ParameterStore params_;
  Parameter* embedding_ = nullptr;
  std::optional<SpectralLengthEncoder> sle_;
  std::optional<PromptGenerator> prompts_;
  std::optional<QueryKeyConditioner> qk_;
  std::optional<TemperatureParams> temp_;
  std::vector<DenseLayer> head_;
};

}  // namespace lain
