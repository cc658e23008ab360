#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lain/autodiff.hpp"
#include "lain/nn.hpp"

namespace lain {

enum class Bucket { short_len, medium_len, long_len };

inline const char* bucket_name(Bucket b) {
  switch (b) {
    case Bucket::short_len: return "short";
    case Bucket::medium_len: return "medium";
    case Bucket::long_len: return "long";
  }
  return "?";
}

/// Half-open length buckets: [0, b1), [b1, b2), [b2, inf).
inline Bucket bucket_of(std::int64_t length, std::span<const std::int64_t> bounds) {
  if (bounds.size() != 2 || bounds[0] >= bounds[1]) {
    throw std::invalid_argument("bucket bounds must be two strictly increasing values");
  }
  if (length < bounds[0]) return Bucket::short_len;
  if (length < bounds[1]) return Bucket::medium_len;
  return Bucket::long_len;
}

/// Attention weights over behavior positions of one (sample, branch).
struct AttentionTrace {
  std::string user_id;
  std::string branch;
  std::int64_t user_length = 0;
  Bucket bucket = Bucket::short_len;
  std::vector<double> weights;  // renormalized over behaviors, prompts dropped
  std::vector<double> logits;   // behavior logits before temperature
  double tau = 1.0;
  bool degenerate = false;      // prompts absorbed (almost) all the mass
};

/// tau = 1 + sigmoid(-beta (L - L0)) * gamma.
inline double compute_temperature(double length, double gamma, double beta, double L0) {
  return 1.0 + sigmoid(-beta * (length - L0)) * gamma;
}

/// Learnable temperature parameters. gamma is clamped at zero when used,
/// so the temperature never drops below one.
class TemperatureParams {
 public:
  TemperatureParams() = default;
  TemperatureParams(ParameterStore& store, double gamma, double beta, double L0, const std::string& prefix = "lma")
      : gamma_(&store.add(prefix + ".gamma", Tensor::scalar(gamma))),
        beta_(&store.add(prefix + ".beta", Tensor::scalar(beta))),
        L0_(L0) {}

  double gamma() const { return std::max(0.0, gamma_->tensor[0]); }
  double beta() const { return beta_->tensor[0]; }
  double L0() const { return L0_; }
  void set_L0(double v) { L0_ = v; }
  Parameter& gamma_param() const { return *gamma_; }
  Parameter& beta_param() const { return *beta_; }

  double operator()(double length) const { return compute_temperature(length, gamma(), beta(), L0_); }

  /// Differentiable temperatures, one row per length: [U x 1].
  Var record(Tape& t, std::span<const double> lengths) const {
    Var g = t.param(*gamma_);
    Var b = t.param(*beta_);
    const double gv = t.item(g), bv = t.item(b);
    const double geff = std::max(0.0, gv);
    t.note_branch(gv > 0.0 ? 1 : 0);
    Tensor out({lengths.size(), 1});
    std::vector<double> s(lengths.size()), ls(lengths.begin(), lengths.end());
    for (std::size_t i = 0; i < ls.size(); ++i) {
      s[i] = sigmoid(-bv * (ls[i] - L0_));
      out[i] = 1.0 + s[i] * geff;
    }
    const double L0 = L0_;
    return t.record(
        std::move(out), {g, b},
        [g, b, s = std::move(s), ls = std::move(ls), geff, gv, L0](Tape& tp, std::uint32_t self) {
          auto up = tp.grad(self);
          for (std::size_t i = 0; i < ls.size(); ++i) {
            if (tp.requires_grad(g) && gv > 0.0) tp.grad(g)[0] += up[i] * s[i];
            // d sigmoid(-b (L - L0)) / db = -s (1 - s) (L - L0)
            if (tp.requires_grad(b)) tp.grad(b)[0] += up[i] * geff * (-s[i] * (1.0 - s[i]) * (ls[i] - L0));
          }
        },
        "temperature");
  }

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
  double L0_ = 0.0;
};

/// W_q, W_k (each [2d x d], no bias) and the e_len map d -> d.
struct QueryKeyConditioner {
  DenseLayer emb;  // MLP_emb
  Parameter* w_q = nullptr;
  Parameter* w_k = nullptr;

  QueryKeyConditioner() = default;
  QueryKeyConditioner(ParameterStore& store, std::size_t d, std::uint64_t seed, const std::string& prefix = "lma") {
    emb = make_dense(store, prefix + ".emb", d, d, seed);
    w_q = &store.add(prefix + ".w_q", xavier_uniform(2 * d, d, seed, prefix + ".w_q"));
    w_k = &store.add(prefix + ".w_k", xavier_uniform(2 * d, d, seed, prefix + ".w_k"));
  }

  static std::size_t param_count(std::size_t d) { return dense_param_count(d, d) + 4 * d * d; }
};

/// Q' = [Q; e_len] W_q and K' = [K; e_len] W_k, each row of q / k being
/// concatenated with the same e_len.
inline std::pair<Var, Var> condition_query_key(Tape& t, Var q, Var k, Var e_len, Var w_q, Var w_k) {
  const std::size_t d = t.value(q).cols();
  if (t.value(k).cols() != d || t.value(e_len).size() != d || t.value(w_q).rows() != 2 * d ||
      t.value(w_k).rows() != 2 * d) {
    throw DimensionError("condition_query_key: q " + shape_str(t.value(q).shape()) + ", k " +
                         shape_str(t.value(k).shape()) + ", e_len " + shape_str(t.value(e_len).shape()) + ", W_q " +
                         shape_str(t.value(w_q).shape()) + ", W_k " + shape_str(t.value(w_k).shape()));
  }
  auto widen = [&](Var x) {
    const std::size_t n = t.value(x).rows();
    std::vector<Var> rows(n, reshape(t, e_len, {1, d}));
    Var e_rows = n == 1 ? rows[0] : concat_rows(t, rows);
    const Var parts[] = {x, e_rows};
    return concat_cols(t, parts);
  };
  return {matmul(t, widen(q), w_q), matmul(t, widen(k), w_k)};
}

/// Everything attention needs to know about one query.
struct AttentionInput {
  Var query;                        // [1 x d] target embedding
  Var kv;                           // [m x d] keys = values (prompts first)
  std::vector<std::uint8_t> mask;   // empty = all valid
  std::size_t prompt_rows = 0;      // leading rows that are prompts
};

struct AttentionOptions {
  bool qk_conditioning = false;
  Var e_len;                        // [1 x d], needed when qk_conditioning
  Var w_q, w_k;
  std::optional<Var> tau;           // differentiable temperature node
  double fixed_tau = 1.0;           // used when `tau` is empty
};

struct AttentionResult {
  Var output;                       // [1 x d]
  Var logits;                       // [1 x m], already divided by sqrt(d)
  Var weights;                      // [1 x m]
};

namespace detail {
// Logits q' . k'_j with k'_j = [k_j; e] W_k, computed as k_j (W_k^top q'^T)
// plus a j-independent term so the per-key projection is never materialized.
inline Var conditioned_logits(Tape& t, Var kv, Var q_prime, Var e_len, Var w_k, std::size_t d) {
  Var w_top = slice_rows(t, w_k, 0, d);
  Var w_bot = slice_rows(t, w_k, d, d);
  Var qt = transpose(t, q_prime);                 // [d x 1]
  Var u = matmul(t, w_top, qt);                   // [d x 1]
  Var base = matmul(t, kv, u);                    // [m x 1]
  Var shift = matmul(t, matmul(t, reshape(t, e_len, {1, d}), w_bot), qt);  // [1 x 1]
  return add_scalar(t, transpose(t, base), shift);
}
}  // namespace detail

/// Target attention with optional query/key conditioning and temperature:
///   a_j = softmax_j(Q'.K'_j / (sqrt(d) tau)),  O = sum_j a_j V_j.
inline AttentionResult length_modulated_attention(Tape& t, const AttentionInput& in, const AttentionOptions& opt) {
  const Tensor& kvv = t.value(in.kv);
  const std::size_t m = kvv.rows();
  const std::size_t d = t.value(in.query).cols();
  if (m == 0) throw DegenerateMaskError("attention over an empty sequence");
  if (kvv.cols() != d) {
    throw DimensionError("attention: query " + shape_str(t.value(in.query).shape()) + " vs keys " +
                         shape_str(kvv.shape()));
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Var raw;
  if (opt.qk_conditioning) {
    const Var parts[] = {in.query, reshape(t, opt.e_len, {1, d})};
    Var q_prime = matmul(t, concat_cols(t, parts), opt.w_q);
    raw = detail::conditioned_logits(t, in.kv, q_prime, opt.e_len, opt.w_k, d);
  } else {
    raw = transpose(t, matmul(t, in.kv, transpose(t, in.query)));
  }
  Var logits = scale(t, raw, inv_sqrt_d);
  Var alpha = opt.tau ? softmax_temp(t, logits, *opt.tau, in.mask) : softmax_temp(t, logits, opt.fixed_tau, in.mask);
  Var out = matmul(t, alpha, in.kv);
  return {out, logits, alpha};
}

/// Plain target attention: tau = 1, no conditioning.
inline AttentionResult target_attention_base(Tape& t, const AttentionInput& in) {
  return length_modulated_attention(t, in, AttentionOptions{});
}

/// Attention for a batch of one branch, computed in a single tape node.
/// Sample b attends over [P_slot(b); E[ids_b]] with query row b:
///   logit_j = (row_j . q_b + shift_b) / sqrt(d),  a = softmax(logit / tau_slot(b)).
/// Equivalent to length_modulated_attention with the conditioned query
/// folded into q_b (see fold_query_key).
struct BranchBatch {
  Var table;                                   // [V x d]
  std::vector<std::vector<std::int64_t>> ids;  // per sample; id 0 is a zero row
  std::optional<Var> prompts;                  // [U x k*d]
  std::size_t k = 0;
  Var query;                                   // [B x d]
  std::optional<Var> shift;                    // [B x 1]
  std::optional<Var> tau;                      // [U x 1]
  double fixed_tau = 1.0;
  std::vector<std::size_t> slot;               // per sample row of prompts / tau
};

/// Per-sample logits and weights over all attended rows, prompts first.
struct BranchRecord {
  std::vector<double> logits, weights;
  double tau = 1.0;
};

inline Var batched_branch_attention(Tape& t, const BranchBatch& in, std::vector<BranchRecord>* records = nullptr) {
  const Tensor& tab = t.value(in.table);
  const Tensor& qv = t.value(in.query);
  const std::size_t B = in.ids.size(), d = tab.cols();
  if (qv.rows() != B || qv.cols() != d || in.slot.size() != B) {
    throw DimensionError("batched attention: query " + shape_str(qv.shape()) + " for " + std::to_string(B) +
                         " samples of width " + std::to_string(d));
  }
  const Tensor* pv = in.prompts ? &t.value(*in.prompts) : nullptr;
  if (pv && pv->cols() != in.k * d) throw DimensionError("batched attention: prompt width mismatch");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  const std::size_t k = pv ? in.k : 0;
  // Row j of sample b's attended sequence; nullptr for the padding row.
  auto row_ptr = [d, k](const BranchBatch& bb, const Tensor& tabv, const Tensor* pvv, std::size_t b,
                        std::size_t j) -> const double* {
    if (j < k) return pvv->data().data() + bb.slot[b] * k * d + j * d;
    const std::int64_t id = bb.ids[b][j - k];
    return id == 0 ? nullptr : tabv.data().data() + static_cast<std::size_t>(id) * d;
  };

  Tensor out({B, d});
  std::vector<std::vector<double>> alphas(B), zs(B);
  std::vector<double> taus(B, in.fixed_tau);
  for (std::size_t b = 0; b < B; ++b) {
    for (auto id : in.ids[b]) {
      if (id < 0 || static_cast<std::size_t>(id) >= tab.rows()) {
        throw LookupError("embedding id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(tab.rows()));
      }
    }
    const std::size_t m = k + in.ids[b].size();
    if (in.tau) taus[b] = t.value(*in.tau)[in.slot[b]];
    if (!(taus[b] > 0.0)) throw DomainError("softmax temperature must be positive");
    if (m == 0) {
      if (records) records->push_back({{}, {}, taus[b]});
      continue;
    }
    const double* q = qv.data().data() + b * d;
    const double shift = in.shift ? t.value(*in.shift)[b] : 0.0;
    auto& z = zs[b];
    auto& a = alphas[b];
    z.resize(m);
    a.resize(m);
    double zmax = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      const double* r = row_ptr(in, tab, pv, b, j);
      double dot = 0.0;
      if (r)
        for (std::size_t c = 0; c < d; ++c) dot += r[c] * q[c];
      z[j] = (dot + shift) * inv_sqrt_d;
      zmax = std::max(zmax, z[j] / taus[b]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < m; ++j) sum += (a[j] = std::exp(z[j] / taus[b] - zmax));
    double* o = out.data().data() + b * d;
    for (std::size_t j = 0; j < m; ++j) {
      a[j] /= sum;
      const double* r = row_ptr(in, tab, pv, b, j);
      if (r)
        for (std::size_t c = 0; c < d; ++c) o[c] += a[j] * r[c];
    }
    if (records) records->push_back({z, a, taus[b]});
  }

  std::vector<Var> inputs{in.table, in.query};
  if (in.prompts) inputs.push_back(*in.prompts);
  if (in.shift) inputs.push_back(*in.shift);
  if (in.tau) inputs.push_back(*in.tau);
  return t.record(
      std::move(out), std::span<const Var>(inputs),
      [in, alphas = std::move(alphas), zs = std::move(zs), taus = std::move(taus), d, k, inv_sqrt_d, row_ptr](
          Tape& tp, std::uint32_t self) {
        const Tensor& tabv = tp.value(in.table);
        const Tensor* pvv = in.prompts ? &tp.value(*in.prompts) : nullptr;
        const Tensor& qvv = tp.value(in.query);
        auto g = tp.grad(self);
        const bool g_tab = tp.requires_grad(in.table), g_q = tp.requires_grad(in.query);
        const bool g_p = in.prompts && tp.requires_grad(*in.prompts);
        const bool g_tau = in.tau && tp.requires_grad(*in.tau);
        std::vector<double> da, dz;
        for (std::size_t b = 0; b < alphas.size(); ++b) {
          const auto& a = alphas[b];
          const std::size_t m = a.size();
          if (m == 0) continue;
          const double* go = g.data() + b * d;
          const double* q = qvv.data().data() + b * d;
          da.assign(m, 0.0);
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            const double* r = row_ptr(in, tabv, pvv, b, j);
            if (r)
              for (std::size_t c = 0; c < d; ++c) da[j] += go[c] * r[c];
            s += a[j] * da[j];
          }
          dz.resize(m);
          double dtau = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            const double dy = a[j] * (da[j] - s);  // d loss / d (z_j / tau)
            dz[j] = dy / taus[b];
            dtau -= dy * zs[b][j] / (taus[b] * taus[b]);
          }
          if (g_tau) tp.grad(*in.tau)[in.slot[b]] += dtau;
          if (in.shift && tp.requires_grad(*in.shift)) {
            double ds = 0.0;
            for (std::size_t j = 0; j < m; ++j) ds += dz[j];
            tp.grad(*in.shift)[b] += ds * inv_sqrt_d;
          }
          if (g_q) {
            double* gq = tp.grad(in.query).data() + b * d;
            for (std::size_t j = 0; j < m; ++j) {
              const double* r = row_ptr(in, tabv, pvv, b, j);
              if (r)
                for (std::size_t c = 0; c < d; ++c) gq[c] += dz[j] * inv_sqrt_d * r[c];
            }
          }
          for (std::size_t j = 0; j < m; ++j) {
            double* dst = nullptr;
            if (j < k) {
              if (g_p) dst = tp.grad(*in.prompts).data() + in.slot[b] * k * d + j * d;
            } else if (g_tab) {
              const std::int64_t id = in.ids[b][j - k];
              if (id != 0) dst = tp.grad(in.table).data() + static_cast<std::size_t>(id) * d;
            }
            if (!dst) continue;
            for (std::size_t c = 0; c < d; ++c) dst[c] += a[j] * go[c] + dz[j] * inv_sqrt_d * q[c];
          }
        }
      },
      "batched_branch_attention");
}

/// Folds [q; e] W_q and K' = [K; e] W_k into a per-sample query and shift so
/// that q' . k'_j = k_j . u + shift:
///   u = Q' W_k_top^T,  shift = (e W_k_bot) . Q'.
/// `q` and `e` are [B x d]; returns {u [B x d], shift [B x 1]}.
inline std::pair<Var, Var> fold_query_key(Tape& t, Var q, Var e, Var w_q, Var w_k) {
  const std::size_t d = t.value(q).cols();
  const Var parts[] = {q, e};
  Var q_prime = matmul(t, concat_cols(t, parts), w_q);
  Var u = matmul(t, q_prime, transpose(t, slice_rows(t, w_k, 0, d)));
  Var shift = row_dot(t, matmul(t, e, slice_rows(t, w_k, d, d)), q_prime);
  return {u, shift};
}

/// Trace of one fused-attention record, prompts dropped and renormalized.
inline AttentionTrace trace_from_record(const BranchRecord& r, std::size_t prompt_rows) {
  AttentionTrace tr;
  tr.tau = r.tau;
  double kept = 0.0;
  for (std::size_t j = prompt_rows; j < r.weights.size(); ++j) kept += r.weights[j];
  tr.degenerate = kept < 1e-12 || r.weights.size() <= prompt_rows;
  for (std::size_t j = prompt_rows; j < r.weights.size(); ++j) {
    tr.weights.push_back(tr.degenerate ? 0.0 : r.weights[j] / kept);
    tr.logits.push_back(r.logits[j]);
  }
  return tr;
}

/// Extracts behavior-only weights (prompts removed, renormalized).
inline AttentionTrace make_trace(const Tape& t, const AttentionResult& r, const AttentionInput& in, double tau) {
  AttentionTrace tr;
  const auto& w = t.value(r.weights).data();
  const auto& z = t.value(r.logits).data();
  double kept = 0.0;
  for (std::size_t j = in.prompt_rows; j < w.size(); ++j) kept += w[j];
  tr.tau = tau;
  tr.degenerate = kept < 1e-12;
  for (std::size_t j = in.prompt_rows; j < w.size(); ++j) {
    if (!in.mask.empty() && !in.mask[j]) continue;
    tr.weights.push_back(tr.degenerate ? 0.0 : w[j] / kept);
    tr.logits.push_back(z[j]);
  }
  if (tr.weights.empty()) tr.degenerate = true;
  return tr;
}

}  // namespace lain
