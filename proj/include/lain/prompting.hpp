#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lain/autodiff.hpp"
#include "lain/length_encoder.hpp"
#include "lain/nn.hpp"

namespace lain {

struct PromptBlock {
  Tensor tokens;  // [k x d]
  std::size_t k = 0;
  std::int64_t conditioned_on = 0;
};

/// Sequence rows plus a validity mask (1 = attendable).
struct MaskedSequence {
  Var rows;
  std::vector<std::uint8_t> mask;
};

/// Turns the length embedding into k prompt tokens:
///   P(L) = reshape(MLP_prompt(h_len)) in R^{k x d},
/// MLP_prompt being d -> hidden (ReLU) -> k*d.
class PromptGenerator {
 public:
  PromptGenerator() = default;

  PromptGenerator(ParameterStore& store, std::size_t d, std::size_t hidden, std::size_t k, std::uint64_t seed,
                  const std::string& prefix = "lcp")
      : d_(d), k_(k) {
    mlp_.push_back(make_dense(store, prefix + ".mlp0", d, hidden, seed, Activation::relu));
    mlp_.push_back(make_dense(store, prefix + ".mlp1", hidden, k * d, seed));
  }

  std::size_t k() const { return k_; }
  std::size_t d() const { return d_; }

  /// h_len rows [U x d] -> flat prompts [U x k*d].
  Var generate(Tape& t, Var h_len) const {
    if (t.value(h_len).cols() != d_) {
      throw DimensionError("prompt generator expects h_len width " + std::to_string(d_) + ", got " +
                           shape_str(t.value(h_len).shape()));
    }
    return mlp_forward(t, h_len, mlp_);
  }

  /// Row `r` of generate()'s output as a [k x d] block (row-major reshape).
  Var tokens(Tape& t, Var flat, std::size_t r) const {
    return reshape(t, slice_rows(t, flat, r, 1), {k_, d_});
  }

  PromptBlock generate_prompts(const LengthEmbedding& h) const {
    Tape t;
    Var hv = t.constant(Tensor({1, d_}, h.h_len.data()));
    Var p = tokens(t, generate(t, hv), 0);
    return {t.value(p), k_, h.source_length};
  }

  static std::size_t param_count(std::size_t d, std::size_t hidden, std::size_t k) {
    return dense_param_count(d, hidden) + dense_param_count(hidden, k * d);
  }

 private:
  std::size_t d_ = 0;
  std::size_t k_ = 0;
  std::vector<DenseLayer> mlp_;
};

/// S' = [P; S]. Prompt rows are always valid; the input mask shifts by k.
inline MaskedSequence prepend_prompts(Tape& t, Var prompts, Var seq, std::span<const std::uint8_t> seq_mask = {}) {
  const Tensor& pv = t.value(prompts);
  const Tensor& sv = t.value(seq);
  const std::size_t n = sv.rows();
  if (sv.size() > 0 && sv.cols() != pv.cols()) {
    throw DimensionError("prepend_prompts: prompt width " + std::to_string(pv.cols()) + " vs sequence shape " +
                         shape_str(sv.shape()));
  }
  if (!seq_mask.empty() && seq_mask.size() != n) {
    throw DimensionError("prepend_prompts: mask length " + std::to_string(seq_mask.size()) + " vs " +
                         std::to_string(n) + " rows");
  }
  MaskedSequence out;
  out.mask.assign(pv.rows(), 1);
  if (seq_mask.empty()) {
    out.mask.insert(out.mask.end(), n, 1);
  } else {
    out.mask.insert(out.mask.end(), seq_mask.begin(), seq_mask.end());
  }
  if (n == 0) {
    out.rows = prompts;
    return out;
  }
  const Var parts[] = {prompts, seq};
  out.rows = concat_rows(t, parts);
  return out;
}

}  // namespace lain
