#include <gtest/gtest.h>

#include "lain/prompting.hpp"
#include "test_util.hpp"

using namespace lain;
using lain::testing::random_tensor;

namespace {

struct Stack {
  ParameterStore store;
  SpectralLengthEncoder enc;
  PromptGenerator gen;
  Stack(std::size_t d, std::size_t d_f, std::size_t hidden, std::size_t k, std::uint64_t seed)
      : enc(store, {d, d_f, hidden, 1e-5}, seed), gen(store, d, hidden, k, seed) {}

  Var tokens(Tape& t, double L) const {
    return gen.tokens(t, gen.generate(t, enc.encode(t, std::span<const double>(&L, 1))), 0);
  }
};

}  // namespace

TEST(PromptGenerator, DefaultShape) {
  Stack s(64, 32, 512, 4, 0);
  const auto p = s.gen.generate_prompts(s.enc.encode_length(120));
  EXPECT_EQ(p.tokens.shape(), (Shape{4, 64}));
  EXPECT_EQ(p.k, 4u);
  EXPECT_EQ(p.conditioned_on, 120);
  EXPECT_EQ(s.store.scalar_count(),
            SpectralLengthEncoder::param_count({64, 32, 512, 1e-5}) + PromptGenerator::param_count(64, 512, 4));
}

TEST(PromptGenerator, ZeroWeightsGiveBiasRows) {
  Stack s(6, 4, 10, 3, 2);
  Rng rng(4);
  s.store.for_each([&](Parameter& p) {
    if (p.name.starts_with("lcp.") && p.name.ends_with(".weight")) p.tensor = Tensor(p.tensor.shape());
  });
  auto& bias = s.store.get("lcp.mlp1.bias");
  bias.tensor = random_tensor({18}, rng);
  for (std::int64_t L : {1, 80, 900}) {
    const auto p = s.gen.generate_prompts(s.enc.encode_length(L));
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(p.tokens.at(r, c), bias.tensor[r * 6 + c]);
  }
}

TEST(PromptGenerator, GradientReachesFrequencies) {
  Stack s(8, 4, 16, 4, 6);
  auto f = [&](Tape& t) { return sum(t, s.tokens(t, 37)); };
  const auto rep = grad_check(f, {&s.enc.omega()});
  ASSERT_EQ(rep.entries.size(), 4u);
  double mag = 0.0;
  for (const auto& e : rep.entries) mag += std::abs(e.analytic);
  EXPECT_GT(mag, 0.0);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_error();
}

TEST(PromptGenerator, AllParameterGradientsMatchFiniteDifferences) {
  Stack s(8, 4, 16, 2, 11);
  Rng rng(2);
  const Tensor w = random_tensor({2, 8}, rng);
  auto f = [&](Tape& t) { return sum(t, row_dot(t, s.tokens(t, 240), t.constant(w))); };
  GradCheckOptions opt;
  opt.h = 1e-6;  // L = 240 multiplies the curvature in omega
  const auto rep = grad_check(f, s.store, opt);
  EXPECT_TRUE(rep.passed()) << rep.worst()->name << " " << rep.max_rel_error();
}

TEST(PromptGenerator, TokensVaryWithLength) {
  Stack s(16, 8, 32, 4, 1);
  EXPECT_NE(s.gen.generate_prompts(s.enc.encode_length(5)).tokens.data(),
            s.gen.generate_prompts(s.enc.encode_length(500)).tokens.data());
}

TEST(PromptGenerator, WrongEmbeddingWidthIsRejected) {
  Stack s(8, 4, 16, 2, 0);
  Tape t;
  EXPECT_THROW(s.gen.generate(t, t.constant(Tensor({1, 7}))), DimensionError);
}

TEST(PrependPrompts, EmptySequence) {
  Rng rng(1);
  Tape t;
  const Tensor p = random_tensor({4, 5}, rng);
  auto out = prepend_prompts(t, t.constant(p), t.constant(Tensor({0, 5})));
  EXPECT_EQ(t.value(out.rows).data(), p.data());
  EXPECT_EQ(out.mask, std::vector<std::uint8_t>(4, 1));
}

TEST(PrependPrompts, ConcatenationArithmetic) {
  Rng rng(2);
  Tape t;
  const Tensor p = random_tensor({4, 3}, rng), seq = random_tensor({10, 3}, rng);
  auto out = prepend_prompts(t, t.constant(p), t.constant(seq));
  const Tensor& rows = t.value(out.rows);
  EXPECT_EQ(rows.rows(), 14u);
  EXPECT_EQ(out.mask.size(), 14u);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(rows.at(4, c), seq.at(0, c));
  Var tail = slice_rows(t, out.rows, 4, 10);
  EXPECT_EQ(t.value(tail).data(), seq.data());
}

TEST(PrependPrompts, MaskShiftsByK) {
  const std::vector<std::uint8_t> mask{1, 0, 1, 0, 1, 0};
  for (std::size_t k = 1; k <= 4; ++k) {
    Tape t;
    auto out = prepend_prompts(t, t.constant(Tensor({k, 2})), t.constant(Tensor({6, 2})), mask);
    ASSERT_EQ(out.mask.size(), k + 6);
    for (std::size_t i = 0; i < k; ++i) EXPECT_EQ(out.mask[i], 1);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(out.mask[k + i], mask[i]) << "k=" << k << " i=" << i;
  }
}

TEST(PrependPrompts, WidthMismatch) {
  Tape t;
  EXPECT_THROW(prepend_prompts(t, t.constant(Tensor({2, 4})), t.constant(Tensor({3, 5}))), DimensionError);
  EXPECT_THROW(prepend_prompts(t, t.constant(Tensor({2, 4})), t.constant(Tensor({3, 4})),
                               std::vector<std::uint8_t>{1, 1}),
               DimensionError);
}

TEST(PrependPrompts, GradientsFlowToPromptsAndSequence) {
  Rng rng(3);
  ParameterStore s;
  auto& p = s.add("p", random_tensor({2, 3}, rng));
  auto& q = s.add("q", random_tensor({1, 3}, rng));
  auto& seq = s.add("seq", random_tensor({5, 3}, rng));
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 0};
  auto f = [&](Tape& t) {
    auto ms = prepend_prompts(t, t.param(p), t.param(seq), mask);
    Var z = transpose(t, matmul(t, ms.rows, transpose(t, t.param(q))));
    Var a = softmax_temp(t, z, 1.0, ms.mask);
    return sum(t, matmul(t, a, ms.rows));
  };
  const auto rep = grad_check(f, s);
  EXPECT_TRUE(rep.passed()) << rep.worst()->name << " " << rep.max_rel_error();
}
