#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>

#include "lain/model.hpp"
#include "test_util.hpp"

using namespace lain;
using lain::testing::random_tensor;
using lain::testing::small_model;

namespace {

std::vector<Sample> synthetic_batch(std::size_t vocab, std::vector<std::int64_t> lengths, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    Sample s;
    s.user_id = "u" + std::to_string(i);
    s.target_item = static_cast<std::int64_t>(1 + rng.below(vocab - 1));
    for (std::int64_t j = 0; j < lengths[i]; ++j) s.behaviors.push_back(static_cast<std::int64_t>(1 + rng.below(vocab - 1)));
    s.length = lengths[i];
    s.label = static_cast<double>(i % 2 == 0);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<double> probs(LainModel& m, const std::vector<Sample>& xs, std::vector<AttentionTrace>* tr = nullptr) {
  return m.predict(xs, tr);
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("lain_backbone_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(EmbedSequence, PaddingAndLookup) {
  Rng rng(1);
  ParameterStore s;
  auto& table = s.add("table", random_tensor({10, 3}, rng));
  Tape t;
  Var tab = t.param(table);
  const std::vector<std::int64_t> pad{0, 0}, five{5};
  for (double v : t.value(embed_sequence(t, tab, pad)).data()) EXPECT_EQ(v, 0.0);
  const auto row = t.value(embed_sequence(t, tab, five)).data();
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(row[c], table.tensor.at(5, c));
}

TEST(EmbedSequence, GradientOnlyReachesLookedUpRows) {
  Rng rng(2);
  ParameterStore s;
  auto& table = s.add("table", random_tensor({10, 3}, rng));
  const std::vector<std::int64_t> ids{3, 7, 3, 0, 9};
  Tape t;
  Var e = embed_sequence(t, t.param(table), ids);
  t.backward(sum(t, row_dot(t, e, t.constant(random_tensor({5, 3}, rng)))));
  for (std::size_t r = 0; r < 10; ++r) {
    const bool used = r == 3 || r == 7 || r == 9;
    for (std::size_t c = 0; c < 3; ++c) {
      const double g = table.tensor.grad()[r * 3 + c];
      if (used) {
        EXPECT_NE(g, 0.0) << r;
      } else {
        EXPECT_EQ(g, 0.0) << r;
      }
    }
  }
}

TEST(EmbedSequence, OutOfVocabularyNamesTheId) {
  ParameterStore s;
  auto& table = s.add("table", Tensor({10, 3}));
  Tape t;
  const std::vector<std::int64_t> ids{2, 10};
  try {
    embed_sequence(t, t.param(table), ids);
    FAIL() << "expected LookupError";
  } catch (const LookupError& e) {
    EXPECT_NE(std::string(e.what()).find("10"), std::string::npos);
  }
}

TEST(GsuRetrieve, OrderedByScoreEmittedChronologically) {
  const Tensor seq = Tensor::matrix(3, 1, {1.0, 5.0, 3.0});
  const std::vector<double> target{1.0};
  EXPECT_EQ(gsu_retrieve(target, seq, {}, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(gsu_retrieve(target, seq, {}, 3), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(gsu_retrieve(target, seq, {}, 10), (std::vector<std::size_t>{0, 1, 2}));
  const std::vector<std::uint8_t> mask{1, 0, 1};
  EXPECT_EQ(gsu_retrieve(target, seq, mask, 10), (std::vector<std::size_t>{0, 2}));
  const std::vector<std::uint8_t> none{0, 0, 0};
  EXPECT_TRUE(gsu_retrieve(target, seq, none, 2).empty());
  EXPECT_ANY_THROW(gsu_retrieve(target, seq, {}, 0));
}

TEST(GsuRetrieve, MatchesExhaustiveSortOracle) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const Tensor seq = random_tensor({20, 8}, rng);
    const Tensor target = random_tensor({8}, rng);
    std::vector<std::uint8_t> mask(20);
    for (auto& m : mask) m = rng.bernoulli(0.8) ? 1 : 0;
    const std::size_t topk = 1 + rng.below(20);

    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t j = 0; j < 20; ++j) {
      if (!mask[j]) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < 8; ++c) s += seq.at(j, c) * target[c];
      scored.emplace_back(s, j);
    }
    std::sort(scored.begin(), scored.end(), std::greater<>());
    std::vector<std::size_t> oracle;
    for (std::size_t i = 0; i < std::min(topk, scored.size()); ++i) oracle.push_back(scored[i].second);
    std::sort(oracle.begin(), oracle.end());
    EXPECT_EQ(gsu_retrieve(target.data(), seq, mask, topk), oracle) << "seed " << seed;
  }
}

TEST(GsuSelect, AgreesWithRetrieveOnGatheredRows) {
  Rng rng(4);
  const Tensor table = random_tensor({30, 6}, rng);
  std::vector<std::int64_t> ids;
  for (int i = 0; i < 25; ++i) ids.push_back(static_cast<std::int64_t>(1 + rng.below(29)));
  Tensor rows({ids.size(), 6});
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t c = 0; c < 6; ++c) rows.at(i, c) = table.at(static_cast<std::size_t>(ids[i]), c);
  const std::vector<double> target(table.data().begin() + 6 * 4, table.data().begin() + 6 * 5);
  EXPECT_EQ(gsu_select(target, table, ids, 7), gsu_retrieve(target, rows, {}, 7));
}

TEST(ModelConfigTest, VariantsAndValidation) {
  ModelConfig c;
  EXPECT_EQ(variant_names().size(), 7u);
  const auto no_lma = apply_variant(c, "no-lma");
  EXPECT_FALSE(no_lma.qk_cond);
  EXPECT_FALSE(no_lma.temp_scale);
  const auto base = apply_variant(c, "baseline");
  EXPECT_FALSE(base.uses_length());
  try {
    apply_variant(c, "bogus");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("no-short"), std::string::npos);
  }
  ModelConfig bad;
  bad.lma = false;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ModelConfig{};
  bad.bucket_bounds = {200, 100};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ModelConfig{};
  bad.dropout = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(ModelConfigTest, JsonRoundTrip) {
  ModelConfig c = apply_variant(small_model(), "no-qk");
  c.bucket_bounds = {50, 300};
  const auto back = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  auto j = to_json(c);
  j["unknown"] = 1;
  EXPECT_THROW(model_config_from_json(j), ConfigError);
}

TEST(Forward, ConstantHead) {
  LainModel m(small_model(), 300, 150, 3);
  auto& last = m.params().get("head2.weight");
  last.tensor = Tensor(last.tensor.shape());
  m.params().get("head2.bias").tensor[0] = -0.7;
  const auto xs = synthetic_batch(300, {3, 40, 150, 420, 0}, 1);
  for (double p : probs(m, xs)) EXPECT_DOUBLE_EQ(p, 1.0 / (1.0 + std::exp(0.7)));
}

TEST(Forward, DeterministicAndClamped) {
  LainModel m(small_model(), 300, 150, 3);
  const auto xs = synthetic_batch(300, {1, 10, 99, 100, 250, 999}, 2);
  const auto a = probs(m, xs), b = probs(m, xs);
  EXPECT_EQ(a, b);
  for (double p : a) {
    EXPECT_GE(p, 1e-7);
    EXPECT_LE(p, 1 - 1e-7);
  }
  m.params().get("head2.bias").tensor[0] = 80.0;
  for (double p : probs(m, xs)) EXPECT_EQ(p, 1 - 1e-7);
}

TEST(Forward, BatchingDoesNotChangePredictions) {
  LainModel m(small_model(), 300, 150, 4);
  const auto xs = synthetic_batch(300, {5, 60, 60, 150, 420, 7, 33}, 3);
  const auto all = probs(m, xs);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const std::vector<Sample> one{xs[i]};
    EXPECT_NEAR(probs(m, one)[0], all[i], 1e-14);
  }
}

TEST(Forward, RejectsInvalidSamples) {
  LainModel m(small_model(), 50, 10, 0);
  auto xs = synthetic_batch(50, {4}, 1);
  xs[0].behaviors.push_back(50);
  xs[0].length = 5;
  EXPECT_THROW(probs(m, xs), LookupError);
  xs = synthetic_batch(50, {4}, 1);
  xs[0].length = 2;
  EXPECT_THROW(probs(m, xs), std::invalid_argument);
}

TEST(Forward, EndToEndGradientMatchesFiniteDifferences) {
  for (const std::string variant : {"full", "no-qk", "baseline"}) {
    LainModel m(small_model(variant), 300, 150, 11);
    const auto xs = synthetic_batch(300, {5, 60, 150, 420}, 5);
    const auto ptrs = lain::testing::pointers(xs);
    std::vector<double> y;
    for (const auto& s : xs) y.push_back(s.label);
    auto f = [&](Tape& t) {
      auto out = m.forward(t, ptrs);
      return bce_loss(t, out.probs, y);
    };
    GradCheckOptions opt;
    opt.max_per_param = 48;
    opt.h = 1e-6;  // omega sees phases L * omega with L up to 420
    const auto rep = grad_check(f, m.params(), opt);
    EXPECT_TRUE(rep.passed()) << variant << ": " << rep.worst()->name << "[" << rep.worst()->index << "] "
                              << rep.max_rel_error();
    EXPECT_GT(rep.entries.size(), 100u);
  }
}

TEST(Forward, TracesAreNormalizedAndBucketed) {
  LainModel m(small_model(), 300, 150, 6);
  const auto xs = synthetic_batch(300, {2, 99, 100, 199, 200, 700}, 7);
  std::vector<AttentionTrace> tr;
  probs(m, xs, &tr);
  ASSERT_EQ(tr.size(), 2 * xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto& s = tr[2 * i];
    const auto& l = tr[2 * i + 1];
    EXPECT_EQ(s.branch, "short");
    EXPECT_EQ(l.branch, "long");
    EXPECT_EQ(s.weights.size(), std::min<std::size_t>(5, xs[i].behaviors.size()));
    EXPECT_EQ(l.weights.size(), std::min<std::size_t>(7, xs[i].behaviors.size()));
    EXPECT_EQ(s.bucket, bucket_of(xs[i].length, std::vector<std::int64_t>{100, 200}));
    for (const auto* t : {&s, &l}) {
      const double total = std::accumulate(t->weights.begin(), t->weights.end(), 0.0);
      EXPECT_NEAR(total, 1.0, 1e-9);
      EXPECT_DOUBLE_EQ(t->tau, m.temperature_for(xs[i].length));
    }
  }
}

TEST(Ablation, SwitchedOffPartsLeaveNoParameters) {
  const auto has = [](LainModel& m, const std::string& prefix) {
    bool any = false;
    m.params().for_each([&](Parameter& p) { any = any || p.name.starts_with(prefix); });
    return any;
  };
  LainModel base(small_model("baseline"), 100, 50, 0);
  EXPECT_FALSE(has(base, "sle."));
  EXPECT_FALSE(has(base, "lcp."));
  EXPECT_FALSE(has(base, "lma."));
  EXPECT_EQ(base.count_parameters().lain_fraction, 0.0);
  LainModel nolcp(small_model("no-lcp"), 100, 50, 0);
  EXPECT_FALSE(has(nolcp, "lcp."));
  EXPECT_TRUE(has(nolcp, "lma.w_q"));
  LainModel noqk(small_model("no-qk"), 100, 50, 0);
  EXPECT_FALSE(has(noqk, "lma.w_q"));
  EXPECT_TRUE(has(noqk, "lma.gamma"));
  LainModel notemp(small_model("no-temp"), 100, 50, 0);
  EXPECT_FALSE(has(notemp, "lma.gamma"));
}

TEST(Ablation, NoTemperatureMeansTauExactlyOne) {
  LainModel m(small_model("no-temp"), 300, 150, 1);
  const auto xs = synthetic_batch(300, {1, 150, 900}, 2);
  Tape t;
  auto out = m.forward(t, lain::testing::pointers(xs));
  for (double tau : out.tau) EXPECT_EQ(tau, 1.0);
  std::vector<AttentionTrace> tr;
  probs(m, xs, &tr);
  for (const auto& x : tr) EXPECT_EQ(x.tau, 1.0);
}

TEST(Ablation, NoPromptsMeansRawSequenceLengths) {
  LainModel m(small_model("no-lcp"), 300, 150, 1);
  const auto xs = synthetic_batch(300, {0, 3, 150}, 2);
  std::vector<AttentionTrace> tr;
  probs(m, xs, &tr);
  EXPECT_TRUE(tr[0].degenerate);  // nothing to attend without prompts
  EXPECT_EQ(tr[2].weights.size(), 3u);
  EXPECT_EQ(tr[5].weights.size(), 7u);
}

TEST(Ablation, NeutralLengthPartsReproduceTheBaseline) {
  const std::size_t V = 300, d = 8;
  LainModel base(small_model("baseline"), V, 150, 21);
  LainModel m(small_model("no-lcp"), V, 150, 22);
  // shared weights from the baseline; h_len's head rows are arbitrary
  m.params().for_each([&](Parameter& p) {
    if (!base.params().contains(p.name)) return;
    const Tensor& src = base.params().get(p.name).tensor;
    if (src.shape() == p.tensor.shape()) {
      p.tensor = src;
    } else {
      std::copy(src.data().begin(), src.data().end(), p.tensor.data().begin());
    }
  });
  // zero length encoder gives h_len = 0, [I|0] projections and gamma 0 give plain attention
  m.params().for_each([&](Parameter& p) {
    if (p.name.starts_with("sle.")) p.tensor = Tensor(p.tensor.shape());
  });
  for (const char* w : {"lma.w_q", "lma.w_k"}) {
    Tensor& x = m.params().get(w).tensor;
    x = Tensor(x.shape());
    for (std::size_t i = 0; i < d; ++i) x.at(i, i) = 1.0;
  }
  m.params().get("lma.gamma").tensor[0] = 0.0;

  const auto xs = synthetic_batch(V, {4, 80, 150, 600}, 9);
  const auto pb = probs(base, xs), pm = probs(m, xs);
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_NEAR(pm[i], pb[i], 1e-12);
}

TEST(ParameterCount, DefaultConfigMatchesHandCount) {
  const std::size_t V = 5001;
  ModelConfig c;  // d 64, d_f 32, hidden 512, k 4, head 128 x 64
  LainModel m(c, V, 147, 0);
  const auto r = m.count_parameters();
  const std::size_t shared = V * 64 + (4 * 64 * 128 + 128) + (128 * 64 + 64) + (64 + 1) - 64 * 128;
  const std::size_t sle = 32 + (64 * 512 + 512) + 2 * 512 + (512 * 512 + 512) + (512 * 64 + 64) + 64 * 128;
  const std::size_t lcp = (64 * 512 + 512) + (512 * 256 + 256);
  const std::size_t lma = (64 * 64 + 64) + 2 * (128 * 64) + 2;
  EXPECT_EQ(r.shared, shared);
  EXPECT_EQ(r.sle, sle);
  EXPECT_EQ(r.lcp, lcp);
  EXPECT_EQ(r.lma, lma);
  EXPECT_EQ(r.total, m.params().scalar_count());
  EXPECT_DOUBLE_EQ(r.lain_fraction, static_cast<double>(sle + lcp + lma) / static_cast<double>(r.total));
  EXPECT_EQ(m.length_encoder()->omega().tensor.size(), 32u);

  const auto e = LainModel::expected_parameters(c, V);
  EXPECT_EQ(e.shared, r.shared);
  EXPECT_EQ(e.total, r.total);
  EXPECT_FALSE(r.formula.empty());
}

TEST(ParameterCount, EveryVariantMatchesClosedForm) {
  for (const auto& v : variant_names()) {
    for (std::vector<std::size_t> head : {std::vector<std::size_t>{}, std::vector<std::size_t>{12, 6}}) {
      ModelConfig c = small_model(v);
      c.head_dims = head;
      LainModel m(c, 77, 20, 0);
      const auto r = m.count_parameters(), e = LainModel::expected_parameters(c, 77);
      EXPECT_EQ(r.total, m.params().scalar_count()) << v;
      EXPECT_EQ(r.shared, e.shared) << v;
      EXPECT_EQ(r.sle, e.sle) << v;
      EXPECT_EQ(r.lcp, e.lcp) << v;
      EXPECT_EQ(r.lma, e.lma) << v;
    }
  }
  ModelConfig c = small_model("baseline");
  c.head_dims = {};
  EXPECT_EQ(LainModel(c, 30, 5, 0).count_parameters().lain_fraction, 0.0);
}

TEST(Checkpoint, RoundTripIsBitwiseStable) {
  const auto dir = scratch("ckpt");
  LainModel m(small_model(), 300, 123.5, 8);
  m.params().get("lma.gamma").tensor[0] = 0.123456789012345678;
  const auto path = (dir / "model.json").string();
  m.save(path);
  LainModel back = LainModel::load(path);
  EXPECT_EQ(back.digest(), m.digest());
  EXPECT_EQ(back.L0(), 123.5);
  const auto xs = synthetic_batch(300, {5, 200}, 1);
  EXPECT_EQ(probs(back, xs), probs(m, xs));
  back.save((dir / "again.json").string());
  EXPECT_EQ(LainModel::load((dir / "again.json").string()).digest(), m.digest());
}

TEST(Checkpoint, ShapeMismatchAndCorruption) {
  const auto dir = scratch("bad");
  LainModel m(small_model(), 300, 10, 8);
  auto j = m.checkpoint_json();
  j["config"]["d"] = 16;
  EXPECT_THROW(LainModel::from_json(j), CheckpointError);
  j = m.checkpoint_json();
  j["format"] = "other";
  EXPECT_THROW(LainModel::from_json(j), CheckpointError);
  j = m.checkpoint_json();
  j["parameters"].erase(j["parameters"].begin());
  EXPECT_THROW(LainModel::from_json(j), CheckpointError);
  std::ofstream(dir / "junk.json") << "{not json";
  EXPECT_THROW(LainModel::load((dir / "junk.json").string()), CheckpointError);
  EXPECT_THROW(LainModel::load((dir / "missing.json").string()), CheckpointError);
}

TEST(Checkpoint, CopyMatchingTransfersSharedWeights) {
  LainModel a(small_model("full"), 300, 10, 1);
  LainModel b(small_model("no-temp"), 300, 10, 2);
  const std::size_t n = b.copy_matching(a);
  EXPECT_EQ(n, b.params().size());
  EXPECT_EQ(b.params().get("embedding").tensor.data(), a.params().get("embedding").tensor.data());
}

TEST(Forward, DropoutOnlyWhileTraining) {
  ModelConfig c = small_model();
  c.dropout = 0.5;
  LainModel m(c, 300, 150, 2);
  const auto xs = synthetic_batch(300, {5, 60, 150}, 4);
  const auto ptrs = lain::testing::pointers(xs);
  Tape a, b;
  ForwardOptions train;
  train.training = true;
  const auto ya = a.value(m.forward(a, ptrs, train).probs).data();
  const auto yb = b.value(m.forward(b, ptrs, train).probs).data();
  EXPECT_NE(ya, yb);
  EXPECT_EQ(probs(m, xs), probs(m, xs));
}
