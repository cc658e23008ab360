#include <gtest/gtest.h>

#include <cmath>

#include "lain/metrics.hpp"
#include "test_util.hpp"

using namespace lain;

namespace {

// Fraction of (positive, negative) pairs ranked correctly, ties count half.
std::optional<double> pairwise_auc(const std::vector<double>& s, const std::vector<double>& y) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] < 0.5 || y[j] > 0.5) continue;
      pairs += 1.0;
      good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  if (pairs == 0.0) return std::nullopt;
  return good / pairs;
}

// Mean absolute difference form of the Gini coefficient.
double mad_gini(const std::vector<double>& w) {
  const double n = static_cast<double>(w.size());
  double mean = 0.0, d = 0.0;
  for (double x : w) mean += x / n;
  for (double a : w)
    for (double b : w) d += std::abs(a - b);
  return d / (2.0 * n * n * mean);
}

Sample sample(const std::string& user, std::int64_t length, double label) {
  Sample s;
  s.user_id = user;
  s.length = length;
  s.label = label;
  return s;
}

AttentionTrace trace(std::int64_t length, std::vector<double> w, bool degenerate = false) {
  AttentionTrace t;
  t.user_length = length;
  t.weights = std::move(w);
  t.degenerate = degenerate;
  return t;
}

const std::vector<std::int64_t> kBounds{100, 200};

}  // namespace

TEST(Auc, Examples) {
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.1}, std::vector<double>{1, 0}), 1.0);
  EXPECT_EQ(auc(std::vector<double>{0.1, 0.9}, std::vector<double>{1, 0}), 0.0);
  EXPECT_EQ(auc(std::vector<double>{0.5, 0.5}, std::vector<double>{1, 0}), 0.5);
  EXPECT_FALSE(auc(std::vector<double>{0.2, 0.4}, std::vector<double>{1, 1}));
  EXPECT_FALSE(auc(std::vector<double>{}, std::vector<double>{}));
  EXPECT_THROW(auc(std::vector<double>{0.2}, std::vector<double>{1, 0}), DimensionError);
}

TEST(Auc, MatchesPairwiseCount) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(trial < 190 ? 40 : 500);
    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      // a coarse grid forces plenty of ties
      s[i] = std::floor(rng.uniform(0, 10)) / 10.0;
      y[i] = rng.uniform(0, 1) < 0.4 ? 1.0 : 0.0;
    }
    const auto a = auc(s, y), b = pairwise_auc(s, y);
    ASSERT_EQ(a.has_value(), b.has_value());
    if (a) EXPECT_NEAR(*a, *b, 1e-12) << "n=" << n;
  }
}

TEST(Auc, InvariantUnderMonotoneTransforms) {
  Rng rng(3);
  std::vector<double> s(300), y(300);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform(-2, 2);
    y[i] = rng.uniform(0, 1) < 0.5 ? 1.0 : 0.0;
  }
  const double base = *auc(s, y);
  std::vector<double> e(s), a(s);
  for (double& x : e) x = std::exp(x);
  for (double& x : a) x = 3.0 * x + 7.0;
  EXPECT_NEAR(*auc(e, y), base, 1e-12);
  EXPECT_NEAR(*auc(a, y), base, 1e-12);
}

TEST(Gauc, SingleUserEqualsAuc) {
  const std::vector<std::string> u(4, "a");
  const std::vector<double> s{0.1, 0.7, 0.4, 0.9}, y{0, 1, 1, 0};
  EXPECT_NEAR(*gauc(u, s, y), *auc(s, y), 1e-15);
}

TEST(Gauc, UniformAverageOverEligibleUsers) {
  const std::vector<std::string> u{"a", "a", "b", "b", "c", "c"};
  const std::vector<double> s{0.9, 0.1, 0.5, 0.5, 0.3, 0.8}, y{1, 0, 1, 0, 1, 1};
  // c holds one class only and is skipped
  EXPECT_NEAR(*gauc(u, s, y), 0.75, 1e-15);
}

TEST(Gauc, NoEligibleUser) {
  const std::vector<std::string> u{"a", "b"};
  EXPECT_FALSE(gauc(u, std::vector<double>{0.2, 0.3}, std::vector<double>{1, 0}));
  EXPECT_THROW(gauc(u, std::vector<double>{0.2}, std::vector<double>{1, 0}), DimensionError);
}

TEST(Gauc, MatchesPerUserOracle) {
  Rng rng(8);
  std::vector<std::string> u;
  std::vector<double> s, y;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (int k = 0; k < 30; ++k) {
    const std::string id = "u" + std::to_string(k);
    const std::size_t n = 1 + rng.below(12);
    for (std::size_t i = 0; i < n; ++i) {
      u.push_back(id);
      s.push_back(rng.uniform(0, 1));
      y.push_back(rng.uniform(0, 1) < 0.5 ? 1.0 : 0.0);
      groups[id].first.push_back(s.back());
      groups[id].second.push_back(y.back());
    }
  }
  double sum = 0.0;
  int n = 0;
  for (const auto& [id, g] : groups) {
    if (auto a = pairwise_auc(g.first, g.second)) {
      sum += *a;
      ++n;
    }
  }
  ASSERT_GT(n, 0);
  EXPECT_NEAR(*gauc(u, s, y), sum / n, 1e-12);
}

TEST(Gini, Examples) {
  EXPECT_NEAR(*gini(std::vector<double>(7, 0.3)), 0.0, 1e-15);
  EXPECT_NEAR(*gini(std::vector<double>{0, 0, 1, 0, 0}), 0.8, 1e-15);
  EXPECT_NEAR(*gini(std::vector<double>{0.1, 0.2, 0.3, 0.4}), 0.25, 1e-15);
  EXPECT_FALSE(gini(std::vector<double>{}));
  EXPECT_THROW(gini(std::vector<double>{0.5, -0.1}), DomainError);
  EXPECT_THROW(gini(std::vector<double>{0, 0}), DomainError);
}

TEST(Gini, MatchesMeanAbsoluteDifference) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> w(1 + rng.below(60));
    for (double& x : w) x = rng.uniform(0, 1);
    EXPECT_NEAR(*gini(w), mad_gini(w), 1e-12);
  }
}

TEST(Gini, PermutationAndScaleInvariant) {
  Rng rng(5);
  std::vector<double> w(25);
  for (double& x : w) x = rng.uniform(0, 2);
  const double g = *gini(w);
  std::vector<double> r(w.rbegin(), w.rend()), scaled(w);
  for (double& x : scaled) x *= 13.0;
  EXPECT_NEAR(*gini(r), g, 1e-14);
  EXPECT_NEAR(*gini(scaled), g, 1e-14);
}

TEST(Gini, FallsAsTemperatureRises) {
  Rng rng(9);
  std::vector<double> logits(40);
  for (double& x : logits) x = rng.uniform(-3, 3);
  double prev = 1.0;
  for (double tau = 0.5; tau <= 8.0; tau += 0.25) {
    std::vector<double> w(logits.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(logits[i] / tau);
    const double g = *gini(w);
    EXPECT_LE(g, prev + 1e-15) << "tau=" << tau;
    prev = g;
  }
}

TEST(Entropy, Examples) {
  EXPECT_NEAR(*entropy(std::vector<double>{0, 1, 0}), 0.0, 1e-15);
  EXPECT_NEAR(*entropy(std::vector<double>(8, 0.125)), std::log(8.0), 1e-14);
  EXPECT_NEAR(*entropy(std::vector<double>{0.5, 0.5, 0, 0}), std::log(2.0), 1e-15);
  EXPECT_NEAR(*entropy(std::vector<double>{2, 2}), std::log(2.0), 1e-15);
  EXPECT_THROW(entropy(std::vector<double>{1, -1, 1}), DomainError);
}

TEST(BucketedReport, HandComputedTwoBuckets) {
  const std::vector<Sample> s{sample("a", 10, 1), sample("a", 20, 0), sample("b", 30, 1),
                              sample("c", 250, 0), sample("c", 300, 1), sample("d", 400, 0)};
  const std::vector<double> p{0.8, 0.3, 0.2, 0.6, 0.7, 0.1};
  const std::vector<AttentionTrace> t{trace(10, {0, 0, 1}), trace(30, {1, 1, 1}), trace(250, {0.1, 0.2, 0.3, 0.4}),
                                      trace(300, {5, 5}, true)};
  const auto r = bucketed_report(s, p, t, kBounds);

  const auto& sh = r.buckets.at("short");
  EXPECT_EQ(sh.n_samples, 3u);
  EXPECT_EQ(sh.n_users, 2u);
  // positives 0.8 and 0.2 vs negative 0.3
  EXPECT_NEAR(*sh.auc, 0.5, 1e-15);
  EXPECT_NEAR(*sh.gauc, 1.0, 1e-15);
  EXPECT_NEAR(*sh.logloss, -(std::log(0.8) + std::log(0.7) + std::log(0.2)) / 3.0, 1e-12);
  EXPECT_EQ(sh.n_traces, 2u);
  EXPECT_NEAR(*sh.mean_gini, (2.0 / 3.0 + 0.0) / 2.0, 1e-15);
  EXPECT_NEAR(*sh.mean_entropy, std::log(3.0) / 2.0, 1e-15);

  const auto& lg = r.buckets.at("long");
  EXPECT_EQ(lg.n_samples, 3u);
  EXPECT_NEAR(*lg.auc, 1.0, 1e-15);
  EXPECT_NEAR(*lg.gauc, 1.0, 1e-15);
  EXPECT_EQ(lg.n_traces, 1u);  // the degenerate trace is skipped
  EXPECT_NEAR(*lg.mean_gini, 0.25, 1e-15);

  const auto& md = r.buckets.at("medium");
  EXPECT_EQ(md.n_samples, 0u);
  EXPECT_FALSE(md.auc);
  EXPECT_FALSE(md.gauc);
  EXPECT_FALSE(md.logloss);
  EXPECT_FALSE(md.mean_gini);
  EXPECT_FALSE(r.gini_variance);
  EXPECT_FALSE(r.gini_range);

  const auto& all = r.buckets.at("overall");
  EXPECT_EQ(all.n_samples, 6u);
  EXPECT_EQ(all.n_users, 4u);
  EXPECT_NEAR(*all.auc, *pairwise_auc(p, {1, 0, 1, 0, 1, 0}), 1e-15);
  EXPECT_EQ(all.n_traces, 3u);
}

TEST(BucketedReport, SingleBucketEqualsOverall) {
  Rng rng(4);
  std::vector<Sample> s;
  std::vector<double> p;
  std::vector<AttentionTrace> t;
  for (int i = 0; i < 50; ++i) {
    s.push_back(sample("u" + std::to_string(i % 7), 150 + i, rng.uniform(0, 1) < 0.5 ? 1 : 0));
    p.push_back(rng.uniform(0.01, 0.99));
    t.push_back(trace(150 + i, {rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)}));
  }
  const auto r = bucketed_report(s, p, t, kBounds);
  const auto& m = r.buckets.at("medium");
  const auto& o = r.buckets.at("overall");
  EXPECT_EQ(m.n_samples, o.n_samples);
  EXPECT_EQ(m.n_users, o.n_users);
  EXPECT_EQ(*m.auc, *o.auc);
  EXPECT_EQ(*m.gauc, *o.gauc);
  EXPECT_EQ(*m.logloss, *o.logloss);
  EXPECT_EQ(*m.mean_gini, *o.mean_gini);
  EXPECT_EQ(r.buckets.at("short").n_samples + r.buckets.at("long").n_samples, 0u);
}

TEST(BucketedReport, GiniVarianceOfBucketMeans) {
  Rng rng(6);
  std::vector<Sample> s;
  std::vector<double> p;
  std::vector<AttentionTrace> t;
  std::map<int, std::pair<double, int>> sums;
  for (int i = 0; i < 90; ++i) {
    const std::int64_t L = 1 + static_cast<std::int64_t>(rng.below(400));
    s.push_back(sample("u" + std::to_string(i), L, i % 2));
    p.push_back(rng.uniform(0.01, 0.99));
    std::vector<double> w(5);
    for (double& x : w) x = std::pow(rng.uniform(0, 1), 3.0);
    t.push_back(trace(L, w));
    const int b = L < 100 ? 0 : L < 200 ? 1 : 2;
    sums[b].first += mad_gini(w);
    sums[b].second += 1;
  }
  const auto r = bucketed_report(s, p, t, kBounds);
  std::vector<double> means;
  for (int b = 0; b < 3; ++b) means.push_back(sums[b].first / sums[b].second);
  const double mu = (means[0] + means[1] + means[2]) / 3.0;
  double var = 0.0;
  for (double m : means) var += (m - mu) * (m - mu) / 3.0;
  ASSERT_TRUE(r.gini_variance);
  EXPECT_NEAR(*r.gini_variance, var, 1e-14);
  EXPECT_NEAR(*r.gini_range, *std::max_element(means.begin(), means.end()) - *std::min_element(means.begin(), means.end()),
              1e-14);
  std::size_t total = 0;
  for (const char* b : {"short", "medium", "long"}) total += r.buckets.at(b).n_samples;
  EXPECT_EQ(total, r.buckets.at("overall").n_samples);
}

TEST(BucketedReport, MisalignedPredictions) {
  const std::vector<Sample> s{sample("a", 1, 1)};
  EXPECT_THROW(bucketed_report(s, std::vector<double>{0.1, 0.2}, {}, kBounds), DimensionError);
}

TEST(BucketedReport, JsonAndCsvRoundTrip) {
  const std::vector<Sample> s{sample("a", 10, 1), sample("a", 20, 0), sample("b", 150, 1), sample("b", 160, 0),
                              sample("c", 250, 0), sample("c", 300, 1)};
  const std::vector<double> p{0.8, 0.3, 0.2, 0.6, 0.7, 0.1};
  const std::vector<AttentionTrace> t{trace(10, {0, 0, 1}), trace(150, {1, 2}), trace(250, {0.1, 0.2, 0.3, 0.4})};
  auto r = bucketed_report(s, p, t, kBounds);
  r.dataset_digest = "abc";
  r.config = {{"variant", "full"}};
  const auto j = to_json(r);
  const auto back = report_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(to_csv(back), to_csv(r));
  EXPECT_TRUE(j["gini_variance"].is_number());

  const std::string csv = to_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "bucket,n_samples,n_users,auc,gauc,logloss,mean_gini,mean_entropy");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(BucketedReport, UndefinedMetricsAreOmitted) {
  const std::vector<Sample> s{sample("a", 10, 1)};
  const auto j = to_json(bucketed_report(s, std::vector<double>{0.4}, {}, kBounds));
  EXPECT_FALSE(j["buckets"]["short"].contains("auc"));
  EXPECT_TRUE(j["buckets"]["short"].contains("logloss"));
  EXPECT_FALSE(j["buckets"]["long"].contains("logloss"));
  EXPECT_TRUE(j["gini_variance"].is_null());
  const auto back = report_from_json(j);
  EXPECT_FALSE(back.buckets.at("short").auc);
  EXPECT_EQ(back.buckets.at("short").n_samples, 1u);
}
