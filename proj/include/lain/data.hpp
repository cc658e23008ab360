#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "lain/attention.hpp"
#include "lain/model.hpp"
#include "lain/tensor.hpp"

namespace lain {

struct SpecError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : DataError {
  std::size_t line;
  ParseError(std::size_t line_no, const std::string& what)
      : DataError("line " + std::to_string(line_no) + ": " + what), line(line_no) {}
};

struct CohortSpec {
  std::string name;
  double user_fraction = 0.0;
  double mean_length = 0.0;
  double std_length = 0.0;
  double base_click_rate = 0.0;
  double click_rate_std = 0.0;
  double impressions_per_user = 0.0;
  int interest_dims = 1;
  double behavior_noise = 0.0;  // probability a behavior ignores the user's interests
};

/// Cohorts of the EBNeRD-small user analysis (short / medium / long).
inline std::vector<CohortSpec> default_cohorts() {
  return {
      {"short", 0.57, 37.1, 26.9, 0.0828, 0.0419, 5.5, 2, 0.515},
      {"medium", 0.18, 144.2, 28.7, 0.0860, 0.0304, 13.4, 4, 0.354},
      {"long", 0.25, 401.4, 183.3, 0.0941, 0.0252, 32.0, 5, 0.268},
  };
}

struct GeneratorConfig {
  std::vector<CohortSpec> cohorts = default_cohorts();
  std::size_t n_users = 2000;
  std::size_t n_items = 5000;
  std::uint64_t seed = 0;
  std::size_t n_topics = 20;
  std::size_t latent_dim = 16;
  double topic_spread = 0.6;        // item scatter around its topic center
  double affinity_weight = 2.5;     // logit per unit cosine affinity
  double length_effect = 1.2;       // logit per unit log(1 + L) within a cohort
  double on_interest_targets = 0.5; // share of impressions drawn from the user's topics
  std::size_t min_impressions = 3;
  std::vector<std::int64_t> bucket_bounds{100, 200};
  std::int64_t max_len = 1000;
};

inline void validate(const GeneratorConfig& g) {
  if (g.cohorts.size() != 3) throw SpecError("exactly three cohorts (short, medium, long) are required");
  double total = 0.0;
  for (const auto& c : g.cohorts) {
    const std::string who = "cohort '" + c.name + "': ";
    if (!(c.user_fraction > 0.0 && c.user_fraction <= 1.0)) throw SpecError(who + "user_fraction must lie in (0, 1]");
    if (!(c.mean_length > 0.0)) throw SpecError(who + "mean_length must be positive");
    if (!(c.std_length > 0.0)) throw SpecError(who + "std_length must be positive");
    if (!(c.base_click_rate > 0.0 && c.base_click_rate < 1.0)) throw SpecError(who + "base_click_rate must lie in (0, 1)");
    if (!(c.click_rate_std >= 0.0 && c.click_rate_std < 1.0)) throw SpecError(who + "click_rate_std must lie in [0, 1)");
    if (!(c.impressions_per_user > 0.0)) throw SpecError(who + "impressions_per_user must be positive");
    if (c.interest_dims < 1) throw SpecError(who + "interest_dims must be >= 1");
    if (!(c.behavior_noise >= 0.0 && c.behavior_noise <= 1.0)) throw SpecError(who + "behavior_noise must lie in [0, 1]");
    total += c.user_fraction;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw SpecError("cohort user fractions sum to " + std::to_string(total) + ", expected 1");
  }
  if (g.bucket_bounds.size() != 2 || g.bucket_bounds[0] < 2 || g.bucket_bounds[0] >= g.bucket_bounds[1] ||
      g.bucket_bounds[1] > g.max_len) {
    throw SpecError("bucket bounds must satisfy 2 <= b1 < b2 <= max_len");
  }
  const double lo[3] = {1.0, static_cast<double>(g.bucket_bounds[0]), static_cast<double>(g.bucket_bounds[1])};
  const double hi[3] = {static_cast<double>(g.bucket_bounds[0] - 1), static_cast<double>(g.bucket_bounds[1] - 1),
                        static_cast<double>(g.max_len)};
  for (int i = 0; i < 3; ++i) {
    const auto& c = g.cohorts[static_cast<std::size_t>(i)];
    if (c.mean_length <= lo[i] || c.mean_length >= hi[i]) {
      throw SpecError("cohort '" + c.name + "': mean_length " + std::to_string(c.mean_length) +
                      " lies outside its length bucket");
    }
  }
  if (g.n_users == 0) throw SpecError("n_users must be positive");
  if (g.n_items < g.n_topics || g.n_topics == 0) throw SpecError("need at least one item per topic");
  if (g.latent_dim == 0) throw SpecError("latent_dim must be positive");
  if (g.min_impressions < 1) throw SpecError("min_impressions must be >= 1");
}

inline CohortSpec cohort_from_json(const nlohmann::json& j) {
  CohortSpec c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    if (k == "name") c.name = v.get<std::string>();
    else if (k == "user_fraction") c.user_fraction = v.get<double>();
    else if (k == "mean_length") c.mean_length = v.get<double>();
    else if (k == "std_length") c.std_length = v.get<double>();
    else if (k == "base_click_rate") c.base_click_rate = v.get<double>();
    else if (k == "click_rate_std") c.click_rate_std = v.get<double>();
    else if (k == "impressions_per_user") c.impressions_per_user = v.get<double>();
    else if (k == "interest_dims") c.interest_dims = v.get<int>();
    else if (k == "behavior_noise") c.behavior_noise = v.get<double>();
    else throw SpecError("unknown cohort key: " + k);
  }
  return c;
}

inline nlohmann::json to_json(const CohortSpec& c) {
  return {{"name", c.name},
          {"user_fraction", c.user_fraction},
          {"mean_length", c.mean_length},
          {"std_length", c.std_length},
          {"base_click_rate", c.base_click_rate},
          {"click_rate_std", c.click_rate_std},
          {"impressions_per_user", c.impressions_per_user},
          {"interest_dims", c.interest_dims},
          {"behavior_noise", c.behavior_noise}};
}

/// Accepts either a JSON array of cohorts or {"cohorts": [...]}.
inline std::vector<CohortSpec> load_cohort_spec(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw SpecError("cannot read spec file " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SpecError("malformed spec file " + path + ": " + e.what());
  }
  const nlohmann::json& arr = j.is_object() ? j.at("cohorts") : j;
  if (!arr.is_array()) throw SpecError("spec file must hold a list of cohorts");
  std::vector<CohortSpec> out;
  for (const auto& c : arr) out.push_back(cohort_from_json(c));
  return out;
}

struct DatasetBundle {
  std::vector<Sample> train, valid, test;
  std::size_t vocab_size = 0;
  double L0 = 0.0;
  std::map<std::string, std::string> user_cohort;  // synthetic data only
  nlohmann::json provenance = nlohmann::json::object();
  std::size_t unsorted_events = 0;  // events that arrived out of time order

  std::size_t n_samples() const { return train.size() + valid.size() + test.size(); }
};

inline void hash_sample(Fnv1a& h, const Sample& s) {
  h.str(s.user_id);
  h.i64(s.target_item);
  h.i64(s.timestamp);
  h.i64(s.length);
  h.f64(s.label);
  h.u64(s.behaviors.size());
  for (auto b : s.behaviors) h.i64(b);
}

/// FNV-1a over the canonical content of all three splits.
inline std::uint64_t bundle_digest(const DatasetBundle& b) {
  Fnv1a h;
  h.u64(b.vocab_size);
  for (const auto* split : {&b.train, &b.valid, &b.test}) {
    h.u64(split->size());
    for (const auto& s : *split) hash_sample(h, s);
  }
  return h.value();
}

/// Mean over train users of their largest train-time history length.
inline double compute_L0(const std::vector<Sample>& train) {
  std::unordered_map<std::string, std::int64_t> longest;
  std::vector<std::string> order;
  for (const auto& s : train) {
    auto [it, fresh] = longest.try_emplace(s.user_id, s.length);
    if (fresh) order.push_back(s.user_id);
    else it->second = std::max(it->second, s.length);
  }
  if (order.empty()) throw DataError("no users in the training split");
  double sum = 0.0;
  for (const auto& u : order) sum += static_cast<double>(longest[u]);
  return sum / static_cast<double>(order.size());
}

namespace detail {

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double truncated_mean(double mu, double sd, double lo, double hi) {
  const double a = (lo - mu) / sd, b = (hi - mu) / sd;
  const double z = normal_cdf(b) - normal_cdf(a);
  if (z < 1e-300) return mu < lo ? lo : hi;
  return mu + sd * (normal_pdf(a) - normal_pdf(b)) / z;
}

/// Location of a normal truncated to [lo, hi] whose mean is `target`.
inline double calibrate_location(double target, double sd, double lo, double hi) {
  double a = lo - 20.0 * sd, b = hi + 20.0 * sd;
  for (int it = 0; it < 200; ++it) {
    const double m = 0.5 * (a + b);
    (truncated_mean(m, sd, lo, hi) < target ? a : b) = m;
  }
  return 0.5 * (a + b);
}

inline std::int64_t draw_truncated(Rng& rng, double mu, double sd, double lo, double hi) {
  for (int tries = 0; tries < 100000; ++tries) {
    const double x = rng.normal(mu, sd);
    if (x >= lo && x <= hi) return static_cast<std::int64_t>(std::lround(x));
  }
  throw SpecError("length distribution puts no mass in its bucket");
}

inline std::vector<double> random_unit(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double n = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    n += x * x;
  }
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
  return v;
}

inline void normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0) for (auto& x : v) x /= n;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Chooses, from impressions in time order, the test (last) and valid
/// (second-last) samples per user; the rest train.
inline void temporal_split(std::vector<Sample>&& per_user, DatasetBundle& out) {
  const std::size_t n = per_user.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (i + 1 == n) out.test.push_back(std::move(per_user[i]));
    else if (i + 2 == n) out.valid.push_back(std::move(per_user[i]));
    else out.train.push_back(std::move(per_user[i]));
  }
}

}  // namespace detail

/// Length-imbalanced synthetic CTR data. Each user gets a background
/// behavior history whose length follows the cohort's normal distribution
/// truncated to the cohort's length bucket, then a run of impressions;
/// clicked impressions extend the history.
inline DatasetBundle generate_synthetic(const GeneratorConfig& g) {
  validate(g);
  const std::size_t D = g.latent_dim;
  const auto& cs = g.cohorts;

  // Items scattered around topic centers.
  Rng item_rng(seed_for(g.seed, "items"));
  std::vector<std::vector<double>> centers;
  for (std::size_t t = 0; t < g.n_topics; ++t) centers.push_back(detail::random_unit(item_rng, D));
  std::vector<std::vector<double>> item_vec(g.n_items + 1);
  std::vector<std::vector<std::int64_t>> topic_items(g.n_topics);
  for (std::size_t i = 1; i <= g.n_items; ++i) {
    const std::size_t t = i <= g.n_topics ? i - 1 : item_rng.below(g.n_topics);
    std::vector<double> v = centers[t];
    for (auto& x : v) x += g.topic_spread * item_rng.normal() / std::sqrt(static_cast<double>(D));
    detail::normalize(v);
    item_vec[i] = std::move(v);
    topic_items[t].push_back(static_cast<std::int64_t>(i));
  }

  // Stratified cohort assignment (largest remainder), then shuffled.
  std::vector<std::size_t> counts(cs.size());
  {
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < cs.size(); ++c) {
      const double exact = cs[c].user_fraction * static_cast<double>(g.n_users);
      counts[c] = static_cast<std::size_t>(std::floor(exact));
      assigned += counts[c];
      rem.emplace_back(-(exact - std::floor(exact)), c);
    }
    std::sort(rem.begin(), rem.end());
    for (std::size_t i = 0; assigned < g.n_users; ++i, ++assigned) ++counts[rem[i % rem.size()].second];
  }
  std::vector<std::size_t> cohort_of;
  for (std::size_t c = 0; c < cs.size(); ++c) cohort_of.insert(cohort_of.end(), counts[c], c);
  Rng user_rng(seed_for(g.seed, "users"));
  user_rng.shuffle(cohort_of);

  const double lo[3] = {1.0, static_cast<double>(g.bucket_bounds[0]), static_cast<double>(g.bucket_bounds[1])};
  const double hi[3] = {static_cast<double>(g.bucket_bounds[0] - 1), static_cast<double>(g.bucket_bounds[1] - 1),
                        static_cast<double>(g.max_len)};
  std::vector<double> loc(cs.size());
  for (std::size_t c = 0; c < cs.size(); ++c) {
    loc[c] = detail::calibrate_location(cs[c].mean_length, cs[c].std_length, lo[c] - 0.5, hi[c] + 0.5);
  }

  struct Impression {
    std::int64_t item;
    double logit;  // without the cohort intercept
  };
  struct User {
    std::size_t cohort;
    std::vector<std::int64_t> background;
    std::vector<Impression> impressions;
    double log_len;
  };
  std::vector<User> users(g.n_users);
  for (std::size_t u = 0; u < g.n_users; ++u) {
    User& us = users[u];
    us.cohort = cohort_of[u];
    const CohortSpec& c = cs[us.cohort];
    Rng rng(seed_for(seed_for(g.seed, "user"), std::to_string(u)));

    std::vector<std::size_t> topics(g.n_topics);
    std::iota(topics.begin(), topics.end(), std::size_t{0});
    rng.shuffle(topics);
    const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(c.interest_dims), g.n_topics);
    topics.resize(m);
    std::vector<double> w(m);
    for (auto& x : w) x = rng.uniform(0.5, 1.5);
    const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
    std::vector<double> interest(D, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      w[i] /= wsum;
      for (std::size_t k = 0; k < D; ++k) interest[k] += w[i] * centers[topics[i]][k];
    }
    detail::normalize(interest);
    auto pick_topic = [&]() {
      double r = rng.uniform(), acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        acc += w[i];
        if (r < acc) return topics[i];
      }
      return topics[m - 1];
    };
    auto pick_item = [&](std::size_t t) {
      const auto& pool = topic_items[t];
      return pool[rng.below(pool.size())];
    };

    const std::int64_t L = detail::draw_truncated(rng, loc[us.cohort], c.std_length, lo[us.cohort] - 0.5,
                                                  hi[us.cohort] + 0.5);
    us.background.reserve(static_cast<std::size_t>(L));
    for (std::int64_t j = 0; j < L; ++j) {
      const std::size_t t = rng.bernoulli(c.behavior_noise) ? rng.below(g.n_topics) : pick_topic();
      us.background.push_back(pick_item(t));
    }
    us.log_len = std::log1p(static_cast<double>(L));

    const double p = c.base_click_rate;
    const double user_effect = rng.normal(0.0, c.click_rate_std / (p * (1.0 - p)));
    const std::size_t n_imp = std::max<std::size_t>(g.min_impressions, rng.poisson(c.impressions_per_user));
    for (std::size_t j = 0; j < n_imp; ++j) {
      const std::int64_t item = rng.bernoulli(g.on_interest_targets)
                                    ? pick_item(pick_topic())
                                    : static_cast<std::int64_t>(1 + rng.below(g.n_items));
      const double aff = detail::dot(interest, item_vec[static_cast<std::size_t>(item)]);
      us.impressions.push_back({item, g.affinity_weight * aff + user_effect});
    }
  }

  // Within-cohort activity effect, centered per cohort, then intercepts
  // calibrated so the expected click rate equals the cohort's target.
  std::vector<double> mean_log(cs.size(), 0.0), n_in(cs.size(), 0.0);
  for (const auto& us : users) {
    mean_log[us.cohort] += us.log_len;
    n_in[us.cohort] += 1.0;
  }
  for (std::size_t c = 0; c < cs.size(); ++c) mean_log[c] /= std::max(1.0, n_in[c]);
  for (auto& us : users) {
    for (auto& im : us.impressions) im.logit += g.length_effect * (us.log_len - mean_log[us.cohort]);
  }
  std::vector<double> intercept(cs.size(), 0.0);
  for (std::size_t c = 0; c < cs.size(); ++c) {
    double a = -30.0, b = 30.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (a + b);
      double sum = 0.0, n = 0.0;
      for (const auto& us : users) {
        if (us.cohort != c) continue;
        for (const auto& im : us.impressions) {
          sum += sigmoid(im.logit + mid);
          n += 1.0;
        }
      }
      (n > 0 && sum / n < cs[c].base_click_rate ? a : b) = mid;
    }
    intercept[c] = 0.5 * (a + b);
  }

  DatasetBundle out;
  out.vocab_size = g.n_items + 1;
  Rng label_rng(seed_for(g.seed, "labels"));
  for (std::size_t u = 0; u < g.n_users; ++u) {
    User& us = users[u];
    const std::string uid = std::to_string(u);
    out.user_cohort[uid] = cs[us.cohort].name;
    std::vector<std::int64_t> history = std::move(us.background);
    std::int64_t ts = static_cast<std::int64_t>(history.size());
    std::vector<Sample> samples;
    for (const auto& im : us.impressions) {
      Sample s;
      s.user_id = uid;
      s.target_item = im.item;
      s.behaviors = history;
      s.length = static_cast<std::int64_t>(history.size());
      s.timestamp = ++ts;
      s.label = label_rng.bernoulli(sigmoid(im.logit + intercept[us.cohort])) ? 1.0 : 0.0;
      if (s.label > 0.5) history.push_back(im.item);
      samples.push_back(std::move(s));
    }
    detail::temporal_split(std::move(samples), out);
  }
  out.L0 = compute_L0(out.train);

  nlohmann::json cj = nlohmann::json::array();
  for (const auto& c : cs) cj.push_back(to_json(c));
  out.provenance = {{"source", "synthetic"},
                    {"seed", g.seed},
                    {"n_users", g.n_users},
                    {"n_items", g.n_items},
                    {"n_topics", g.n_topics},
                    {"latent_dim", g.latent_dim},
                    {"affinity_weight", g.affinity_weight},
                    {"length_effect", g.length_effect},
                    {"cohorts", cj}};
  return out;
}

// --- JSONL interaction log ---------------------------------------------------

struct Event {
  std::string user_id;
  std::string item_id;
  std::int64_t ts = 0;
  int label = 0;
  bool impression = true;
  int split = -1;  // 0 train, 1 valid, 2 test, -1 decided by the temporal rule
};

inline std::string json_escape(const std::string& s) { return nlohmann::json(s).dump(); }

inline void write_event(std::ostream& os, const std::string& user, std::int64_t item, std::int64_t ts, int label,
                        bool impression) {
  os << "{\"user_id\":" << json_escape(user) << ",\"item_id\":\"" << item << "\",\"ts\":" << ts
     << ",\"label\":" << label;
  if (!impression) os << ",\"impression\":false";
  os << "}\n";
}

inline std::string id_string(const nlohmann::json& v, std::size_t line, const char* key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  throw ParseError(line, std::string("field '") + key + "' must be a string or integer");
}

inline std::vector<Event> read_events(std::istream& is, int split = -1) {
  std::vector<Event> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(no, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(no, "expected a JSON object");
    for (const char* key : {"user_id", "item_id", "ts", "label"}) {
      if (!j.contains(key)) throw ParseError(no, std::string("missing field '") + key + "'");
    }
    Event e;
    e.user_id = id_string(j["user_id"], no, "user_id");
    e.item_id = id_string(j["item_id"], no, "item_id");
    if (!j["ts"].is_number_integer()) throw ParseError(no, "field 'ts' must be an integer");
    e.ts = j["ts"].get<std::int64_t>();
    const auto& lab = j["label"];
    if (!lab.is_number_integer() || (lab.get<int>() != 0 && lab.get<int>() != 1)) {
      throw ParseError(no, "field 'label' must be 0 or 1");
    }
    e.label = lab.get<int>();
    if (j.contains("impression")) {
      if (!j["impression"].is_boolean()) throw ParseError(no, "field 'impression' must be a boolean");
      e.impression = j["impression"].get<bool>();
    }
    e.split = split;
    out.push_back(std::move(e));
  }
  return out;
}

namespace detail {

inline bool canonical_positive(const std::string& s) {
  if (s.empty() || s.size() > 18 || s[0] == '0') return false;
  return std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace detail

/// Builds samples from an event log. Item ids that are all canonical
/// positive integers keep their value; otherwise they are numbered 1..N in
/// lexicographic order. A sample's history holds every clicked item
/// (label 1) of that user with a strictly earlier timestamp.
inline DatasetBundle build_bundle(std::vector<Event> events, std::optional<std::size_t> vocab = std::nullopt) {
  if (events.empty()) throw DataError("no users");
  const bool numeric =
      std::all_of(events.begin(), events.end(), [](const Event& e) { return detail::canonical_positive(e.item_id); });
  std::map<std::string, std::int64_t> lex;
  if (!numeric) {
    for (const auto& e : events) lex.emplace(e.item_id, 0);
    std::int64_t next = 0;
    for (auto& [k, v] : lex) v = ++next;
  }
  auto item_of = [&](const std::string& s) -> std::int64_t {
    if (!numeric) return lex.at(s);
    std::int64_t v = 0;
    std::from_chars(s.data(), s.data() + s.size(), v);
    return v;
  };

  std::vector<std::string> user_order;
  std::unordered_map<std::string, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < events.size(); ++i) {
    auto [it, fresh] = by_user.try_emplace(events[i].user_id);
    if (fresh) user_order.push_back(events[i].user_id);
    it->second.push_back(i);
  }

  DatasetBundle out;
  std::int64_t max_item = 0;
  for (const auto& uid : user_order) {
    auto& idx = by_user[uid];
    for (std::size_t k = 1; k < idx.size(); ++k) {
      if (events[idx[k]].ts < events[idx[k - 1]].ts) ++out.unsorted_events;
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return events[a].ts < events[b].ts; });
    std::vector<std::int64_t> history;
    std::vector<Sample> temporal;
    for (std::size_t k = 0; k < idx.size();) {
      std::size_t e = k;
      while (e < idx.size() && events[idx[e]].ts == events[idx[k]].ts) ++e;
      for (std::size_t q = k; q < e; ++q) {
        const Event& ev = events[idx[q]];
        if (!ev.impression) continue;
        Sample s;
        s.user_id = uid;
        s.target_item = item_of(ev.item_id);
        s.behaviors = history;
        s.length = static_cast<std::int64_t>(history.size());
        s.label = ev.label;
        s.timestamp = ev.ts;
        max_item = std::max(max_item, s.target_item);
        switch (ev.split) {
          case 0: out.train.push_back(std::move(s)); break;
          case 1: out.valid.push_back(std::move(s)); break;
          case 2: out.test.push_back(std::move(s)); break;
          default: temporal.push_back(std::move(s));
        }
      }
      for (std::size_t q = k; q < e; ++q) {
        const Event& ev = events[idx[q]];
        if (ev.label == 1) {
          history.push_back(item_of(ev.item_id));
          max_item = std::max(max_item, history.back());
        }
      }
      k = e;
    }
    if (!temporal.empty()) detail::temporal_split(std::move(temporal), out);
  }
  const std::size_t needed = static_cast<std::size_t>(max_item) + 1;
  if (vocab && *vocab < needed) {
    throw DataError("item id " + std::to_string(max_item) + " exceeds declared vocabulary " + std::to_string(*vocab));
  }
  out.vocab_size = vocab ? *vocab : needed;
  if (out.train.empty()) throw DataError("no users with training impressions");
  out.L0 = compute_L0(out.train);
  return out;
}

/// Single JSONL file; splits follow the per-user temporal rule.
inline DatasetBundle load_external(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path);
  DatasetBundle b = build_bundle(read_events(is));
  std::ifstream again(path, std::ios::binary);
  Fnv1a h;
  std::string chunk((std::istreambuf_iterator<char>(again)), std::istreambuf_iterator<char>());
  h.str(chunk);
  b.provenance = {{"source", path}, {"file_digest", hex64(h.value())}};
  return b;
}

inline const char* split_file(int split) {
  switch (split) {
    case 0: return "train.jsonl";
    case 1: return "valid.jsonl";
    default: return "test.jsonl";
  }
}

inline nlohmann::json cohort_summary(const DatasetBundle& b, const std::vector<std::int64_t>& bounds) {
  struct Acc {
    double users = 0, len = 0, clicks = 0, imps = 0, train = 0;
  };
  std::map<std::string, Acc> acc;
  std::map<std::string, std::int64_t> last_len;
  std::map<std::string, std::string> cohort = b.user_cohort;
  for (const auto* split : {&b.train, &b.valid, &b.test}) {
    for (const auto& s : *split) {
      auto& l = last_len[s.user_id];
      l = std::max(l, s.length);
    }
  }
  for (const auto& [u, L] : last_len) {
    if (!cohort.count(u)) cohort[u] = bucket_name(bucket_of(L, bounds));
  }
  for (const auto& [u, L] : last_len) {
    auto& a = acc[cohort[u]];
    a.users += 1;
    a.len += static_cast<double>(L);
  }
  for (const auto* split : {&b.train, &b.valid, &b.test}) {
    for (const auto& s : *split) {
      auto& a = acc[cohort[s.user_id]];
      a.imps += 1;
      a.clicks += s.label;
      if (split == &b.train) a.train += 1;
    }
  }
  const double n_users = static_cast<double>(last_len.size());
  const double n_train = static_cast<double>(b.train.size());
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [name, a] : acc) {
    out[name] = {{"users", a.users},
                 {"user_share", a.users / n_users},
                 {"mean_length", a.len / std::max(1.0, a.users)},
                 {"click_rate", a.clicks / std::max(1.0, a.imps)},
                 {"impressions_per_user", a.imps / std::max(1.0, a.users)},
                 {"train_sample_share", n_train > 0 ? a.train / n_train : 0.0}};
  }
  return out;
}

/// Writes behaviors.jsonl (background history, impression=false),
/// train/valid/test.jsonl (impressions) and manifest.json.
inline void save_dataset_dir(const DatasetBundle& b, const std::string& dir,
                             const std::vector<std::int64_t>& bounds = {100, 200}) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
  auto open = [&](const std::string& name) {
    std::ofstream os(fs::path(dir) / name, std::ios::binary);
    if (!os) throw DataError("cannot write " + (fs::path(dir) / name).string());
    return os;
  };

  // A user's background is the history seen by their first impression.
  // Later clicks are recovered from impression labels.
  std::map<std::string, const Sample*> first;
  std::vector<std::string> order;
  for (const auto* split : {&b.train, &b.valid, &b.test}) {
    for (const auto& s : *split) {
      auto [it, fresh] = first.try_emplace(s.user_id, &s);
      if (fresh) order.push_back(s.user_id);
      else if (s.timestamp < it->second->timestamp) it->second = &s;
    }
  }
  {
    auto os = open("behaviors.jsonl");
    for (const auto& u : order) {
      const Sample& s = *first[u];
      for (std::size_t j = 0; j < s.behaviors.size(); ++j) {
        write_event(os, u, s.behaviors[j], s.timestamp - static_cast<std::int64_t>(s.behaviors.size() - j), 1, false);
      }
    }
  }
  int split_id = 0;
  for (const auto* split : {&b.train, &b.valid, &b.test}) {
    auto os = open(split_file(split_id++));
    for (const auto& s : *split) write_event(os, s.user_id, s.target_item, s.timestamp, static_cast<int>(s.label), true);
  }
  nlohmann::json m = {{"format", "lain-dataset-v1"},
                      {"vocab_size", b.vocab_size},
                      {"L0", b.L0},
                      {"digest", hex64(bundle_digest(b))},
                      {"counts", {{"train", b.train.size()}, {"valid", b.valid.size()}, {"test", b.test.size()}}},
                      {"bucket_bounds", bounds},
                      {"cohorts", cohort_summary(b, bounds)},
                      {"provenance", b.provenance}};
  if (!b.user_cohort.empty()) m["user_cohort"] = b.user_cohort;
  auto os = open("manifest.json");
  os << m.dump(2) << '\n';
}

/// Reads a directory written by save_dataset_dir (or any directory with the
/// same file names; manifest.json is optional).
inline DatasetBundle load_dataset_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir);
  std::vector<Event> events;
  auto slurp = [&](const std::string& name, int split, bool required) {
    std::ifstream is(fs::path(dir) / name);
    if (!is) {
      if (required) throw DataError("missing " + (fs::path(dir) / name).string());
      return;
    }
    try {
      auto ev = read_events(is, split);
      events.insert(events.end(), std::make_move_iterator(ev.begin()), std::make_move_iterator(ev.end()));
    } catch (const ParseError& e) {
      throw DataError(name + ": " + e.what());
    }
  };
  slurp("behaviors.jsonl", -1, false);
  slurp("train.jsonl", 0, true);
  slurp("valid.jsonl", 1, true);
  slurp("test.jsonl", 2, true);
  std::optional<std::size_t> vocab;
  nlohmann::json manifest;
  if (std::ifstream ms(fs::path(dir) / "manifest.json"); ms) {
    try {
      ms >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed manifest.json: ") + e.what());
    }
    if (manifest.contains("vocab_size")) vocab = manifest["vocab_size"].get<std::size_t>();
  }
  DatasetBundle b = build_bundle(std::move(events), vocab);
  if (manifest.contains("user_cohort")) b.user_cohort = manifest["user_cohort"].get<std::map<std::string, std::string>>();
  if (manifest.contains("provenance")) b.provenance = manifest["provenance"];
  return b;
}

/// Directory written by save_dataset_dir, or a single JSONL file.
inline DatasetBundle load_dataset(const std::string& path) {
  return std::filesystem::is_directory(path) ? load_dataset_dir(path) : load_external(path);
}

}  // namespace lain
