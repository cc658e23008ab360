#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "lain/attention.hpp"
#include "lain/model.hpp"

namespace lain {

/// Rank-based AUC with midranks for ties. Empty when only one class is
/// present.
inline std::optional<double> auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("auc: " + std::to_string(scores.size()) + " scores vs " + std::to_string(labels.size()) +
                         " labels");
  }
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]] > 0.5) {
        rank_sum += mid;
        pos += 1.0;
      }
    }
    i = j;
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) return std::nullopt;
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

struct UserScores {
  std::vector<double> scores, labels;
};

/// Mean of per-user AUC over users holding both classes, uniform weights.
inline std::optional<double> gauc(const std::map<std::string, UserScores>& per_user) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [u, s] : per_user) {
    if (auto a = auc(s.scores, s.labels)) {
      sum += *a;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

inline std::optional<double> gauc(std::span<const std::string> users, std::span<const double> scores,
                                  std::span<const double> labels) {
  if (users.size() != scores.size() || scores.size() != labels.size()) throw DimensionError("gauc: misaligned inputs");
  std::map<std::string, UserScores> g;
  for (std::size_t i = 0; i < users.size(); ++i) {
    auto& e = g[users[i]];
    e.scores.push_back(scores[i]);
    e.labels.push_back(labels[i]);
  }
  return gauc(g);
}

namespace detail {
inline std::vector<double> normalized(std::span<const double> w, const char* what) {
  double sum = 0.0;
  for (double x : w) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw DomainError(std::string(what) + ": weights must be finite and nonnegative");
    sum += x;
  }
  if (!(sum > 0.0)) throw DomainError(std::string(what) + ": weights must have a positive sum");
  std::vector<double> p(w.begin(), w.end());
  for (double& x : p) x /= sum;
  return p;
}
}  // namespace detail

/// G = sum_i (2i - n - 1) w_(i) / n over ascending weights (after
/// normalization). Empty for n = 0.
inline std::optional<double> gini(std::span<const double> weights) {
  if (weights.empty()) return std::nullopt;
  std::vector<double> p = detail::normalized(weights, "gini");
  std::sort(p.begin(), p.end());
  const double n = static_cast<double>(p.size());
  double g = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) g += (2.0 * static_cast<double>(i + 1) - n - 1.0) * p[i];
  return std::max(0.0, g / n);  // round-off can leave a uniform vector at -1e-17
}

/// Shannon entropy in nats, 0 log 0 = 0.
inline std::optional<double> entropy(std::span<const double> weights) {
  if (weights.empty()) return std::nullopt;
  const std::vector<double> p = detail::normalized(weights, "entropy");
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

inline double logloss(std::span<const double> p, std::span<const double> y) { return bce_loss(p, y); }

struct BucketMetrics {
  std::optional<double> auc, gauc, logloss, mean_gini, mean_entropy;
  std::size_t n_samples = 0, n_users = 0, n_traces = 0;
};

struct BucketedReport {
  std::vector<std::int64_t> bounds;
  std::map<std::string, BucketMetrics> buckets;  // short, medium, long, overall
  std::optional<double> gini_variance;           // population variance of the three bucket means
  std::optional<double> gini_range;              // max - min of the three bucket means
  nlohmann::json config = nlohmann::json::object();
  std::string dataset_digest;
};

inline const std::vector<std::string>& report_rows() {
  static const std::vector<std::string> rows{"short", "medium", "long", "overall"};
  return rows;
}

/// Variance and range of the per-bucket mean Gini.
inline void fill_gini_spread(BucketedReport& r) {
  std::vector<double> means;
  for (const char* b : {"short", "medium", "long"}) {
    const auto& m = r.buckets[b].mean_gini;
    if (!m) {
      r.gini_variance.reset();
      r.gini_range.reset();
      return;
    }
    means.push_back(*m);
  }
  const double mu = (means[0] + means[1] + means[2]) / 3.0;
  double v = 0.0;
  for (double x : means) v += (x - mu) * (x - mu);
  r.gini_variance = v / 3.0;
  r.gini_range = *std::max_element(means.begin(), means.end()) - *std::min_element(means.begin(), means.end());
}

/// Per-bucket AUC / GAUC / logloss over samples and mean Gini / entropy
/// over non-degenerate traces. A sample's bucket follows its raw length.
inline BucketedReport bucketed_report(std::span<const Sample> samples, std::span<const double> predictions,
                                      std::span<const AttentionTrace> traces, std::span<const std::int64_t> bounds) {
  if (samples.size() != predictions.size()) {
    throw DimensionError("bucketed_report: " + std::to_string(samples.size()) + " samples vs " +
                         std::to_string(predictions.size()) + " predictions");
  }
  BucketedReport r;
  r.bounds.assign(bounds.begin(), bounds.end());
  struct Acc {
    std::vector<double> p, y;
    std::vector<std::string> u;
    double gini = 0.0, ent = 0.0;
    std::size_t traces = 0;
  };
  std::map<std::string, Acc> acc;
  for (const auto& row : report_rows()) acc[row];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string b = bucket_name(bucket_of(samples[i].length, bounds));
    for (const std::string& key : {b, std::string("overall")}) {
      auto& a = acc[key];
      a.p.push_back(predictions[i]);
      a.y.push_back(samples[i].label);
      a.u.push_back(samples[i].user_id);
    }
  }
  for (const auto& t : traces) {
    if (t.degenerate || t.weights.empty()) continue;
    const double g = *gini(t.weights), h = *entropy(t.weights);
    for (const std::string& key : {std::string(bucket_name(bucket_of(t.user_length, bounds))), std::string("overall")}) {
      auto& a = acc[key];
      a.gini += g;
      a.ent += h;
      ++a.traces;
    }
  }
  for (auto& [key, a] : acc) {
    BucketMetrics m;
    m.n_samples = a.p.size();
    std::vector<std::string> uniq = a.u;
    std::sort(uniq.begin(), uniq.end());
    m.n_users = static_cast<std::size_t>(std::unique(uniq.begin(), uniq.end()) - uniq.begin());
    m.n_traces = a.traces;
    if (!a.p.empty()) {
      m.auc = auc(a.p, a.y);
      m.gauc = gauc(a.u, a.p, a.y);
      m.logloss = logloss(a.p, a.y);
    }
    if (a.traces > 0) {
      m.mean_gini = a.gini / static_cast<double>(a.traces);
      m.mean_entropy = a.ent / static_cast<double>(a.traces);
    }
    r.buckets[key] = m;
  }
  fill_gini_spread(r);
  return r;
}

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline nlohmann::json to_json(const BucketedReport& r) {
  nlohmann::json j;
  j["config"] = r.config;
  j["dataset_digest"] = r.dataset_digest;
  j["bucket_bounds"] = r.bounds;
  for (const auto& row : report_rows()) {
    const auto& m = r.buckets.at(row);
    nlohmann::json b = {{"n_samples", m.n_samples}, {"n_users", m.n_users}, {"n_traces", m.n_traces}};
    // Undefined metrics are omitted rather than written as null.
    if (m.auc) b["auc"] = *m.auc;
    if (m.gauc) b["gauc"] = *m.gauc;
    if (m.logloss) b["logloss"] = *m.logloss;
    if (m.mean_gini) b["mean_gini"] = *m.mean_gini;
    if (m.mean_entropy) b["mean_entropy"] = *m.mean_entropy;
    j["buckets"][row] = b;
  }
  j["gini_variance"] = opt_json(r.gini_variance);
  j["gini_range"] = opt_json(r.gini_range);
  return j;
}

inline std::string fmt_metric(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}

inline std::string to_csv(const BucketedReport& r) {
  std::ostringstream os;
  os << "bucket,n_samples,n_users,auc,gauc,logloss,mean_gini,mean_entropy\n";
  for (const auto& row : report_rows()) {
    const auto& m = r.buckets.at(row);
    os << row << ',' << m.n_samples << ',' << m.n_users << ',' << fmt_metric(m.auc) << ',' << fmt_metric(m.gauc) << ','
       << fmt_metric(m.logloss) << ',' << fmt_metric(m.mean_gini) << ',' << fmt_metric(m.mean_entropy) << '\n';
  }
  return os.str();
}

inline BucketedReport report_from_json(const nlohmann::json& j) {
  BucketedReport r;
  r.config = j.value("config", nlohmann::json::object());
  r.dataset_digest = j.value("dataset_digest", "");
  r.bounds = j.at("bucket_bounds").get<std::vector<std::int64_t>>();
  auto get = [](const nlohmann::json& b, const char* k) -> std::optional<double> {
    if (b.contains(k) && b[k].is_number()) return b[k].get<double>();
    return std::nullopt;
  };
  for (const auto& row : report_rows()) {
    const auto& b = j.at("buckets").at(row);
    BucketMetrics m;
    m.n_samples = b.value("n_samples", std::size_t{0});
    m.n_users = b.value("n_users", std::size_t{0});
    m.n_traces = b.value("n_traces", std::size_t{0});
    m.auc = get(b, "auc");
    m.gauc = get(b, "gauc");
    m.logloss = get(b, "logloss");
    m.mean_gini = get(b, "mean_gini");
    m.mean_entropy = get(b, "mean_entropy");
    r.buckets[row] = m;
  }
  fill_gini_spread(r);
  return r;
}

}  // namespace lain
