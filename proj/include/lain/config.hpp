#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "lain/data.hpp"
#include "lain/grad_check.hpp"
#include "lain/model.hpp"
#include "lain/trainer.hpp"

namespace lain {

/// Options of every command, merged as defaults <- config file <- flags.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  GeneratorConfig data;
  GradCheckOptions grad{1e-4, 1e-4, 1e-6, 256, 0};
  std::string variant = "full";
  std::uint64_t seed = 0;
};

namespace detail {

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw ConfigError("config key " + key + ": expected a boolean, got '" + text + "'");
  } else {
    is >> v;
    if (!is || !(is >> std::ws).eof()) throw ConfigError("config key " + key + ": cannot parse '" + text + "'");
    if constexpr (std::is_unsigned_v<T>) {
      if (text.find('-') != std::string::npos) throw ConfigError("config key " + key + ": must be nonnegative");
    }
    return v;
  }
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(parse_value<T>(key, item.substr(b, e - b + 1)));
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

inline const std::map<std::string, Setter>& config_keys() {
  static const std::map<std::string, Setter> keys = [] {
    std::map<std::string, Setter> k;
    auto num = [&k](const std::string& name, auto member_ref) {
      k[name] = [name, member_ref](RunConfig& c, const std::string& v) {
        auto& dst = member_ref(c);
        dst = parse_value<std::remove_reference_t<decltype(dst)>>(name, v);
      };
    };
    num("model.d", [](RunConfig& c) -> auto& { return c.model.d; });
    num("model.d_f", [](RunConfig& c) -> auto& { return c.model.d_f; });
    num("model.k", [](RunConfig& c) -> auto& { return c.model.k; });
    num("model.hidden", [](RunConfig& c) -> auto& { return c.model.hidden; });
    num("model.short_window", [](RunConfig& c) -> auto& { return c.model.short_window; });
    num("model.gsu_topk", [](RunConfig& c) -> auto& { return c.model.gsu_topk; });
    num("model.max_len", [](RunConfig& c) -> auto& { return c.model.max_len; });
    num("model.dropout", [](RunConfig& c) -> auto& { return c.model.dropout; });
    num("model.gamma_init", [](RunConfig& c) -> auto& { return c.model.gamma_init; });
    num("model.beta_init", [](RunConfig& c) -> auto& { return c.model.beta_init; });
    num("model.lcp", [](RunConfig& c) -> auto& { return c.model.lcp; });
    num("model.qk_cond", [](RunConfig& c) -> auto& { return c.model.qk_cond; });
    num("model.temp_scale", [](RunConfig& c) -> auto& { return c.model.temp_scale; });
    num("model.lma", [](RunConfig& c) -> auto& { return c.model.lma; });
    num("model.short_branch", [](RunConfig& c) -> auto& { return c.model.short_branch; });
    k["model.head_dims"] = [](RunConfig& c, const std::string& v) {
      c.model.head_dims = parse_list<std::size_t>("model.head_dims", v);
    };
    k["model.bucket_bounds"] = [](RunConfig& c, const std::string& v) {
      c.model.bucket_bounds = parse_list<std::int64_t>("model.bucket_bounds", v);
      c.data.bucket_bounds = c.model.bucket_bounds;
    };
    k["model.variant"] = [](RunConfig& c, const std::string& v) { c.variant = v; };

    num("train.batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; });
    num("train.max_epochs", [](RunConfig& c) -> auto& { return c.train.max_epochs; });
    num("train.patience", [](RunConfig& c) -> auto& { return c.train.patience; });
    num("train.lr", [](RunConfig& c) -> auto& { return c.train.adam.lr; });
    num("train.beta1", [](RunConfig& c) -> auto& { return c.train.adam.beta1; });
    num("train.beta2", [](RunConfig& c) -> auto& { return c.train.adam.beta2; });
    num("train.eps", [](RunConfig& c) -> auto& { return c.train.adam.eps; });
    num("train.conflict_probe", [](RunConfig& c) -> auto& { return c.train.conflict_probe; });
    num("train.probe_batch", [](RunConfig& c) -> auto& { return c.train.probe_batch; });
    num("train.seed", [](RunConfig& c) -> auto& { return c.seed; });

    num("data.users", [](RunConfig& c) -> auto& { return c.data.n_users; });
    num("data.items", [](RunConfig& c) -> auto& { return c.data.n_items; });
    num("data.seed", [](RunConfig& c) -> auto& { return c.data.seed; });
    num("data.topics", [](RunConfig& c) -> auto& { return c.data.n_topics; });
    num("data.latent_dim", [](RunConfig& c) -> auto& { return c.data.latent_dim; });
    num("data.topic_spread", [](RunConfig& c) -> auto& { return c.data.topic_spread; });
    num("data.affinity_weight", [](RunConfig& c) -> auto& { return c.data.affinity_weight; });
    num("data.length_effect", [](RunConfig& c) -> auto& { return c.data.length_effect; });
    num("data.on_interest_targets", [](RunConfig& c) -> auto& { return c.data.on_interest_targets; });
    num("data.min_impressions", [](RunConfig& c) -> auto& { return c.data.min_impressions; });
    num("data.max_len", [](RunConfig& c) -> auto& { return c.data.max_len; });

    num("grad_check.h", [](RunConfig& c) -> auto& { return c.grad.h; });
    num("grad_check.tol", [](RunConfig& c) -> auto& { return c.grad.tol; });
    num("grad_check.abs_floor", [](RunConfig& c) -> auto& { return c.grad.abs_floor; });
    num("grad_check.max_per_param", [](RunConfig& c) -> auto& { return c.grad.max_per_param; });
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Applies one "section.key" = value assignment.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  auto it = keys.find(key);
  if (it == keys.end()) throw ConfigError("unknown config key: " + key);
  it->second(c, value);
}

/// Reads an INI file whose sections are model, train, data and grad_check.
inline void apply_config_file(RunConfig& c, const std::string& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("cannot read config " + path + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key outside a section: " + section);
    for (const auto& [key, value] : body) set_config_value(c, section + "." + key, value.data());
  }
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json cohorts = nlohmann::json::array();
  for (const auto& co : c.data.cohorts) cohorts.push_back(to_json(co));
  return {{"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"data",
           {{"users", c.data.n_users},
            {"items", c.data.n_items},
            {"seed", c.data.seed},
            {"topics", c.data.n_topics},
            {"latent_dim", c.data.latent_dim},
            {"topic_spread", c.data.topic_spread},
            {"affinity_weight", c.data.affinity_weight},
            {"length_effect", c.data.length_effect},
            {"on_interest_targets", c.data.on_interest_targets},
            {"min_impressions", c.data.min_impressions},
            {"max_len", c.data.max_len},
            {"cohorts", cohorts}}},
          {"grad_check",
           {{"h", c.grad.h}, {"tol", c.grad.tol}, {"abs_floor", c.grad.abs_floor},
            {"max_per_param", c.grad.max_per_param}}},
          {"variant", c.variant},
          {"seed", c.seed}};
}

}  // namespace lain
