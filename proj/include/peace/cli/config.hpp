#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "peace/data/synthetic.hpp"
#include "peace/eval/metrics.hpp"
#include "peace/training/finetune.hpp"

namespace peace {

/// Everything a command needs. Keys of the key=value file map one to one
/// onto the fields below (see config_keys()).
struct ExperimentConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path store_dir = "store";
  std::filesystem::path checkpoint = "ckpt/backbone";
  std::filesystem::path heads = "ckpt/heads";
  std::filesystem::path log = "pretrain.log";
  std::filesystem::path assignments = "assignments.tsv";
  std::filesystem::path rankings = "rankings.tsv";
  std::filesystem::path metrics = "metrics.tsv";

  std::uint64_t seed = 1;
  SyntheticConfig gen;
  ModelConfig model;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  /// 0 selects the first target domain of the bundle.
  std::size_t target_domain = 0;
  bool has_target_domain = false;
  std::string protocol = "both";  // normal | zeroshot | both
  std::size_t ranking_depth = 10;
  std::vector<std::string> ablations;

  void apply_ablation(const std::string& a) {
    if (a == "gl") {
      model.use_graph = false;
    } else if (a == "cpl") {
      pretrain.gamma = 0.0;
    } else if (a == "pea") {
      model.use_pea = false;
    } else {
      throw ValidationError("unknown ablation '" + a + "' (expected gl, cpl or pea)");
    }
    ablations.push_back(a);
  }

  void validate() const {
    model.validate();
    pretrain.validate();
    if (finetune.epochs == 0) throw ValidationError("ft_epochs must be >= 1");
    if (finetune.batch_size == 0) throw ValidationError("ft_batch_size must be >= 1");
    if (!(finetune.learning_rate > 0.0)) throw ValidationError("ft_lr must be positive");
    if (protocol != "normal" && protocol != "zeroshot" && protocol != "both") {
      throw ValidationError("protocol must be normal, zeroshot or both");
    }
    if (ranking_depth == 0) throw ValidationError("ranking_depth must be >= 1");
  }
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ValidationError("bad value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ValidationError("bad boolean '" + v + "' for " + key + " (use 0/1 or true/false)");
}

}  // namespace config_detail

using ConfigSetter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

/// Every accepted key with its setter.
inline const std::map<std::string, ConfigSetter>& config_keys() {
  using namespace config_detail;
  static const std::map<std::string, ConfigSetter> keys = [] {
    std::map<std::string, ConfigSetter> k;
    auto path = [&](const char* name, std::filesystem::path ExperimentConfig::*m) {
      k[name] = [m](ExperimentConfig& c, const std::string&, const std::string& v) { c.*m = v; };
    };
    auto size = [&](const char* name, auto getter) {
      k[name] = [getter](ExperimentConfig& c, const std::string& key, const std::string& v) {
        getter(c) = parse_number<std::size_t>(key, v);
      };
    };
    auto real = [&](const char* name, auto getter) {
      k[name] = [getter](ExperimentConfig& c, const std::string& key, const std::string& v) {
        getter(c) = parse_number<double>(key, v);
      };
    };
    auto flag = [&](const char* name, auto getter) {
      k[name] = [getter](ExperimentConfig& c, const std::string& key, const std::string& v) {
        getter(c) = parse_bool(key, v);
      };
    };
    using C = ExperimentConfig;
    path("data_dir", &C::data_dir);
    path("store_dir", &C::store_dir);
    path("checkpoint", &C::checkpoint);
    path("heads", &C::heads);
    path("log", &C::log);
    path("assignments", &C::assignments);
    path("rankings", &C::rankings);
    path("metrics", &C::metrics);
    k["seed"] = [](C& c, const std::string& key, const std::string& v) { c.seed = parse_number<std::uint64_t>(key, v); };
    k["protocol"] = [](C& c, const std::string&, const std::string& v) { c.protocol = v; };
    k["ablate"] = [](C& c, const std::string&, const std::string& v) {
      for (auto part : io_detail::split(v, ','))
        if (auto a = trim(part); !a.empty()) c.apply_ablation(a);
    };
    k["target_domain"] = [](C& c, const std::string& key, const std::string& v) {
      c.target_domain = parse_number<std::size_t>(key, v);
      c.has_target_domain = true;
    };
    size("ranking_depth", [](C& c) -> auto& { return c.ranking_depth; });

    // synthetic generator
    size("entities", [](C& c) -> auto& { return c.gen.entities; });
    size("topics", [](C& c) -> auto& { return c.gen.topics; });
    size("relations", [](C& c) -> auto& { return c.gen.relations; });
    real("p_in", [](C& c) -> auto& { return c.gen.p_in; });
    real("p_out", [](C& c) -> auto& { return c.gen.p_out; });
    real("feature_noise", [](C& c) -> auto& { return c.gen.feature_noise; });
    size("source_domains", [](C& c) -> auto& { return c.gen.source_domains; });
    size("target_domains", [](C& c) -> auto& { return c.gen.target_domains; });
    size("users_per_topic", [](C& c) -> auto& { return c.gen.users_per_topic; });
    size("items_per_domain", [](C& c) -> auto& { return c.gen.items_per_domain; });
    size("records_per_source", [](C& c) -> auto& { return c.gen.records_per_source; });
    size("records_per_target", [](C& c) -> auto& { return c.gen.records_per_target; });
    real("domain_entity_fraction", [](C& c) -> auto& { return c.gen.domain_entity_fraction; });
    size("max_behaviors", [](C& c) -> auto& { return c.gen.max_behaviors; });
    real("primary_weight", [](C& c) -> auto& { return c.gen.primary_weight; });
    real("secondary_weight", [](C& c) -> auto& { return c.gen.secondary_weight; });
    real("targeted_exposure", [](C& c) -> auto& { return c.gen.targeted_exposure; });
    real("base_click", [](C& c) -> auto& { return c.gen.base_click; });
    real("max_click", [](C& c) -> auto& { return c.gen.max_click; });
    real("profile_fidelity", [](C& c) -> auto& { return c.gen.profile_fidelity; });

    // backbone
    size("dim", [](C& c) -> auto& { return c.model.dim; });
    size("interests", [](C& c) -> auto& { return c.model.interests; });
    size("prototypes", [](C& c) -> auto& { return c.model.prototypes; });
    size("mask_k", [](C& c) -> auto& { return c.model.mask_k; });
    real("temperature", [](C& c) -> auto& { return c.model.temperature; });
    size("seq_cap", [](C& c) -> auto& { return c.model.seq_cap; });
    size("hidden", [](C& c) -> auto& { return c.model.hidden; });
    real("leaky_slope", [](C& c) -> auto& { return c.model.leaky_slope; });
    flag("use_graph", [](C& c) -> auto& { return c.model.use_graph; });
    flag("use_pea", [](C& c) -> auto& { return c.model.use_pea; });
    flag("kmeans_init", [](C& c) -> auto& { return c.model.kmeans_init; });

    // pre-training
    real("gamma", [](C& c) -> auto& { return c.pretrain.gamma; });
    size("batch_size", [](C& c) -> auto& { return c.pretrain.batch_size; });
    size("epochs", [](C& c) -> auto& { return c.pretrain.epochs; });
    real("lr", [](C& c) -> auto& { return c.pretrain.learning_rate; });
    k["negatives"] = [](C& c, const std::string& key, const std::string& v) {
      if (v == "in_batch") {
        c.pretrain.negatives = NegativeSampling::in_batch;
      } else if (v == "cross_prototype") {
        c.pretrain.negatives = NegativeSampling::cross_prototype;
      } else {
        throw ValidationError("bad value '" + v + "' for " + key + " (in_batch or cross_prototype)");
      }
    };

    // fine-tuning
    size("ft_epochs", [](C& c) -> auto& { return c.finetune.epochs; });
    real("ft_lr", [](C& c) -> auto& { return c.finetune.learning_rate; });
    size("ft_batch_size", [](C& c) -> auto& { return c.finetune.batch_size; });
    size("ft_hidden", [](C& c) -> auto& { return c.finetune.hidden; });
    flag("use_deepfm", [](C& c) -> auto& { return c.finetune.use_deepfm; });
    return k;
  }();
  return keys;
}

inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  auto it = config_keys().find(key);
  if (it == config_keys().end()) throw ValidationError("unknown config key '" + key + "'");
  it->second(c, key, value);
}

/// Applies a key=value file on top of `c`. Blank lines and lines starting
/// with '#' are skipped.
inline void apply_config_file(ExperimentConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    std::string t = config_detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) throw ValidationError(path.string() + ":" + std::to_string(n) + ": expected key=value");
    std::string key = config_detail::trim(std::string_view(t).substr(0, eq));
    std::string value = config_detail::trim(std::string_view(t).substr(eq + 1));
    try {
      set_config_value(c, key, value);
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

}  // namespace peace
