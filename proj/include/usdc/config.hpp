#pragma once

// Experiment configuration: one human-readable JSON file drives every CLI
// verb. Parsing is strict -- unknown keys are rejected so a typo can never be
// silently ignored -- and every key is optional with the defaults below, so a
// config file only states what it changes.

#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "usdc/gating.hpp"
#include "usdc/grouping.hpp"
#include "usdc/trainer.hpp"
#include "usdc/vit.hpp"

namespace usdc {

struct ConfigError : ValueError {
  explicit ConfigError(const std::string& msg) : ValueError(msg) {}
};

// Desk-scale default backbone: big enough that gating and pruning have real
// structure to act on, small enough to train on one core in minutes.
inline ViTConfig toy_vit_config() {
  return ViTConfig{.layers = 2, .heads = 4, .embed_dim = 32, .ffn_hidden = 64,
                   .image_size = 16, .patch_size = 4, .channels = 1, .num_classes = 10};
}

struct ExperimentConfig {
  ViTConfig vit = toy_vit_config();
  TrainConfig train;
  std::string out_dir = "out";
  std::string checkpoint;  // input checkpoint for prune/finetune/eval/report
  std::string dataset;     // dataset directory; empty = generate synthetically
  int train_count = 512;   // synthetic training images
  int eval_count = 256;    // synthetic evaluation images
  std::string ablation;    // {batch-size, gate-arch, prune-options, group-split}
  std::vector<uint64_t> ablation_seeds = {0, 1, 2};

  void validate() const {
    vit.validate();
    train.validate();
    if (train_count < 1 || eval_count < 1) {
      throw ConfigError("dataset counts must be positive");
    }
    if (ablation_seeds.empty()) throw ConfigError("ablation needs at least one seed");
  }
};

namespace cfg_detail {

using nlohmann::json;

inline void require_known_keys(const json& j, const std::set<std::string>& allowed,
                               const std::string& scope) {
  if (!j.is_object()) throw ConfigError("config section '" + scope + "' must be an object");
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key())) {
      throw ConfigError("unknown config key '" + scope + "." + item.key() + "'");
    }
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& scope) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + scope + "." + key + "' has the wrong type");
  }
}

inline void read_string_enum(const json& j, const char* key, const std::string& scope,
                             const std::function<void(const std::string&)>& apply) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_string()) {
    throw ConfigError("config key '" + scope + "." + key + "' must be a string");
  }
  try {
    apply(j.at(key).get<std::string>());
  } catch (const ValueError& e) {
    throw ConfigError("config key '" + scope + "." + key + "': " + e.what());
  }
}

}  // namespace cfg_detail

inline nlohmann::json experiment_to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  json j;
  j["vit"] = {{"layers", c.vit.layers},         {"heads", c.vit.heads},
              {"embed_dim", c.vit.embed_dim},   {"ffn_hidden", c.vit.ffn_hidden},
              {"image_size", c.vit.image_size}, {"patch_size", c.vit.patch_size},
              {"channels", c.vit.channels},     {"num_classes", c.vit.num_classes}};
  j["train"] = {{"gamma", c.train.gamma},
                {"target_cost", c.train.f_t},
                {"tau_skip", c.train.tau_skip},
                {"tau_search", c.train.tau_search},
                {"tau_static", c.train.tau_static},
                {"lr", c.train.lr},
                {"weight_decay", c.train.weight_decay},
                {"epochs_stage1", c.train.epochs_stage1},
                {"epochs_stage2", c.train.epochs_stage2},
                {"batch_size", c.train.batch_size},
                {"gate_strategy", group_strategy_name(c.train.gate_strategy)},
                {"avg_group", c.train.avg_group},
                {"prune_mode", prune_mode_name(c.train.prune_mode)},
                {"search_gates", c.train.search_gates},
                {"fixed_gate", gate_kind_name(c.train.fixed_gate)},
                {"seed", c.train.seed}};
  j["paths"] = {{"out_dir", c.out_dir}, {"checkpoint", c.checkpoint}, {"dataset", c.dataset}};
  j["data"] = {{"train_count", c.train_count}, {"eval_count", c.eval_count}};
  j["ablation"] = {{"which", c.ablation}, {"seeds", c.ablation_seeds}};
  return j;
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  namespace d = cfg_detail;
  ExperimentConfig c;
  d::require_known_keys(j, {"vit", "train", "paths", "data", "ablation"}, "config");

  if (j.contains("vit")) {
    const auto& v = j.at("vit");
    d::require_known_keys(v,
                          {"layers", "heads", "embed_dim", "ffn_hidden", "image_size",
                           "patch_size", "channels", "num_classes"},
                          "vit");
    d::read_field(v, "layers", c.vit.layers, "vit");
    d::read_field(v, "heads", c.vit.heads, "vit");
    d::read_field(v, "embed_dim", c.vit.embed_dim, "vit");
    d::read_field(v, "ffn_hidden", c.vit.ffn_hidden, "vit");
    d::read_field(v, "image_size", c.vit.image_size, "vit");
    d::read_field(v, "patch_size", c.vit.patch_size, "vit");
    d::read_field(v, "channels", c.vit.channels, "vit");
    d::read_field(v, "num_classes", c.vit.num_classes, "vit");
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    d::require_known_keys(t,
                          {"gamma", "target_cost", "tau_skip", "tau_search", "tau_static", "lr",
                           "weight_decay", "epochs_stage1", "epochs_stage2", "batch_size",
                           "gate_strategy", "avg_group", "prune_mode", "search_gates",
                           "fixed_gate", "seed"},
                          "train");
    d::read_field(t, "gamma", c.train.gamma, "train");
    d::read_field(t, "target_cost", c.train.f_t, "train");
    d::read_field(t, "tau_skip", c.train.tau_skip, "train");
    d::read_field(t, "tau_search", c.train.tau_search, "train");
    d::read_field(t, "tau_static", c.train.tau_static, "train");
    d::read_field(t, "lr", c.train.lr, "train");
    d::read_field(t, "weight_decay", c.train.weight_decay, "train");
    d::read_field(t, "epochs_stage1", c.train.epochs_stage1, "train");
    d::read_field(t, "epochs_stage2", c.train.epochs_stage2, "train");
    d::read_field(t, "batch_size", c.train.batch_size, "train");
    d::read_string_enum(t, "gate_strategy", "train", [&](const std::string& s) {
      c.train.gate_strategy = parse_group_strategy(s);
    });
    d::read_field(t, "avg_group", c.train.avg_group, "train");
    d::read_string_enum(t, "prune_mode", "train", [&](const std::string& s) {
      c.train.prune_mode = parse_prune_mode(s);
    });
    d::read_field(t, "search_gates", c.train.search_gates, "train");
    d::read_string_enum(t, "fixed_gate", "train", [&](const std::string& s) {
      c.train.fixed_gate = parse_gate_kind(s);
    });
    d::read_field(t, "seed", c.train.seed, "train");
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    d::require_known_keys(p, {"out_dir", "checkpoint", "dataset"}, "paths");
    d::read_field(p, "out_dir", c.out_dir, "paths");
    d::read_field(p, "checkpoint", c.checkpoint, "paths");
    d::read_field(p, "dataset", c.dataset, "paths");
  }
  if (j.contains("data")) {
    const auto& p = j.at("data");
    d::require_known_keys(p, {"train_count", "eval_count"}, "data");
    d::read_field(p, "train_count", c.train_count, "data");
    d::read_field(p, "eval_count", c.eval_count, "data");
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    d::require_known_keys(a, {"which", "seeds"}, "ablation");
    d::read_field(a, "which", c.ablation, "ablation");
    d::read_field(a, "seeds", c.ablation_seeds, "ablation");
  }
  return c;
}

inline std::string dump_experiment(const ExperimentConfig& c) {
  return experiment_to_json(c).dump(2) + "\n";
}

inline ExperimentConfig parse_experiment(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return experiment_from_json(j);
}

inline ExperimentConfig load_experiment_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config file not found: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  try {
    return parse_experiment(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(e.what()) + " (in " + path + ")");
  }
}

inline void save_experiment_file(const std::string& path, const ExperimentConfig& c) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot write config file: " + path);
  os << dump_experiment(c);
}

}  // namespace usdc
