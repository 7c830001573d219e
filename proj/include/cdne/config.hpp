#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "cdne/data.hpp"
#include "cdne/error.hpp"
#include "cdne/mil.hpp"
#include "cdne/optimizer.hpp"

namespace cdne {

// Run configuration, read from JSON. Every key is optional except "dataset",
// which must carry exactly one of "manifest" (path) or "synthetic" (generator
// parameters). Unknown keys are rejected with their dotted path so a typo in
// a config file cannot silently fall back to a default.
struct ModelConfig {
  AttentionVariant variant = AttentionVariant::attention;
  std::size_t hidden_dim = 256;
  std::size_t embed_dim = 128;
  std::size_t attention_dim = 64;
  std::size_t projection_dim = 128;
};

struct CdneConfig {
  bool enabled = true;
  double thr = 1.0;
  double lambda_neg = 10.0;
  double lambda_pos = 3.0;
};

struct DatasetConfig {
  std::optional<std::string> manifest;
  std::optional<SyntheticSpec> synthetic;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t epochs = 100;
  std::size_t folds = 5;
  bool select_best_epoch = false;
  OptimizerKind optimizer = OptimizerKind::adam;
  OptimizerHyper hyper;
  ModelConfig model;
  CdneConfig cdne;
  DatasetConfig dataset;

  void validate() const {
    if (epochs == 0) throw ValidationError("epochs must be at least 1");
    if (folds < 2) throw ValidationError("folds must be at least 2");
    if (hyper.learning_rate <= 0.0) throw ValidationError("learning_rate must be positive");
    if (hyper.weight_decay < 0.0) throw ValidationError("weight_decay must be non-negative");
    if (model.hidden_dim == 0 || model.embed_dim == 0 || model.attention_dim == 0 ||
        model.projection_dim == 0)
      throw ValidationError("model dimensions must be positive");
    if (cdne.thr <= 0.0) throw ValidationError("cdne.thr must be positive");
    if (cdne.lambda_neg < 0.0 || cdne.lambda_pos < 0.0)
      throw ValidationError("cdne lambda weights must be non-negative");
    const bool has_manifest = dataset.manifest.has_value();
    const bool has_synth = dataset.synthetic.has_value();
    if (has_manifest == has_synth)
      throw ValidationError("dataset must set exactly one of 'manifest' or 'synthetic'");
    if (has_synth) dataset.synthetic->validate();
  }
};

namespace detail {

using json = nlohmann::json;

inline void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed,
                                const std::string& path) {
  for (const auto& [key, value] : obj.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (key == a) {
        known = true;
        break;
      }
    if (!known)
      throw SchemaError("unknown config key '" + (path.empty() ? key : path + "." + key) + "'");
  }
}

inline const json* find(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

template <typename T>
inline void read_number(const json& obj, const char* key, const std::string& path, T& out) {
  if (const json* v = find(obj, key)) {
    if constexpr (std::is_integral_v<T>) {
      if (!v->is_number_integer())
        throw SchemaError("config key '" + path + key + "' must be an integer");
    } else {
      if (!v->is_number()) throw SchemaError("config key '" + path + key + "' must be a number");
    }
    out = v->get<T>();
  }
}

inline void read_size(const json& obj, const char* key, const std::string& path,
                      std::size_t& out) {
  if (const json* v = find(obj, key)) {
    if (!v->is_number_integer() || v->get<double>() < 0)
      throw SchemaError("config key '" + path + key + "' must be a non-negative integer");
    out = v->get<std::size_t>();
  }
}

inline void read_bool(const json& obj, const char* key, const std::string& path, bool& out) {
  if (const json* v = find(obj, key)) {
    if (!v->is_boolean()) throw SchemaError("config key '" + path + key + "' must be a boolean");
    out = v->get<bool>();
  }
}

inline void read_string(const json& obj, const char* key, const std::string& path,
                        std::string& out) {
  if (const json* v = find(obj, key)) {
    if (!v->is_string()) throw SchemaError("config key '" + path + key + "' must be a string");
    out = v->get<std::string>();
  }
}

inline SyntheticSpec parse_synthetic(const json& obj, const std::string& path) {
  if (!obj.is_object()) throw SchemaError("config key '" + path + "' must be an object");
  reject_unknown_keys(obj,
                      {"bags_per_class", "num_classes", "k_min", "k_max", "dim",
                       "positive_instance_ratio", "class_separation", "bag_prior_sigma",
                       "noise_sigma", "seed"},
                      path);
  SyntheticSpec spec;
  const std::string prefix = path + ".";
  read_size(obj, "bags_per_class", prefix, spec.bags_per_class);
  read_size(obj, "num_classes", prefix, spec.num_classes);
  read_size(obj, "k_min", prefix, spec.k_min);
  read_size(obj, "k_max", prefix, spec.k_max);
  read_size(obj, "dim", prefix, spec.dim);
  read_number(obj, "positive_instance_ratio", prefix, spec.positive_instance_ratio);
  read_number(obj, "class_separation", prefix, spec.class_separation);
  read_number(obj, "bag_prior_sigma", prefix, spec.bag_prior_sigma);
  read_number(obj, "noise_sigma", prefix, spec.noise_sigma);
  read_number(obj, "seed", prefix, spec.seed);
  return spec;
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& root) {
  using detail::find;
  using detail::json;
  if (!root.is_object()) throw SchemaError("config root must be a JSON object");
  detail::reject_unknown_keys(root,
                              {"seed", "epochs", "folds", "select_best_epoch", "optimizer",
                               "learning_rate", "weight_decay", "model", "cdne", "dataset"},
                              "");
  RunConfig cfg;
  detail::read_number(root, "seed", "", cfg.seed);
  detail::read_size(root, "epochs", "", cfg.epochs);
  detail::read_size(root, "folds", "", cfg.folds);
  detail::read_bool(root, "select_best_epoch", "", cfg.select_best_epoch);
  detail::read_number(root, "learning_rate", "", cfg.hyper.learning_rate);
  detail::read_number(root, "weight_decay", "", cfg.hyper.weight_decay);

  if (const json* opt = find(root, "optimizer")) {
    if (!opt->is_object()) throw SchemaError("config key 'optimizer' must be an object");
    detail::reject_unknown_keys(*opt, {"kind", "beta1", "beta2", "eps"}, "optimizer");
    std::string kind = "adam";
    detail::read_string(*opt, "kind", "optimizer.", kind);
    cfg.optimizer = parse_optimizer(kind);
    detail::read_number(*opt, "beta1", "optimizer.", cfg.hyper.beta1);
    detail::read_number(*opt, "beta2", "optimizer.", cfg.hyper.beta2);
    detail::read_number(*opt, "eps", "optimizer.", cfg.hyper.eps);
  }

  if (const json* model = find(root, "model")) {
    if (!model->is_object()) throw SchemaError("config key 'model' must be an object");
    detail::reject_unknown_keys(
        *model, {"variant", "hidden_dim", "embed_dim", "attention_dim", "projection_dim"},
        "model");
    std::string variant = variant_name(cfg.model.variant);
    detail::read_string(*model, "variant", "model.", variant);
    cfg.model.variant = parse_variant(variant);
    detail::read_size(*model, "hidden_dim", "model.", cfg.model.hidden_dim);
    detail::read_size(*model, "embed_dim", "model.", cfg.model.embed_dim);
    detail::read_size(*model, "attention_dim", "model.", cfg.model.attention_dim);
    detail::read_size(*model, "projection_dim", "model.", cfg.model.projection_dim);
  }

  if (const json* cd = find(root, "cdne")) {
    if (!cd->is_object()) throw SchemaError("config key 'cdne' must be an object");
    detail::reject_unknown_keys(*cd, {"enabled", "thr", "lambda_neg", "lambda_pos"}, "cdne");
    detail::read_bool(*cd, "enabled", "cdne.", cfg.cdne.enabled);
    detail::read_number(*cd, "thr", "cdne.", cfg.cdne.thr);
    detail::read_number(*cd, "lambda_neg", "cdne.", cfg.cdne.lambda_neg);
    detail::read_number(*cd, "lambda_pos", "cdne.", cfg.cdne.lambda_pos);
  }

  const json* ds = find(root, "dataset");
  if (!ds) throw SchemaError("config is missing required key 'dataset'");
  if (!ds->is_object()) throw SchemaError("config key 'dataset' must be an object");
  detail::reject_unknown_keys(*ds, {"manifest", "synthetic"}, "dataset");
  if (const json* man = find(*ds, "manifest")) {
    if (!man->is_string()) throw SchemaError("config key 'dataset.manifest' must be a string");
    cfg.dataset.manifest = man->get<std::string>();
  }
  if (const json* synth = find(*ds, "synthetic"))
    cfg.dataset.synthetic = detail::parse_synthetic(*synth, "dataset.synthetic");

  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("config " + path.string() + ": " + e.what());
  }
  return parse_run_config(root);
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json root;
  root["seed"] = cfg.seed;
  root["epochs"] = cfg.epochs;
  root["folds"] = cfg.folds;
  root["select_best_epoch"] = cfg.select_best_epoch;
  root["learning_rate"] = cfg.hyper.learning_rate;
  root["weight_decay"] = cfg.hyper.weight_decay;
  root["optimizer"] = {{"kind", cfg.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
                       {"beta1", cfg.hyper.beta1},
                       {"beta2", cfg.hyper.beta2},
                       {"eps", cfg.hyper.eps}};
  root["model"] = {{"variant", variant_name(cfg.model.variant)},
                   {"hidden_dim", cfg.model.hidden_dim},
                   {"embed_dim", cfg.model.embed_dim},
                   {"attention_dim", cfg.model.attention_dim},
                   {"projection_dim", cfg.model.projection_dim}};
  root["cdne"] = {{"enabled", cfg.cdne.enabled},
                  {"thr", cfg.cdne.thr},
                  {"lambda_neg", cfg.cdne.lambda_neg},
                  {"lambda_pos", cfg.cdne.lambda_pos}};
  if (cfg.dataset.manifest) {
    root["dataset"] = {{"manifest", *cfg.dataset.manifest}};
  } else if (cfg.dataset.synthetic) {
    const SyntheticSpec& s = *cfg.dataset.synthetic;
    root["dataset"] = {{"synthetic",
                        {{"bags_per_class", s.bags_per_class},
                         {"num_classes", s.num_classes},
                         {"k_min", s.k_min},
                         {"k_max", s.k_max},
                         {"dim", s.dim},
                         {"positive_instance_ratio", s.positive_instance_ratio},
                         {"class_separation", s.class_separation},
                         {"bag_prior_sigma", s.bag_prior_sigma},
                         {"noise_sigma", s.noise_sigma},
                         {"seed", s.seed}}}};
  }
  return root;
}

}  // namespace cdne
