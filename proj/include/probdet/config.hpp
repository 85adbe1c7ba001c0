#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "probdet/errors.hpp"
#include "probdet/evalkit.hpp"
#include "probdet/synthdata.hpp"
#include "probdet/trainer.hpp"

#ifndef PROBDET_VERSION
#define PROBDET_VERSION "1.0.0"
#endif

namespace probdet {

inline constexpr const char* kToolVersion = PROBDET_VERSION;

// Everything a command needs, merged from a JSON file and command-line
// overrides. Serialized whole into every artifact.
struct RunConfig {
  std::uint64_t seed = 1;  // dataset seed for gen-data
  DatasetConfig data;
  TrainConfig train;
  EvalConfig eval;
  std::size_t eval_scenes = 64;
  std::vector<std::uint64_t> experiment_seeds{1, 2, 3, 4, 5};
  std::vector<std::size_t> budgets{256, 128, 64, 32, 16, 8};

  ExperimentConfig experiment() const {
    ExperimentConfig e;
    e.data = data;
    e.train = train;
    e.eval = eval;
    e.eval_scenes = eval_scenes;
    e.seeds = experiment_seeds;
    e.budgets = budgets;
    return e;
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

// Which keys of the flat training config live in which section.
inline const std::vector<std::string>& detector_keys() {
  static const std::vector<std::string> k{"cascade_thresholds", "first_stage_class_head", "max_proposals",
                                          "proposal_nms",       "pre_nms_top",            "objectness_prior",
                                          "scoring"};
  return k;
}
inline const std::vector<std::string>& fedloss_keys() {
  static const std::vector<std::string> k{"class_loss", "federated_subset_size"};
  return k;
}

inline bool in(const std::vector<std::string>& keys, const std::string& k) {
  return std::find(keys.begin(), keys.end(), k) != keys.end();
}

inline void merge_section(const nlohmann::json& root, const char* section, const std::vector<std::string>* allowed,
                          const std::vector<std::string>* excluded, nlohmann::json& flat) {
  if (!root.contains(section)) return;
  const auto& s = root.at(section);
  if (!s.is_object()) throw std::invalid_argument(std::string(section) + ": expected an object");
  for (auto it = s.begin(); it != s.end(); ++it) {
    const bool ok = allowed ? in(*allowed, it.key()) : !(excluded && in(*excluded, it.key()));
    if (!ok) throw std::invalid_argument(std::string(section) + ": unknown key '" + it.key() + "'");
    flat[it.key()] = it.value();
  }
}

}  // namespace detail

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  auto data = dataset_config_to_json(c.data);
  const auto pyramid = data.at("pyramid");
  data.erase("pyramid");
  const auto flat = train_config_to_json(c.train);
  nlohmann::json trainer = nlohmann::json::object();
  nlohmann::json detector = nlohmann::json::object();
  nlohmann::json fedloss = nlohmann::json::object();
  for (auto it = flat.begin(); it != flat.end(); ++it) {
    if (detail::in(detail::detector_keys(), it.key())) {
      detector[it.key()] = it.value();
    } else if (detail::in(detail::fedloss_keys(), it.key())) {
      fedloss[it.key() == "federated_subset_size" ? "subset_size" : it.key()] = it.value();
    } else {
      trainer[it.key()] = it.value();
    }
  }
  return {{"seed", c.seed},
          {"data", data},
          {"pyramid", pyramid},
          {"detector", detector},
          {"trainer", trainer},
          {"fedloss", fedloss},
          {"eval", eval_config_to_json(c.eval)},
          {"experiment", {{"eval_scenes", c.eval_scenes}, {"seeds", c.experiment_seeds}, {"budgets", c.budgets}}}};
}

// Missing keys keep their defaults; unknown keys anywhere are rejected.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> sections{"seed",    "data",    "pyramid", "detector",
                                              "trainer", "fedloss", "eval",    "experiment"};
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!sections.count(it.key())) throw std::invalid_argument("config: unknown key '" + it.key() + "'");
  }
  RunConfig c;
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();

  nlohmann::json data = j.contains("data") ? j.at("data") : nlohmann::json::object();
  if (!data.is_object()) throw std::invalid_argument("data: expected an object");
  if (data.contains("pyramid")) throw std::invalid_argument("data: unknown key 'pyramid' (use the top-level pyramid section)");
  if (j.contains("pyramid")) data["pyramid"] = j.at("pyramid");
  c.data = dataset_config_from_json(data);

  nlohmann::json flat = nlohmann::json::object();
  std::vector<std::string> not_trainer = detail::detector_keys();
  not_trainer.insert(not_trainer.end(), detail::fedloss_keys().begin(), detail::fedloss_keys().end());
  detail::merge_section(j, "trainer", nullptr, &not_trainer, flat);
  detail::merge_section(j, "detector", &detail::detector_keys(), nullptr, flat);
  if (j.contains("fedloss")) {
    const auto& f = j.at("fedloss");
    auto keys = detail::keys_of(f, "fedloss");
    if (f.contains("class_loss")) {
      flat["class_loss"] = f.at("class_loss");
      keys.erase("class_loss");
    }
    if (f.contains("subset_size")) {
      flat["federated_subset_size"] = f.at("subset_size");
      keys.erase("subset_size");
    }
    detail::reject_unknown(keys, "fedloss");
  }
  c.train = train_config_from_json(flat);

  if (j.contains("eval")) c.eval = eval_config_from_json(j.at("eval"));
  if (j.contains("experiment")) {
    ExperimentConfig e;
    experiment_config_from_json(j.at("experiment"), e);
    c.eval_scenes = e.eval_scenes;
    c.experiment_seeds = e.seeds;
    c.budgets = e.budgets;
  }
  return c;
}

// Sets a value at a dotted path, e.g. "trainer.iterations", parsing the value
// as JSON and falling back to a plain string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must look like section.key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw std::invalid_argument("override path '" + path + "' has an empty component");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = nlohmann::json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

// A config file, or any artifact that embeds one under "run_config".
inline nlohmann::json config_json_from_file(const std::string& path) {
  auto j = read_json_file(path);
  if (j.is_object() && j.contains("run_config")) return j.at("run_config");
  return j;
}

}  // namespace probdet
