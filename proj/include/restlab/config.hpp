#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "restlab/expert_reward.hpp"
#include "restlab/policy.hpp"
#include "restlab/rest_loop.hpp"
#include "restlab/segnet.hpp"
#include "restlab/synthdata.hpp"

namespace restlab {

struct DatasetConfig {
  int n_labeled = 60;
  int n_unlabeled = 180;
  std::uint64_t seed = 2024;
  bool equalize = true;  // histogram equalization before training
  ShapeConfig shape;

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::vector<double> fractions = {0.25, 0.5, 0.75, 1.0};
  std::vector<double> baseline_fractions = {0.5};
  int folds = 5;
  int repeats = 5;
  std::uint64_t master_seed = 7;
  std::string output_dir = "restlab_out";
  UNetArch arch = {64, 64, 8, 3, -3.5};  // height/width follow the dataset
  SegHyper seg;   // seeds of the per-module hyperparameters are derived per fold
  ExpertHyper expert;
  NegativeRecipeConfig recipes;
  PolicyArch policy;
  RestConfig rest;

  /// Throws ConfigError naming the offending key.
  void validate() const;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Line-oriented `key = value` text with `[section]` headers and `#` comments.
/// Keys absent from the text keep their defaults; unknown keys are errors.
ExperimentConfig parse_config(std::istream& is, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Every field, grouped by section; doubles are written in shortest round-trip form.
std::string serialize_config(const ExperimentConfig& cfg, bool with_docs = false);

/// Stable hash of the serialized configuration.
std::uint64_t config_digest(const ExperimentConfig& cfg);

}  // namespace restlab
