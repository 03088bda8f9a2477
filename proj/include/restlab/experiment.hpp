#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "restlab/config.hpp"
#include "restlab/expert_reward.hpp"
#include "restlab/rest_loop.hpp"
#include "restlab/segnet.hpp"
#include "restlab/synthdata.hpp"

namespace restlab {

inline constexpr const char* kMethodSupervised = "supervised";
inline constexpr const char* kMethodRest = "rest";
inline constexpr const char* kMethodSelfTrain = "self-train";
inline constexpr const char* kMethodNegMine = "neg-mine";

bool is_known_method(const std::string& method);

struct FoldKey {
  double fraction = 1.0;
  int repeat = 0;
  int fold = 0;
};

/// "f050_r2_k3" style tag used in file names.
std::string fold_tag(const FoldKey& key);

/// Training portion of the fold (subset to the labeled fraction) and the full held-out fold.
struct FoldData {
  std::vector<LabeledPair> train;
  std::vector<LabeledPair> val;
};

/// Generated (and optionally equalized) dataset described by the config.
DatasetSplit prepare_dataset(const ExperimentConfig& cfg);

/// Folds come from the repeat seed over all labeled ids; the training portion is
/// subset with a seed that depends on (repeat, fold) only, so it is nested in fraction.
FoldData fold_data(const DatasetSplit& split, const ExperimentConfig& cfg, const FoldKey& key);

/// Per-stage hyperparameters with seeds derived from (master seed, repeat, fold, fraction).
UNetArch arch_for(const ExperimentConfig& cfg);
SegHyper seg_hyper(const ExperimentConfig& cfg, const FoldKey& key);
ExpertHyper expert_hyper(const ExperimentConfig& cfg, const FoldKey& key);
RestConfig rest_config(const ExperimentConfig& cfg, const FoldKey& key);
std::uint64_t policy_seed(const ExperimentConfig& cfg, const FoldKey& key);
std::uint64_t negative_seed(const ExperimentConfig& cfg, const FoldKey& key);

/// 12-hex-digit prefix of hash(config, master seed, method, fraction).
std::string make_run_id(const ExperimentConfig& cfg, const std::string& method, double fraction);

RecordContext record_context(const std::string& run_id, const std::string& method, const FoldKey& key);

struct SupervisedStage {
  SupervisedResult trained;
  MetricsRecord record;  // held-out scores of the returned model, iteration 0
};

SupervisedStage run_supervised_stage(const ExperimentConfig& cfg, const FoldData& data, const FoldKey& key,
                                     const std::string& run_id);

struct ExpertStage {
  std::vector<Demonstration> positives;
  std::vector<Demonstration> negatives;
  ExpertTrainResult trained;
};

ExpertStage run_expert_stage(const ExperimentConfig& cfg, const SegModel& seg, const FoldData& data,
                             const FoldKey& key);

RestOutcome run_rest_stage(const ExperimentConfig& cfg, const SegModel& seg, const ExpertRewardModel& reward,
                           const DatasetSplit& split, const FoldData& data, const FoldKey& key,
                           const std::string& run_id);

BaselineOutcome run_baseline_stage(const ExperimentConfig& cfg, const std::string& method, const SegModel& seg,
                                   const DatasetSplit& split, const FoldData& data, const FoldKey& key,
                                   const std::string& run_id);

/// Everything produced for one fold by the in-memory protocol.
struct FoldOutcome {
  FoldKey key;
  MetricsRecord pre;
  std::optional<MetricsRecord> post;  // unchanged pre-loop scores when the reward model was unusable
  double expert_accuracy = 0.0;
  bool rest_aborted = false;
  std::uint64_t expert_digest_before = 0;
  std::uint64_t expert_digest_after = 0;
  std::vector<MetricsRecord> rest_records;
  std::vector<MetricsRecord> self_train_records;
  std::vector<MetricsRecord> neg_mine_records;
  std::vector<IterationLog> rest_iterations;
  std::string rest_diagnostic;
};

struct ProtocolOptions {
  bool run_rest = true;
  bool run_baselines = true;
  std::vector<double> rest_fractions;  // fractions where ReST runs; empty means every fraction
  std::function<void(const FoldOutcome&)> on_fold;  // progress hook
};

/// Runs every (fraction, repeat, fold) of the configured protocol in memory.
std::vector<FoldOutcome> run_protocol(const ExperimentConfig& cfg, const DatasetSplit& split,
                                      const ProtocolOptions& options = {});

}  // namespace restlab
