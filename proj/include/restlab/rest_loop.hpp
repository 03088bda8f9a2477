#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "restlab/expert_reward.hpp"
#include "restlab/metrics.hpp"
#include "restlab/policy.hpp"
#include "restlab/segnet.hpp"

namespace restlab {

struct RestConfig {
  int k_iterations = 12;
  double phase_threshold = 0.7;  // exploitation gate on the batch expert reward
  int batch_size = 16;           // unlabeled samples drawn per iteration
  int stab_window = 3;
  double stab_delta = 0.005;     // R_val range below which the segmenter counts as stable
  double anneal_factor = 0.5;
  double policy_lr = 1e-3;       // SGD step for both reward sources
  bool retain_pseudolabels = false;  // accumulate accepted pseudolabels across iterations
  double iou_threshold = kDefaultIouThreshold;
  HeuristicConfig heuristic;
  FineTuneHyper fine_tune;
  std::uint64_t seed = 1;

  /// Throws ConfigError on out-of-range fields.
  void validate() const;

  friend bool operator==(const RestConfig&, const RestConfig&) = default;
};

/// Inputs shared by ReST and the baselines. `labeled` is mixed into
/// fine-tuning batches; `val` supplies R_val and the logged metrics.
struct RestData {
  std::span<const SampleGrid> unlabeled;
  std::span<const LabeledPair> labeled;
  std::span<const LabeledPair> val;
};

enum class Phase { kExploration, kExploitation };

std::string phase_name(Phase p);

struct IterationLog {
  int iteration = 0;
  Phase phase = Phase::kExploration;
  std::string reward_source;  // "none", "R_exp" or "R_exp+R_val"
  std::optional<double> expert_reward;
  std::optional<double> r_val;
  int sampled = 0;
  int labeled_entries = 0;  // entries that received a pseudolabel
  int heuristic_entries = 0;
  int accepted = 0;  // pseudolabels used for fine-tuning
  double temperature = 1.0;
  double epsilon = 0.0;
  bool stabilized = false;
  std::uint64_t seg_digest = 0;
  MetricsRecord record;
};

struct RestHistory {
  MetricsRecord initial;  // iteration 0: the incoming segmenter
  std::vector<IterationLog> iterations;
  std::uint64_t expert_digest_before = 0;
  std::uint64_t expert_digest_after = 0;
  bool halted = false;
  std::string diagnostic;

  /// Initial record followed by one record per iteration.
  std::vector<MetricsRecord> records() const;
};

struct RestOutcome {
  SegModel seg;
  PolicyModel policy;
  RestHistory history;
};

/// Exploration/exploitation self-training loop driven by the frozen expert
/// reward. Every iteration updates the policy from the batch expert reward;
/// iterations whose reward exceeds the gate also anneal the policy,
/// fine-tune the segmenter on the accepted pseudolabels and update the policy
/// again from the change in validation F1. A stable R_val window sends the
/// loop back to exploration. A numerical failure restores the models of the
/// last completed iteration and halts with a diagnostic.
RestOutcome run_rest(SegModel seg, PolicyModel policy, const ExpertRewardModel& reward, const RestData& data,
                     const RestConfig& cfg, const RecordContext& context);

struct BaselineOutcome {
  SegModel seg;
  RestHistory history;
};

/// Thresholded self-training: masks are {state >= theta_pos}, or empty when
/// max(state) < theta_neg; other samples are skipped.
BaselineOutcome run_standard_self_training(SegModel seg, const RestData& data, const RestConfig& cfg,
                                           const RecordContext& context);

/// Self-training restricted to empty masks on confidently negative samples.
BaselineOutcome run_pseudonegative_mining(SegModel seg, const RestData& data, const RestConfig& cfg,
                                          const RecordContext& context);

/// Unlabeled indices drawn at `iteration`; identical for every method given the seed.
std::vector<std::size_t> iteration_batch(std::size_t pool_size, int batch_size, std::uint64_t seed, int iteration);

}  // namespace restlab
