#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "restlab/grid.hpp"
#include "restlab/numcore.hpp"
#include "restlab/util.hpp"

namespace restlab {

struct PolicyArch {
  int hidden = 8;
  double prior_gain = 20.0;      // logit slope on the state channel at init
  double initial_temperature = 1.0;
  double min_temperature = 0.05;

  friend bool operator==(const PolicyArch&, const PolicyArch&) = default;
};

inline constexpr const char* kPolicyArchId = "pol-v1";

/// Per-pixel Bernoulli labeling policy over the (image, state) stack.
/// logits = prior(1x1 conv) + residual(3x3 conv, ReLU, 3x3 conv); the prior
/// starts as gain * (state - 0.5) so the initial policy tracks the state.
/// Pixel probabilities are sigmoid(logit / T).
class PolicyModel {
 public:
  PolicyModel(const PolicyArch& arch, std::uint64_t seed);

  const PolicyArch& arch() const { return arch_; }
  double temperature() const { return temperature_; }
  void set_temperature(double t);

  std::span<nc::Parameter<float>> params() { return params_; }
  std::span<const nc::Parameter<float>> params() const { return params_; }
  std::uint64_t digest() const;

  /// x [N,2,H,W] -> logits [N,1,H,W] (before temperature scaling).
  nc::Tensor<float>& logits(nc::Tape<float>& tape, nc::Tensor<float>& x);
  /// Logits of one (image, state) pair, row-major.
  std::vector<double> logits(const SampleGrid& image, const ProbMap& state) const;

  void save(std::ostream& os) const;
  void load(std::istream& is);
  void save_file(const std::filesystem::path& path) const;
  void load_file(const std::filesystem::path& path);

 private:
  PolicyArch arch_;
  double temperature_;
  std::vector<nc::Parameter<float>> params_;
};

/// Logit magnitude beyond which a pixel's action is treated as deterministic.
inline constexpr double kSaturatedLogit = 30.0;

/// Bernoulli probabilities sigmoid(logit / T).
std::vector<double> action_probabilities(std::span<const double> logits, double temperature);

/// Mean per-pixel Bernoulli entropy (nats) at temperature T.
double mean_entropy(std::span<const double> logits, double temperature);

struct PolicySample {
  MaskGrid mask;
  double log_prob = 0.0;
};

PolicySample policy_sample(const PolicyModel& policy, const SampleGrid& image, const ProbMap& state, Rng& rng);

struct HeuristicConfig {
  double positive_threshold = 0.9;  // theta_pos
  double negative_threshold = 0.1;  // theta_neg
  int min_area_px = 3;
  double epsilon = 0.9;
  double epsilon_decay = 0.95;
  double epsilon_min = 0.05;

  /// Throws ConfigError unless 0 < theta_neg < 0.5 < theta_pos < 1, min_area_px >= 1 and
  /// the epsilon schedule lies in [0,1].
  void validate() const;

  friend bool operator==(const HeuristicConfig&, const HeuristicConfig&) = default;
};

/// Confidence-threshold labeling: empty mask when max(state) < theta_neg;
/// otherwise components of (state >= theta_pos) with at least
/// min_area_px pixels; nullopt when that leaves nothing.
std::optional<MaskGrid> heuristic_pseudolabel(const ProbMap& state, const HeuristicConfig& cfg);

enum class LabelSource { kPolicy, kHeuristic };

struct PseudoLabelEntry {
  const SampleGrid* image = nullptr;
  ProbMap state;
  MaskGrid mask;
  LabelSource source = LabelSource::kPolicy;
  std::optional<double> log_prob;  // set for policy samples
};

/// With probability epsilon the heuristic labels the sample (skipped when it
/// declines), otherwise the policy samples a mask.
std::optional<PseudoLabelEntry> epsilon_greedy_select(const PolicyModel& policy, const HeuristicConfig& heuristic,
                                                      const SampleGrid& image, const ProbMap& state, double epsilon,
                                                      Rng& rng);

struct PseudoLabelBatch {
  std::vector<PseudoLabelEntry> entries;

  std::size_t policy_count() const;
  std::size_t heuristic_count() const;
};

/// Exponential moving average of past rewards, starting at zero.
struct RewardBaseline {
  double value = 0.0;
  double decay = 0.9;

  /// Returns reward - value, then folds the reward into the average.
  double advantage(double reward);
};

/// Flattened d/dtheta of advantage * sum over policy entries of log pi(mask).
std::vector<double> policy_gradient(PolicyModel& policy, const PseudoLabelBatch& batch, double advantage);

struct ReinforceResult {
  bool applied = false;
  double advantage = 0.0;
  std::size_t samples = 0;
};

/// One REINFORCE ascent step on the policy-sampled entries (heuristic entries
/// carry no gradient). No-op when the batch has no policy entries.
ReinforceResult reinforce_update(PolicyModel& policy, const PseudoLabelBatch& batch, double reward,
                                 RewardBaseline& baseline, double learning_rate);

/// T <- max(T * factor, T_min).
void anneal_temperature(PolicyModel& policy, double factor);

}  // namespace restlab
