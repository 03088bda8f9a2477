#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "restlab/error.hpp"
#include "restlab/grid.hpp"
#include "restlab/numcore.hpp"

namespace restlab {

class SegModel;

enum class Polarity { kExpert, kSyntheticNegative };

enum class NegativeRecipe { kNone, kTranslate, kMorphology, kRandomBlob, kEmpty };

std::string recipe_name(NegativeRecipe r);

/// A (state, label) pair: the segmentation output on an image and a label for it.
struct Demonstration {
  int source_id = 0;
  ProbMap state;
  MaskGrid label;
  Polarity polarity = Polarity::kExpert;
  NegativeRecipe recipe = NegativeRecipe::kNone;
};

/// One expert positive per labeled pair: (model.predict(image), true mask).
std::vector<Demonstration> build_demonstrations(const SegModel& model, std::span<const LabeledPair> labeled);

struct NegativeRecipeConfig {
  bool translate = true;
  bool morphology = true;
  bool random_blob = true;
  bool empty = true;
  int per_positive = 2;
  int min_shift = 8;  // pixels; smaller shifts are rejected
  int max_shift = 24;
  int min_morph = 2;
  int max_morph = 4;

  friend bool operator==(const NegativeRecipeConfig&, const NegativeRecipeConfig&) = default;
};

/// Corrupted copies of each positive's label. Positives with an empty label
/// only admit the random-blob recipe, which is used for them even when disabled.
std::vector<Demonstration> synthesize_negatives(std::span<const Demonstration> positives, std::uint64_t seed,
                                                const NegativeRecipeConfig& cfg = {});

/// |a xor b| / |a or b|; 0 when both are empty.
double label_difference(const BinaryGrid& a, const BinaryGrid& b);

BinaryGrid translate_mask(const BinaryGrid& m, int dy, int dx);
BinaryGrid dilate(const BinaryGrid& m, int radius);
BinaryGrid erode(const BinaryGrid& m, int radius);

struct ExpertScore {
  int decision = 0;  // 1 when margin >= threshold
  float margin = 0.0f;
};

inline constexpr const char* kExpertArchId = "irl-v1";

/// Convolutional scorer over the (state, label) stack: three 3x3 conv+ReLU
/// stages (pooling between them), global mean pooling, linear readout.
class ExpertRewardModel {
 public:
  ExpertRewardModel(int height, int width, std::uint64_t seed);

  int height() const { return height_; }
  int width() const { return width_; }
  float threshold() const { return threshold_; }
  void set_threshold(float t) { threshold_ = t; }

  std::span<nc::Parameter<float>> params() { return params_; }
  std::span<const nc::Parameter<float>> params() const { return params_; }
  std::size_t parameter_count() const;
  /// Covers parameters and the decision threshold.
  std::uint64_t digest() const;

  /// x [N,2,H,W] -> margins [N,1,1,1].
  nc::Tensor<float>& forward(nc::Tape<float>& tape, nc::Tensor<float>& x);

  std::vector<float> margins(std::span<const ProbMap* const> states, std::span<const BinaryGrid* const> labels) const;
  ExpertScore score(const ProbMap& state, const MaskGrid& label) const;

  void save(std::ostream& os) const;
  void load(std::istream& is);
  void save_file(const std::filesystem::path& path) const;
  void load_file(const std::filesystem::path& path);

 private:
  int height_;
  int width_;
  float threshold_ = 0.0f;
  std::vector<nc::Parameter<float>> params_;
};

struct ExpertHyper {
  double learning_rate = 3e-3;  // Adam
  double l2 = 1e-4;
  int batch_size = 16;
  int min_epochs = 8;
  int max_epochs = 40;
  double holdout_fraction = 0.2;
  double target_accuracy = 0.9;
  double abort_accuracy = 0.75;
  std::uint64_t seed = 1;

  friend bool operator==(const ExpertHyper&, const ExpertHyper&) = default;
};

struct ExpertTrainResult {
  ExpertRewardModel model;
  double heldout_accuracy = 0.0;  // at the calibrated threshold
  double false_accept = 0.0;
  double false_reject = 0.0;
  int epochs = 0;
  int heldout_size = 0;
};

/// Raised when the trained classifier cannot separate the held-out demonstrations.
class UnusableRewardModel : public NumericalError {
 public:
  UnusableRewardModel(const std::string& what, double accuracy) : NumericalError(what), accuracy_(accuracy) {}
  double accuracy() const { return accuracy_; }

 private:
  double accuracy_;
};

/// Hinge-loss (max-margin) training with y=+1 for expert pairs and -1 for
/// negatives plus L2. Demonstrations are split into train/held-out by source
/// image; the decision threshold is set on the held-out part so that false
/// accept and false reject rates are as equal as possible.
ExpertTrainResult train_expert_reward(std::span<const Demonstration> positives,
                                      std::span<const Demonstration> negatives, const ExpertHyper& hyper);

struct StateLabel {
  const ProbMap* state;
  const MaskGrid* label;
};

/// Mean binary score over the pairs.
double batch_reward(const ExpertRewardModel& model, std::span<const StateLabel> pairs);

}  // namespace restlab
