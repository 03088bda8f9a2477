#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "restlab/grid.hpp"
#include "restlab/metrics.hpp"
#include "restlab/numcore.hpp"

namespace restlab {

struct DatasetSplit;

/// Micro U-Net: `levels` resolutions, widths base, 2*base, ..., two 3x3
/// convolutions per level, nearest upsampling with skip concatenation and a
/// 1x1 sigmoid head.
struct UNetArch {
  int height = 64;
  int width = 64;
  int base_width = 8;
  int levels = 3;
  double head_bias = 0.0;  // initial output logit

  friend bool operator==(const UNetArch&, const UNetArch&) = default;
};

inline constexpr const char* kSegArchId = "seg-v1";

class SegModel {
 public:
  SegModel(const UNetArch& arch, std::uint64_t seed);

  const UNetArch& arch() const { return arch_; }
  std::span<nc::Parameter<float>> params() { return params_; }
  std::span<const nc::Parameter<float>> params() const { return params_; }
  std::size_t parameter_count() const;
  std::uint64_t digest() const { return nc::parameter_digest(params()); }

  /// Batched forward: x [N,1,H,W] -> probabilities [N,1,H,W].
  nc::Tensor<float>& forward(nc::Tape<float>& tape, nc::Tensor<float>& x);
  /// Pre-sigmoid head output; the training loss is computed from these.
  nc::Tensor<float>& logits(nc::Tape<float>& tape, nc::Tensor<float>& x);

  /// Probability map clamped to [1e-6, 1-1e-6]. Pure.
  ProbMap predict(const SampleGrid& image) const;
  std::vector<ProbMap> predict_all(std::span<const SampleGrid> images) const;

  void save(std::ostream& os) const;
  void load(std::istream& is);
  void save_file(const std::filesystem::path& path) const;
  void load_file(const std::filesystem::path& path);

 private:
  nc::Parameter<float>& param(std::size_t i) { return params_[i]; }

  UNetArch arch_;
  std::vector<nc::Parameter<float>> params_;
};

/// Packs images into an [N,1,H,W] tensor on the tape.
nc::Tensor<float>& images_to_tensor(nc::Tape<float>& tape, std::span<const SampleGrid* const> images);

struct SegHyper {
  double learning_rate = 2e-3;  // Adam
  int batch_size = 4;
  int max_epochs = 30;
  int patience = 10;  // epochs without validation-F1 improvement, counted once F1 > 0
  std::uint64_t seed = 1;

  friend bool operator==(const SegHyper&, const SegHyper&) = default;
};

struct EpochStat {
  int epoch = 0;
  double train_loss = 0.0;
  double val_f1 = 0.0;
};

struct SupervisedResult {
  SegModel model;
  std::vector<EpochStat> curve;
  double final_val_f1 = 0.0;
};

/// Pixelwise-BCE training; early stop on validation F1 (parameters of the
/// last epoch are returned). Epochs with zero validation F1 before the first
/// nonzero one do not consume patience. Throws NumericalError on a non-finite loss.
SupervisedResult train_supervised(std::span<const LabeledPair> train, std::span<const LabeledPair> val,
                                  const UNetArch& arch, const SegHyper& hyper);

/// Trains on every fold except `fold`, validating on `fold`.
SupervisedResult train_supervised(const DatasetSplit& split, int fold, const UNetArch& arch,
                                  const SegHyper& hyper);

/// Set-level scores of the model thresholded at 0.5.
EvalSummary evaluate_model(const SegModel& model, std::span<const LabeledPair> data,
                           double iou_thresh = kDefaultIouThreshold);

struct PseudoPair {
  const SampleGrid* image;
  MaskGrid mask;
};

struct FineTuneHyper {
  double base_learning_rate = 2e-3;  // the supervised rate; fine-tuning uses lr_scale times this
  double lr_scale = 0.1;
  int steps = 8;
  int pseudo_per_step = 4;
  bool mix_labeled = true;  // pair every pseudolabel with a true labeled sample
  std::uint64_t seed = 1;

  friend bool operator==(const FineTuneHyper&, const FineTuneHyper&) = default;
};

struct FineTuneResult {
  double r_val_before = 0.0;
  double r_val = 0.0;  // pixel F1 on the validation pairs after fine-tuning
  bool reverted = false;
  int steps_run = 0;
};

/// Short low-rate update on pseudolabels (mixed 1:1 with `labeled`), then R_val.
/// A non-finite loss restores the incoming parameters and sets `reverted`.
FineTuneResult fine_tune(SegModel& model, std::span<const PseudoPair> pseudo, std::span<const LabeledPair> val,
                         std::span<const LabeledPair> labeled, const FineTuneHyper& hyper);

}  // namespace restlab
