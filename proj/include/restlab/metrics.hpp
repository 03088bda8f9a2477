#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "restlab/grid.hpp"

namespace restlab {

struct DatasetSplit;

struct ConfusionCounts {
  long tp = 0;
  long fp = 0;
  long fn = 0;
  long tn = 0;

  long total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

ConfusionCounts confusion(const BinaryGrid& pred, const BinaryGrid& gt);

/// 2tp / (2tp + fp + fn); 1.0 when both prediction and truth are empty.
double f1_score(const ConfusionCounts& c);
double pixel_f1(const MaskGrid& pred, const MaskGrid& gt);
double pixel_f1(const BinaryGrid& pred, const BinaryGrid& gt);

/// A 4-connected foreground component as ascending row-major pixel indices.
struct Component {
  std::vector<int> pixels;
  friend bool operator==(const Component&, const Component&) = default;
};

/// 4-connected components ordered by their smallest row-major pixel index.
std::vector<Component> connected_components(const BinaryGrid& mask);

/// Wraps a binary grid into a MaskGrid with its lesion count filled in.
MaskGrid make_mask(BinaryGrid pixels);

/// Thresholds a probability map at `threshold` (inclusive).
BinaryGrid binarize(const ProbMap& map, float threshold = 0.5f);

struct LesionMatch {
  std::vector<int> matched_gt;  // indices into gt components, one per detection
  int gt_total = 0;
  int pred_total = 0;
  int detected = 0;
  int false_positives = 0;  // predicted components left unmatched
};

inline constexpr double kDefaultIouThreshold = 0.25;

/// Greedy one-to-one matching of predicted to ground-truth components by
/// descending IoU; only pairs with IoU >= iou_thresh are eligible.
LesionMatch lesion_metrics(const BinaryGrid& pred, const BinaryGrid& gt,
                           double iou_thresh = kDefaultIouThreshold);

/// Set-level scores: micro pixel F1, micro lesion sensitivity, FPs per image.
struct EvalSummary {
  double f1 = 0.0;
  double sensitivity = 0.0;
  double fps_per_image = 0.0;
  ConfusionCounts counts;
  int images = 0;
  int gt_lesions = 0;
  int detected = 0;
  int false_positives = 0;
};

EvalSummary evaluate_set(std::span<const BinaryGrid> preds, std::span<const MaskGrid> gts,
                         double iou_thresh = kDefaultIouThreshold);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

/// Two-sided Welch unequal-variance t-test. Throws NumericalError when both samples are constant.
WelchResult welch_t_test(std::span<const double> a, std::span<const double> b);

/// Regularized incomplete beta I_x(a, b) (continued fraction).
double incomplete_beta(double a, double b, double x);

/// Two-sided tail probability P(|T| >= |t|) for Student's t with df degrees of freedom.
double student_t_two_sided(double t, double df);

struct RecordContext {
  std::string run_id;
  std::string method;
  double labeled_fraction = 1.0;
  int repeat = 0;
  int fold = 0;
  int iteration = 0;

  friend bool operator==(const RecordContext&, const RecordContext&) = default;
};

struct MetricsRecord {
  RecordContext context;
  double f1 = 0.0;
  double sensitivity = 0.0;
  double fps_per_image = 0.0;
  std::optional<double> reward;

  /// Throws ConfigError when a field is non-finite or a context field is empty.
  void validate() const;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

inline constexpr const char* kMetricsCsvHeader =
    "run_id,method,labeled_fraction,repeat,fold,iteration,f1,sensitivity,fps_per_image,reward";

void write_metrics_csv_header(std::ostream& os);
void write_metrics_csv_row(std::ostream& os, const MetricsRecord& r);
/// Parses a metrics CSV (header required). Throws DataError naming the line.
std::vector<MetricsRecord> read_metrics_csv(std::istream& is, const std::string& source = "<stream>");

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation (n-1)
};

MeanSd mean_sd(std::span<const double> values);

struct FoldContext {
  int repeat = 0;
  int fold = 0;
  std::vector<int> train_ids;
  std::vector<int> val_ids;
};

using FoldRunner = std::function<MetricsRecord(const FoldContext&)>;

struct CvResult {
  std::vector<MetricsRecord> records;  // sorted by (repeat, fold)
  MeanSd f1;
  MeanSd sensitivity;
  MeanSd fps_per_image;
};

/// Runs `runner` on every (repeat, fold); repeat r partitions the labeled ids
/// with make_folds(split, k, repeat_seed(r)).
CvResult cross_validate(const FoldRunner& runner, const DatasetSplit& split, int k, int repeats);

/// Fold-partition seed used for repeat r.
std::uint64_t repeat_seed(int repeat);

}  // namespace restlab
