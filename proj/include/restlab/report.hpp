#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "restlab/grid.hpp"
#include "restlab/metrics.hpp"

namespace restlab {

/// Per-fraction comparison of the supervised model (pre) and the ReST result (post).
/// Pre values are the supervised iteration-0 records; post values are the
/// last-iteration ReST record of every fold.
struct SummaryRow {
  double fraction = 0.0;
  std::string pre_run;
  std::string post_run;
  int folds = 0;
  MeanSd pre_f1, post_f1;
  MeanSd pre_sensitivity, post_sensitivity;
  MeanSd pre_fps, post_fps;
  double p_f1 = 1.0;
  double p_sensitivity = 1.0;
  double p_fps = 1.0;
};

/// Welch p-value that also covers two constant samples: 1 when their means agree, 0 otherwise.
double report_p_value(std::span<const double> a, std::span<const double> b);

/// Rows ascending by fraction, one per fraction with both a supervised and a
/// ReST run. Throws DataError naming both runs when their fold counts differ.
std::vector<SummaryRow> summarize_runs(std::span<const MetricsRecord> records);

void write_summary_csv(std::ostream& os, std::span<const SummaryRow> rows);
std::string format_summary_table(std::span<const SummaryRow> rows);

struct CurvePoint {
  std::string method;
  double fraction = 0.0;
  int iteration = 0;
  MeanSd f1;
  int folds = 0;
};

/// Mean F1 per (method, fraction, iteration) for ReST and both baselines.
std::vector<CurvePoint> f1_curves(std::span<const MetricsRecord> records);
void write_curves_csv(std::ostream& os, std::span<const CurvePoint> points);

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// RGB raster with clipped drawing primitives and binary PPM output.
class Canvas {
 public:
  Canvas(int width, int height, Rgb fill = {255, 255, 255});

  int width() const { return width_; }
  int height() const { return height_; }
  Rgb at(int x, int y) const;
  void set(int x, int y, Rgb c);
  void fill_rect(int x0, int y0, int x1, int y1, Rgb c);
  void line(int x0, int y0, int x1, int y1, Rgb c);
  void write_ppm(const std::filesystem::path& path) const;

 private:
  int width_;
  int height_;
  std::vector<Rgb> px_;
};

/// Line plot of the F1 curves at one fraction: one colour per method, axes
/// spanning iterations [0, max] and F1 [0, 1] with gridlines every 0.1.
Canvas plot_curves(std::span<const CurvePoint> points, double fraction, int width = 640, int height = 400);

/// Colour used for a method's curve.
Rgb method_colour(const std::string& method);

/// Three panels (ground truth | pre | post) of the grayscale image with the
/// mask pixels tinted, each upscaled by `scale`, separated by 2-pixel gutters.
Canvas triptych(const Grid<float>& image, const BinaryGrid& gt, const BinaryGrid& pre, const BinaryGrid& post,
                int scale = 4);

}  // namespace restlab
