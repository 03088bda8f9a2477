#include "restlab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "restlab/error.hpp"

namespace restlab {

namespace {

using FoldId = std::pair<int, int>;  // (repeat, fold)

long fraction_key(double fraction) { return std::lround(fraction * 100.0); }

struct RunView {
  std::string run_id;
  std::string method;
  double fraction = 0.0;
  std::map<FoldId, std::vector<const MetricsRecord*>> folds;  // records ordered by iteration
};

std::map<std::string, RunView> group_runs(std::span<const MetricsRecord> records) {
  std::map<std::string, RunView> runs;
  for (const MetricsRecord& r : records) {
    RunView& v = runs[r.context.run_id];
    if (v.run_id.empty()) {
      v.run_id = r.context.run_id;
      v.method = r.context.method;
      v.fraction = r.context.labeled_fraction;
    } else if (v.method != r.context.method || fraction_key(v.fraction) != fraction_key(r.context.labeled_fraction)) {
      throw DataError("run " + v.run_id + " mixes methods or labeled fractions");
    }
    v.folds[{r.context.repeat, r.context.fold}].push_back(&r);
  }
  for (auto& [id, v] : runs) {
    for (auto& [key, recs] : v.folds) {
      std::sort(recs.begin(), recs.end(),
                [](const MetricsRecord* a, const MetricsRecord* b) { return a->context.iteration < b->context.iteration; });
    }
  }
  return runs;
}

// The unique run of `method` at `fraction`, or nullptr.
const RunView* find_run(const std::map<std::string, RunView>& runs, const std::string& method, long frac) {
  const RunView* found = nullptr;
  for (const auto& [id, v] : runs) {
    if (v.method != method || fraction_key(v.fraction) != frac) continue;
    if (found) {
      throw DataError("ambiguous " + method + " runs at fraction " + std::to_string(frac) + "%: " + found->run_id +
                      " and " + id);
    }
    found = &v;
  }
  return found;
}

struct Columns {
  std::vector<double> f1, sensitivity, fps;
  void add(const MetricsRecord& r) {
    f1.push_back(r.f1);
    sensitivity.push_back(r.sensitivity);
    fps.push_back(r.fps_per_image);
  }
};

std::string mean_sd_text(const MeanSd& m, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f +- %.*f", precision, m.mean, precision, m.sd);
  return buf;
}

std::string p_text(double p) {
  if (p < 0.001) return "<0.001";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", p);
  return buf;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L)); }

Rgb tinted(float gray, bool on, Rgb tint) {
  const double g = std::clamp(static_cast<double>(gray), 0.0, 1.0);
  if (!on) return {to_byte(g), to_byte(g), to_byte(g)};
  auto mix = [g](std::uint8_t t) { return to_byte(0.4 * g + 0.6 * t / 255.0); };
  return {mix(tint.r), mix(tint.g), mix(tint.b)};
}

}  // namespace

double report_p_value(std::span<const double> a, std::span<const double> b) {
  const MeanSd sa = mean_sd(a);
  const MeanSd sb = mean_sd(b);
  if (sa.sd == 0.0 && sb.sd == 0.0) return sa.mean == sb.mean ? 1.0 : 0.0;
  return welch_t_test(a, b).p;
}

std::vector<SummaryRow> summarize_runs(std::span<const MetricsRecord> records) {
  const auto runs = group_runs(records);
  std::set<long> fractions;
  for (const auto& [id, v] : runs) fractions.insert(fraction_key(v.fraction));
  std::vector<SummaryRow> rows;
  for (long frac : fractions) {  // std::set iterates ascending
    const RunView* pre = find_run(runs, "supervised", frac);
    const RunView* post = find_run(runs, "rest", frac);
    if (!pre || !post) continue;
    if (pre->folds.size() != post->folds.size()) {
      throw DataError("fold count mismatch at fraction " + std::to_string(frac) + "%: run " + pre->run_id + " (" +
                      pre->method + ") has " + std::to_string(pre->folds.size()) + " folds, run " + post->run_id +
                      " (" + post->method + ") has " + std::to_string(post->folds.size()));
    }
    Columns a, b;
    for (const auto& [key, recs] : pre->folds) {
      if (recs.front()->context.iteration != 0) {
        throw DataError("run " + pre->run_id + " lacks the iteration-0 record of a fold");
      }
      a.add(*recs.front());
    }
    for (const auto& [key, recs] : post->folds) b.add(*recs.back());
    SummaryRow row;
    row.fraction = static_cast<double>(frac) / 100.0;
    row.pre_run = pre->run_id;
    row.post_run = post->run_id;
    row.folds = static_cast<int>(pre->folds.size());
    row.pre_f1 = mean_sd(a.f1);
    row.post_f1 = mean_sd(b.f1);
    row.pre_sensitivity = mean_sd(a.sensitivity);
    row.post_sensitivity = mean_sd(b.sensitivity);
    row.pre_fps = mean_sd(a.fps);
    row.post_fps = mean_sd(b.fps);
    if (row.folds >= 2) {
      row.p_f1 = report_p_value(a.f1, b.f1);
      row.p_sensitivity = report_p_value(a.sensitivity, b.sensitivity);
      row.p_fps = report_p_value(a.fps, b.fps);
    }
    rows.push_back(row);
  }
  return rows;
}

void write_summary_csv(std::ostream& os, std::span<const SummaryRow> rows) {
  os << "labeled_fraction,folds,pre_run,post_run,pre_f1_mean,pre_f1_sd,post_f1_mean,post_f1_sd,p_f1,"
        "pre_sens_mean,pre_sens_sd,post_sens_mean,post_sens_sd,p_sens,"
        "pre_fps_mean,pre_fps_sd,post_fps_mean,post_fps_sd,p_fps\n";
  char buf[512];
  for (const SummaryRow& r : rows) {
    std::snprintf(buf, sizeof buf,
                  "%.2f,%d,%s,%s,%.6f,%.6f,%.6f,%.6f,%.6g,%.6f,%.6f,%.6f,%.6f,%.6g,%.6f,%.6f,%.6f,%.6f,%.6g\n",
                  r.fraction, r.folds, r.pre_run.c_str(), r.post_run.c_str(), r.pre_f1.mean, r.pre_f1.sd,
                  r.post_f1.mean, r.post_f1.sd, r.p_f1, r.pre_sensitivity.mean, r.pre_sensitivity.sd,
                  r.post_sensitivity.mean, r.post_sensitivity.sd, r.p_sensitivity, r.pre_fps.mean, r.pre_fps.sd,
                  r.post_fps.mean, r.post_fps.sd, r.p_fps);
    os << buf;
  }
}

std::string format_summary_table(std::span<const SummaryRow> rows) {
  std::ostringstream os;
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-8s %-6s | %-17s %-17s %-7s | %-17s %-17s %-7s | %-17s %-17s %-7s\n", "labels",
                "folds", "F1 pre", "F1 post", "p", "Sens pre", "Sens post", "p", "FPs/img pre", "FPs/img post", "p");
  os << buf;
  for (const SummaryRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%-8s %-6d | %-17s %-17s %-7s | %-17s %-17s %-7s | %-17s %-17s %-7s\n",
                  (std::to_string(std::lround(r.fraction * 100.0)) + "%").c_str(), r.folds,
                  mean_sd_text(r.pre_f1, 3).c_str(), mean_sd_text(r.post_f1, 3).c_str(), p_text(r.p_f1).c_str(),
                  mean_sd_text(r.pre_sensitivity, 3).c_str(), mean_sd_text(r.post_sensitivity, 3).c_str(),
                  p_text(r.p_sensitivity).c_str(), mean_sd_text(r.pre_fps, 2).c_str(),
                  mean_sd_text(r.post_fps, 2).c_str(), p_text(r.p_fps).c_str());
    os << buf;
  }
  return os.str();
}

std::vector<CurvePoint> f1_curves(std::span<const MetricsRecord> records) {
  const auto runs = group_runs(records);
  // (method order, fraction, iteration) -> F1 values over folds
  std::map<std::tuple<int, long, int>, std::vector<double>> cells;
  const std::vector<std::string> methods = {"rest", "self-train", "neg-mine"};
  for (const auto& [id, v] : runs) {
    const auto m = std::find(methods.begin(), methods.end(), v.method);
    if (m == methods.end()) continue;
    const int order = static_cast<int>(m - methods.begin());
    for (const auto& [key, recs] : v.folds) {
      for (const MetricsRecord* r : recs) {
        cells[{order, fraction_key(v.fraction), r->context.iteration}].push_back(r->f1);
      }
    }
  }
  std::vector<CurvePoint> out;
  for (const auto& [key, values] : cells) {
    CurvePoint p;
    p.method = methods[static_cast<std::size_t>(std::get<0>(key))];
    p.fraction = static_cast<double>(std::get<1>(key)) / 100.0;
    p.iteration = std::get<2>(key);
    p.f1 = mean_sd(values);
    p.folds = static_cast<int>(values.size());
    out.push_back(p);
  }
  return out;
}

void write_curves_csv(std::ostream& os, std::span<const CurvePoint> points) {
  os << "method,labeled_fraction,iteration,folds,f1_mean,f1_sd\n";
  char buf[256];
  for (const CurvePoint& p : points) {
    std::snprintf(buf, sizeof buf, "%s,%.2f,%d,%d,%.6f,%.6f\n", p.method.c_str(), p.fraction, p.iteration, p.folds,
                  p.f1.mean, p.f1.sd);
    os << buf;
  }
}

Canvas::Canvas(int width, int height, Rgb fill) : width_(width), height_(height) {
  if (width <= 0 || height <= 0) throw ConfigError("canvas dimensions must be positive");
  px_.assign(static_cast<std::size_t>(width) * height, fill);
}

Rgb Canvas::at(int x, int y) const { return px_.at(static_cast<std::size_t>(y) * width_ + x); }

void Canvas::set(int x, int y, Rgb c) {
  if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
  px_[static_cast<std::size_t>(y) * width_ + x] = c;
}

void Canvas::fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
  for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
    for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
}

void Canvas::line(int x0, int y0, int x1, int y1, Rgb c) {
  // Bresenham; endpoints inclusive.
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

void Canvas::write_ppm(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << "P6\n" << width_ << ' ' << height_ << "\n255\n";
  for (const Rgb& c : px_) {
    const char bytes[3] = {static_cast<char>(c.r), static_cast<char>(c.g), static_cast<char>(c.b)};
    os.write(bytes, 3);
  }
  if (!os) throw DataError("failed writing " + path.string());
}

Rgb method_colour(const std::string& method) {
  if (method == "rest") return {200, 30, 30};
  if (method == "self-train") return {30, 90, 200};
  if (method == "neg-mine") return {30, 150, 60};
  return {90, 90, 90};
}

Canvas plot_curves(std::span<const CurvePoint> points, double fraction, int width, int height) {
  Canvas canvas(width, height);
  const int left = 40, right = width - 15, top = 15, bottom = height - 30;
  if (right <= left || bottom <= top) throw ConfigError("plot area too small");
  int max_iter = 1;
  for (const CurvePoint& p : points) {
    if (fraction_key(p.fraction) == fraction_key(fraction)) max_iter = std::max(max_iter, p.iteration);
  }
  auto px = [&](int it) { return left + static_cast<int>(std::lround(double(right - left) * it / max_iter)); };
  auto py = [&](double f1) {
    return bottom - static_cast<int>(std::lround(double(bottom - top) * std::clamp(f1, 0.0, 1.0)));
  };
  for (int g = 0; g <= 10; ++g) canvas.line(left, py(g / 10.0), right, py(g / 10.0), {225, 225, 225});
  for (int it = 0; it <= max_iter; ++it) canvas.line(px(it), bottom, px(it), bottom + 4, {0, 0, 0});
  canvas.line(left, top, left, bottom, {0, 0, 0});
  canvas.line(left, bottom, right, bottom, {0, 0, 0});

  std::map<std::string, std::vector<const CurvePoint*>> series;
  for (const CurvePoint& p : points) {
    if (fraction_key(p.fraction) == fraction_key(fraction)) series[p.method].push_back(&p);
  }
  for (auto& [method, pts] : series) {
    std::sort(pts.begin(), pts.end(), [](const CurvePoint* a, const CurvePoint* b) { return a->iteration < b->iteration; });
    const Rgb c = method_colour(method);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const int x = px(pts[i]->iteration), y = py(pts[i]->f1.mean);
      canvas.fill_rect(x - 2, y - 2, x + 2, y + 2, c);
      if (i > 0) canvas.line(px(pts[i - 1]->iteration), py(pts[i - 1]->f1.mean), x, y, c);
    }
  }
  return canvas;
}

Canvas triptych(const Grid<float>& image, const BinaryGrid& gt, const BinaryGrid& pre, const BinaryGrid& post,
                int scale) {
  if (!image.same_shape(gt) || !image.same_shape(pre) || !image.same_shape(post)) {
    throw DataError("triptych: image and masks differ in shape");
  }
  if (scale < 1) throw ConfigError("triptych: scale must be >= 1");
  constexpr int kGutter = 2;
  const int pw = image.width * scale, ph = image.height * scale;
  Canvas canvas(3 * pw + 2 * kGutter, ph, {255, 255, 255});
  const BinaryGrid* masks[3] = {&gt, &pre, &post};
  const Rgb tints[3] = {{40, 220, 40}, {240, 60, 40}, {240, 60, 40}};
  for (int panel = 0; panel < 3; ++panel) {
    const int x0 = panel * (pw + kGutter);
    for (int r = 0; r < image.height; ++r) {
      for (int c = 0; c < image.width; ++c) {
        const Rgb colour = tinted(image(r, c), (*masks[panel])(r, c) != 0, tints[panel]);
        canvas.fill_rect(x0 + c * scale, r * scale, x0 + (c + 1) * scale - 1, (r + 1) * scale - 1, colour);
      }
    }
  }
  return canvas;
}

}  // namespace restlab
