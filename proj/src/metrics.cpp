#include "restlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "restlab/error.hpp"
#include "restlab/synthdata.hpp"
#include "restlab/util.hpp"

namespace restlab {

namespace {

void require_same_shape(const BinaryGrid& a, const BinaryGrid& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DataError(std::string(op) + ": shape mismatch " + std::to_string(a.height) + "x" +
                    std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                    std::to_string(b.width));
  }
}

int find_root(std::vector<int>& parent, int i) {
  while (parent[i] != i) {
    parent[i] = parent[parent[i]];
    i = parent[i];
  }
  return i;
}

}  // namespace

ConfusionCounts confusion(const BinaryGrid& pred, const BinaryGrid& gt) {
  require_same_shape(pred, gt, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.px[i] != 0;
    const bool g = gt.px[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double f1_score(const ConfusionCounts& c) {
  const long denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double pixel_f1(const BinaryGrid& pred, const BinaryGrid& gt) { return f1_score(confusion(pred, gt)); }

double pixel_f1(const MaskGrid& pred, const MaskGrid& gt) { return pixel_f1(pred.pixels, gt.pixels); }

std::vector<Component> connected_components(const BinaryGrid& mask) {
  // Two-pass union-find labelling over 4-neighbours.
  const int h = mask.height;
  const int w = mask.width;
  std::vector<int> parent(mask.size());
  std::iota(parent.begin(), parent.end(), 0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const int i = r * w + c;
      if (!mask.px[i]) continue;
      if (c > 0 && mask.px[i - 1]) {
        const int a = find_root(parent, i - 1);
        const int b = find_root(parent, i);
        parent[std::max(a, b)] = std::min(a, b);
      }
      if (r > 0 && mask.px[i - w]) {
        const int a = find_root(parent, i - w);
        const int b = find_root(parent, i);
        parent[std::max(a, b)] = std::min(a, b);
      }
    }
  }
  std::vector<int> slot(mask.size(), -1);
  std::vector<Component> out;
  for (int i = 0; i < static_cast<int>(mask.size()); ++i) {
    if (!mask.px[i]) continue;
    const int root = find_root(parent, i);
    if (slot[root] < 0) {
      slot[root] = static_cast<int>(out.size());
      out.emplace_back();
    }
    out[slot[root]].pixels.push_back(i);
  }
  return out;
}

MaskGrid make_mask(BinaryGrid pixels) {
  for (auto& v : pixels.px) v = v ? 1 : 0;
  const int count = static_cast<int>(connected_components(pixels).size());
  return MaskGrid{std::move(pixels), count};
}

BinaryGrid binarize(const ProbMap& map, float threshold) {
  BinaryGrid out(map.height, map.width);
  for (std::size_t i = 0; i < map.size(); ++i) out.px[i] = map.px[i] >= threshold ? 1 : 0;
  return out;
}

LesionMatch lesion_metrics(const BinaryGrid& pred, const BinaryGrid& gt, double iou_thresh) {
  require_same_shape(pred, gt, "lesion_metrics");
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) {
    throw ConfigError("lesion_metrics: iou_thresh must lie in (0,1)");
  }
  const auto pred_cc = connected_components(pred);
  const auto gt_cc = connected_components(gt);

  std::vector<int> gt_label(gt.size(), -1);
  for (int g = 0; g < static_cast<int>(gt_cc.size()); ++g) {
    for (int p : gt_cc[g].pixels) gt_label[p] = g;
  }
  struct Pair {
    double iou;
    int gt;
    int pred;
  };
  std::vector<Pair> pairs;
  for (int q = 0; q < static_cast<int>(pred_cc.size()); ++q) {
    std::vector<int> overlap(gt_cc.size(), 0);
    for (int p : pred_cc[q].pixels) {
      if (gt_label[p] >= 0) ++overlap[gt_label[p]];
    }
    for (int g = 0; g < static_cast<int>(gt_cc.size()); ++g) {
      if (overlap[g] == 0) continue;
      const double uni = static_cast<double>(gt_cc[g].pixels.size() + pred_cc[q].pixels.size() - overlap[g]);
      const double iou = overlap[g] / uni;
      if (iou >= iou_thresh) pairs.push_back({iou, g, q});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });

  LesionMatch m;
  m.gt_total = static_cast<int>(gt_cc.size());
  m.pred_total = static_cast<int>(pred_cc.size());
  std::vector<bool> gt_used(gt_cc.size(), false);
  std::vector<bool> pred_used(pred_cc.size(), false);
  for (const auto& pr : pairs) {
    if (gt_used[pr.gt] || pred_used[pr.pred]) continue;
    gt_used[pr.gt] = true;
    pred_used[pr.pred] = true;
    m.matched_gt.push_back(pr.gt);
  }
  m.detected = static_cast<int>(m.matched_gt.size());
  m.false_positives = m.pred_total - m.detected;
  return m;
}

EvalSummary evaluate_set(std::span<const BinaryGrid> preds, std::span<const MaskGrid> gts, double iou_thresh) {
  if (preds.size() != gts.size()) throw DataError("evaluate_set: prediction/label count mismatch");
  EvalSummary s;
  s.images = static_cast<int>(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    s.counts += confusion(preds[i], gts[i].pixels);
    const LesionMatch m = lesion_metrics(preds[i], gts[i].pixels, iou_thresh);
    s.gt_lesions += m.gt_total;
    s.detected += m.detected;
    s.false_positives += m.false_positives;
  }
  s.f1 = f1_score(s.counts);
  s.sensitivity = s.gt_lesions > 0 ? static_cast<double>(s.detected) / s.gt_lesions : 1.0;
  s.fps_per_image = s.images > 0 ? static_cast<double>(s.false_positives) / s.images : 0.0;
  return s;
}

double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  // Continued fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise.
  if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - incomplete_beta(b, a, 1.0 - x);
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                           b * std::log1p(-x);
  const double front = std::exp(log_front) / a;

  // Modified Lentz evaluation.
  constexpr double kTiny = 1e-300;
  constexpr double kEps = 1e-15;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double f = d;
  for (int m = 1; m <= 10000; ++m) {
    const double md = m;
    double num = md * (b - md) * x / ((a + 2.0 * md - 1.0) * (a + 2.0 * md));
    d = 1.0 + num * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + num / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    f *= c * d;
    num = -(a + md) * (a + b + md) * x / ((a + 2.0 * md) * (a + 2.0 * md + 1.0));
    d = 1.0 + num * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + num / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = c * d;
    f *= delta;
    if (std::fabs(delta - 1.0) < kEps) break;
  }
  return front * f;
}

double student_t_two_sided(double t, double df) {
  if (!(df > 0.0)) throw ConfigError("student_t_two_sided: df must be positive");
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) {
    throw ConfigError("welch_t_test: each sample needs at least 2 values (got " + std::to_string(a.size()) +
                      ", " + std::to_string(b.size()) + ")");
  }
  const MeanSd sa = mean_sd(a);
  const MeanSd sb = mean_sd(b);
  const double va = sa.sd * sa.sd / static_cast<double>(a.size());
  const double vb = sb.sd * sb.sd / static_cast<double>(b.size());
  if (!(va + vb > 0.0)) {
    std::ostringstream os;
    os << "welch_t_test: degenerate variance (sd_a=" << sa.sd << ", sd_b=" << sb.sd << ")";
    throw NumericalError(os.str());
  }
  WelchResult r;
  const double se2 = va + vb;
  r.t = (sa.mean - sb.mean) / std::sqrt(se2);
  r.df = se2 * se2 /
         (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

MeanSd mean_sd(std::span<const double> values) {
  MeanSd out;
  if (values.empty()) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() < 2) return out;
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return out;
}

void MetricsRecord::validate() const {
  if (context.run_id.empty() || context.method.empty()) {
    throw ConfigError("metrics record: empty run_id or method");
  }
  const bool finite = std::isfinite(f1) && std::isfinite(sensitivity) && std::isfinite(fps_per_image) &&
                      std::isfinite(context.labeled_fraction) && (!reward || std::isfinite(*reward));
  if (!finite) throw NumericalError("metrics record: non-finite field in run " + context.run_id);
}

void write_metrics_csv_header(std::ostream& os) { os << kMetricsCsvHeader << '\n'; }

void write_metrics_csv_row(std::ostream& os, const MetricsRecord& r) {
  r.validate();
  std::ostringstream line;
  line << std::setprecision(17);
  line << r.context.run_id << ',' << r.context.method << ',' << r.context.labeled_fraction << ','
       << r.context.repeat << ',' << r.context.fold << ',' << r.context.iteration << ',' << r.f1 << ','
       << r.sensitivity << ',' << r.fps_per_image << ',';
  if (r.reward) line << *r.reward;
  os << line.str() << '\n';
}

namespace {

double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(where + ": invalid number '" + s + "'");
  }
}

int parse_int(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(where + ": invalid integer '" + s + "'");
  }
}

}  // namespace

std::vector<MetricsRecord> read_metrics_csv(std::istream& is, const std::string& source) {
  std::string line;
  if (!std::getline(is, line) || line != kMetricsCsvHeader) {
    throw DataError(source + ":1: missing or unexpected metrics CSV header");
  }
  std::vector<MetricsRecord> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    const std::string where = source + ":" + std::to_string(lineno);
    if (f.size() != 10) throw DataError(where + ": expected 10 fields, got " + std::to_string(f.size()));
    MetricsRecord r;
    r.context.run_id = f[0];
    r.context.method = f[1];
    r.context.labeled_fraction = parse_double(f[2], where);
    r.context.repeat = parse_int(f[3], where);
    r.context.fold = parse_int(f[4], where);
    r.context.iteration = parse_int(f[5], where);
    r.f1 = parse_double(f[6], where);
    r.sensitivity = parse_double(f[7], where);
    r.fps_per_image = parse_double(f[8], where);
    if (!f[9].empty()) r.reward = parse_double(f[9], where);
    out.push_back(std::move(r));
  }
  return out;
}

std::uint64_t repeat_seed(int repeat) { return derive_seed(0x5EEDF01D, static_cast<std::uint64_t>(repeat)); }

CvResult cross_validate(const FoldRunner& runner, const DatasetSplit& split, int k, int repeats) {
  if (repeats < 1) throw ConfigError("cross_validate: repeats must be >= 1");
  CvResult res;
  for (int r = 0; r < repeats; ++r) {
    const auto folds = make_folds(split, k, repeat_seed(r));
    for (int f = 0; f < k; ++f) {
      FoldContext ctx;
      ctx.repeat = r;
      ctx.fold = f;
      ctx.val_ids = folds[f];
      for (int g = 0; g < k; ++g) {
        if (g != f) ctx.train_ids.insert(ctx.train_ids.end(), folds[g].begin(), folds[g].end());
      }
      std::sort(ctx.train_ids.begin(), ctx.train_ids.end());
      try {
        MetricsRecord rec = runner(ctx);
        rec.context.repeat = r;
        rec.context.fold = f;
        res.records.push_back(std::move(rec));
      } catch (const Error& e) {
        throw Error(e.code(), "fold " + std::to_string(f) + " of repeat " + std::to_string(r) + ": " + e.what());
      }
    }
  }
  std::vector<double> f1, sens, fps;
  for (const auto& rec : res.records) {
    f1.push_back(rec.f1);
    sens.push_back(rec.sensitivity);
    fps.push_back(rec.fps_per_image);
  }
  res.f1 = mean_sd(f1);
  res.sensitivity = mean_sd(sens);
  res.fps_per_image = mean_sd(fps);
  return res;
}

}  // namespace restlab
