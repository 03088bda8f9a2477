#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "restlab/error.hpp"
#include "restlab/metrics.hpp"
#include "restlab/synthdata.hpp"
#include "support/oracles.hpp"
#include "support/welch_oracle.hpp"

namespace {

using namespace restlab;
namespace rt = restlab::testing;

BinaryGrid grid_from(int h, int w, std::initializer_list<int> on) {
  BinaryGrid g(h, w);
  for (int i : on) g.px[i] = 1;
  return g;
}

// ---- pixel F1 --------------------------------------------------------------

TEST(PixelF1, IdentityIsOne) {
  const auto m = make_mask(grid_from(4, 4, {1, 2, 5}));
  EXPECT_EQ(pixel_f1(m, m), 1.0);
}

TEST(PixelF1, PartialOverlapFourSevenths) {
  // pred 3 px, gt 4 px, overlap 2: 2*2 / (2*2 + 1 + 2).
  const auto pred = grid_from(4, 4, {0, 1, 2});
  const auto gt = grid_from(4, 4, {1, 2, 5, 6});
  EXPECT_NEAR(pixel_f1(pred, gt), 4.0 / 7.0, 1e-12);
}

TEST(PixelF1, EmptyPredictionScoresZero) {
  EXPECT_EQ(pixel_f1(BinaryGrid(4, 4), grid_from(4, 4, {3})), 0.0);
}

TEST(PixelF1, BothEmptyIsOne) { EXPECT_EQ(pixel_f1(BinaryGrid(3, 3), BinaryGrid(3, 3)), 1.0); }

TEST(PixelF1, ShapeMismatchThrows) { EXPECT_THROW(pixel_f1(BinaryGrid(3, 3), BinaryGrid(3, 4)), DataError); }

TEST(PixelF1, SymmetricAndMatchesOracle) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    const auto a = rt::random_blobby_mask(rng, 16, 16);
    const auto b = rt::perturb(rng, a, 0.1);
    EXPECT_EQ(pixel_f1(a, b), pixel_f1(b, a));
    EXPECT_NEAR(pixel_f1(a, b), rt::oracle_f1(a, b), 1e-12);
  }
}

// ---- connected components ----------------------------------------------------

TEST(Components, EmptyMaskHasNone) { EXPECT_TRUE(connected_components(BinaryGrid(5, 5)).empty()); }

TEST(Components, DiagonalPixelsAreSeparate) {
  EXPECT_EQ(connected_components(grid_from(2, 2, {0, 3})).size(), 2u);
}

TEST(Components, MatchFloodFillOracleInOrder) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 300; ++t) {
    const auto m = rt::random_blobby_mask(rng, 16, 16);
    const auto got = connected_components(m);
    const auto want = rt::ordered_components(m);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(rt::PixelSet(got[i].pixels.begin(), got[i].pixels.end()), want[i]);
      EXPECT_TRUE(std::is_sorted(got[i].pixels.begin(), got[i].pixels.end()));
    }
  }
}

TEST(Components, InvariantUnderTranspose) {
  // Scanning the transposed grid visits pixels in column-major order of the original.
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const auto m = rt::random_blobby_mask(rng, 12, 12);
    BinaryGrid tr(12, 12);
    for (int r = 0; r < 12; ++r)
      for (int c = 0; c < 12; ++c) tr(c, r) = m(r, c);
    std::set<rt::PixelSet> a, b;
    for (const auto& comp : connected_components(m)) a.emplace(comp.pixels.begin(), comp.pixels.end());
    for (const auto& comp : connected_components(tr)) {
      rt::PixelSet back;
      for (int i : comp.pixels) back.insert((i % 12) * 12 + i / 12);
      b.insert(back);
    }
    EXPECT_EQ(a, b);
  }
}

TEST(Components, MakeMaskCountsLesions) {
  EXPECT_EQ(make_mask(grid_from(3, 3, {0, 2, 6, 8})).lesion_count, 4);
  EXPECT_EQ(make_mask(grid_from(3, 3, {0, 1, 2})).lesion_count, 1);
}

// ---- lesion matching ---------------------------------------------------------

TEST(LesionMetrics, IdentityDetectsAll) {
  const auto m = grid_from(4, 4, {0, 1, 10, 11, 15});
  const auto r = lesion_metrics(m, m);
  EXPECT_EQ(r.gt_total, 2);
  EXPECT_EQ(r.detected, 2);
  EXPECT_EQ(r.false_positives, 0);
}

TEST(LesionMetrics, DisjointBlobIsFalsePositive) {
  const auto r = lesion_metrics(grid_from(4, 4, {0, 1}), grid_from(4, 4, {14, 15}));
  EXPECT_EQ(r.detected, 0);
  EXPECT_EQ(r.false_positives, 1);
}

TEST(LesionMetrics, ConstructedIous) {
  // Row 0: gt A = cols 0-4, pred P1 = cols 0-2 (IoU 3/5 = 0.6).
  // Row 2: gt B = cols 0-9, pred P2 = cols 0-2 (IoU 3/10 = 0.3).
  // Row 4: pred P3 = cols 0-1, no gt (IoU 0).
  BinaryGrid gt(5, 10), pred(5, 10);
  for (int c = 0; c < 5; ++c) gt(0, c) = 1;
  for (int c = 0; c < 10; ++c) gt(2, c) = 1;
  for (int c = 0; c < 3; ++c) pred(0, c) = pred(2, c) = 1;
  pred(4, 0) = pred(4, 1) = 1;
  const auto r = lesion_metrics(pred, gt, 0.5);
  EXPECT_EQ(r.detected, 1);
  EXPECT_EQ(r.false_positives, 2);
  EXPECT_EQ(rt::exhaustive_max_matching(pred, gt, 0.5), 1);
  EXPECT_EQ(lesion_metrics(pred, gt, 0.25).detected, 2);
}

TEST(LesionMetrics, MatchesOracles) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 300; ++t) {
    const auto gt = rt::random_blobby_mask(rng, 16, 16);
    const auto pred = t % 3 == 0 ? rt::random_blobby_mask(rng, 16, 16) : rt::perturb(rng, gt, 0.08);
    const auto r = lesion_metrics(pred, gt);
    const auto o = rt::greedy_match_oracle(pred, gt, kDefaultIouThreshold);
    EXPECT_EQ(r.detected, o.detected);
    EXPECT_EQ(r.false_positives, o.false_positives);
    EXPECT_EQ(r.matched_gt, o.matched_gt);
    EXPECT_EQ(lesion_metrics(pred, gt, 0.5).detected, rt::exhaustive_max_matching(pred, gt, 0.5));
  }
}

TEST(LesionMetrics, SubsetPredictionHasNoFalsePositives) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 100; ++t) {
    const auto gt = rt::random_blobby_mask(rng, 16, 16);
    // Keep only those gt components; each is matched to itself with IoU 1.
    BinaryGrid pred(16, 16);
    const auto comps = connected_components(gt);
    for (std::size_t i = 0; i < comps.size(); i += 2)
      for (int p : comps[i].pixels) pred.px[p] = 1;
    EXPECT_EQ(lesion_metrics(pred, gt).false_positives, 0);
  }
}

TEST(LesionMetrics, RejectsBadThreshold) {
  EXPECT_THROW(lesion_metrics(BinaryGrid(2, 2), BinaryGrid(2, 2), 0.0), ConfigError);
  EXPECT_THROW(lesion_metrics(BinaryGrid(2, 2), BinaryGrid(2, 3)), DataError);
}

TEST(EvaluateSet, AggregatesMicroSensitivity) {
  // Image 1: 2 lesions, 1 found. Image 2: 1 lesion found plus 1 FP.
  std::vector<BinaryGrid> preds = {grid_from(3, 3, {0}), grid_from(3, 3, {0, 8})};
  std::vector<MaskGrid> gts = {make_mask(grid_from(3, 3, {0, 8})), make_mask(grid_from(3, 3, {0}))};
  const auto s = evaluate_set(preds, gts);
  EXPECT_EQ(s.gt_lesions, 3);
  EXPECT_EQ(s.detected, 2);
  EXPECT_NEAR(s.sensitivity, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(s.fps_per_image, 0.5, 1e-12);
  EXPECT_NEAR(s.f1, 2.0 * 2 / (2.0 * 2 + 1 + 1), 1e-12);
}

// ---- Welch t-test -------------------------------------------------------------

TEST(Welch, IdenticalSamplesGiveOne) {
  const std::vector<double> a = {0.1, 0.4, 0.3};
  EXPECT_NEAR(welch_t_test(a, a).p, 1.0, 1e-12);
}

TEST(Welch, ShiftedRampMatchesReference) {
  const std::vector<double> a = {1, 2, 3, 4, 5}, b = {2, 3, 4, 5, 6};
  const double p = welch_t_test(a, b).p;
  EXPECT_NEAR(p, 0.3466, 5e-5);
  EXPECT_NEAR(p, rt::boost_welch_p(a, b), 1e-9);
}

TEST(Welch, TableStyleQuarterRowIsSignificant) {
  const auto a = rt::fixture_sample(0.738, 0.015, 25);
  const auto b = rt::fixture_sample(0.764, 0.027, 25);
  const auto ms = mean_sd(a);
  EXPECT_NEAR(ms.mean, 0.738, 1e-12);
  EXPECT_NEAR(ms.sd, 0.015, 1e-12);
  EXPECT_LT(welch_t_test(a, b).p, 0.001);
}

TEST(Welch, SymmetricInArguments) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> a(7), b(11);
    for (auto& v : a) v = n(rng);
    for (auto& v : b) v = 0.5 + 2 * n(rng);
    EXPECT_NEAR(welch_t_test(a, b).p, welch_t_test(b, a).p, 1e-14);
    EXPECT_NEAR(welch_t_test(a, b).p, rt::boost_welch_p(a, b), 1e-9);
  }
}

TEST(Welch, PDecreasesWithMeanGap) {
  for (double sd : {0.01, 0.05, 0.2}) {
    double prev = 1.1;
    for (double gap = 0.0; gap <= 0.3; gap += 0.01) {
      const double p = welch_t_test(rt::fixture_sample(0.5, sd, 10), rt::fixture_sample(0.5 + gap, sd * 1.5, 12)).p;
      if (p < 1e-300) break;  // underflow: strictness is no longer observable
      EXPECT_LT(p, prev) << "sd " << sd << " gap " << gap;
      prev = p;
    }
  }
}

TEST(Welch, DegenerateInputsThrow) {
  const std::vector<double> c = {0.5, 0.5, 0.5};
  EXPECT_THROW(welch_t_test(c, c), NumericalError);
  const std::vector<double> one = {1.0};
  EXPECT_THROW(welch_t_test(one, c), ConfigError);
}

TEST(IncompleteBeta, KnownValues) {
  EXPECT_NEAR(incomplete_beta(1, 1, 0.3), 0.3, 1e-14);
  EXPECT_NEAR(incomplete_beta(2, 3, 0.4), 0.5248, 1e-12);
  EXPECT_NEAR(incomplete_beta(5, 0.5, 1.0), 1.0, 0.0);
}

// ---- records and cross-validation ------------------------------------------

MetricsRecord sample_record() {
  MetricsRecord r;
  r.context = {"abc123", "rest", 0.5, 1, 2, 3};
  r.f1 = 0.1 + 0.2;
  r.sensitivity = 2.0 / 3.0;
  r.fps_per_image = 0.25;
  r.reward = 0.7;
  return r;
}

TEST(MetricsCsv, RoundTripIsExact) {
  std::stringstream ss;
  write_metrics_csv_header(ss);
  auto a = sample_record();
  auto b = sample_record();
  b.reward.reset();
  write_metrics_csv_row(ss, a);
  write_metrics_csv_row(ss, b);
  const auto back = read_metrics_csv(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].f1, a.f1);
  EXPECT_EQ(back[0].sensitivity, a.sensitivity);
  EXPECT_EQ(back[0].reward, a.reward);
  EXPECT_FALSE(back[1].reward.has_value());
  EXPECT_EQ(back[1].context.run_id, "abc123");
  EXPECT_EQ(back[1].context.iteration, 3);
}

TEST(MetricsCsv, HeaderIsFixed) {
  EXPECT_STREQ(kMetricsCsvHeader,
               "run_id,method,labeled_fraction,repeat,fold,iteration,f1,sensitivity,fps_per_image,reward");
  std::stringstream bad("run_id,method\n");
  EXPECT_THROW(read_metrics_csv(bad), DataError);
}

TEST(MetricsCsv, MalformedRowNamesLine) {
  std::stringstream ss;
  write_metrics_csv_header(ss);
  write_metrics_csv_row(ss, sample_record());
  ss << "x,rest,0.5,0,0,zero,1,1,0,\n";
  try {
    read_metrics_csv(ss, "m.csv");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("m.csv:3"), std::string::npos) << e.what();
  }
}

TEST(MetricsRecord, ValidateRejectsNonFiniteAndEmpty) {
  auto r = sample_record();
  r.f1 = std::nan("");
  EXPECT_THROW(r.validate(), NumericalError);
  r = sample_record();
  r.context.method.clear();
  EXPECT_THROW(r.validate(), ConfigError);
}

DatasetSplit tiny_split(int n) {
  return generate_dataset(n, 0, 3, ShapeConfig{.height = 16, .width = 16, .radius_max = 5.0});
}

TEST(CrossValidate, ConstantRunner) {
  const auto split = tiny_split(10);
  const auto res = cross_validate(
      [](const FoldContext&) {
        MetricsRecord r;
        r.context = {"id", "supervised", 1.0, 0, 0, 0};
        r.f1 = 0.5;
        return r;
      },
      split, 5, 2);
  EXPECT_EQ(res.records.size(), 10u);
  EXPECT_DOUBLE_EQ(res.f1.mean, 0.5);
  EXPECT_DOUBLE_EQ(res.f1.sd, 0.0);
}

TEST(CrossValidate, FiveByFiveGivesTwentyFivePartitionedRecords) {
  const auto split = tiny_split(25);
  std::map<int, std::vector<int>> val_by_repeat;
  const auto res = cross_validate(
      [&](const FoldContext& ctx) {
        auto& v = val_by_repeat[ctx.repeat];
        v.insert(v.end(), ctx.val_ids.begin(), ctx.val_ids.end());
        EXPECT_EQ(ctx.train_ids.size() + ctx.val_ids.size(), 25u);
        MetricsRecord r;
        r.context = {"id", "supervised", 1.0, 0, 0, 0};
        r.f1 = ctx.fold * 0.1;
        return r;
      },
      split, 5, 5);
  ASSERT_EQ(res.records.size(), 25u);
  for (std::size_t i = 0; i < res.records.size(); ++i) {
    EXPECT_EQ(res.records[i].context.repeat, static_cast<int>(i / 5));
    EXPECT_EQ(res.records[i].context.fold, static_cast<int>(i % 5));
  }
  for (auto& [rep, ids] : val_by_repeat) {
    std::sort(ids.begin(), ids.end());
    std::vector<int> want(25);
    std::iota(want.begin(), want.end(), 0);
    EXPECT_EQ(ids, want) << "repeat " << rep;
  }
}

TEST(CrossValidate, FailuresNameFoldAndRepeat) {
  const auto split = tiny_split(10);
  try {
    cross_validate(
        [](const FoldContext& ctx) -> MetricsRecord {
          if (ctx.repeat == 1 && ctx.fold == 3) throw NumericalError("boom");
          MetricsRecord r;
          r.context = {"id", "m", 1.0, 0, 0, 0};
          return r;
        },
        split, 5, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNumerical);
    EXPECT_NE(std::string(e.what()).find("fold 3 of repeat 1"), std::string::npos) << e.what();
  }
}

}  // namespace
