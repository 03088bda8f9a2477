#pragma once

// Reference implementations used to cross-check the library. They favour
// obviousness over speed and share no code with the code under test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <vector>

#include "restlab/grid.hpp"

namespace restlab::testing {

using PixelSet = std::set<int>;

/// 4-connected components by explicit-stack flood fill, as a set of pixel sets.
inline std::set<PixelSet> flood_fill_components(const BinaryGrid& m) {
  std::vector<bool> seen(m.size(), false);
  std::set<PixelSet> out;
  for (int start = 0; start < static_cast<int>(m.size()); ++start) {
    if (!m.px[start] || seen[start]) continue;
    PixelSet comp;
    std::vector<int> stack{start};
    seen[start] = true;
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      comp.insert(i);
      const int r = i / m.width, c = i % m.width;
      const int nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& n : nb) {
        if (n[0] < 0 || n[1] < 0 || n[0] >= m.height || n[1] >= m.width) continue;
        const int j = n[0] * m.width + n[1];
        if (m.px[j] && !seen[j]) {
          seen[j] = true;
          stack.push_back(j);
        }
      }
    }
    out.insert(std::move(comp));
  }
  return out;
}

/// Components ordered by smallest pixel, matching the library's documented order.
inline std::vector<PixelSet> ordered_components(const BinaryGrid& m) {
  const auto s = flood_fill_components(m);
  std::vector<PixelSet> v(s.begin(), s.end());
  std::sort(v.begin(), v.end(), [](const PixelSet& a, const PixelSet& b) { return *a.begin() < *b.begin(); });
  return v;
}

inline double set_iou(const PixelSet& a, const PixelSet& b) {
  std::vector<int> inter;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
  const double uni = static_cast<double>(a.size() + b.size() - inter.size());
  return uni == 0 ? 0.0 : inter.size() / uni;
}

inline double oracle_f1(const BinaryGrid& pred, const BinaryGrid& gt) {
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    tp += pred.px[i] && gt.px[i];
    fp += pred.px[i] && !gt.px[i];
    fn += !pred.px[i] && gt.px[i];
  }
  return 2 * tp + fp + fn == 0 ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
}

struct OracleMatch {
  int detected = 0;
  int false_positives = 0;
  std::vector<int> matched_gt;
};

/// Repeatedly takes the eligible unused (pred, gt) pair of highest IoU; ties go
/// to the smaller (pred, gt) index pair.
inline OracleMatch greedy_match_oracle(const BinaryGrid& pred, const BinaryGrid& gt, double thresh) {
  const auto p = ordered_components(pred);
  const auto g = ordered_components(gt);
  std::vector<bool> pu(p.size()), gu(g.size());
  OracleMatch m;
  while (true) {
    double best = -1;
    int bp = -1, bg = -1;
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (pu[i] || gu[j]) continue;
        const double iou = set_iou(p[i], g[j]);
        if (iou > 0 && iou >= thresh && iou > best) {
          best = iou;
          bp = static_cast<int>(i);
          bg = static_cast<int>(j);
        }
      }
    if (bp < 0) break;
    pu[bp] = gu[bg] = true;
    m.matched_gt.push_back(bg);
  }
  m.detected = static_cast<int>(m.matched_gt.size());
  m.false_positives = static_cast<int>(p.size()) - m.detected;
  return m;
}

/// Largest number of one-to-one (pred, gt) pairs with IoU >= thresh, by
/// enumerating every assignment of predicted components.
inline int exhaustive_max_matching(const BinaryGrid& pred, const BinaryGrid& gt, double thresh) {
  const auto p = ordered_components(pred);
  const auto g = ordered_components(gt);
  std::vector<std::vector<int>> eligible(p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < g.size(); ++j)
      if (const double iou = set_iou(p[i], g[j]); iou > 0 && iou >= thresh) eligible[i].push_back(static_cast<int>(j));
  std::vector<bool> used(g.size(), false);
  int best = 0;
  auto dfs = [&](auto&& self, std::size_t i, int count) -> void {
    if (i == p.size()) {
      best = std::max(best, count);
      return;
    }
    self(self, i + 1, count);
    for (int j : eligible[i]) {
      if (used[j]) continue;
      used[j] = true;
      self(self, i + 1, count + 1);
      used[j] = false;
    }
  };
  dfs(dfs, 0, 0);
  return best;
}

/// Random mask with spatially clustered foreground: seeds grown by random walks.
inline BinaryGrid random_blobby_mask(std::mt19937_64& rng, int h, int w) {
  BinaryGrid m(h, w);
  std::uniform_int_distribution<int> seeds(0, 6), len(0, 25), row(0, h - 1), col(0, w - 1), step(0, 3);
  const int n = seeds(rng);
  for (int s = 0; s < n; ++s) {
    int r = row(rng), c = col(rng);
    for (int k = len(rng); k >= 0; --k) {
      m(r, c) = 1;
      switch (step(rng)) {
        case 0: r = std::max(0, r - 1); break;
        case 1: r = std::min(h - 1, r + 1); break;
        case 2: c = std::max(0, c - 1); break;
        default: c = std::min(w - 1, c + 1); break;
      }
    }
  }
  return m;
}

/// Copy of `m` with each pixel flipped with probability `p`.
inline BinaryGrid perturb(std::mt19937_64& rng, const BinaryGrid& m, double p) {
  BinaryGrid out = m;
  std::bernoulli_distribution flip(p);
  for (auto& v : out.px) {
    if (flip(rng)) v = !v;
  }
  return out;
}

/// Deterministic sample of size n whose mean and sample sd are exactly (mean, sd)
/// up to rounding: a standardized symmetric ramp, rescaled.
inline std::vector<double> fixture_sample(double mean, double sd, int n) {
  std::vector<double> z(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) z[i] = i - (n - 1) / 2.0;
  double ss = 0;
  for (double v : z) ss += v * v;
  const double scale = sd / std::sqrt(ss / (n - 1));
  for (double& v : z) v = mean + scale * v;
  return z;
}

}  // namespace restlab::testing
