#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "restlab/error.hpp"
#include "restlab/metrics.hpp"
#include "restlab/policy.hpp"
#include "support/bandit.hpp"

namespace {

using namespace restlab;
namespace rt = restlab::testing;

SampleGrid flat_image(int h, int w, float v = 0.5f) { return SampleGrid{0, Grid<float>(h, w, v)}; }

// ---- sampling ------------------------------------------------------------------

TEST(PolicySample, HighTemperatureIsFairCoin) {
  PolicyModel policy(PolicyArch{}, 1);
  policy.set_temperature(1e6);
  const auto img = flat_image(100, 100);
  ProbMap state(100, 100, 0.3f);
  Rng rng(2);
  const auto s = policy_sample(policy, img, state, rng);
  const double n = 1e4;
  const double on = std::count(s.mask.pixels.px.begin(), s.mask.pixels.px.end(), 1);
  EXPECT_NEAR(on / n, 0.5, 3 * std::sqrt(0.25 / n));
  EXPECT_LE(s.log_prob, 0.0);
}

TEST(PolicySample, SaturatedLogitsAreDeterministic) {
  PolicyModel policy(PolicyArch{4, 1000.0, 1.0, 0.05}, 1);
  const auto img = flat_image(6, 6);
  ProbMap state(6, 6, 0.0f);
  for (int c = 0; c < 6; ++c) state(2, c) = 1.0f;
  Rng rng(3);
  const auto a = policy_sample(policy, img, state, rng);
  const auto b = policy_sample(policy, img, state, rng);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_EQ(a.mask.pixels, binarize(state));
  EXPECT_NEAR(a.log_prob, 0.0, 1e-12);
}

TEST(PolicySample, LogProbMatchesEmpiricalFrequency) {
  PolicyModel policy(PolicyArch{}, 4);
  const auto img = flat_image(2, 2);
  ProbMap state(2, 2);
  state.px = {0.45f, 0.55f, 0.5f, 0.52f};
  Rng rng(5);
  const auto target = policy_sample(policy, img, state, rng);
  const int n = 20000;
  int hits = 0;
  for (int i = 0; i < n; ++i) hits += policy_sample(policy, img, state, rng).mask == target.mask;
  const double p = std::exp(target.log_prob);
  EXPECT_NEAR(hits / static_cast<double>(n), p, 3 * std::sqrt(p * (1 - p) / n));
}

TEST(PolicySample, RejectsShapeMismatch) {
  PolicyModel policy(PolicyArch{}, 1);
  Rng rng(1);
  EXPECT_THROW(policy_sample(policy, flat_image(4, 4), ProbMap(4, 5), rng), DataError);
}

TEST(PolicyModel, InitialPolicyTracksState) {
  PolicyModel policy(PolicyArch{}, 7);
  ProbMap state(8, 8, 0.05f);
  state(3, 3) = 0.95f;
  const auto z = policy.logits(flat_image(8, 8), state);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(z[i] > 0, state.px[i] > 0.5f) << i;
}

TEST(PolicyModel, CheckpointRoundTripIncludesTemperature) {
  PolicyModel policy(PolicyArch{}, 8);
  anneal_temperature(policy, 0.5);
  std::stringstream ss;
  policy.save(ss);
  PolicyModel loaded(PolicyArch{}, 9);
  loaded.load(ss);
  EXPECT_EQ(loaded.digest(), policy.digest());
  EXPECT_EQ(loaded.temperature(), 0.5);
}

// ---- heuristic -------------------------------------------------------------------

TEST(Heuristic, QuietStateIsLabeledNormal) {
  const auto m = heuristic_pseudolabel(ProbMap(8, 8, 0.01f), HeuristicConfig{});
  ASSERT_TRUE(m.has_value());
  EXPECT_EQ(m->lesion_count, 0);
  EXPECT_EQ(m->pixels, BinaryGrid(8, 8));
}

TEST(Heuristic, KeepsLargeConfidentComponent) {
  ProbMap state(10, 10, 0.3f);
  BinaryGrid want(10, 10);
  for (int r = 2; r < 6; ++r)
    for (int c = 3; c < 8; ++c) state(r, c) = 0.95f, want(r, c) = 1;  // 20 px
  const auto m = heuristic_pseudolabel(state, HeuristicConfig{});
  ASSERT_TRUE(m.has_value());
  EXPECT_EQ(m->pixels, want);
  EXPECT_EQ(m->lesion_count, 1);
}

TEST(Heuristic, SmallComponentIsUninformative) {
  ProbMap state(10, 10, 0.3f);
  state(4, 4) = state(4, 5) = 0.95f;
  EXPECT_FALSE(heuristic_pseudolabel(state, HeuristicConfig{}).has_value());
}

TEST(Heuristic, NeverEmitsComponentsBelowMinArea) {
  Rng rng(11);
  HeuristicConfig cfg;
  cfg.min_area_px = 4;
  for (int t = 0; t < 200; ++t) {
    ProbMap state(12, 12);
    for (auto& v : state.px) v = uniform01(rng) < 0.4 ? 0.97f : static_cast<float>(uniform(rng, 0.0, 0.9));
    const auto m = heuristic_pseudolabel(state, cfg);
    if (!m) continue;
    for (const auto& comp : connected_components(m->pixels)) EXPECT_GE(comp.pixels.size(), 4u);
  }
}

TEST(Heuristic, ConfigValidation) {
  HeuristicConfig bad;
  bad.negative_threshold = 0.6;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = HeuristicConfig{};
  bad.positive_threshold = 0.4;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = HeuristicConfig{};
  bad.min_area_px = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = HeuristicConfig{};
  bad.epsilon = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
}

// ---- epsilon-greedy ------------------------------------------------------------------

TEST(EpsilonGreedy, BoundarySources) {
  PolicyModel policy(PolicyArch{}, 1);
  const auto img = flat_image(4, 4);
  const ProbMap quiet(4, 4, 0.01f);
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    EXPECT_EQ(epsilon_greedy_select(policy, {}, img, quiet, 1.0, rng)->source, LabelSource::kHeuristic);
    const auto e = epsilon_greedy_select(policy, {}, img, quiet, 0.0, rng);
    EXPECT_EQ(e->source, LabelSource::kPolicy);
    EXPECT_TRUE(e->log_prob.has_value());
  }
  EXPECT_THROW(epsilon_greedy_select(policy, {}, img, quiet, 1.5, rng), ConfigError);
}

TEST(EpsilonGreedy, HeuristicDeclineSkipsSample) {
  PolicyModel policy(PolicyArch{}, 1);
  ProbMap ambiguous(4, 4, 0.5f);
  Rng rng(1);
  EXPECT_FALSE(epsilon_greedy_select(policy, {}, flat_image(4, 4), ambiguous, 1.0, rng).has_value());
}

TEST(EpsilonGreedy, SourceFrequencyMatchesEpsilon) {
  PolicyModel policy(PolicyArch{}, 1);
  const auto img = flat_image(4, 4);
  const ProbMap quiet(4, 4, 0.01f);
  Rng rng(9);
  const int n = 10000;
  int heuristic = 0;
  for (int i = 0; i < n; ++i) heuristic += epsilon_greedy_select(policy, {}, img, quiet, 0.3, rng)->source ==
                                           LabelSource::kHeuristic;
  EXPECT_NEAR(heuristic / static_cast<double>(n), 0.3, 3 * std::sqrt(0.3 * 0.7 / n));
}

// ---- REINFORCE ----------------------------------------------------------------------

TEST(Reinforce, ZeroAdvantageLeavesParameters) {
  rt::Bandit b(1);
  Rng rng(2);
  PseudoLabelBatch batch;
  auto s = policy_sample(b.policy, b.image, b.state, rng);
  batch.entries.push_back({&b.image, b.state, s.mask, LabelSource::kPolicy, s.log_prob});
  RewardBaseline baseline{0.6};
  const auto before = b.policy.digest();
  const auto res = reinforce_update(b.policy, batch, 0.6, baseline, 0.5);
  EXPECT_TRUE(res.applied);
  EXPECT_EQ(res.advantage, 0.0);
  EXPECT_EQ(b.policy.digest(), before);
}

TEST(Reinforce, NoPolicyEntriesIsSignalledNoOp) {
  rt::Bandit b(1);
  PseudoLabelBatch batch;
  batch.entries.push_back({&b.image, b.state, make_mask(BinaryGrid(1, 2)), LabelSource::kHeuristic, std::nullopt});
  RewardBaseline baseline;
  const auto before = b.policy.digest();
  const auto res = reinforce_update(b.policy, batch, 1.0, baseline, 0.5);
  EXPECT_FALSE(res.applied);
  EXPECT_EQ(baseline.value, 0.0);
  EXPECT_EQ(b.policy.digest(), before);
}

TEST(Reinforce, AdvantageSignMovesSampledMaskProbability) {
  for (double reward : {-1.0, 1.0}) {
    rt::Bandit b(3);
    Rng rng(4);
    PolicySample s = policy_sample(b.policy, b.image, b.state, rng);
    auto log_prob_of = [&](const MaskGrid& m) {
      const auto p = b.pixel_probs();
      return std::log(m.pixels.px[0] ? p[0] : 1 - p[0]) + std::log(m.pixels.px[1] ? p[1] : 1 - p[1]);
    };
    const double before = log_prob_of(s.mask);
    EXPECT_NEAR(before, s.log_prob, 1e-6);
    PseudoLabelBatch batch;
    batch.entries.push_back({&b.image, b.state, s.mask, LabelSource::kPolicy, s.log_prob});
    RewardBaseline baseline;
    reinforce_update(b.policy, batch, reward, baseline, 0.1);
    if (reward < 0) {
      EXPECT_LT(log_prob_of(s.mask), before);
    } else {
      EXPECT_GT(log_prob_of(s.mask), before);
    }
  }
}

TEST(Reinforce, BaselineIsExponentialMovingAverage) {
  RewardBaseline b;
  EXPECT_DOUBLE_EQ(b.advantage(1.0), 1.0);
  EXPECT_DOUBLE_EQ(b.value, 0.1);
  EXPECT_DOUBLE_EQ(b.advantage(1.0), 0.9);
  EXPECT_DOUBLE_EQ(b.value, 0.19);
}

TEST(Reinforce, BanditGradientIsUnbiased) {
  rt::Bandit b(5);
  Rng rng(6);
  const auto exact = rt::exact_bandit_gradient(b);
  const auto empirical = rt::empirical_bandit_gradient(b, 100000, rng);
  EXPECT_LT(rt::relative_error(empirical, exact), 0.02);
}

TEST(Reinforce, BanditLearnsTargetMask) {
  rt::Bandit b(7);
  Rng rng(8);
  const double start = b.target_prob();
  EXPECT_LT(start, 0.5);
  const int reached = rt::train_bandit(b, 200, 0.5, 0.9, rng);
  EXPECT_GT(reached, 0);
  RecordProperty("updates_to_target", reached);
  EXPECT_GT(b.target_prob(), start);
}

// ---- temperature ---------------------------------------------------------------------

TEST(Temperature, HalvingSharpensPositiveLogit) {
  const std::vector<double> z = {2.0};
  EXPECT_NEAR(action_probabilities(z, 1.0)[0], 1 / (1 + std::exp(-2.0)), 1e-15);
  EXPECT_NEAR(action_probabilities(z, 0.5)[0], 1 / (1 + std::exp(-4.0)), 1e-15);
  PolicyModel policy(PolicyArch{}, 1);
  anneal_temperature(policy, 0.5);
  EXPECT_EQ(policy.temperature(), 0.5);
}

TEST(Temperature, FloorHolds) {
  PolicyModel policy(PolicyArch{}, 1);
  for (int i = 0; i < 20; ++i) anneal_temperature(policy, 0.5);
  EXPECT_EQ(policy.temperature(), PolicyArch{}.min_temperature);
  anneal_temperature(policy, 0.5);
  EXPECT_EQ(policy.temperature(), PolicyArch{}.min_temperature);
  EXPECT_THROW(anneal_temperature(policy, 0.0), ConfigError);
}

TEST(Temperature, EntropyDecreasesAndArgmaxIsKept) {
  std::vector<double> grid;
  for (double z = -6.0; z <= 6.0; z += 0.25) {
    if (z != 0.0) grid.push_back(z);
  }
  for (double z : grid) {
    const std::vector<double> one = {z};
    double t = 1.0;
    double prev_h = mean_entropy(one, t);
    const bool on = action_probabilities(one, t)[0] > 0.5;
    for (int k = 0; k < 6; ++k) {
      t *= 0.7;
      const double h = mean_entropy(one, t);
      EXPECT_LT(h, prev_h) << "z " << z;
      EXPECT_EQ(action_probabilities(one, t)[0] > 0.5, on);
      prev_h = h;
    }
  }
}

}  // namespace
