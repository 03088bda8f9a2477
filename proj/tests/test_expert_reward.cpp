#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "restlab/error.hpp"
#include "restlab/expert_reward.hpp"
#include "restlab/segnet.hpp"
#include "support/toy_expert.hpp"

namespace {

using namespace restlab;
namespace rt = restlab::testing;

using rt::toy_expert_hyper;
using rt::toy_positives;
using rt::trained_expert;

TEST(BuildDemonstrations, OnePositivePerPairWithPredictedState) {
  const auto pairs = rt::toy_set(0, 10);
  const auto demos = build_demonstrations(rt::trained_toy().model, pairs);
  ASSERT_EQ(demos.size(), 10u);
  for (std::size_t i = 0; i < demos.size(); ++i) {
    EXPECT_EQ(demos[i].polarity, Polarity::kExpert);
    EXPECT_EQ(demos[i].source_id, pairs[i].image.id);
    EXPECT_EQ(demos[i].label, pairs[i].mask);
    EXPECT_EQ(demos[i].state, rt::trained_toy().model.predict(pairs[i].image));
  }
  const auto again = build_demonstrations(rt::trained_toy().model, pairs);
  for (std::size_t i = 0; i < demos.size(); ++i) EXPECT_EQ(again[i].state, demos[i].state);
}

TEST(SynthesizeNegatives, TwoPerPositiveAndDistinct) {
  const auto pos = toy_positives(0, 10);
  const auto neg = synthesize_negatives(pos, 1);
  ASSERT_EQ(neg.size(), 20u);
  for (std::size_t i = 0; i < neg.size(); ++i) {
    const auto& src = pos[i / 2];
    EXPECT_EQ(neg[i].polarity, Polarity::kSyntheticNegative);
    EXPECT_EQ(neg[i].source_id, src.source_id);
    EXPECT_EQ(neg[i].state, src.state);
    EXPECT_GE(label_difference(src.label.pixels, neg[i].label.pixels), 0.05) << recipe_name(neg[i].recipe);
  }
}

TEST(SynthesizeNegatives, DeterministicPerSeed) {
  const auto pos = toy_positives(0, 6);
  const auto a = synthesize_negatives(pos, 3);
  const auto b = synthesize_negatives(pos, 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].label, b[i].label);
}

TEST(SynthesizeNegatives, EmptyLabelsOnlyGetRandomBlobs) {
  auto pos = toy_positives(0, 6);
  NegativeRecipeConfig cfg;
  cfg.random_blob = false;
  for (const auto& n : synthesize_negatives(pos, 2, cfg)) {
    const bool src_empty = n.source_id % 3 == 2;  // toy_set leaves every third image blank
    if (src_empty) {
      EXPECT_EQ(n.recipe, NegativeRecipe::kRandomBlob);
    } else {
      EXPECT_NE(n.recipe, NegativeRecipe::kRandomBlob);
    }
  }
}

TEST(SynthesizeNegatives, ConfigGuards) {
  const auto pos = toy_positives(0, 3);
  NegativeRecipeConfig zero_shift;
  zero_shift.min_shift = 0;
  EXPECT_THROW(synthesize_negatives(pos, 1, zero_shift), ConfigError);
  NegativeRecipeConfig none{false, false, false, false};
  EXPECT_THROW(synthesize_negatives(pos, 1, none), ConfigError);
  EXPECT_THROW(synthesize_negatives({}, 1), ConfigError);
}

TEST(MaskOps, TranslateDilateErode) {
  BinaryGrid m(7, 7);
  m(3, 3) = 1;
  EXPECT_EQ(translate_mask(m, 1, -2)(4, 1), 1);
  EXPECT_EQ(translate_mask(m, 10, 0), BinaryGrid(7, 7));
  const auto d = dilate(m, 1);
  EXPECT_EQ(std::count(d.px.begin(), d.px.end(), 1), 5);  // 4-neighbour cross
  EXPECT_EQ(erode(d, 1), m);
  EXPECT_EQ(label_difference(m, m), 0.0);
  EXPECT_EQ(label_difference(BinaryGrid(2, 2), BinaryGrid(2, 2)), 0.0);
  EXPECT_DOUBLE_EQ(label_difference(m, d), 4.0 / 5.0);
}

Demonstration patch_demo(int id, bool with_patch, std::mt19937_64& rng, Polarity pol) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Demonstration d;
  d.source_id = id;
  d.state = ProbMap(16, 16);
  for (auto& v : d.state.px) v = u(rng);
  BinaryGrid label(16, 16);
  if (with_patch)
    for (int r = 4; r < 12; ++r)
      for (int c = 4; c < 12; ++c) label(r, c) = 1;
  d.label = make_mask(std::move(label));
  d.polarity = pol;
  return d;
}

TEST(TrainExpertReward, SeparableToyReachesPerfectHeldOutAccuracy) {
  std::mt19937_64 rng(1);
  std::vector<Demonstration> pos, neg;
  for (int i = 0; i < 40; ++i) {
    pos.push_back(patch_demo(i, true, rng, Polarity::kExpert));
    neg.push_back(patch_demo(i, false, rng, Polarity::kSyntheticNegative));
  }
  const auto res = train_expert_reward(pos, neg, toy_expert_hyper());
  EXPECT_EQ(res.heldout_accuracy, 1.0);
  EXPECT_GT(res.heldout_size, 0);
}

TEST(TrainExpertReward, IdenticalClassesAbort) {
  const auto pos = toy_positives(0, 20);
  std::vector<Demonstration> neg = pos;
  for (auto& d : neg) d.polarity = Polarity::kSyntheticNegative;
  try {
    train_expert_reward(pos, neg, toy_expert_hyper());
    FAIL() << "expected the unusable-model signal";
  } catch (const UnusableRewardModel& e) {
    EXPECT_NEAR(e.accuracy(), 0.5, 0.1);
    EXPECT_EQ(e.code(), ErrorCode::kNumerical);
  }
}

TEST(TrainExpertReward, ToyTaskSeparatesHeldOutDemonstrations) {
  const auto& res = trained_expert();
  EXPECT_GE(res.heldout_accuracy, 0.9);
  // Fresh images never seen in training: experts accepted, empty labels on lesions rejected.
  const auto pos = toy_positives(500, 30);
  int accepted = 0, rejected_empty = 0, lesion_images = 0;
  for (const auto& d : pos) {
    accepted += res.model.score(d.state, d.label).decision;
    if (d.label.lesion_count > 0) {
      ++lesion_images;
      rejected_empty += 1 - res.model.score(d.state, make_mask(BinaryGrid(32, 32))).decision;
    }
  }
  EXPECT_GE(accepted / 30.0, 0.9);
  EXPECT_GE(rejected_empty / static_cast<double>(lesion_images), 0.9);
}

TEST(TrainExpertReward, Preconditions) {
  const auto pos = toy_positives(0, 3);
  EXPECT_THROW(train_expert_reward(pos, {}, toy_expert_hyper()), ConfigError);
}

TEST(ExpertScore, PureAndFrozen) {
  const auto& model = trained_expert().model;
  const auto before = model.digest();
  const auto d = toy_positives(600, 1).front();
  const auto a = model.score(d.state, d.label);
  const auto b = model.score(d.state, d.label);
  EXPECT_EQ(a.margin, b.margin);
  EXPECT_EQ(a.decision, b.decision);
  EXPECT_EQ(a.decision, a.margin >= model.threshold() ? 1 : 0);
  EXPECT_EQ(model.digest(), before);
}

TEST(ExpertScore, ShapeMismatchThrows) {
  const auto& model = trained_expert().model;
  EXPECT_THROW(model.score(ProbMap(16, 16), make_mask(BinaryGrid(16, 16))), DataError);
}

TEST(ExpertReward, CheckpointRoundTripIncludesThreshold) {
  const auto& model = trained_expert().model;
  std::stringstream ss;
  model.save(ss);
  ExpertRewardModel loaded(32, 32, 77);
  loaded.load(ss);
  EXPECT_EQ(loaded.digest(), model.digest());
  EXPECT_EQ(loaded.threshold(), model.threshold());
  const auto d = toy_positives(600, 1).front();
  EXPECT_EQ(loaded.score(d.state, d.label).margin, model.score(d.state, d.label).margin);
}

TEST(BatchReward, MeanOfDecisions) {
  ExpertRewardModel model = trained_expert().model;
  const auto pos = toy_positives(700, 4);
  std::vector<StateLabel> pairs;
  std::vector<float> margins;
  for (const auto& d : pos) {
    pairs.push_back({&d.state, &d.label});
    margins.push_back(model.score(d.state, d.label).margin);
  }
  std::vector<float> sorted = margins;
  std::sort(sorted.begin(), sorted.end());
  ASSERT_LT(sorted[0], sorted[1]);

  model.set_threshold(sorted[0] - 1.0f);
  EXPECT_EQ(batch_reward(model, pairs), 1.0);
  model.set_threshold(0.5f * (sorted[0] + sorted[1]));
  EXPECT_EQ(batch_reward(model, pairs), 0.75);
  std::reverse(pairs.begin(), pairs.end());
  EXPECT_EQ(batch_reward(model, pairs), 0.75);
  std::rotate(pairs.begin(), pairs.begin() + 1, pairs.end());
  EXPECT_EQ(batch_reward(model, pairs), 0.75);
  EXPECT_THROW(batch_reward(model, {}), ConfigError);
}

TEST(BatchReward, MonotoneWhenReplacingRejectedPair) {
  const auto& model = trained_expert().model;
  const auto pos = toy_positives(800, 6);
  std::vector<StateLabel> pairs;
  for (const auto& d : pos) pairs.push_back({&d.state, &d.label});
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double before = batch_reward(model, pairs);
    EXPECT_GE(before, 0.0);
    EXPECT_LE(before, 1.0);
    if (model.score(*pairs[i].state, *pairs[i].label).decision == 0) {
      // Swap a rejected pair for an accepted one from the same set.
      for (const auto& d : pos) {
        if (model.score(d.state, d.label).decision == 1) {
          pairs[i] = {&d.state, &d.label};
          EXPECT_GT(batch_reward(model, pairs), before);
          break;
        }
      }
    }
  }
}

}  // namespace
