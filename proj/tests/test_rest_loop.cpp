#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "restlab/error.hpp"
#include "restlab/rest_loop.hpp"
#include "support/toy_expert.hpp"

namespace {

using namespace restlab;
namespace rt = restlab::testing;

struct ToyLoopData {
  std::vector<SampleGrid> unlabeled;
  std::vector<LabeledPair> labeled = rt::toy_set(0, 10);
  std::vector<LabeledPair> val = rt::toy_set(300, 9);

  explicit ToyLoopData(std::vector<LabeledPair> pool) {
    for (auto& p : pool) unlabeled.push_back(std::move(p.image));
  }
  RestData view() const { return {unlabeled, labeled, val}; }
};

const ToyLoopData& toy_data() {
  static const ToyLoopData d(rt::toy_set(1000, 40));
  return d;
}

RestConfig toy_rest_config() {
  RestConfig c;
  c.k_iterations = 6;
  c.batch_size = 8;
  c.fine_tune.steps = 4;
  c.seed = 11;
  return c;
}

const RecordContext kToyContext{"toy", "rest", 0.5, 0, 0, 0};

RestOutcome run_toy_rest(const RestConfig& cfg) {
  return run_rest(rt::trained_toy().model, PolicyModel(PolicyArch{}, 3), rt::trained_expert().model,
                  toy_data().view(), cfg, kToyContext);
}

void expect_complete(const RestHistory& h, int k) {
  ASSERT_EQ(h.iterations.size(), static_cast<std::size_t>(k));
  const auto recs = h.records();
  ASSERT_EQ(recs.size(), static_cast<std::size_t>(k + 1));
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(recs[i].context.iteration, static_cast<int>(i));
    EXPECT_TRUE(std::isfinite(recs[i].f1) && std::isfinite(recs[i].sensitivity) && std::isfinite(recs[i].fps_per_image));
    if (recs[i].reward) {
      EXPECT_TRUE(std::isfinite(*recs[i].reward));
    }
  }
}

TEST(RunRest, UnreachableGateNeverExploits) {
  RestConfig cfg = toy_rest_config();
  cfg.phase_threshold = 1.0 + 1e-9;
  const auto before = rt::trained_toy().model.digest();
  const auto out = run_toy_rest(cfg);
  EXPECT_FALSE(out.history.halted);
  for (const auto& it : out.history.iterations) {
    EXPECT_EQ(it.phase, Phase::kExploration);
    EXPECT_EQ(it.seg_digest, before);
    EXPECT_FALSE(it.r_val.has_value());
    EXPECT_EQ(it.record.f1, out.history.initial.f1);
  }
  EXPECT_EQ(out.seg.digest(), before);
}

class RestRun : public ::testing::Test {
 protected:
  static const RestOutcome& outcome() {
    static const RestOutcome out = run_toy_rest(toy_rest_config());
    return out;
  }
};

TEST_F(RestRun, HistoryIsComplete) {
  EXPECT_FALSE(outcome().history.halted) << outcome().history.diagnostic;
  expect_complete(outcome().history, toy_rest_config().k_iterations);
}

TEST_F(RestRun, GateOpensOnlyAboveThreshold) {
  const double tau = toy_rest_config().phase_threshold;
  bool seen_open = false;
  int exploit = 0;
  for (const auto& it : outcome().history.iterations) {
    const bool above = it.expert_reward && *it.expert_reward > tau;
    if (it.phase == Phase::kExploitation) {
      ++exploit;
      EXPECT_TRUE(above) << "iteration " << it.iteration;
    }
    seen_open = seen_open || above;
    if (!seen_open) {
      EXPECT_EQ(it.phase, Phase::kExploration);
    }
  }
  EXPECT_GT(exploit, 0);
}

TEST_F(RestRun, SegmenterChangesOnlyWhenExploiting) {
  std::uint64_t prev = rt::trained_toy().model.digest();
  for (const auto& it : outcome().history.iterations) {
    if (it.phase == Phase::kExploration) {
      EXPECT_EQ(it.seg_digest, prev) << "iteration " << it.iteration;
    }
    prev = it.seg_digest;
  }
  EXPECT_EQ(outcome().seg.digest(), prev);
}

TEST_F(RestRun, RewardSourceTagsMatchPhase) {
  for (const auto& it : outcome().history.iterations) {
    if (it.phase == Phase::kExploitation && it.accepted > 0) {
      EXPECT_EQ(it.reward_source, "R_exp+R_val");
      EXPECT_TRUE(it.r_val.has_value());
    } else {
      EXPECT_EQ(it.reward_source, it.labeled_entries > 0 ? "R_exp" : "none");
      EXPECT_FALSE(it.r_val.has_value());
    }
    EXPECT_EQ(it.expert_reward.has_value(), it.labeled_entries > 0);
    EXPECT_LE(it.heuristic_entries, it.labeled_entries);
    EXPECT_LE(it.labeled_entries, it.sampled);
  }
}

TEST_F(RestRun, ExpertStaysFrozen) {
  const auto& h = outcome().history;
  EXPECT_EQ(h.expert_digest_before, h.expert_digest_after);
  EXPECT_EQ(h.expert_digest_after, rt::trained_expert().model.digest());
}

TEST_F(RestRun, ExploitationAnnealsTemperature) {
  double t = PolicyArch{}.initial_temperature;
  for (const auto& it : outcome().history.iterations) {
    if (it.phase == Phase::kExploitation && !it.stabilized) {
      EXPECT_LT(it.temperature, t);
    }
    if (it.phase == Phase::kExploration) {
      EXPECT_EQ(it.temperature, t);
    }
    t = it.temperature;
  }
}

TEST_F(RestRun, DeterministicGivenSeed) {
  const auto again = run_toy_rest(toy_rest_config());
  EXPECT_EQ(again.seg.digest(), outcome().seg.digest());
  EXPECT_EQ(again.policy.digest(), outcome().policy.digest());
  const auto a = again.history.records();
  const auto b = outcome().history.records();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(RunRest, NumericalFailureRestoresAndHalts) {
  RestConfig cfg = toy_rest_config();
  cfg.policy_lr = 1e300;  // the first policy step overflows
  const PolicyModel initial(PolicyArch{}, 3);
  const auto out = run_toy_rest(cfg);
  EXPECT_TRUE(out.history.halted);
  EXPECT_NE(out.history.diagnostic.find("iteration 1"), std::string::npos) << out.history.diagnostic;
  EXPECT_TRUE(out.history.iterations.empty());
  EXPECT_EQ(out.policy.digest(), initial.digest());
  EXPECT_EQ(out.seg.digest(), rt::trained_toy().model.digest());
}

TEST(RunRest, RejectsEmptyInputs) {
  const auto& d = toy_data();
  RestData no_pool{{}, d.labeled, d.val};
  RestData no_val{d.unlabeled, d.labeled, {}};
  for (const auto& data : {no_pool, no_val}) {
    EXPECT_THROW(run_rest(rt::trained_toy().model, PolicyModel(PolicyArch{}, 3), rt::trained_expert().model, data,
                          toy_rest_config(), kToyContext),
                 ConfigError);
    EXPECT_THROW(run_standard_self_training(rt::trained_toy().model, data, toy_rest_config(), kToyContext), ConfigError);
  }
}

// ---- baselines -----------------------------------------------------------------------

// Pseudolabel counts the threshold rule yields for the first iteration's batch.
struct FirstBatchCounts {
  int negatives = 0;
  int positives = 0;
};

FirstBatchCounts first_batch_counts(const RestConfig& cfg, const ToyLoopData& d) {
  const auto& seg = rt::trained_toy().model;
  FirstBatchCounts c;
  for (std::size_t i : iteration_batch(d.unlabeled.size(), cfg.batch_size, cfg.seed, 1)) {
    const auto s = seg.predict(d.unlabeled[i]);
    const float peak = *std::max_element(s.px.begin(), s.px.end());
    c.negatives += peak < cfg.heuristic.negative_threshold;
    c.positives += peak >= cfg.heuristic.positive_threshold;
  }
  return c;
}

TEST(Baselines, AcceptanceFollowsThresholdRule) {
  RestConfig cfg = toy_rest_config();
  cfg.k_iterations = 1;
  const auto counts = first_batch_counts(cfg, toy_data());
  ASSERT_GT(counts.negatives, 0);
  ASSERT_GT(counts.positives, 0);
  const auto self = run_standard_self_training(rt::trained_toy().model, toy_data().view(), cfg, kToyContext);
  const auto mine = run_pseudonegative_mining(rt::trained_toy().model, toy_data().view(), cfg, kToyContext);
  EXPECT_EQ(self.history.iterations.at(0).accepted, counts.negatives + counts.positives);
  EXPECT_EQ(mine.history.iterations.at(0).accepted, counts.negatives);
}

TEST(Baselines, MiningIgnoresConfidentPositives) {
  // Every pool image carries a lesion, so no state is confidently negative.
  std::vector<LabeledPair> pool;
  for (int i = 0; i < 12; ++i) pool.push_back(rt::toy_pair(2000 + i, true));
  const ToyLoopData d(pool);
  RestConfig cfg = toy_rest_config();
  cfg.k_iterations = 3;
  const auto before = rt::trained_toy().model.digest();
  const auto out = run_pseudonegative_mining(rt::trained_toy().model, d.view(), cfg, kToyContext);
  expect_complete(out.history, 3);
  for (const auto& it : out.history.iterations) {
    EXPECT_EQ(it.accepted, 0);
    EXPECT_EQ(it.phase, Phase::kExploration);
    EXPECT_FALSE(it.r_val.has_value());
    EXPECT_EQ(it.seg_digest, before);
  }
}

TEST(Baselines, DeterministicAndComplete) {
  RestConfig cfg = toy_rest_config();
  cfg.k_iterations = 3;
  const auto a = run_standard_self_training(rt::trained_toy().model, toy_data().view(), cfg, kToyContext);
  const auto b = run_standard_self_training(rt::trained_toy().model, toy_data().view(), cfg, kToyContext);
  expect_complete(a.history, 3);
  EXPECT_EQ(a.seg.digest(), b.seg.digest());
  EXPECT_EQ(a.history.records(), b.history.records());
}

TEST(IterationBatch, SharedAcrossMethodsAndDistinct) {
  const auto a = iteration_batch(40, 8, 11, 1);
  EXPECT_EQ(a, iteration_batch(40, 8, 11, 1));
  EXPECT_NE(a, iteration_batch(40, 8, 11, 2));
  EXPECT_NE(a, iteration_batch(40, 8, 12, 1));
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 8u);
  for (std::size_t i : a) EXPECT_LT(i, 40u);
  EXPECT_EQ(iteration_batch(5, 8, 11, 1).size(), 5u);
}

TEST(RestConfig, Validation) {
  EXPECT_NO_THROW(RestConfig{}.validate());
  auto expect_bad = [](auto mutate) {
    RestConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  expect_bad([](RestConfig& c) { c.k_iterations = 0; });
  expect_bad([](RestConfig& c) { c.phase_threshold = 0.0; });
  expect_bad([](RestConfig& c) { c.batch_size = 0; });
  expect_bad([](RestConfig& c) { c.stab_window = 1; });
  expect_bad([](RestConfig& c) { c.stab_delta = 0.0; });
  expect_bad([](RestConfig& c) { c.anneal_factor = 1.5; });
  expect_bad([](RestConfig& c) { c.iou_threshold = 1.0; });
  expect_bad([](RestConfig& c) { c.heuristic.positive_threshold = 0.3; });
}

}  // namespace
