#pragma once

// Two-pixel bandit: the policy labels a 1x2 image; reward 1 only for the mask [1,1].

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "restlab/policy.hpp"
#include "restlab/util.hpp"

namespace restlab::testing {

struct Bandit {
  PolicyModel policy;
  SampleGrid image;
  ProbMap state;

  explicit Bandit(std::uint64_t seed) : policy(PolicyArch{4, 20.0, 1.0, 0.05}, seed), image{0, Grid<float>(1, 2)}, state(1, 2) {
    image.pixels.px = {0.2f, 0.8f};
    state.px = {0.5f, 0.5f};
  }

  std::array<double, 2> pixel_probs() const {
    const auto z = policy.logits(image, state);
    const auto p = action_probabilities(z, policy.temperature());
    return {p[0], p[1]};
  }
  double target_prob() const {
    const auto p = pixel_probs();
    return p[0] * p[1];
  }
};

inline double bandit_reward(const MaskGrid& m) { return m.pixels.px[0] && m.pixels.px[1] ? 1.0 : 0.0; }

/// d(logit_i)/d(theta) by central differences on the policy's forward pass; row i is pixel i.
inline std::array<std::vector<double>, 2> logit_jacobian(PolicyModel& policy, const SampleGrid& image,
                                                         const ProbMap& state, float h = 1e-2f) {
  std::array<std::vector<double>, 2> jac;
  for (auto& p : policy.params()) {
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const float orig = p.value[k];
      p.value[k] = orig + h;
      const auto up = policy.logits(image, state);
      p.value[k] = orig - h;
      const auto down = policy.logits(image, state);
      p.value[k] = orig;
      const double step = static_cast<double>(orig + h) - static_cast<double>(orig - h);
      for (int i = 0; i < 2; ++i) jac[i].push_back((up[i] - down[i]) / step);
    }
  }
  return jac;
}

/// Exact E[R(a) grad log pi(a)] over the four outcomes, with
/// d log pi(a) / d logit_i = (a_i - p_i) / T chained through the Jacobian.
inline std::vector<double> exact_bandit_gradient(Bandit& b) {
  const auto p = b.pixel_probs();
  const double t = b.policy.temperature();
  std::array<double, 2> dz{};
  for (int a0 = 0; a0 <= 1; ++a0)
    for (int a1 = 0; a1 <= 1; ++a1) {
      const double prob = (a0 ? p[0] : 1 - p[0]) * (a1 ? p[1] : 1 - p[1]);
      const double reward = a0 && a1 ? 1.0 : 0.0;
      dz[0] += prob * reward * (a0 - p[0]) / t;
      dz[1] += prob * reward * (a1 - p[1]) / t;
    }
  const auto jac = logit_jacobian(b.policy, b.image, b.state);
  std::vector<double> g(jac[0].size());
  for (std::size_t k = 0; k < g.size(); ++k) g[k] = jac[0][k] * dz[0] + jac[1][k] * dz[1];
  return g;
}

/// Mean of R(a) grad log pi(a) over n library samples; the gradient of each
/// rewarded sample comes from the library's REINFORCE gradient.
inline std::vector<double> empirical_bandit_gradient(Bandit& b, int n, Rng& rng) {
  PseudoLabelBatch rewarded;
  for (int s = 0; s < n; ++s) {
    PolicySample smp = policy_sample(b.policy, b.image, b.state, rng);
    if (bandit_reward(smp.mask) > 0.0) {
      rewarded.entries.push_back({&b.image, b.state, std::move(smp.mask), LabelSource::kPolicy, smp.log_prob});
    }
  }
  auto g = policy_gradient(b.policy, rewarded, 1.0);
  for (double& v : g) v /= n;
  return g;
}

inline double relative_error(const std::vector<double>& got, const std::vector<double>& want) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    num += (got[i] - want[i]) * (got[i] - want[i]);
    den += want[i] * want[i];
  }
  return std::sqrt(num / den);
}

/// Single-sample REINFORCE updates with a moving-average baseline; returns the
/// update count at which P([1,1]) first exceeds `target`, or -1.
inline int train_bandit(Bandit& b, int max_updates, double lr, double target, Rng& rng) {
  RewardBaseline baseline;
  for (int u = 1; u <= max_updates; ++u) {
    PolicySample smp = policy_sample(b.policy, b.image, b.state, rng);
    const double reward = bandit_reward(smp.mask);
    PseudoLabelBatch batch;
    batch.entries.push_back({&b.image, b.state, std::move(smp.mask), LabelSource::kPolicy, smp.log_prob});
    reinforce_update(b.policy, batch, reward, baseline, lr);
    if (b.target_prob() > target) return u;
  }
  return -1;
}

}  // namespace restlab::testing
