#include "restlab/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "restlab/error.hpp"
#include "restlab/metrics.hpp"

namespace restlab {

namespace {

using nc::Parameter;
using nc::Tape;
using nc::Tensor;

Tensor<float>& stack_input(Tape<float>& tape, std::span<const SampleGrid* const> images,
                           std::span<const ProbMap* const> states) {
  const int h = images[0]->pixels.height;
  const int w = images[0]->pixels.width;
  Tensor<float>& x = tape.make({static_cast<int>(images.size()), 2, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (!images[n]->pixels.same_shape(*states[n]) || images[n]->pixels.height != h ||
        images[n]->pixels.width != w) {
      throw DataError("policy: image/state shape mismatch for sample " + std::to_string(images[n]->id));
    }
    float* dst = x.data().data() + n * 2 * plane;
    std::copy(images[n]->pixels.px.begin(), images[n]->pixels.px.end(), dst);
    std::copy(states[n]->px.begin(), states[n]->px.end(), dst + plane);
  }
  return x;
}

double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

}  // namespace

PolicyModel::PolicyModel(const PolicyArch& arch, std::uint64_t seed)
    : arch_(arch), temperature_(arch.initial_temperature) {
  if (arch.hidden < 1 || !(arch.initial_temperature > 0.0) || !(arch.min_temperature > 0.0) ||
      arch.min_temperature > arch.initial_temperature) {
    throw ConfigError("PolicyModel: invalid architecture");
  }
  Rng rng(derive_seed(seed, 0x9071));
  auto gauss = [&](double sd) {
    const double u1 = 1.0 - uniform01(rng);
    const double u2 = uniform01(rng);
    return static_cast<float>(sd * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2));
  };
  params_.push_back(nc::make_parameter<float>("prior.w", {1, 2, 1, 1}));
  params_.back().value[1] = static_cast<float>(arch.prior_gain);
  params_.push_back(nc::make_parameter<float>("prior.b", {1}));
  params_.back().value[0] = static_cast<float>(-0.5 * arch.prior_gain);
  params_.push_back(nc::make_parameter<float>("branch0.w", {arch.hidden, 2, 3, 3}));
  for (float& v : params_.back().value.data()) v = gauss(std::sqrt(2.0 / 18.0));
  params_.push_back(nc::make_parameter<float>("branch0.b", {arch.hidden}));
  params_.push_back(nc::make_parameter<float>("branch1.w", {1, arch.hidden, 3, 3}));
  for (float& v : params_.back().value.data()) v = gauss(0.01);
  params_.push_back(nc::make_parameter<float>("branch1.b", {1}));
}

void PolicyModel::set_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) throw ConfigError("PolicyModel: temperature must be positive");
  temperature_ = std::max(t, arch_.min_temperature);
}

std::uint64_t PolicyModel::digest() const {
  Fnv1a h;
  const std::uint64_t pd = nc::parameter_digest(params());
  h.update(&pd, sizeof pd);
  h.update(&temperature_, sizeof temperature_);
  return h.digest();
}

Tensor<float>& PolicyModel::logits(Tape<float>& tape, Tensor<float>& x) {
  auto& p = params_;
  Tensor<float>& prior = nc::conv2d(tape, x, p[0].value, p[1].value);
  Tensor<float>& hidden = nc::relu(tape, nc::conv2d(tape, x, p[2].value, p[3].value));
  return nc::add(tape, prior, nc::conv2d(tape, hidden, p[4].value, p[5].value));
}

std::vector<double> PolicyModel::logits(const SampleGrid& image, const ProbMap& state) const {
  Tape<float> tape(false);
  const SampleGrid* img = &image;
  const ProbMap* st = &state;
  Tensor<float>& x = stack_input(tape, std::span<const SampleGrid* const>(&img, 1),
                                 std::span<const ProbMap* const>(&st, 1));
  // Inference only; the non-recording tape never writes gradients.
  Tensor<float>& z = const_cast<PolicyModel&>(*this).logits(tape, x);
  return std::vector<double>(z.data().begin(), z.data().end());
}

void PolicyModel::save(std::ostream& os) const {
  std::vector<Parameter<float>> all(params_.begin(), params_.end());
  all.push_back(nc::make_parameter<float>("temperature", {1}));
  all.back().value[0] = static_cast<float>(temperature_);
  nc::save_checkpoint<float>(os, kPolicyArchId, std::span<const Parameter<float>>(all));
}

void PolicyModel::load(std::istream& is) {
  std::vector<Parameter<float>> all(params_.begin(), params_.end());
  all.push_back(nc::make_parameter<float>("temperature", {1}));
  nc::load_checkpoint<float>(is, kPolicyArchId, std::span<Parameter<float>>(all));
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = all[i].value;
  set_temperature(all.back().value[0]);
}

void PolicyModel::save_file(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  save(os);
}

void PolicyModel::load_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  load(is);
}

std::vector<double> action_probabilities(std::span<const double> logits, double temperature) {
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i] / temperature;
    p[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  return p;
}

double mean_entropy(std::span<const double> logits, double temperature) {
  if (logits.empty()) return 0.0;
  double total = 0.0;
  for (double l : logits) {
    const double z = l / temperature;
    const double lp1 = log_sigmoid(z);
    const double lp0 = log_sigmoid(-z);
    total -= std::exp(lp1) * lp1 + std::exp(lp0) * lp0;
  }
  return total / static_cast<double>(logits.size());
}

PolicySample policy_sample(const PolicyModel& policy, const SampleGrid& image, const ProbMap& state, Rng& rng) {
  const auto z = policy.logits(image, state);
  const double t = policy.temperature();
  BinaryGrid mask(state.height, state.width);
  double log_prob = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!std::isfinite(z[i])) throw NumericalError("policy_sample: non-finite logit");
    const double zt = z[i] / t;
    bool on;
    if (zt > kSaturatedLogit) {
      on = true;
    } else if (zt < -kSaturatedLogit) {
      on = false;
    } else {
      on = uniform01(rng) < std::exp(log_sigmoid(zt));
    }
    mask.px[i] = on ? 1 : 0;
    log_prob += on ? log_sigmoid(zt) : log_sigmoid(-zt);
  }
  return PolicySample{make_mask(std::move(mask)), log_prob};
}

void HeuristicConfig::validate() const {
  if (!(negative_threshold > 0.0 && negative_threshold < 0.5)) {
    throw ConfigError("heuristic: theta_neg must lie in (0, 0.5)");
  }
  if (!(positive_threshold > 0.5 && positive_threshold < 1.0)) {
    throw ConfigError("heuristic: theta_pos must lie in (0.5, 1)");
  }
  if (min_area_px < 1) throw ConfigError("heuristic: min_area_px must be >= 1");
  for (double v : {epsilon, epsilon_decay, epsilon_min}) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("heuristic: epsilon schedule values must lie in [0,1]");
  }
}

std::optional<MaskGrid> heuristic_pseudolabel(const ProbMap& state, const HeuristicConfig& cfg) {
  cfg.validate();
  const float peak = *std::max_element(state.px.begin(), state.px.end());
  if (peak < cfg.negative_threshold) return make_mask(BinaryGrid(state.height, state.width));
  BinaryGrid confident = binarize(state, cfg.positive_threshold);
  BinaryGrid kept(state.height, state.width);
  bool any = false;
  for (const auto& comp : connected_components(confident)) {
    if (static_cast<int>(comp.pixels.size()) < cfg.min_area_px) continue;
    for (int idx : comp.pixels) kept.px[static_cast<std::size_t>(idx)] = 1;
    any = true;
  }
  if (!any) return std::nullopt;
  return make_mask(std::move(kept));
}

std::optional<PseudoLabelEntry> epsilon_greedy_select(const PolicyModel& policy, const HeuristicConfig& heuristic,
                                                      const SampleGrid& image, const ProbMap& state, double epsilon,
                                                      Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon_greedy_select: epsilon must lie in [0,1]");
  if (uniform01(rng) < epsilon) {
    auto mask = heuristic_pseudolabel(state, heuristic);
    if (!mask) return std::nullopt;
    return PseudoLabelEntry{&image, state, std::move(*mask), LabelSource::kHeuristic, std::nullopt};
  }
  PolicySample s = policy_sample(policy, image, state, rng);
  return PseudoLabelEntry{&image, state, std::move(s.mask), LabelSource::kPolicy, s.log_prob};
}

std::size_t PseudoLabelBatch::policy_count() const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                [](const auto& e) { return e.source == LabelSource::kPolicy; }));
}

std::size_t PseudoLabelBatch::heuristic_count() const { return entries.size() - policy_count(); }

double RewardBaseline::advantage(double reward) {
  const double adv = reward - value;
  value = decay * value + (1.0 - decay) * reward;
  return adv;
}

namespace {

// Accumulates grad of advantage * (-sum log pi) into the parameter grads; returns the sample count.
std::size_t accumulate_surrogate(PolicyModel& policy, const PseudoLabelBatch& batch, double advantage) {
  std::vector<const SampleGrid*> images;
  std::vector<const ProbMap*> states;
  std::vector<const BinaryGrid*> actions;
  for (const auto& e : batch.entries) {
    if (e.source != LabelSource::kPolicy) continue;
    images.push_back(e.image);
    states.push_back(&e.state);
    actions.push_back(&e.mask.pixels);
  }
  if (images.empty()) return 0;
  Tape<float> tape;
  Tensor<float>& x = stack_input(tape, images, states);
  Tensor<float>& target = tape.make({static_cast<int>(images.size()), 1, x.dim(2), x.dim(3)});
  const std::size_t plane = actions[0]->size();
  for (std::size_t n = 0; n < actions.size(); ++n) {
    for (std::size_t i = 0; i < plane; ++i) target[n * plane + i] = actions[n]->px[i] ? 1.0f : 0.0f;
  }
  Tensor<float>& z = policy.logits(tape, x);
  Tensor<float>& scaled = nc::scale(tape, z, static_cast<float>(1.0 / policy.temperature()));
  Tensor<float>& nll = nc::bce_with_logits(tape, scaled, target, nc::Reduction::kSum);
  Tensor<float>& loss = nc::scale(tape, nll, static_cast<float>(advantage));
  if (!std::isfinite(loss[0])) throw NumericalError("reinforce: non-finite surrogate loss");
  tape.backward(loss);
  return images.size();
}

}  // namespace

std::vector<double> policy_gradient(PolicyModel& policy, const PseudoLabelBatch& batch, double advantage) {
  for (auto& p : policy.params()) p.value.clear_grad();
  const std::size_t n = accumulate_surrogate(policy, batch, advantage);
  std::vector<double> out;
  for (auto& p : policy.params()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      // The surrogate is the negated objective.
      out.push_back(n && p.value.has_grad() ? -static_cast<double>(p.value.grad()[i]) : 0.0);
    }
    p.value.clear_grad();
  }
  return out;
}

ReinforceResult reinforce_update(PolicyModel& policy, const PseudoLabelBatch& batch, double reward,
                                 RewardBaseline& baseline, double learning_rate) {
  if (!std::isfinite(reward)) throw NumericalError("reinforce_update: non-finite reward");
  ReinforceResult res;
  if (batch.policy_count() == 0) return res;
  res.advantage = baseline.advantage(reward);
  for (auto& p : policy.params()) p.value.clear_grad();
  res.samples = accumulate_surrogate(policy, batch, res.advantage);
  nc::Optimizer<float> sgd({nc::OptimizerKind::kSgd, learning_rate});
  sgd.step(policy.params());
  res.applied = true;
  return res;
}

void anneal_temperature(PolicyModel& policy, double factor) {
  if (!(factor > 0.0 && factor <= 1.0)) throw ConfigError("anneal_temperature: factor must lie in (0,1]");
  policy.set_temperature(std::max(policy.temperature() * factor, policy.arch().min_temperature));
}

}  // namespace restlab
