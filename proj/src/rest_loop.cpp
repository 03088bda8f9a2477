#include "restlab/rest_loop.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <memory>
#include <numeric>

#include "restlab/error.hpp"
#include "restlab/util.hpp"

namespace restlab {

namespace {

MetricsRecord make_record(const SegModel& seg, std::span<const LabeledPair> val, const RecordContext& base,
                          int iteration, std::optional<double> reward, double iou) {
  const EvalSummary s = evaluate_model(seg, val, iou);
  MetricsRecord r;
  r.context = base;
  r.context.iteration = iteration;
  r.f1 = s.f1;
  r.sensitivity = s.sensitivity;
  r.fps_per_image = s.fps_per_image;
  r.reward = reward;
  r.validate();
  return r;
}

void check_data(const RestData& data, const RestConfig& cfg) {
  cfg.validate();
  if (data.unlabeled.empty()) throw ConfigError("self-training: empty unlabeled pool");
  if (data.val.empty()) throw ConfigError("self-training: empty validation set");
}

std::vector<float> snapshot(std::span<const nc::Parameter<float>> params) {
  std::vector<float> out;
  for (const auto& p : params) out.insert(out.end(), p.value.data().begin(), p.value.data().end());
  return out;
}

void restore(std::span<nc::Parameter<float>> params, const std::vector<float>& values) {
  std::size_t off = 0;
  for (auto& p : params) {
    std::copy_n(values.begin() + static_cast<long>(off), p.value.size(), p.value.data().begin());
    p.value.clear_grad();
    off += p.value.size();
  }
}

FineTuneHyper iteration_fine_tune(const RestConfig& cfg, int iteration) {
  FineTuneHyper h = cfg.fine_tune;
  h.seed = derive_seed(cfg.seed, 0xF1000 + static_cast<std::uint64_t>(iteration));
  return h;
}

}  // namespace

void RestConfig::validate() const {
  if (k_iterations < 1) throw ConfigError("rest: k_iterations must be >= 1");
  // Values >= 1 keep the gate closed.
  if (!(phase_threshold > 0.0) || !std::isfinite(phase_threshold)) {
    throw ConfigError("rest: phase_threshold must be positive");
  }
  if (batch_size < 1) throw ConfigError("rest: batch_size must be >= 1");
  if (stab_window < 2) throw ConfigError("rest: stab_window must be >= 2");
  if (!(stab_delta > 0.0)) throw ConfigError("rest: stab_delta must be > 0");
  if (!(anneal_factor > 0.0 && anneal_factor <= 1.0)) throw ConfigError("rest: anneal_factor must lie in (0,1]");
  if (!(policy_lr >= 0.0) || !std::isfinite(policy_lr)) throw ConfigError("rest: policy_lr must be >= 0");
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) throw ConfigError("rest: iou_threshold must lie in (0,1)");
  heuristic.validate();
}

std::string phase_name(Phase p) { return p == Phase::kExploitation ? "exploitation" : "exploration"; }

std::vector<MetricsRecord> RestHistory::records() const {
  std::vector<MetricsRecord> out{initial};
  for (const auto& it : iterations) out.push_back(it.record);
  return out;
}

std::vector<std::size_t> iteration_batch(std::size_t pool_size, int batch_size, std::uint64_t seed, int iteration) {
  std::vector<std::size_t> idx(pool_size);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(derive_seed(seed, 0xBA7C4), static_cast<std::uint64_t>(iteration)));
  const std::size_t take = std::min(pool_size, static_cast<std::size_t>(batch_size));
  for (std::size_t i = 0; i < take; ++i) std::swap(idx[i], idx[i + rng() % (pool_size - i)]);
  idx.resize(take);
  return idx;
}

RestOutcome run_rest(SegModel seg, PolicyModel policy, const ExpertRewardModel& reward, const RestData& data,
                     const RestConfig& cfg, const RecordContext& context) {
  check_data(data, cfg);
  RestOutcome out{std::move(seg), std::move(policy), {}};
  RestHistory& hist = out.history;
  hist.expert_digest_before = reward.digest();
  hist.initial = make_record(out.seg, data.val, context, 0, std::nullopt, cfg.iou_threshold);

  const double t0 = out.policy.temperature();
  double epsilon = cfg.heuristic.epsilon;
  RewardBaseline exp_baseline;
  RewardBaseline val_baseline;
  std::deque<double> r_val_window;
  std::vector<PseudoPair> retained;
  std::vector<std::unique_ptr<SampleGrid>> retained_images;
  bool force_explore = false;
  MetricsRecord last = hist.initial;
  Rng rng(derive_seed(cfg.seed, 0x9E57));

  for (int it = 1; it <= cfg.k_iterations; ++it) {
    const auto seg_backup = snapshot(out.seg.params());
    const auto pol_backup = snapshot(out.policy.params());
    const double temp_backup = out.policy.temperature();
    IterationLog log;
    log.iteration = it;
    try {
      const auto idx = iteration_batch(data.unlabeled.size(), cfg.batch_size, cfg.seed, it);
      std::vector<SampleGrid> images;
      for (std::size_t i : idx) images.push_back(data.unlabeled[i]);
      const auto states = out.seg.predict_all(images);
      log.sampled = static_cast<int>(idx.size());

      PseudoLabelBatch batch;
      for (std::size_t j = 0; j < idx.size(); ++j) {
        auto entry = epsilon_greedy_select(out.policy, cfg.heuristic, data.unlabeled[idx[j]], states[j], epsilon, rng);
        if (entry) batch.entries.push_back(std::move(*entry));
      }
      log.labeled_entries = static_cast<int>(batch.entries.size());
      log.heuristic_entries = static_cast<int>(batch.heuristic_count());
      log.reward_source = "none";

      bool changed = false;
      if (!batch.entries.empty()) {
        std::vector<ExpertScore> scores;
        double sum = 0.0;
        for (const auto& e : batch.entries) {
          scores.push_back(reward.score(e.state, e.mask));
          sum += scores.back().decision;
        }
        const double r_exp = sum / static_cast<double>(scores.size());
        log.expert_reward = r_exp;
        log.reward_source = "R_exp";
        reinforce_update(out.policy, batch, r_exp, exp_baseline, cfg.policy_lr);

        if (r_exp > cfg.phase_threshold && !force_explore) {
          log.phase = Phase::kExploitation;
          anneal_temperature(out.policy, cfg.anneal_factor);
          std::vector<PseudoPair> pseudo;
          if (!cfg.retain_pseudolabels) retained.clear();
          for (std::size_t j = 0; j < batch.entries.size(); ++j) {
            if (scores[j].decision != 1) continue;
            retained_images.push_back(std::make_unique<SampleGrid>(*batch.entries[j].image));
            retained.push_back(PseudoPair{retained_images.back().get(), batch.entries[j].mask});
          }
          pseudo = retained;
          log.accepted = static_cast<int>(pseudo.size());
          if (!pseudo.empty()) {
            const FineTuneResult ft = fine_tune(out.seg, pseudo, data.val, data.labeled, iteration_fine_tune(cfg, it));
            if (ft.reverted) throw NumericalError("fine-tuning produced a non-finite loss");
            changed = true;
            log.r_val = ft.r_val;
            log.reward_source = "R_exp+R_val";
            reinforce_update(out.policy, batch, ft.r_val - ft.r_val_before, val_baseline, cfg.policy_lr);
            r_val_window.push_back(ft.r_val);
            if (static_cast<int>(r_val_window.size()) > cfg.stab_window) r_val_window.pop_front();
            if (static_cast<int>(r_val_window.size()) == cfg.stab_window) {
              const auto [lo, hi] = std::minmax_element(r_val_window.begin(), r_val_window.end());
              if (*hi - *lo < cfg.stab_delta) {
                log.stabilized = true;
                force_explore = true;
                out.policy.set_temperature(t0);
                r_val_window.clear();
              }
            }
          }
        } else {
          log.phase = Phase::kExploration;
          force_explore = false;
          epsilon = std::max(epsilon * cfg.heuristic.epsilon_decay, cfg.heuristic.epsilon_min);
        }
      }
      for (const auto& p : out.policy.params()) {
        if (!p.value.all_finite()) throw NumericalError("policy parameters became non-finite");
      }
      if (changed) {
        last = make_record(out.seg, data.val, context, it, log.expert_reward, cfg.iou_threshold);
      } else {
        last.context.iteration = it;
        last.reward = log.expert_reward;
      }
      log.record = last;
    } catch (const NumericalError& e) {
      restore(out.seg.params(), seg_backup);
      restore(out.policy.params(), pol_backup);
      out.policy.set_temperature(temp_backup);
      hist.halted = true;
      hist.diagnostic = "iteration " + std::to_string(it) + ": " + e.what();
      break;
    }
    log.temperature = out.policy.temperature();
    log.epsilon = epsilon;
    log.seg_digest = out.seg.digest();
    hist.iterations.push_back(std::move(log));
  }
  hist.expert_digest_after = reward.digest();
  return out;
}

namespace {

BaselineOutcome run_threshold_baseline(SegModel seg, const RestData& data, const RestConfig& cfg,
                                       const RecordContext& context, bool negatives_only) {
  check_data(data, cfg);
  BaselineOutcome out{std::move(seg), {}};
  RestHistory& hist = out.history;
  hist.initial = make_record(out.seg, data.val, context, 0, std::nullopt, cfg.iou_threshold);
  MetricsRecord last = hist.initial;
  std::vector<PseudoPair> retained;
  std::vector<std::unique_ptr<SampleGrid>> retained_images;
  for (int it = 1; it <= cfg.k_iterations; ++it) {
    const auto seg_backup = snapshot(out.seg.params());
    IterationLog log;
    log.iteration = it;
    log.reward_source = "none";
    log.epsilon = 0.0;
    try {
      const auto idx = iteration_batch(data.unlabeled.size(), cfg.batch_size, cfg.seed, it);
      std::vector<SampleGrid> images;
      for (std::size_t i : idx) images.push_back(data.unlabeled[i]);
      const auto states = out.seg.predict_all(images);
      log.sampled = static_cast<int>(idx.size());
      if (!cfg.retain_pseudolabels) retained.clear();
      for (std::size_t j = 0; j < idx.size(); ++j) {
        const ProbMap& s = states[j];
        const float peak = *std::max_element(s.px.begin(), s.px.end());
        std::optional<BinaryGrid> mask;
        if (peak < cfg.heuristic.negative_threshold) {
          mask = BinaryGrid(s.height, s.width);
        } else if (!negatives_only && peak >= cfg.heuristic.positive_threshold) {
          mask = binarize(s, static_cast<float>(cfg.heuristic.positive_threshold));
        }
        if (!mask) continue;
        retained_images.push_back(std::make_unique<SampleGrid>(images[j]));
        retained.push_back(PseudoPair{retained_images.back().get(), make_mask(std::move(*mask))});
      }
      log.labeled_entries = static_cast<int>(retained.size());
      log.accepted = log.labeled_entries;
      if (!retained.empty()) {
        log.phase = Phase::kExploitation;
        const FineTuneResult ft = fine_tune(out.seg, retained, data.val, data.labeled, iteration_fine_tune(cfg, it));
        if (ft.reverted) throw NumericalError("fine-tuning produced a non-finite loss");
        log.r_val = ft.r_val;
        last = make_record(out.seg, data.val, context, it, std::nullopt, cfg.iou_threshold);
      } else {
        last.context.iteration = it;
      }
      log.record = last;
    } catch (const NumericalError& e) {
      restore(out.seg.params(), seg_backup);
      hist.halted = true;
      hist.diagnostic = "iteration " + std::to_string(it) + ": " + e.what();
      break;
    }
    log.seg_digest = out.seg.digest();
    hist.iterations.push_back(std::move(log));
  }
  return out;
}

}  // namespace

BaselineOutcome run_standard_self_training(SegModel seg, const RestData& data, const RestConfig& cfg,
                                           const RecordContext& context) {
  return run_threshold_baseline(std::move(seg), data, cfg, context, false);
}

BaselineOutcome run_pseudonegative_mining(SegModel seg, const RestData& data, const RestConfig& cfg,
                                          const RecordContext& context) {
  return run_threshold_baseline(std::move(seg), data, cfg, context, true);
}

}  // namespace restlab
