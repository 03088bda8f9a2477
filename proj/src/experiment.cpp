#include "restlab/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "restlab/error.hpp"
#include "restlab/metrics.hpp"
#include "restlab/policy.hpp"
#include "restlab/util.hpp"

namespace restlab {

namespace {

std::uint64_t fold_seed(const ExperimentConfig& cfg, const FoldKey& key, std::uint64_t stage) {
  const auto frac = static_cast<std::uint64_t>(std::lround(key.fraction * 100.0));
  std::uint64_t s = derive_seed(cfg.master_seed, static_cast<std::uint64_t>(key.repeat));
  s = derive_seed(s, static_cast<std::uint64_t>(key.fold));
  s = derive_seed(s, frac);
  return derive_seed(s, stage);
}

}  // namespace

bool is_known_method(const std::string& method) {
  return method == kMethodSupervised || method == kMethodRest || method == kMethodSelfTrain ||
         method == kMethodNegMine;
}

std::string fold_tag(const FoldKey& key) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "f%03ld_r%d_k%d", std::lround(key.fraction * 100.0), key.repeat, key.fold);
  return buf;
}

DatasetSplit prepare_dataset(const ExperimentConfig& cfg) {
  DatasetSplit split = generate_dataset(cfg.dataset.n_labeled, cfg.dataset.n_unlabeled, cfg.dataset.seed,
                                        cfg.dataset.shape, cfg.folds);
  return cfg.dataset.equalize ? equalize_split(split) : split;
}

FoldData fold_data(const DatasetSplit& split, const ExperimentConfig& cfg, const FoldKey& key) {
  if (key.fold < 0 || key.fold >= cfg.folds) throw ConfigError("fold index out of range");
  const auto folds = make_folds(split, cfg.folds, repeat_seed(key.repeat));
  std::vector<int> train_ids;
  for (int g = 0; g < cfg.folds; ++g) {
    if (g != key.fold) train_ids.insert(train_ids.end(), folds[g].begin(), folds[g].end());
  }
  const auto kept = subset_ids(train_ids, key.fraction,
                               derive_seed(repeat_seed(key.repeat), static_cast<std::uint64_t>(key.fold)));
  FoldData out;
  for (int id : kept) out.train.push_back(split.labeled_by_id(id));
  for (int id : folds[key.fold]) out.val.push_back(split.labeled_by_id(id));
  if (out.train.empty()) throw ConfigError("fold " + fold_tag(key) + " has no training images");
  return out;
}

UNetArch arch_for(const ExperimentConfig& cfg) {
  UNetArch a = cfg.arch;
  a.height = cfg.dataset.shape.height;
  a.width = cfg.dataset.shape.width;
  return a;
}

SegHyper seg_hyper(const ExperimentConfig& cfg, const FoldKey& key) {
  SegHyper h = cfg.seg;
  h.seed = fold_seed(cfg, key, 0x5E6);
  return h;
}

ExpertHyper expert_hyper(const ExperimentConfig& cfg, const FoldKey& key) {
  ExpertHyper h = cfg.expert;
  h.seed = fold_seed(cfg, key, 0x1A1);
  return h;
}

RestConfig rest_config(const ExperimentConfig& cfg, const FoldKey& key) {
  RestConfig r = cfg.rest;
  r.seed = fold_seed(cfg, key, 0x4E57);
  r.fine_tune.base_learning_rate = cfg.seg.learning_rate;
  return r;
}

std::uint64_t policy_seed(const ExperimentConfig& cfg, const FoldKey& key) { return fold_seed(cfg, key, 0x9071); }

std::uint64_t negative_seed(const ExperimentConfig& cfg, const FoldKey& key) {
  return fold_seed(cfg, key, 0x9E6);
}

std::string make_run_id(const ExperimentConfig& cfg, const std::string& method, double fraction) {
  ExperimentConfig keyed = cfg;
  keyed.output_dir.clear();  // relocating the output must not change the id
  Fnv1a h;
  h.update(serialize_config(keyed));
  h.update(&cfg.master_seed, sizeof cfg.master_seed);
  h.update(method);
  const long frac = std::lround(fraction * 100.0);
  h.update(&frac, sizeof frac);
  return hex64(h.digest()).substr(0, 12);
}

RecordContext record_context(const std::string& run_id, const std::string& method, const FoldKey& key) {
  RecordContext ctx;
  ctx.run_id = run_id;
  ctx.method = method;
  ctx.labeled_fraction = key.fraction;
  ctx.repeat = key.repeat;
  ctx.fold = key.fold;
  ctx.iteration = 0;
  return ctx;
}

SupervisedStage run_supervised_stage(const ExperimentConfig& cfg, const FoldData& data, const FoldKey& key,
                                     const std::string& run_id) {
  SupervisedStage out{train_supervised(data.train, data.val, arch_for(cfg), seg_hyper(cfg, key)), {}};
  const EvalSummary s = evaluate_model(out.trained.model, data.val, cfg.rest.iou_threshold);
  out.record.context = record_context(run_id, kMethodSupervised, key);
  out.record.f1 = s.f1;
  out.record.sensitivity = s.sensitivity;
  out.record.fps_per_image = s.fps_per_image;
  out.record.validate();
  return out;
}

ExpertStage run_expert_stage(const ExperimentConfig& cfg, const SegModel& seg, const FoldData& data,
                             const FoldKey& key) {
  auto positives = build_demonstrations(seg, data.train);
  auto negatives = synthesize_negatives(positives, negative_seed(cfg, key), cfg.recipes);
  auto trained = train_expert_reward(positives, negatives, expert_hyper(cfg, key));
  return ExpertStage{std::move(positives), std::move(negatives), std::move(trained)};
}

RestOutcome run_rest_stage(const ExperimentConfig& cfg, const SegModel& seg, const ExpertRewardModel& reward,
                           const DatasetSplit& split, const FoldData& data, const FoldKey& key,
                           const std::string& run_id) {
  PolicyModel policy(cfg.policy, policy_seed(cfg, key));
  const RestData rd{split.unlabeled, data.train, data.val};
  return run_rest(seg, std::move(policy), reward, rd, rest_config(cfg, key), record_context(run_id, kMethodRest, key));
}

BaselineOutcome run_baseline_stage(const ExperimentConfig& cfg, const std::string& method, const SegModel& seg,
                                   const DatasetSplit& split, const FoldData& data, const FoldKey& key,
                                   const std::string& run_id) {
  const RestData rd{split.unlabeled, data.train, data.val};
  const RecordContext ctx = record_context(run_id, method, key);
  if (method == kMethodSelfTrain) return run_standard_self_training(seg, rd, rest_config(cfg, key), ctx);
  if (method == kMethodNegMine) return run_pseudonegative_mining(seg, rd, rest_config(cfg, key), ctx);
  throw ConfigError("unknown baseline method '" + method + "' (expected self-train or neg-mine)");
}

std::vector<FoldOutcome> run_protocol(const ExperimentConfig& cfg, const DatasetSplit& split,
                                      const ProtocolOptions& options) {
  cfg.validate();
  std::vector<FoldOutcome> out;
  std::vector<double> fractions = cfg.fractions;
  std::sort(fractions.begin(), fractions.end());
  const std::set<double> baseline_at(cfg.baseline_fractions.begin(), cfg.baseline_fractions.end());
  for (double fraction : fractions) {
    const std::string sup_id = make_run_id(cfg, kMethodSupervised, fraction);
    const std::string rest_id = make_run_id(cfg, kMethodRest, fraction);
    const std::string st_id = make_run_id(cfg, kMethodSelfTrain, fraction);
    const std::string nm_id = make_run_id(cfg, kMethodNegMine, fraction);
    for (int r = 0; r < cfg.repeats; ++r) {
      for (int f = 0; f < cfg.folds; ++f) {
        const FoldKey key{fraction, r, f};
        const FoldData data = fold_data(split, cfg, key);
        FoldOutcome fo;
        fo.key = key;
        SupervisedStage sup = run_supervised_stage(cfg, data, key, sup_id);
        fo.pre = sup.record;
        const bool rest_here =
            options.rest_fractions.empty() || std::find(options.rest_fractions.begin(), options.rest_fractions.end(),
                                                        fraction) != options.rest_fractions.end();
        if (options.run_rest && rest_here) {
          try {
            ExpertStage ex = run_expert_stage(cfg, sup.trained.model, data, key);
            fo.expert_accuracy = ex.trained.heldout_accuracy;
            RestOutcome ro = run_rest_stage(cfg, sup.trained.model, ex.trained.model, split, data, key, rest_id);
            fo.expert_digest_before = ro.history.expert_digest_before;
            fo.expert_digest_after = ro.history.expert_digest_after;
            fo.rest_records = ro.history.records();
            fo.post = fo.rest_records.back();
            fo.rest_iterations = ro.history.iterations;
            fo.rest_diagnostic = ro.history.diagnostic;
          } catch (const UnusableRewardModel& e) {
            // The loop never starts, so the segmenter keeps its supervised weights.
            fo.expert_accuracy = e.accuracy();
            fo.rest_aborted = true;
            fo.rest_diagnostic = e.what();
            MetricsRecord kept = sup.record;
            kept.context = record_context(rest_id, kMethodRest, key);
            fo.rest_records = {kept};
            fo.post = kept;
          }
        }
        if (options.run_baselines && baseline_at.count(fraction)) {
          fo.self_train_records =
              run_baseline_stage(cfg, kMethodSelfTrain, sup.trained.model, split, data, key, st_id).history.records();
          fo.neg_mine_records =
              run_baseline_stage(cfg, kMethodNegMine, sup.trained.model, split, data, key, nm_id).history.records();
        }
        if (options.on_fold) options.on_fold(fo);
        out.push_back(std::move(fo));
      }
    }
  }
  return out;
}

}  // namespace restlab
