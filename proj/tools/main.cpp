// restlab command-line front end. Every failure prints one line
// `error[E_<CLASS>]: <text>` on stderr and exits with the class's code.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <CLI11.hpp>

#include "restlab/config.hpp"
#include "restlab/error.hpp"
#include "restlab/experiment.hpp"
#include "restlab/report.hpp"
#include "restlab/util.hpp"
#include "workspace.hpp"

namespace restlab::cli {
namespace {

using nlohmann::json;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;  // section.key=value
  std::optional<std::string> out;
  std::vector<double> fractions;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_fraction) {
  cmd->add_option("-c,--config", o.config_path, "experiment config file (defaults when omitted)");
  cmd->add_option("--set", o.overrides, "override one key, e.g. --set rest.k_iterations=4");
  cmd->add_option("-o,--out", o.out, "output directory (overrides REST_LAB_OUT and the config)");
  if (with_fraction) cmd->add_option("-f,--fraction", o.fractions, "labeled fraction(s); default from the config");
}

ExperimentConfig load_effective_config(const CommonOptions& o) {
  std::string text;
  std::string source = "<defaults>";
  if (!o.config_path.empty()) {
    std::ifstream is(o.config_path);
    if (!is) throw ConfigError("cannot read config file " + o.config_path);
    std::ostringstream ss;
    ss << is.rdbuf();
    text = ss.str();
    source = o.config_path;
  }
  for (const std::string& ov : o.overrides) {
    const auto dot = ov.find('.');
    const auto eq = ov.find('=');
    if (dot == std::string::npos || eq == std::string::npos || dot > eq) {
      throw ConfigError("--set expects section.key=value, got '" + ov + "'");
    }
    text += "\n[" + ov.substr(0, dot) + "]\n" + ov.substr(dot + 1, eq - dot - 1) + " = " + ov.substr(eq + 1) + "\n";
  }
  std::istringstream is(text);
  ExperimentConfig cfg = parse_config(is, source);
  cfg.output_dir = resolve_output(cfg, o.out).string();
  cfg.validate();
  return cfg;
}

std::vector<double> chosen_fractions(const CommonOptions& o, const std::vector<double>& fallback) {
  std::vector<double> f = o.fractions.empty() ? fallback : o.fractions;
  for (double x : f) {
    if (!is_supported_fraction(x)) throw ConfigError("unsupported labeled fraction " + std::to_string(x));
  }
  std::sort(f.begin(), f.end());
  f.erase(std::unique(f.begin(), f.end()), f.end());
  return f;
}

template <typename Fn>
void for_each_fold(const ExperimentConfig& cfg, double fraction, Fn&& fn) {
  for (int r = 0; r < cfg.repeats; ++r)
    for (int k = 0; k < cfg.folds; ++k) fn(FoldKey{fraction, r, k});
}

void print_fold(const std::string& method, const FoldKey& key, const MetricsRecord& rec, const std::string& note = "") {
  std::printf("%-10s %s  f1=%.4f sens=%.4f fps=%.3f%s\n", method.c_str(), fold_tag(key).c_str(), rec.f1,
              rec.sensitivity, rec.fps_per_image, note.c_str());
  std::fflush(stdout);
}

SegModel load_supervised(const ExperimentConfig& cfg, const Workspace& ws, const FoldKey& key) {
  const fs::path path =
      ws.run_dir(make_run_id(cfg, kMethodSupervised, key.fraction)) / "checkpoints" / (fold_tag(key) + ".seg");
  if (!fs::exists(path)) {
    throw DataError("supervised checkpoint " + path.string() + " is missing (run `restlab train-supervised` first)");
  }
  SegModel seg(arch_for(cfg), 0);
  seg.load_file(path);
  return seg;
}

// ---- generate ---------------------------------------------------------------

int cmd_generate(const CommonOptions& o) {
  const ExperimentConfig cfg = load_effective_config(o);
  const Workspace ws{cfg.output_dir};
  const DatasetSplit split = prepare_dataset(cfg);
  fs::create_directories(ws.dataset_dir());
  write_dataset(ws.dataset_dir(), split);
  const DatasetSplit reread = load_dataset(ws);
  std::printf("dataset %s: %zu labeled, %zu unlabeled\n", ws.dataset_dir().string().c_str(), reread.labeled.size(),
              reread.unlabeled.size());
  std::printf("dataset digest %s\n", hex64(dataset_digest(reread)).c_str());
  return 0;
}

// ---- train-supervised -------------------------------------------------------

int cmd_train_supervised(const CommonOptions& o) {
  const ExperimentConfig cfg = load_effective_config(o);
  const Workspace ws{cfg.output_dir};
  const DatasetSplit split = load_dataset(ws);
  const std::uint64_t digest = dataset_digest(split);
  for (double fraction : chosen_fractions(o, cfg.fractions)) {
    RunStore store(ws, cfg, kMethodSupervised, fraction, digest);
    std::printf("run %s  supervised at %.0f%% labels\n", store.run_id().c_str(), fraction * 100.0);
    for_each_fold(cfg, fraction, [&](const FoldKey& key) {
      if (store.done(key)) return;
      const FoldData data = fold_data(split, cfg, key);
      const SupervisedStage st = run_supervised_stage(cfg, data, key, store.run_id());
      st.trained.model.save_file(store.checkpoint(key, ".seg"));
      store.append(key, {st.record});
      store.note_fold(key, {{"seed", seg_hyper(cfg, key).seed},
                            {"train_size", data.train.size()},
                            {"val_size", data.val.size()},
                            {"epochs", st.trained.curve.size()},
                            {"checkpoint", fs::relative(store.checkpoint(key, ".seg"), store.dir()).string()}});
      print_fold(kMethodSupervised, key, st.record);
    });
  }
  return 0;
}

// ---- train-irl --------------------------------------------------------------

std::string polarity_label(Polarity p) { return p == Polarity::kExpert ? "expert" : "negative"; }

// Trains and stores the expert reward of one fold, or loads it when present.
ExpertRewardModel expert_for_fold(const ExperimentConfig& cfg, const SegModel& seg, const FoldData& data,
                                  const FoldKey& key, RunStore& store, bool verbose) {
  const auto path = store.checkpoint(key, ".irl");
  ExpertRewardModel model(cfg.dataset.shape.height, cfg.dataset.shape.width, 0);
  if (fs::exists(path)) {
    model.load_file(path);
    return model;
  }
  ExpertStage ex = run_expert_stage(cfg, seg, data, key);
  ex.trained.model.save_file(path);

  fs::create_directories(store.dir() / "demonstrations");
  std::ofstream demo(store.dir() / "demonstrations" / (fold_tag(key) + ".csv"));
  demo << "source_id,polarity,recipe,label_pixels\n";
  for (const auto* set : {&ex.positives, &ex.negatives}) {
    for (const Demonstration& d : *set) {
      long on = std::count(d.label.pixels.px.begin(), d.label.pixels.px.end(), std::uint8_t{1});
      demo << d.source_id << ',' << polarity_label(d.polarity) << ',' << recipe_name(d.recipe) << ',' << on << "\n";
    }
  }
  if (!demo) throw DataError("failed writing demonstration manifest for " + fold_tag(key));

  char line[256];
  std::snprintf(line, sizeof line, "%s,%.6f,%.6f,%.6f,%d,%d,%s", fold_tag(key).c_str(), ex.trained.heldout_accuracy,
                ex.trained.false_accept, ex.trained.false_reject, ex.trained.epochs, ex.trained.heldout_size,
                hex64(ex.trained.model.digest()).c_str());
  append_csv_line(store.dir() / "expert.csv", "fold,heldout_accuracy,false_accept,false_reject,epochs,heldout_size,digest",
                  line);
  store.note_fold(key, {{"expert_seed", expert_hyper(cfg, key).seed},
                        {"negative_seed", negative_seed(cfg, key)},
                        {"expert_heldout_accuracy", ex.trained.heldout_accuracy},
                        {"expert_digest", hex64(ex.trained.model.digest())},
                        {"expert_checkpoint", fs::relative(path, store.dir()).string()}});
  if (verbose) {
    std::printf("train-irl  %s  heldout_acc=%.3f far=%.3f frr=%.3f epochs=%d\n", fold_tag(key).c_str(),
                ex.trained.heldout_accuracy, ex.trained.false_accept, ex.trained.false_reject, ex.trained.epochs);
    std::fflush(stdout);
  }
  return std::move(ex.trained.model);
}

int cmd_train_irl(const CommonOptions& o) {
  const ExperimentConfig cfg = load_effective_config(o);
  const Workspace ws{cfg.output_dir};
  const DatasetSplit split = load_dataset(ws);
  const std::uint64_t digest = dataset_digest(split);
  for (double fraction : chosen_fractions(o, cfg.fractions)) {
    RunStore rest(ws, cfg, kMethodRest, fraction, digest);
    for_each_fold(cfg, fraction, [&](const FoldKey& key) {
      const FoldData data = fold_data(split, cfg, key);
      const SegModel seg = load_supervised(cfg, ws, key);
      expert_for_fold(cfg, seg, data, key, rest, true);
    });
  }
  return 0;
}

// ---- rest -------------------------------------------------------------------

std::string opt_text(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

int cmd_rest(const CommonOptions& o) {
  const ExperimentConfig cfg = load_effective_config(o);
  const Workspace ws{cfg.output_dir};
  const DatasetSplit split = load_dataset(ws);
  const std::uint64_t digest = dataset_digest(split);
  for (double fraction : chosen_fractions(o, cfg.fractions)) {
    RunStore store(ws, cfg, kMethodRest, fraction, digest);
    std::printf("run %s  rest at %.0f%% labels\n", store.run_id().c_str(), fraction * 100.0);
    for_each_fold(cfg, fraction, [&](const FoldKey& key) {
      if (store.done(key)) return;
      const FoldData data = fold_data(split, cfg, key);
      const SegModel seg = load_supervised(cfg, ws, key);
      const ExpertRewardModel expert = expert_for_fold(cfg, seg, data, key, store, false);
      const RestOutcome out = run_rest_stage(cfg, seg, expert, split, data, key, store.run_id());
      const RestHistory& h = out.history;
      if (h.expert_digest_before != h.expert_digest_after || h.expert_digest_before != expert.digest()) {
        throw StateError("expert reward parameters changed during " + fold_tag(key));
      }
      out.seg.save_file(store.checkpoint(key, ".seg"));
      out.policy.save_file(store.checkpoint(key, ".pol"));
      for (const IterationLog& it : h.iterations) {
        char line[512];
        std::snprintf(line, sizeof line, "%s,%d,%s,%s,%s,%s,%d,%d,%d,%d,%.6g,%.6g,%d,%s", fold_tag(key).c_str(),
                      it.iteration, phase_name(it.phase).c_str(), it.reward_source.c_str(),
                      opt_text(it.expert_reward).c_str(), opt_text(it.r_val).c_str(), it.sampled, it.labeled_entries,
                      it.heuristic_entries, it.accepted, it.temperature, it.epsilon, it.stabilized ? 1 : 0,
                      hex64(it.seg_digest).c_str());
        append_csv_line(store.dir() / "iterations.csv",
                        "fold,iteration,phase,reward_source,expert_reward,r_val,sampled,labeled_entries,"
                        "heuristic_entries,accepted,temperature,epsilon,stabilized,seg_digest",
                        line);
      }
      store.append(key, h.records());
      store.note_fold(key, {{"rest_seed", rest_config(cfg, key).seed},
                            {"policy_seed", policy_seed(cfg, key)},
                            {"expert_digest_before", hex64(h.expert_digest_before)},
                            {"expert_digest_after", hex64(h.expert_digest_after)},
                            {"halted", h.halted},
                            {"diagnostic", h.diagnostic},
                            {"checkpoint", fs::relative(store.checkpoint(key, ".seg"), store.dir()).string()},
                            {"policy_checkpoint", fs::relative(store.checkpoint(key, ".pol"), store.dir()).string()}});
      const MetricsRecord& last = h.records().back();
      char note[96];
      std::snprintf(note, sizeof note, "  (pre f1=%.4f)%s", h.initial.f1, h.halted ? "  halted" : "");
      print_fold(kMethodRest, key, last, note);
      if (h.halted) std::fprintf(stderr, "warning: %s halted: %s\n", fold_tag(key).c_str(), h.diagnostic.c_str());
    });
  }
  return 0;
}

// ---- baseline ---------------------------------------------------------------

int cmd_baseline(const CommonOptions& o, const std::string& method) {
  if (method != kMethodSelfTrain && method != kMethodNegMine) {
    throw ConfigError("unknown baseline method '" + method + "' (expected self-train or neg-mine)");
  }
  const ExperimentConfig cfg = load_effective_config(o);
  const Workspace ws{cfg.output_dir};
  const DatasetSplit split = load_dataset(ws);
  const std::uint64_t digest = dataset_digest(split);
  for (double fraction : chosen_fractions(o, cfg.baseline_fractions)) {
    RunStore store(ws, cfg, method, fraction, digest);
    std::printf("run %s  %s at %.0f%% labels\n", store.run_id().c_str(), method.c_str(), fraction * 100.0);
    for_each_fold(cfg, fraction, [&](const FoldKey& key) {
      if (store.done(key)) return;
      const FoldData data = fold_data(split, cfg, key);
      const SegModel seg = load_supervised(cfg, ws, key);
      const BaselineOutcome out = run_baseline_stage(cfg, method, seg, split, data, key, store.run_id());
      out.seg.save_file(store.checkpoint(key, ".seg"));
      store.append(key, out.history.records());
      store.note_fold(key, {{"rest_seed", rest_config(cfg, key).seed},
                            {"halted", out.history.halted},
                            {"diagnostic", out.history.diagnostic},
                            {"checkpoint", fs::relative(store.checkpoint(key, ".seg"), store.dir()).string()}});
      print_fold(method, key, out.history.records().back());
    });
  }
  return 0;
}

// ---- report -----------------------------------------------------------------

std::string pct(double fraction) { return std::to_string(std::lround(fraction * 100.0)); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
  if (!os) throw DataError("failed writing " + path.string());
}

// Final-iteration F1 per fold for every (method, fraction).
std::map<std::pair<std::string, long>, std::vector<double>> final_f1(const std::vector<MetricsRecord>& records) {
  std::map<std::tuple<std::string, long, int, int>, const MetricsRecord*> last;
  for (const MetricsRecord& r : records) {
    auto& slot = last[{r.context.method, std::lround(r.context.labeled_fraction * 100.0), r.context.repeat,
                       r.context.fold}];
    if (!slot || slot->context.iteration < r.context.iteration) slot = &r;
  }
  std::map<std::pair<std::string, long>, std::vector<double>> out;
  for (const auto& [key, rec] : last) out[{std::get<0>(key), std::get<1>(key)}].push_back(rec->f1);
  return out;
}

std::string comparison_text(const std::vector<MetricsRecord>& records) {
  const auto finals = final_f1(records);
  std::ostringstream os;
  char buf[256];
  os << "\nFinal F1 per method (mean +- sd over folds):\n";
  for (const auto& [key, values] : finals) {
    const MeanSd m = mean_sd(values);
    std::snprintf(buf, sizeof buf, "  %-10s %3ld%%  %.4f +- %.4f  (n=%zu)\n", key.first.c_str(), key.second, m.mean,
                  m.sd, values.size());
    os << buf;
  }
  const auto full = finals.find({kMethodSupervised, 100L});
  if (full != finals.end()) {
    const double ref = mean_sd(full->second).mean;
    os << "\nLabel efficiency (ReST vs supervised at 100% labels, F1 " << std::to_string(ref).substr(0, 6) << "):\n";
    for (const auto& [key, values] : finals) {
      if (key.first != kMethodRest || key.second >= 100) continue;
      const double m = mean_sd(values).mean;
      std::snprintf(buf, sizeof buf, "  rest at %3ld%%: %.4f, gap %+.4f (%s the 0.01 margin)\n", key.second, m,
                    m - ref, m >= ref - 0.01 ? "within" : "outside");
      os << buf;
    }
  }
  return os.str();
}

void write_overlays(const Workspace& ws, const std::vector<SummaryRow>& rows, const std::vector<int>& requested) {
  if (rows.empty() || !fs::exists(ws.dataset_dir() / "manifest.txt")) return;
  const DatasetSplit split = load_dataset(ws);
  for (const SummaryRow& row : rows) {
    const json manifest = read_run_manifest(ws, row.post_run);
    std::istringstream cfg_text(manifest.at("config").get<std::string>());
    const ExperimentConfig cfg = parse_config(cfg_text, row.post_run + "/manifest.json");
    const auto folds = make_folds(split, cfg.folds, repeat_seed(0));
    std::vector<int> ids = requested;
    if (ids.empty()) {
      ids.assign(folds[0].begin(), folds[0].begin() + std::min<std::size_t>(3, folds[0].size()));
    }
    for (int id : ids) {
      int fold = -1;
      for (std::size_t f = 0; f < folds.size(); ++f) {
        if (std::find(folds[f].begin(), folds[f].end(), id) != folds[f].end()) fold = static_cast<int>(f);
      }
      if (fold < 0) throw DataError("overlay sample " + std::to_string(id) + " is not a labeled image");
      const FoldKey key{row.fraction, 0, fold};
      const fs::path pre_ckpt = ws.run_dir(row.pre_run) / "checkpoints" / (fold_tag(key) + ".seg");
      const fs::path post_ckpt = ws.run_dir(row.post_run) / "checkpoints" / (fold_tag(key) + ".seg");
      if (!fs::exists(pre_ckpt) || !fs::exists(post_ckpt)) continue;
      SegModel pre(arch_for(cfg), 0), post(arch_for(cfg), 0);
      pre.load_file(pre_ckpt);
      post.load_file(post_ckpt);
      const LabeledPair& pair = split.labeled_by_id(id);
      const Canvas c = triptych(pair.image.pixels, pair.mask.pixels, binarize(pre.predict(pair.image)),
                                binarize(post.predict(pair.image)));
      c.write_ppm(ws.report_dir() / ("overlay_f" + pct(row.fraction) + "_id" + std::to_string(id) + ".ppm"));
    }
  }
}

int cmd_report(const CommonOptions& o, const std::vector<int>& samples) {
  const ExperimentConfig cfg = load_effective_config(o);
  const Workspace ws{cfg.output_dir};
  const std::vector<MetricsRecord> records = read_all_metrics(ws);
  if (records.empty()) throw DataError("no metrics found under " + ws.runs_dir().string());
  const std::vector<SummaryRow> rows = summarize_runs(records);
  fs::create_directories(ws.report_dir());

  std::ostringstream csv;
  write_summary_csv(csv, rows);
  write_text(ws.report_dir() / "summary.csv", csv.str());
  const std::string text = format_summary_table(rows) + comparison_text(records);
  write_text(ws.report_dir() / "summary.txt", text);
  std::cout << text;

  const std::vector<CurvePoint> curves = f1_curves(records);
  std::ostringstream curves_csv;
  write_curves_csv(curves_csv, curves);
  write_text(ws.report_dir() / "curves.csv", curves_csv.str());
  std::set<long> curve_fractions;
  for (const CurvePoint& p : curves) curve_fractions.insert(std::lround(p.fraction * 100.0));
  for (long f : curve_fractions) {
    plot_curves(curves, static_cast<double>(f) / 100.0).write_ppm(ws.report_dir() / ("curves_f" + std::to_string(f) + ".ppm"));
  }
  write_overlays(ws, rows, samples);
  std::cout << "\nreport written to " << ws.report_dir().string() << "\n";
  return 0;
}

// ---- config -----------------------------------------------------------------

int cmd_config(const CommonOptions& o, bool defaults) {
  if (defaults) {
    std::cout << serialize_config(ExperimentConfig{}, true);
    return 0;
  }
  std::cout << serialize_config(load_effective_config(o), true);
  return 0;
}

int report_error(std::string_view code, const std::string& what, int exit_code) {
  std::string one_line = what;
  std::replace(one_line.begin(), one_line.end(), '\n', ' ');
  std::cerr << "error[" << code << "]: " << one_line << "\n";
  return exit_code;
}

int run(int argc, char** argv) {
  CLI::App app{"restlab: reinforced self-training experiments on synthetic segmentation data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "restlab 1.0");

  CommonOptions common;
  auto* gen = app.add_subcommand("generate", "write the synthetic dataset (PGM files and manifest)");
  add_common(gen, common, false);
  auto* sup = app.add_subcommand("train-supervised", "train the segmenter on every fold");
  add_common(sup, common, true);
  auto* irl = app.add_subcommand("train-irl", "train the frozen expert reward model on every fold");
  add_common(irl, common, true);
  auto* rest = app.add_subcommand("rest", "run reinforced self-training from the supervised checkpoints");
  add_common(rest, common, true);
  std::string method;
  auto* base = app.add_subcommand("baseline", "run a self-training baseline from the supervised checkpoints");
  add_common(base, common, true);
  base->add_option("-m,--method", method, "self-train or neg-mine")->required();
  std::vector<int> samples;
  auto* rep = app.add_subcommand("report", "summary table, F1 curves and overlays from the output directory");
  add_common(rep, common, false);
  rep->add_option("--samples", samples, "labeled image ids for the overlay triptychs");
  bool defaults = false;
  auto* conf = app.add_subcommand("config", "print the effective configuration with documentation");
  add_common(conf, common, false);
  conf->add_flag("--defaults", defaults, "print the documented defaults");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return report_error("E_CONFIG", e.what(), exit_code(ErrorCode::kConfig));
  }

  try {
    if (gen->parsed()) return cmd_generate(common);
    if (sup->parsed()) return cmd_train_supervised(common);
    if (irl->parsed()) return cmd_train_irl(common);
    if (rest->parsed()) return cmd_rest(common);
    if (base->parsed()) return cmd_baseline(common, method);
    if (rep->parsed()) return cmd_report(common, samples);
    if (conf->parsed()) return cmd_config(common, defaults);
  } catch (const Error& e) {
    return report_error(code_name(e.code()), e.what(), exit_code(e.code()));
  } catch (const fs::filesystem_error& e) {
    return report_error(code_name(ErrorCode::kData), e.what(), exit_code(ErrorCode::kData));
  } catch (const std::exception& e) {
    return report_error("E_INTERNAL", e.what(), 1);
  }
  return 1;
}

}  // namespace
}  // namespace restlab::cli

int main(int argc, char** argv) { return restlab::cli::run(argc, argv); }
