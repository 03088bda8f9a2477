#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "restlab/config.hpp"
#include "restlab/experiment.hpp"
#include "restlab/metrics.hpp"

namespace restlab::cli {

namespace fs = std::filesystem;

/// Output directory precedence: --out, then REST_LAB_OUT, then the config.
fs::path resolve_output(const ExperimentConfig& cfg, const std::optional<std::string>& cli_out);

/// Directory layout under the output root.
struct Workspace {
  fs::path root;

  fs::path dataset_dir() const { return root / "dataset"; }
  fs::path runs_dir() const { return root / "runs"; }
  fs::path run_dir(const std::string& run_id) const { return runs_dir() / run_id; }
  fs::path report_dir() const { return root / "report"; }
};

/// Loads the dataset written by `generate`; DataError when it is absent.
DatasetSplit load_dataset(const Workspace& ws);

/// Append-only record of one run: metrics.csv, manifest.json and checkpoints/.
/// Folds already present in metrics.csv are reported as done so that an
/// interrupted run resumes where it stopped.
class RunStore {
 public:
  RunStore(const Workspace& ws, const ExperimentConfig& cfg, std::string method, double fraction,
           std::uint64_t dataset_digest);

  const std::string& run_id() const { return run_id_; }
  const fs::path& dir() const { return dir_; }
  fs::path checkpoint(const FoldKey& key, const std::string& ext) const;

  bool done(const FoldKey& key) const;
  /// Writes all rows of one fold in a single flushed append.
  void append(const FoldKey& key, const std::vector<MetricsRecord>& records);
  /// Merges `info` into the manifest entry of this fold and rewrites manifest.json.
  void note_fold(const FoldKey& key, const nlohmann::json& info);

 private:
  void write_manifest() const;

  std::string method_;
  double fraction_;
  std::string run_id_;
  fs::path dir_;
  nlohmann::json manifest_;
  std::set<std::pair<int, int>> done_;
};

/// Appends `line` to a CSV file, writing `header` first when the file is new.
void append_csv_line(const fs::path& path, const std::string& header, const std::string& line);

/// Every metrics.csv under runs/, concatenated in run-id order.
std::vector<MetricsRecord> read_all_metrics(const Workspace& ws);

/// Parsed manifest.json of a run.
nlohmann::json read_run_manifest(const Workspace& ws, const std::string& run_id);

}  // namespace restlab::cli
