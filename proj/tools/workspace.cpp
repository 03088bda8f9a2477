#include "workspace.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "restlab/error.hpp"
#include "restlab/util.hpp"

namespace restlab::cli {

fs::path resolve_output(const ExperimentConfig& cfg, const std::optional<std::string>& cli_out) {
  if (cli_out && !cli_out->empty()) return *cli_out;
  if (const char* env = std::getenv("REST_LAB_OUT"); env && *env) return env;
  return cfg.output_dir;
}

DatasetSplit load_dataset(const Workspace& ws) {
  const fs::path manifest = ws.dataset_dir() / "manifest.txt";
  if (!fs::exists(manifest)) {
    throw DataError("no dataset at " + ws.dataset_dir().string() + " (run `restlab generate` first)");
  }
  return read_dataset(ws.dataset_dir());
}

RunStore::RunStore(const Workspace& ws, const ExperimentConfig& cfg, std::string method, double fraction,
                   std::uint64_t dataset_digest)
    : method_(std::move(method)), fraction_(fraction), run_id_(make_run_id(cfg, method_, fraction)),
      dir_(ws.run_dir(run_id_)) {
  fs::create_directories(dir_ / "checkpoints");
  const fs::path manifest_path = dir_ / "manifest.json";
  if (fs::exists(manifest_path)) {
    manifest_ = read_run_manifest(ws, run_id_);
    if (manifest_.value("dataset_digest", std::string{}) != hex64(dataset_digest)) {
      throw DataError("run " + run_id_ + " was produced from a different dataset (digest " +
                      manifest_.value("dataset_digest", std::string{"?"}) + ", now " + hex64(dataset_digest) + ")");
    }
  } else {
    ExperimentConfig snapshot = cfg;
    snapshot.output_dir = ws.root.string();
    manifest_ = {
        {"run_id", run_id_},
        {"method", method_},
        {"labeled_fraction", fraction_},
        {"master_seed", cfg.master_seed},
        {"folds", cfg.folds},
        {"repeats", cfg.repeats},
        {"config_digest", hex64(config_digest(cfg))},
        {"dataset_digest", hex64(dataset_digest)},
        {"config", serialize_config(snapshot)},
        {"fold_runs", nlohmann::json::object()},
    };
  }
  const fs::path csv = dir_ / "metrics.csv";
  if (fs::exists(csv)) {
    std::ifstream is(csv);
    for (const MetricsRecord& r : read_metrics_csv(is, csv.string())) {
      if (r.context.run_id != run_id_) {
        throw DataError(csv.string() + ": foreign run id " + r.context.run_id);
      }
      done_.insert({r.context.repeat, r.context.fold});
    }
  }
  write_manifest();
}

fs::path RunStore::checkpoint(const FoldKey& key, const std::string& ext) const {
  return dir_ / "checkpoints" / (fold_tag(key) + ext);
}

bool RunStore::done(const FoldKey& key) const { return done_.count({key.repeat, key.fold}) > 0; }

void RunStore::append(const FoldKey& key, const std::vector<MetricsRecord>& records) {
  std::ostringstream rows;
  for (const MetricsRecord& r : records) {
    r.validate();
    write_metrics_csv_row(rows, r);
  }
  const fs::path csv = dir_ / "metrics.csv";
  const bool fresh = !fs::exists(csv);
  std::ofstream os(csv, std::ios::app);
  if (!os) throw DataError("cannot append to " + csv.string());
  if (fresh) write_metrics_csv_header(os);
  os << rows.str();
  os.flush();
  if (!os) throw DataError("failed writing " + csv.string());
  done_.insert({key.repeat, key.fold});
}

void RunStore::note_fold(const FoldKey& key, const nlohmann::json& info) {
  manifest_["fold_runs"][fold_tag(key)].update(info);
  write_manifest();
}

void RunStore::write_manifest() const {
  // Write-then-rename keeps the previous manifest intact if the process dies mid-write.
  const fs::path tmp = dir_ / "manifest.json.tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw DataError("cannot write " + tmp.string());
    os << manifest_.dump(2) << "\n";
    if (!os) throw DataError("failed writing " + tmp.string());
  }
  fs::rename(tmp, dir_ / "manifest.json");
}

void append_csv_line(const fs::path& path, const std::string& header, const std::string& line) {
  const bool fresh = !fs::exists(path);
  std::ofstream os(path, std::ios::app);
  if (!os) throw DataError("cannot append to " + path.string());
  if (fresh) os << header << "\n";
  os << line << "\n";
  if (!os) throw DataError("failed writing " + path.string());
}

std::vector<MetricsRecord> read_all_metrics(const Workspace& ws) {
  std::vector<MetricsRecord> all;
  if (!fs::exists(ws.runs_dir())) return all;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(ws.runs_dir())) {
    const fs::path csv = entry.path() / "metrics.csv";
    if (entry.is_directory() && fs::exists(csv)) files.push_back(csv);
  }
  std::sort(files.begin(), files.end());
  for (const fs::path& csv : files) {
    std::ifstream is(csv);
    auto recs = read_metrics_csv(is, csv.string());
    all.insert(all.end(), recs.begin(), recs.end());
  }
  return all;
}

nlohmann::json read_run_manifest(const Workspace& ws, const std::string& run_id) {
  const fs::path path = ws.run_dir(run_id) / "manifest.json";
  std::ifstream is(path);
  if (!is) throw DataError("missing run manifest " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace restlab::cli
