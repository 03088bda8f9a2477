#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "restlab/grid.hpp"

namespace restlab {

/// Generator knobs for the synthetic chest-like images.
struct ShapeConfig {
  int height = 64;
  int width = 64;
  // P(0), P(1), P(2), P(3) blobs; P(>=1) = 0.7.
  std::vector<double> blob_count_probs = {0.30, 0.42, 0.20, 0.08};
  double radius_min = 3.0;  // half-maximum semi-axis, pixels
  double radius_max = 8.0;
  double contrast_min = 0.30;
  double contrast_max = 0.50;
  double noise_sd = 0.03;
  double max_foreground_fraction = 0.08;

  friend bool operator==(const ShapeConfig&, const ShapeConfig&) = default;
};

/// Elliptical Gaussian blob; the mask is where its contribution reaches half of `contrast`.
struct BlobParams {
  double center_row = 0;
  double center_col = 0;
  double radius_row = 0;
  double radius_col = 0;
  double angle = 0;
  double contrast = 0;
};

double blob_contribution(const BlobParams& b, int row, int col);
BinaryGrid render_blob_mask(const std::vector<BlobParams>& blobs, int height, int width);

struct GeneratedImage {
  SampleGrid image;
  MaskGrid mask;
  std::vector<BlobParams> blobs;
};

/// Deterministic in (id, master_seed, cfg).
GeneratedImage generate_image(int id, std::uint64_t master_seed, const ShapeConfig& cfg);

struct DatasetSplit {
  std::vector<LabeledPair> labeled;
  std::vector<SampleGrid> unlabeled;
  std::vector<std::vector<int>> folds;  // partition of labeled ids
  double labeled_fraction = 1.0;

  const LabeledPair& labeled_by_id(int id) const;
};

/// Labeled ids are 0..n_labeled-1, unlabeled ids follow. Folds use repeat seed 0.
DatasetSplit generate_dataset(int n_labeled, int n_unlabeled, std::uint64_t seed,
                              const ShapeConfig& shape = {}, int k = 5);

/// 256-bin CDF remapping to [0,1]. Constant images are returned unchanged.
SampleGrid hist_equalize(const SampleGrid& image);

/// Applies hist_equalize to every labeled and unlabeled image.
DatasetSplit equalize_split(const DatasetSplit& split);

bool is_supported_fraction(double fraction);

/// Keeps round(fraction * n) labeled pairs from a seeded shuffle; nested in fraction.
DatasetSplit subset_labeled(const DatasetSplit& split, double fraction, std::uint64_t seed);

/// Same selection rule applied to a bare id list.
std::vector<int> subset_ids(std::vector<int> ids, double fraction, std::uint64_t seed);

/// Seeded partition of labeled ids into k groups whose sizes differ by at most one.
std::vector<std::vector<int>> make_folds(const DatasetSplit& split, int k, std::uint64_t repeat_seed);

/// Hash of every pixel of every image and mask, plus ids.
std::uint64_t dataset_digest(const DatasetSplit& split);

// ---- persistence -------------------------------------------------------

void write_pgm(const std::filesystem::path& path, const Grid<float>& image);
void write_pgm_mask(const std::filesystem::path& path, const BinaryGrid& mask);
Grid<float> read_pgm(const std::filesystem::path& path);

struct ManifestRow {
  int id = 0;
  std::string role;  // "labeled" | "unlabeled"
  std::string image_path;
  std::string mask_path;  // "-" when unlabeled
  int fold = -1;          // -1 written as "-"
};

/// Writes PGM files under `dir` plus `dir/manifest.txt`.
void write_dataset(const std::filesystem::path& dir, const DatasetSplit& split);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& manifest_path);
/// Loads a dataset written by write_dataset. Pixel values round-trip through 8-bit.
DatasetSplit read_dataset(const std::filesystem::path& dir);

}  // namespace restlab
