#include "restlab/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "restlab/error.hpp"
#include "restlab/metrics.hpp"
#include "restlab/util.hpp"

namespace restlab {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kLn2 = 0.69314718055994530942;

double gaussian(Rng& rng) {
  // Box-Muller on our own uniform source keeps streams implementation-independent.
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
}

Grid<float> chest_background(Rng& rng, const ShapeConfig& cfg) {
  const int h = cfg.height;
  const int w = cfg.width;
  Grid<float> img(h, w);
  // Two darker lung fields on a brighter mediastinum, rib-like banding, noise.
  const double lung_dy = uniform(rng, -0.05, 0.05) * h;
  const double lung_rx = uniform(rng, 0.18, 0.24) * w;
  const double lung_ry = uniform(rng, 0.30, 0.38) * h;
  const double left_cx = uniform(rng, 0.26, 0.32) * w;
  const double right_cx = w - uniform(rng, 0.26, 0.32) * w;
  const double base = uniform(rng, 0.45, 0.60);
  const double lung_level = uniform(rng, 0.18, 0.30);
  const double rib_amp = uniform(rng, 0.02, 0.05);
  const double rib_period = uniform(rng, 0.10, 0.14) * h;
  const double rib_phase = uniform(rng, 0.0, 2.0 * kPi);
  const double gradient = uniform(rng, -0.08, 0.08);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const double yr = (r - (h / 2.0 + lung_dy)) / lung_ry;
      const double lx = (c - left_cx) / lung_rx;
      const double rx = (c - right_cx) / lung_rx;
      const double d = std::min(lx * lx + yr * yr, rx * rx + yr * yr);
      const double lung = 1.0 / (1.0 + std::exp((d - 1.0) * 8.0));
      double v = base + gradient * (static_cast<double>(r) / h - 0.5);
      v = v * (1.0 - lung) + lung_level * lung;
      v += lung * rib_amp * std::sin(2.0 * kPi * r / rib_period + rib_phase + 0.15 * c / w * 2.0 * kPi);
      v += cfg.noise_sd * gaussian(rng);
      img(r, c) = static_cast<float>(v);
    }
  }
  return img;
}

int sample_blob_count(Rng& rng, const ShapeConfig& cfg) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < cfg.blob_count_probs.size(); ++i) {
    acc += cfg.blob_count_probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(cfg.blob_count_probs.size()) - 1;
}

BlobParams sample_blob(Rng& rng, const ShapeConfig& cfg) {
  BlobParams b;
  b.radius_row = uniform(rng, cfg.radius_min, cfg.radius_max);
  b.radius_col = uniform(rng, cfg.radius_min, cfg.radius_max);
  b.angle = uniform(rng, 0.0, kPi);
  const double reach = std::max(b.radius_row, b.radius_col) + 1.0;
  b.center_row = uniform(rng, reach, cfg.height - 1 - reach);
  b.center_col = uniform(rng, reach, cfg.width - 1 - reach);
  b.contrast = uniform(rng, cfg.contrast_min, cfg.contrast_max);
  return b;
}

bool touches(const BinaryGrid& a, const BinaryGrid& b) {
  // True when a pixel of b lies on or 4-adjacent to a pixel of a.
  for (int r = 0; r < a.height; ++r) {
    for (int c = 0; c < a.width; ++c) {
      if (!b(r, c)) continue;
      if (a(r, c) || (r > 0 && a(r - 1, c)) || (r + 1 < a.height && a(r + 1, c)) || (c > 0 && a(r, c - 1)) ||
          (c + 1 < a.width && a(r, c + 1))) {
        return true;
      }
    }
  }
  return false;
}

void validate_shape(const ShapeConfig& cfg) {
  if (cfg.height < 16 || cfg.width < 16) throw ConfigError("shape config: images must be at least 16x16");
  if (cfg.height % 4 != 0 || cfg.width % 4 != 0) throw ConfigError("shape config: dims must be multiples of 4");
  if (cfg.blob_count_probs.empty()) throw ConfigError("shape config: empty blob count distribution");
  const double total = std::accumulate(cfg.blob_count_probs.begin(), cfg.blob_count_probs.end(), 0.0);
  if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("shape config: blob count probabilities must sum to 1");
  if (!(cfg.radius_min > 0.0 && cfg.radius_min <= cfg.radius_max)) throw ConfigError("shape config: bad radii");
  if (2.0 * cfg.radius_max + 4.0 >= std::min(cfg.height, cfg.width)) {
    throw ConfigError("shape config: blob radius too large for image");
  }
}

}  // namespace

double blob_contribution(const BlobParams& b, int row, int col) {
  const double dy = row - b.center_row;
  const double dx = col - b.center_col;
  const double cs = std::cos(b.angle);
  const double sn = std::sin(b.angle);
  const double u = (cs * dy + sn * dx) / b.radius_row;
  const double v = (-sn * dy + cs * dx) / b.radius_col;
  return b.contrast * std::exp(-kLn2 * (u * u + v * v));
}

BinaryGrid render_blob_mask(const std::vector<BlobParams>& blobs, int height, int width) {
  BinaryGrid m(height, width);
  for (const auto& b : blobs) {
    for (int r = 0; r < height; ++r) {
      for (int c = 0; c < width; ++c) {
        if (blob_contribution(b, r, c) >= 0.5 * b.contrast) m(r, c) = 1;
      }
    }
  }
  return m;
}

GeneratedImage generate_image(int id, std::uint64_t master_seed, const ShapeConfig& cfg) {
  validate_shape(cfg);
  Rng rng(derive_seed(master_seed, static_cast<std::uint64_t>(id)));
  Grid<float> img = chest_background(rng, cfg);
  const int want = sample_blob_count(rng, cfg);
  const double max_fg = cfg.max_foreground_fraction * cfg.height * cfg.width;

  std::vector<BlobParams> blobs;
  BinaryGrid mask(cfg.height, cfg.width);
  int attempts = 0;
  while (static_cast<int>(blobs.size()) < want && attempts < 200) {
    ++attempts;
    const BlobParams cand = sample_blob(rng, cfg);
    const BinaryGrid cm = render_blob_mask({cand}, cfg.height, cfg.width);
    if (touches(mask, cm)) continue;
    const long fg = std::count(mask.px.begin(), mask.px.end(), 1) + std::count(cm.px.begin(), cm.px.end(), 1);
    if (static_cast<double>(fg) > max_fg) continue;
    blobs.push_back(cand);
    for (std::size_t i = 0; i < cm.size(); ++i) mask.px[i] |= cm.px[i];
  }
  for (int r = 0; r < cfg.height; ++r) {
    for (int c = 0; c < cfg.width; ++c) {
      double v = img(r, c);
      for (const auto& b : blobs) v += blob_contribution(b, r, c);
      img(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  GeneratedImage out;
  out.image = SampleGrid{id, std::move(img)};
  out.mask = make_mask(std::move(mask));
  out.blobs = std::move(blobs);
  return out;
}

const LabeledPair& DatasetSplit::labeled_by_id(int id) const {
  // Labeled pairs are stored in ascending id order.
  auto it = std::lower_bound(labeled.begin(), labeled.end(), id,
                             [](const LabeledPair& p, int v) { return p.image.id < v; });
  if (it == labeled.end() || it->image.id != id) throw DataError("dataset: unknown labeled id " + std::to_string(id));
  return *it;
}

DatasetSplit generate_dataset(int n_labeled, int n_unlabeled, std::uint64_t seed, const ShapeConfig& shape, int k) {
  if (k < 2) throw ConfigError("generate_dataset: fold count must be >= 2");
  if (n_labeled < k) {
    throw ConfigError("generate_dataset: n_labeled (" + std::to_string(n_labeled) + ") must be >= fold count (" +
                      std::to_string(k) + ")");
  }
  if (n_unlabeled < 0) throw ConfigError("generate_dataset: n_unlabeled must be >= 0");
  validate_shape(shape);
  DatasetSplit split;
  split.labeled.reserve(static_cast<std::size_t>(n_labeled));
  for (int id = 0; id < n_labeled; ++id) {
    GeneratedImage g = generate_image(id, seed, shape);
    split.labeled.push_back(LabeledPair{std::move(g.image), std::move(g.mask)});
  }
  for (int id = n_labeled; id < n_labeled + n_unlabeled; ++id) {
    split.unlabeled.push_back(generate_image(id, seed, shape).image);
  }
  split.folds = make_folds(split, k, repeat_seed(0));
  return split;
}

SampleGrid hist_equalize(const SampleGrid& image) {
  const auto& px = image.pixels.px;
  std::array<long, 256> hist{};
  auto level = [](float v) { return std::clamp(static_cast<int>(std::lround(v * 255.0f)), 0, 255); };
  for (float v : px) ++hist[level(v)];
  std::array<long, 256> cdf{};
  long acc = 0;
  for (int i = 0; i < 256; ++i) {
    acc += hist[i];
    cdf[i] = acc;
  }
  const long n = static_cast<long>(px.size());
  long cdf_min = 0;
  for (int i = 0; i < 256; ++i) {
    if (hist[i] > 0) {
      cdf_min = cdf[i];
      break;
    }
  }
  SampleGrid out = image;
  if (n == cdf_min) return out;
  for (std::size_t i = 0; i < px.size(); ++i) {
    out.pixels.px[i] = static_cast<float>(static_cast<double>(cdf[level(px[i])] - cdf_min) / (n - cdf_min));
  }
  return out;
}

DatasetSplit equalize_split(const DatasetSplit& split) {
  DatasetSplit out = split;
  for (auto& p : out.labeled) p.image = hist_equalize(p.image);
  for (auto& u : out.unlabeled) u = hist_equalize(u);
  return out;
}

bool is_supported_fraction(double fraction) {
  for (double f : {0.25, 0.5, 0.75, 1.0}) {
    if (std::fabs(fraction - f) < 1e-12) return true;
  }
  return false;
}

std::vector<int> subset_ids(std::vector<int> ids, double fraction, std::uint64_t seed) {
  if (!is_supported_fraction(fraction)) {
    throw ConfigError("subset_labeled: unsupported fraction " + std::to_string(fraction) +
                      " (expected 0.25, 0.5, 0.75 or 1.0)");
  }
  std::sort(ids.begin(), ids.end());
  Rng rng(derive_seed(seed, 0x5B5E7));
  for (std::size_t i = ids.size(); i > 1; --i) {
    std::swap(ids[i - 1], ids[rng() % i]);
  }
  const auto keep = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(ids.size())));
  ids.resize(keep);
  std::sort(ids.begin(), ids.end());
  return ids;
}

DatasetSplit subset_labeled(const DatasetSplit& split, double fraction, std::uint64_t seed) {
  std::vector<int> ids;
  for (const auto& p : split.labeled) ids.push_back(p.image.id);
  const std::vector<int> keep = subset_ids(ids, fraction, seed);
  DatasetSplit out;
  out.unlabeled = split.unlabeled;
  out.labeled_fraction = fraction;
  for (int id : keep) out.labeled.push_back(split.labeled_by_id(id));
  for (const auto& fold : split.folds) {
    std::vector<int> kept;
    std::copy_if(fold.begin(), fold.end(), std::back_inserter(kept),
                 [&](int id) { return std::binary_search(keep.begin(), keep.end(), id); });
    out.folds.push_back(std::move(kept));
  }
  return out;
}

std::vector<std::vector<int>> make_folds(const DatasetSplit& split, int k, std::uint64_t repeat_seed) {
  if (k < 2) throw ConfigError("make_folds: k must be >= 2");
  if (static_cast<int>(split.labeled.size()) < k) {
    throw ConfigError("make_folds: " + std::to_string(split.labeled.size()) + " labeled samples < k=" +
                      std::to_string(k));
  }
  std::vector<int> ids;
  for (const auto& p : split.labeled) ids.push_back(p.image.id);
  std::sort(ids.begin(), ids.end());
  Rng rng(derive_seed(repeat_seed, 0xF01D5));
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng() % i]);
  std::vector<std::vector<int>> folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < ids.size(); ++i) folds[i % k].push_back(ids[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

std::uint64_t dataset_digest(const DatasetSplit& split) {
  Fnv1a h;
  for (const auto& p : split.labeled) {
    h.update(&p.image.id, sizeof p.image.id);
    h.update_values(std::span<const float>(p.image.pixels.px));
    h.update_values(std::span<const std::uint8_t>(p.mask.pixels.px));
  }
  for (const auto& u : split.unlabeled) {
    h.update(&u.id, sizeof u.id);
    h.update_values(std::span<const float>(u.pixels.px));
  }
  return h.digest();
}

// ---- persistence -------------------------------------------------------

namespace {

void write_p5(const std::filesystem::path& path, int h, int w, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << "P5\n" << w << ' ' << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("write failed: " + path.string());
}

}  // namespace

void write_pgm(const std::filesystem::path& path, const Grid<float>& image) {
  std::vector<std::uint8_t> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.px[i], 0.0f, 1.0f) * 255.0f));
  }
  write_p5(path, image.height, image.width, bytes);
}

void write_pgm_mask(const std::filesystem::path& path, const BinaryGrid& mask) {
  std::vector<std::uint8_t> bytes(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) bytes[i] = mask.px[i] ? 255 : 0;
  write_p5(path, mask.height, mask.width, bytes);
}

Grid<float> read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) throw DataError("not an 8-bit P5 PGM: " + path.string());
  is.get();
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw DataError("truncated PGM: " + path.string());
  }
  Grid<float> g(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) g.px[i] = bytes[i] / 255.0f;
  return g;
}

void write_dataset(const std::filesystem::path& dir, const DatasetSplit& split) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  std::filesystem::create_directories(dir / "masks", ec);
  if (ec) throw DataError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  std::vector<int> fold_of;
  for (int f = 0; f < static_cast<int>(split.folds.size()); ++f) {
    for (int id : split.folds[f]) {
      if (id >= static_cast<int>(fold_of.size())) fold_of.resize(static_cast<std::size_t>(id) + 1, -1);
      fold_of[id] = f;
    }
  }
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw DataError("cannot write " + (dir / "manifest.txt").string());
  manifest << "# id role image mask fold\n";
  for (const auto& p : split.labeled) {
    const std::string img = "images/" + std::to_string(p.image.id) + ".pgm";
    const std::string msk = "masks/" + std::to_string(p.image.id) + ".pgm";
    write_pgm(dir / img, p.image.pixels);
    write_pgm_mask(dir / msk, p.mask.pixels);
    const int fold = p.image.id < static_cast<int>(fold_of.size()) ? fold_of[p.image.id] : -1;
    manifest << p.image.id << " labeled " << img << ' ' << msk << ' ' << (fold >= 0 ? std::to_string(fold) : "-")
             << '\n';
  }
  for (const auto& u : split.unlabeled) {
    const std::string img = "images/" + std::to_string(u.id) + ".pgm";
    write_pgm(dir / img, u.pixels);
    manifest << u.id << " unlabeled " << img << " - -\n";
  }
  if (!manifest) throw DataError("write failed: manifest");
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw DataError("cannot open manifest " + manifest_path.string());
  std::vector<ManifestRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestRow row;
    std::string fold, extra;
    if (!(ls >> row.id >> row.role >> row.image_path >> row.mask_path >> fold) || (ls >> extra)) {
      throw DataError(manifest_path.string() + ":" + std::to_string(lineno) + ": malformed manifest row");
    }
    if (row.role != "labeled" && row.role != "unlabeled") {
      throw DataError(manifest_path.string() + ":" + std::to_string(lineno) + ": unknown role '" + row.role + "'");
    }
    if (row.role == "labeled" && row.mask_path == "-") {
      throw DataError(manifest_path.string() + ":" + std::to_string(lineno) + ": labeled row without mask");
    }
    if (fold == "-") {
      row.fold = -1;
    } else {
      try {
        std::size_t used = 0;
        row.fold = std::stoi(fold, &used);
        if (used != fold.size() || row.fold < 0) throw std::invalid_argument(fold);
      } catch (const std::exception&) {
        throw DataError(manifest_path.string() + ":" + std::to_string(lineno) + ": invalid fold '" + fold + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

DatasetSplit read_dataset(const std::filesystem::path& dir) {
  const auto rows = read_manifest(dir / "manifest.txt");
  DatasetSplit split;
  int max_fold = -1;
  for (const auto& row : rows) max_fold = std::max(max_fold, row.fold);
  split.folds.resize(static_cast<std::size_t>(max_fold + 1));
  for (const auto& row : rows) {
    SampleGrid img{row.id, read_pgm(dir / row.image_path)};
    if (row.role == "labeled") {
      const Grid<float> m = read_pgm(dir / row.mask_path);
      BinaryGrid bin(m.height, m.width);
      for (std::size_t i = 0; i < m.size(); ++i) bin.px[i] = m.px[i] > 0.5f ? 1 : 0;
      split.labeled.push_back(LabeledPair{std::move(img), make_mask(std::move(bin))});
      if (row.fold >= 0) split.folds[row.fold].push_back(row.id);
    } else {
      split.unlabeled.push_back(std::move(img));
    }
  }
  std::sort(split.labeled.begin(), split.labeled.end(),
            [](const LabeledPair& a, const LabeledPair& b) { return a.image.id < b.image.id; });
  for (auto& f : split.folds) std::sort(f.begin(), f.end());
  return split;
}

}  // namespace restlab
