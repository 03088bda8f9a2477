#include "restlab/expert_reward.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "restlab/metrics.hpp"
#include "restlab/segnet.hpp"
#include "restlab/synthdata.hpp"
#include "restlab/util.hpp"

namespace restlab {

namespace {

using nc::Parameter;
using nc::Tape;
using nc::Tensor;

constexpr double kMinDifference = 0.05;

void init_conv(std::vector<Parameter<float>>& params, const std::string& name, int in_c, int out_c, int k,
               Rng& rng) {
  params.push_back(nc::make_parameter<float>(name + ".w", {out_c, in_c, k, k}));
  const double sd = std::sqrt(2.0 / (in_c * k * k));
  for (float& v : params.back().value.data()) {
    const double u1 = 1.0 - uniform01(rng);
    const double u2 = uniform01(rng);
    v = static_cast<float>(sd * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2));
  }
  params.push_back(nc::make_parameter<float>(name + ".b", {out_c}));
}

BinaryGrid random_blob_mask(Rng& rng, int h, int w) {
  const int count = uniform_int(rng, 1, 2);
  std::vector<BlobParams> blobs;
  for (int i = 0; i < count; ++i) {
    BlobParams b;
    b.radius_row = uniform(rng, 3.0, 8.0);
    b.radius_col = uniform(rng, 3.0, 8.0);
    b.angle = uniform(rng, 0.0, 3.14159265358979);
    const double reach = std::max(b.radius_row, b.radius_col) + 1.0;
    b.center_row = uniform(rng, reach, h - 1 - reach);
    b.center_col = uniform(rng, reach, w - 1 - reach);
    b.contrast = 1.0;
    blobs.push_back(b);
  }
  return render_blob_mask(blobs, h, w);
}

bool empty_mask(const BinaryGrid& m) {
  return std::none_of(m.px.begin(), m.px.end(), [](std::uint8_t v) { return v != 0; });
}

Tensor<float>& stack_pairs(Tape<float>& tape, std::span<const ProbMap* const> states,
                           std::span<const BinaryGrid* const> labels, int h, int w) {
  Tensor<float>& x = tape.make({static_cast<int>(states.size()), 2, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t n = 0; n < states.size(); ++n) {
    if (states[n]->height != h || states[n]->width != w || !states[n]->same_shape(*labels[n])) {
      throw DataError("expert reward: state/label shape mismatch (expected " + std::to_string(h) + "x" +
                      std::to_string(w) + ")");
    }
    float* dst = x.data().data() + n * 2 * plane;
    std::copy(states[n]->px.begin(), states[n]->px.end(), dst);
    for (std::size_t i = 0; i < plane; ++i) dst[plane + i] = labels[n]->px[i] ? 1.0f : 0.0f;
  }
  return x;
}

}  // namespace

std::string recipe_name(NegativeRecipe r) {
  switch (r) {
    case NegativeRecipe::kNone: return "expert";
    case NegativeRecipe::kTranslate: return "translate";
    case NegativeRecipe::kMorphology: return "morphology";
    case NegativeRecipe::kRandomBlob: return "random-blob";
    case NegativeRecipe::kEmpty: return "empty";
  }
  return "unknown";
}

std::vector<Demonstration> build_demonstrations(const SegModel& model, std::span<const LabeledPair> labeled) {
  std::vector<SampleGrid> images;
  for (const auto& p : labeled) images.push_back(p.image);
  const auto states = model.predict_all(images);
  std::vector<Demonstration> out;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    out.push_back(Demonstration{labeled[i].image.id, states[i], labeled[i].mask, Polarity::kExpert,
                                NegativeRecipe::kNone});
  }
  return out;
}

double label_difference(const BinaryGrid& a, const BinaryGrid& b) {
  long diff = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a.px[i] != 0) != (b.px[i] != 0);
    uni += (a.px[i] != 0) || (b.px[i] != 0);
  }
  return uni == 0 ? 0.0 : static_cast<double>(diff) / static_cast<double>(uni);
}

BinaryGrid translate_mask(const BinaryGrid& m, int dy, int dx) {
  BinaryGrid out(m.height, m.width);
  for (int r = 0; r < m.height; ++r) {
    for (int c = 0; c < m.width; ++c) {
      const int sr = r - dy, sc = c - dx;
      if (sr >= 0 && sr < m.height && sc >= 0 && sc < m.width) out(r, c) = m(sr, sc);
    }
  }
  return out;
}

BinaryGrid dilate(const BinaryGrid& m, int radius) {
  BinaryGrid out(m.height, m.width);
  for (int r = 0; r < m.height; ++r) {
    for (int c = 0; c < m.width; ++c) {
      if (!m(r, c)) continue;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          if (dy * dy + dx * dx > radius * radius) continue;
          const int rr = r + dy, cc = c + dx;
          if (rr >= 0 && rr < m.height && cc >= 0 && cc < m.width) out(rr, cc) = 1;
        }
      }
    }
  }
  return out;
}

BinaryGrid erode(const BinaryGrid& m, int radius) {
  BinaryGrid inv(m.height, m.width);
  for (std::size_t i = 0; i < m.size(); ++i) inv.px[i] = m.px[i] ? 0 : 1;
  BinaryGrid grown = dilate(inv, radius);
  // Outside the frame counts as background.
  BinaryGrid out(m.height, m.width);
  for (int r = 0; r < m.height; ++r) {
    for (int c = 0; c < m.width; ++c) {
      const bool near_edge = r < radius || c < radius || r >= m.height - radius || c >= m.width - radius;
      out(r, c) = (m(r, c) && !grown(r, c) && !near_edge) ? 1 : 0;
    }
  }
  return out;
}

std::vector<Demonstration> synthesize_negatives(std::span<const Demonstration> positives, std::uint64_t seed,
                                                const NegativeRecipeConfig& cfg) {
  if (positives.empty()) throw ConfigError("synthesize_negatives: no positives");
  if (!cfg.translate && !cfg.morphology && !cfg.random_blob && !cfg.empty) {
    throw ConfigError("synthesize_negatives: no recipes enabled");
  }
  if (cfg.per_positive < 2) throw ConfigError("synthesize_negatives: per_positive must be >= 2");
  if (cfg.translate && (cfg.min_shift < 8 || cfg.max_shift < cfg.min_shift)) {
    throw ConfigError("synthesize_negatives: translation shift must be >= 8 px (got min_shift=" +
                      std::to_string(cfg.min_shift) + ")");
  }
  if (cfg.morphology && (cfg.min_morph < 1 || cfg.max_morph < cfg.min_morph)) {
    throw ConfigError("synthesize_negatives: invalid morphology radius range");
  }
  Rng rng(derive_seed(seed, 0x9E6));
  std::vector<Demonstration> out;
  for (const auto& pos : positives) {
    const BinaryGrid& src = pos.label.pixels;
    const bool src_empty = empty_mask(src);
    std::vector<NegativeRecipe> recipes;
    if (src_empty) {
      recipes = {NegativeRecipe::kRandomBlob};
    } else {
      if (cfg.translate) recipes.push_back(NegativeRecipe::kTranslate);
      if (cfg.morphology) recipes.push_back(NegativeRecipe::kMorphology);
      if (cfg.random_blob) recipes.push_back(NegativeRecipe::kRandomBlob);
      if (cfg.empty) recipes.push_back(NegativeRecipe::kEmpty);
    }
    for (std::size_t i = recipes.size(); i > 1; --i) std::swap(recipes[i - 1], recipes[rng() % i]);
    for (int j = 0; j < cfg.per_positive; ++j) {
      const NegativeRecipe recipe = recipes[static_cast<std::size_t>(j) % recipes.size()];
      BinaryGrid neg;
      for (int attempt = 0; attempt < 50; ++attempt) {
        switch (recipe) {
          case NegativeRecipe::kTranslate: {
            int dy = 0, dx = 0;
            double dist = 0.0;
            do {
              dy = uniform_int(rng, -cfg.max_shift, cfg.max_shift);
              dx = uniform_int(rng, -cfg.max_shift, cfg.max_shift);
              dist = std::sqrt(static_cast<double>(dy * dy + dx * dx));
            } while (dist < cfg.min_shift || dist > cfg.max_shift);
            neg = translate_mask(src, dy, dx);
            break;
          }
          case NegativeRecipe::kMorphology: {
            const int radius = uniform_int(rng, cfg.min_morph, cfg.max_morph);
            neg = (rng() & 1) ? dilate(src, radius) : erode(src, radius);
            break;
          }
          case NegativeRecipe::kRandomBlob:
            neg = random_blob_mask(rng, src.height, src.width);
            break;
          case NegativeRecipe::kEmpty:
          case NegativeRecipe::kNone:
            neg = BinaryGrid(src.height, src.width);
            break;
        }
        if (label_difference(src, neg) >= kMinDifference) break;
      }
      if (label_difference(src, neg) < kMinDifference) {
        throw NumericalError("synthesize_negatives: could not corrupt label of source " +
                             std::to_string(pos.source_id));
      }
      out.push_back(Demonstration{pos.source_id, pos.state, make_mask(std::move(neg)),
                                  Polarity::kSyntheticNegative, recipe});
    }
  }
  return out;
}

ExpertRewardModel::ExpertRewardModel(int height, int width, std::uint64_t seed) : height_(height), width_(width) {
  if (height % 4 != 0 || width % 4 != 0) throw ConfigError("ExpertRewardModel: dims must be multiples of 4");
  Rng rng(derive_seed(seed, 0x1A1));
  init_conv(params_, "conv0", 2, 8, 3, rng);
  init_conv(params_, "conv1", 8, 16, 3, rng);
  init_conv(params_, "conv2", 16, 24, 3, rng);
  init_conv(params_, "readout", 24, 1, 1, rng);
}

std::size_t ExpertRewardModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::uint64_t ExpertRewardModel::digest() const {
  Fnv1a h;
  const std::uint64_t pd = nc::parameter_digest(params());
  h.update(&pd, sizeof pd);
  h.update(&threshold_, sizeof threshold_);
  return h.digest();
}

Tensor<float>& ExpertRewardModel::forward(Tape<float>& tape, Tensor<float>& x) {
  auto& p = params_;
  Tensor<float>* h = &nc::relu(tape, nc::conv2d(tape, x, p[0].value, p[1].value));
  h = &nc::max_pool2(tape, *h);
  h = &nc::relu(tape, nc::conv2d(tape, *h, p[2].value, p[3].value));
  h = &nc::max_pool2(tape, *h);
  h = &nc::relu(tape, nc::conv2d(tape, *h, p[4].value, p[5].value));
  h = &nc::mean_spatial(tape, *h);
  return nc::conv2d(tape, *h, p[6].value, p[7].value);
}

std::vector<float> ExpertRewardModel::margins(std::span<const ProbMap* const> states,
                                              std::span<const BinaryGrid* const> labels) const {
  if (states.size() != labels.size()) throw DataError("expert reward: state/label count mismatch");
  std::vector<float> out;
  auto& self = const_cast<ExpertRewardModel&>(*this);  // inference only; no gradients are written
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < states.size(); start += kChunk) {
    const std::size_t end = std::min(states.size(), start + kChunk);
    Tape<float> tape(false);
    Tensor<float>& x = stack_pairs(tape, states.subspan(start, end - start), labels.subspan(start, end - start),
                                   height_, width_);
    Tensor<float>& m = self.forward(tape, x);
    for (std::size_t i = 0; i < m.size(); ++i) out.push_back(m[i]);
  }
  return out;
}

ExpertScore ExpertRewardModel::score(const ProbMap& state, const MaskGrid& label) const {
  const ProbMap* s = &state;
  const BinaryGrid* l = &label.pixels;
  const float m = margins(std::span<const ProbMap* const>(&s, 1), std::span<const BinaryGrid* const>(&l, 1))[0];
  if (!std::isfinite(m)) throw NumericalError("expert reward: non-finite margin");
  return ExpertScore{m >= threshold_ ? 1 : 0, m};
}

void ExpertRewardModel::save(std::ostream& os) const {
  std::vector<Parameter<float>> all(params_.begin(), params_.end());
  all.push_back(nc::make_parameter<float>("threshold", {1}));
  all.back().value[0] = threshold_;
  nc::save_checkpoint<float>(os, kExpertArchId, std::span<const Parameter<float>>(all));
}

void ExpertRewardModel::load(std::istream& is) {
  std::vector<Parameter<float>> all(params_.begin(), params_.end());
  all.push_back(nc::make_parameter<float>("threshold", {1}));
  nc::load_checkpoint<float>(is, kExpertArchId, std::span<Parameter<float>>(all));
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = all[i].value;
  threshold_ = all.back().value[0];
}

void ExpertRewardModel::save_file(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  save(os);
}

void ExpertRewardModel::load_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  load(is);
}

namespace {

struct Calibration {
  float threshold = 0.0f;
  double accuracy = 0.0;
  double false_accept = 0.0;
  double false_reject = 0.0;
};

// Threshold minimising |FAR - FRR| (ties: higher accuracy, then the smaller threshold).
Calibration calibrate(const std::vector<float>& margins, const std::vector<int>& labels) {
  std::vector<float> cands(margins);
  std::sort(cands.begin(), cands.end());
  cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
  std::vector<float> thresholds;
  thresholds.push_back(cands.front() - 1.0f);
  for (std::size_t i = 0; i + 1 < cands.size(); ++i) thresholds.push_back(0.5f * (cands[i] + cands[i + 1]));
  thresholds.push_back(cands.back() + 1.0f);
  long n_pos = std::count(labels.begin(), labels.end(), 1);
  long n_neg = static_cast<long>(labels.size()) - n_pos;
  Calibration best;
  double best_gap = 2.0;
  for (float t : thresholds) {
    long fa = 0, fr = 0;
    for (std::size_t i = 0; i < margins.size(); ++i) {
      const bool accept = margins[i] >= t;
      if (labels[i] == 1 && !accept) ++fr;
      if (labels[i] == 0 && accept) ++fa;
    }
    const double far = n_neg ? static_cast<double>(fa) / n_neg : 0.0;
    const double frr = n_pos ? static_cast<double>(fr) / n_pos : 0.0;
    const double acc = 1.0 - static_cast<double>(fa + fr) / static_cast<double>(margins.size());
    const double gap = std::fabs(far - frr);
    if (gap < best_gap - 1e-12 || (std::fabs(gap - best_gap) <= 1e-12 && acc > best.accuracy)) {
      best_gap = gap;
      best = Calibration{t, acc, far, frr};
    }
  }
  return best;
}

}  // namespace

ExpertTrainResult train_expert_reward(std::span<const Demonstration> positives,
                                      std::span<const Demonstration> negatives, const ExpertHyper& hyper) {
  if (positives.empty() || negatives.empty()) throw ConfigError("train_expert_reward: both classes must be non-empty");
  if (!(hyper.holdout_fraction > 0.0 && hyper.holdout_fraction < 1.0)) {
    throw ConfigError("train_expert_reward: holdout_fraction must lie in (0,1)");
  }
  const int h = positives.front().state.height;
  const int w = positives.front().state.width;

  struct Item {
    const Demonstration* demo;
    int label;
  };
  std::vector<Item> items;
  for (const auto& d : positives) items.push_back({&d, 1});
  for (const auto& d : negatives) items.push_back({&d, 0});

  // Hold out whole source images so a positive and its corruptions stay together.
  std::set<int> sources;
  for (const auto& it : items) sources.insert(it.demo->source_id);
  std::vector<int> src(sources.begin(), sources.end());
  Rng rng(derive_seed(hyper.seed, 0x4E7));
  for (std::size_t i = src.size(); i > 1; --i) std::swap(src[i - 1], src[rng() % i]);
  const auto n_hold = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(hyper.holdout_fraction * static_cast<double>(src.size()))));
  const std::set<int> held(src.begin(), src.begin() + static_cast<long>(std::min(n_hold, src.size())));
  std::vector<Item> train, hold;
  for (const auto& it : items) (held.count(it.demo->source_id) ? hold : train).push_back(it);
  if (train.empty()) train = hold;

  ExpertTrainResult res{ExpertRewardModel(h, w, hyper.seed), 0.0, 0.0, 0.0, 0, static_cast<int>(hold.size())};
  nc::Optimizer<float> opt({nc::OptimizerKind::kAdam, hyper.learning_rate, 0.9, 0.999, 1e-8, hyper.l2});

  auto held_margins = [&]() {
    std::vector<const ProbMap*> s;
    std::vector<const BinaryGrid*> l;
    for (const auto& it : hold) {
      s.push_back(&it.demo->state);
      l.push_back(&it.demo->label.pixels);
    }
    return res.model.margins(s, l);
  };
  std::vector<int> hold_labels;
  for (const auto& it : hold) hold_labels.push_back(it.label);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hyper.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hyper.batch_size));
      std::vector<const ProbMap*> s;
      std::vector<const BinaryGrid*> l;
      Tape<float> tape;
      Tensor<float>& y = tape.make({static_cast<int>(end - start)});
      for (std::size_t j = start; j < end; ++j) {
        s.push_back(&train[order[j]].demo->state);
        l.push_back(&train[order[j]].demo->label.pixels);
        y[j - start] = train[order[j]].label ? 1.0f : -1.0f;
      }
      Tensor<float>& x = stack_pairs(tape, s, l, h, w);
      Tensor<float>& loss = nc::hinge(tape, res.model.forward(tape, x), y);
      if (!std::isfinite(loss[0])) throw NumericalError("train_expert_reward: non-finite hinge loss");
      tape.backward(loss);
      opt.step(res.model.params());
    }
    res.epochs = epoch;
    const auto m = held_margins();
    long correct = 0;
    for (std::size_t i = 0; i < m.size(); ++i) correct += ((m[i] >= 0.0f) == (hold_labels[i] == 1));
    const double acc = static_cast<double>(correct) / static_cast<double>(m.size());
    if (epoch >= hyper.min_epochs && acc >= hyper.target_accuracy) break;
  }

  const Calibration cal = calibrate(held_margins(), hold_labels);
  res.model.set_threshold(cal.threshold);
  res.heldout_accuracy = cal.accuracy;
  res.false_accept = cal.false_accept;
  res.false_reject = cal.false_reject;
  if (res.heldout_accuracy < hyper.abort_accuracy) {
    throw UnusableRewardModel("expert reward: held-out accuracy " + std::to_string(res.heldout_accuracy) +
                                  " below abort threshold " + std::to_string(hyper.abort_accuracy),
                              res.heldout_accuracy);
  }
  return res;
}

double batch_reward(const ExpertRewardModel& model, std::span<const StateLabel> pairs) {
  if (pairs.empty()) throw ConfigError("batch_reward: empty pseudolabel set");
  std::vector<const ProbMap*> s;
  std::vector<const BinaryGrid*> l;
  for (const auto& p : pairs) {
    s.push_back(p.state);
    l.push_back(&p.label->pixels);
  }
  const auto m = model.margins(s, l);
  long ones = 0;
  for (float v : m) {
    if (!std::isfinite(v)) throw NumericalError("batch_reward: non-finite margin");
    ones += v >= model.threshold() ? 1 : 0;
  }
  return static_cast<double>(ones) / static_cast<double>(m.size());
}

}  // namespace restlab
