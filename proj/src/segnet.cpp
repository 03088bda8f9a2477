#include "restlab/segnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "restlab/synthdata.hpp"
#include "restlab/util.hpp"

namespace restlab {

namespace {

using nc::Parameter;
using nc::Tape;
using nc::Tensor;

void he_init(Parameter<float>& p, Rng& rng, double gain = 1.0) {
  const auto& s = p.value.shape();
  const double fan_in = static_cast<double>(s[1]) * s[2] * s[3];
  const double sd = gain * std::sqrt(2.0 / fan_in);
  for (float& v : p.value.data()) {
    const double u1 = 1.0 - uniform01(rng);
    const double u2 = uniform01(rng);
    v = static_cast<float>(sd * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2));
  }
}

void add_conv(std::vector<Parameter<float>>& params, const std::string& name, int in_c, int out_c, int k, Rng& rng,
              double gain = 1.0) {
  params.push_back(nc::make_parameter<float>(name + ".w", {out_c, in_c, k, k}));
  he_init(params.back(), rng, gain);
  params.push_back(nc::make_parameter<float>(name + ".b", {out_c}));
}

Tensor<float>& conv_relu(Tape<float>& tape, Tensor<float>& x, Parameter<float>& w, Parameter<float>& b) {
  return nc::relu(tape, nc::conv2d(tape, x, w.value, b.value));
}

}  // namespace

SegModel::SegModel(const UNetArch& arch, std::uint64_t seed) : arch_(arch) {
  if (arch.levels < 1 || arch.base_width < 1) throw ConfigError("UNetArch: levels and base_width must be >= 1");
  const int factor = 1 << (arch.levels - 1);
  if (arch.height % factor != 0 || arch.width % factor != 0) {
    throw ConfigError("UNetArch: image dims must be divisible by 2^(levels-1)");
  }
  Rng rng(derive_seed(seed, 0x5E6));
  int in_c = 1;
  for (int l = 0; l < arch.levels; ++l) {
    const int w = arch.base_width << l;
    add_conv(params_, "enc" + std::to_string(l) + ".0", in_c, w, 3, rng);
    add_conv(params_, "enc" + std::to_string(l) + ".1", w, w, 3, rng);
    in_c = w;
  }
  for (int l = arch.levels - 2; l >= 0; --l) {
    const int w = arch.base_width << l;
    add_conv(params_, "dec" + std::to_string(l) + ".0", in_c + w, w, 3, rng);
    add_conv(params_, "dec" + std::to_string(l) + ".1", w, w, 3, rng);
    in_c = w;
  }
  // Near-zero head weights; the bias sets the initial output probability.
  add_conv(params_, "head", in_c, 1, 1, rng, 0.01);
  params_.back().value[0] = static_cast<float>(arch.head_bias);
}

std::size_t SegModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Tensor<float>& SegModel::forward(Tape<float>& tape, Tensor<float>& x) { return nc::sigmoid(tape, logits(tape, x)); }

Tensor<float>& SegModel::logits(Tape<float>& tape, Tensor<float>& x) {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != arch_.height || x.dim(3) != arch_.width) {
    throw DataError("SegModel::forward: expected [N,1," + std::to_string(arch_.height) + "," +
                    std::to_string(arch_.width) + "], got " + nc::shape_str(x.shape()));
  }
  std::size_t pi = 0;
  auto next = [&]() -> Parameter<float>& { return param(pi++); };
  std::vector<Tensor<float>*> skips;
  Tensor<float>* h = &x;
  for (int l = 0; l < arch_.levels; ++l) {
    if (l > 0) h = &nc::max_pool2(tape, *h);
    auto& w0 = next();
    auto& b0 = next();
    h = &conv_relu(tape, *h, w0, b0);
    auto& w1 = next();
    auto& b1 = next();
    h = &conv_relu(tape, *h, w1, b1);
    skips.push_back(h);
  }
  for (int l = arch_.levels - 2; l >= 0; --l) {
    Tensor<float>& up = nc::upsample2(tape, *h);
    h = &nc::concat_channels(tape, up, *skips[l]);
    auto& w0 = next();
    auto& b0 = next();
    h = &conv_relu(tape, *h, w0, b0);
    auto& w1 = next();
    auto& b1 = next();
    h = &conv_relu(tape, *h, w1, b1);
  }
  auto& hw = next();
  auto& hb = next();
  return nc::conv2d(tape, *h, hw.value, hb.value);
}

Tensor<float>& images_to_tensor(Tape<float>& tape, std::span<const SampleGrid* const> images) {
  if (images.empty()) throw ConfigError("images_to_tensor: empty batch");
  const int h = images[0]->pixels.height;
  const int w = images[0]->pixels.width;
  Tensor<float>& t = tape.make({static_cast<int>(images.size()), 1, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n]->pixels.height != h || images[n]->pixels.width != w) {
      throw DataError("images_to_tensor: inconsistent image shapes in batch");
    }
    std::copy(images[n]->pixels.px.begin(), images[n]->pixels.px.end(), t.data().begin() + n * plane);
  }
  return t;
}

std::vector<ProbMap> SegModel::predict_all(std::span<const SampleGrid> images) const {
  std::vector<ProbMap> out;
  out.reserve(images.size());
  constexpr std::size_t kChunk = 8;
  // Inference never writes gradients; the non-const access is confined to the tape.
  auto& self = const_cast<SegModel&>(*this);
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t end = std::min(images.size(), start + kChunk);
    std::vector<const SampleGrid*> batch;
    for (std::size_t i = start; i < end; ++i) {
      if (images[i].pixels.height != arch_.height || images[i].pixels.width != arch_.width) {
        throw DataError("predict: image " + std::to_string(images[i].id) + " is " +
                        std::to_string(images[i].pixels.height) + "x" + std::to_string(images[i].pixels.width) +
                        ", model expects " + std::to_string(arch_.height) + "x" + std::to_string(arch_.width));
      }
      batch.push_back(&images[i]);
    }
    Tape<float> tape(false);
    Tensor<float>& probs = self.forward(tape, images_to_tensor(tape, batch));
    const std::size_t plane = static_cast<std::size_t>(arch_.height) * arch_.width;
    for (std::size_t n = 0; n < batch.size(); ++n) {
      ProbMap m(arch_.height, arch_.width);
      for (std::size_t i = 0; i < plane; ++i) m.px[i] = std::clamp(probs[n * plane + i], 1e-6f, 1.0f - 1e-6f);
      out.push_back(std::move(m));
    }
  }
  return out;
}

ProbMap SegModel::predict(const SampleGrid& image) const {
  return std::move(predict_all(std::span<const SampleGrid>(&image, 1)).front());
}

void SegModel::save(std::ostream& os) const { nc::save_checkpoint<float>(os, kSegArchId, params()); }

void SegModel::load(std::istream& is) { nc::load_checkpoint<float>(is, kSegArchId, params()); }

void SegModel::save_file(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  save(os);
}

void SegModel::load_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  load(is);
}

EvalSummary evaluate_model(const SegModel& model, std::span<const LabeledPair> data, double iou_thresh) {
  std::vector<SampleGrid> images;
  std::vector<MaskGrid> gts;
  for (const auto& p : data) {
    images.push_back(p.image);
    gts.push_back(p.mask);
  }
  const auto maps = model.predict_all(images);
  std::vector<BinaryGrid> preds;
  for (const auto& m : maps) preds.push_back(binarize(m));
  return evaluate_set(preds, gts, iou_thresh);
}

namespace {

// One optimizer step on a batch; returns the loss value.
float train_step(SegModel& model, nc::Optimizer<float>& opt, std::span<const SampleGrid* const> images,
                 std::span<const BinaryGrid* const> masks) {
  Tape<float> tape;
  Tensor<float>& x = images_to_tensor(tape, images);
  Tensor<float>& target = tape.make(x.shape());
  const std::size_t plane = masks[0]->size();
  for (std::size_t n = 0; n < masks.size(); ++n) {
    for (std::size_t i = 0; i < plane; ++i) target[n * plane + i] = masks[n]->px[i] ? 1.0f : 0.0f;
  }
  Tensor<float>& loss = nc::bce_with_logits(tape, model.logits(tape, x), target);
  const float value = loss[0];
  if (!std::isfinite(value)) return value;
  tape.backward(loss);
  opt.step(model.params());
  return value;
}

}  // namespace

SupervisedResult train_supervised(std::span<const LabeledPair> train, std::span<const LabeledPair> val,
                                  const UNetArch& arch, const SegHyper& hyper) {
  if (train.empty()) throw ConfigError("train_supervised: empty labeled training set");
  if (hyper.batch_size < 1 || hyper.max_epochs < 0 || hyper.patience < 1) {
    throw ConfigError("train_supervised: invalid hyperparameters");
  }
  SupervisedResult res{SegModel(arch, hyper.seed), {}, 0.0};
  nc::Optimizer<float> opt({nc::OptimizerKind::kAdam, hyper.learning_rate});
  Rng rng(derive_seed(hyper.seed, 0x7A1));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  double best = -1.0;
  int since_best = 0;
  double last_finite = 0.0;
  for (int epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hyper.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hyper.batch_size));
      std::vector<const SampleGrid*> imgs;
      std::vector<const BinaryGrid*> masks;
      for (std::size_t j = start; j < end; ++j) {
        imgs.push_back(&train[order[j]].image);
        masks.push_back(&train[order[j]].mask.pixels);
      }
      const float loss = train_step(res.model, opt, imgs, masks);
      if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "train_supervised: non-finite loss at epoch " << epoch << " (last finite loss " << last_finite << ")";
        throw NumericalError(os.str());
      }
      last_finite = loss;
      loss_sum += loss;
      ++batches;
    }
    EpochStat stat{epoch, loss_sum / batches, 0.0};
    if (!val.empty()) stat.val_f1 = evaluate_model(res.model, val).f1;
    res.curve.push_back(stat);
    res.final_val_f1 = stat.val_f1;
    // Patience runs only once the model predicts some foreground on the validation fold.
    if (val.empty() || (best <= 0.0 && stat.val_f1 <= 0.0)) continue;
    if (stat.val_f1 > best) {
      best = stat.val_f1;
      since_best = 0;
    } else if (++since_best >= hyper.patience) {
      break;
    }
  }
  return res;
}

SupervisedResult train_supervised(const DatasetSplit& split, int fold, const UNetArch& arch, const SegHyper& hyper) {
  if (fold < 0 || fold >= static_cast<int>(split.folds.size())) {
    throw ConfigError("train_supervised: fold index out of range");
  }
  std::vector<LabeledPair> train, val;
  const std::set<int> held(split.folds[fold].begin(), split.folds[fold].end());
  for (const auto& p : split.labeled) (held.count(p.image.id) ? val : train).push_back(p);
  return train_supervised(train, val, arch, hyper);
}

FineTuneResult fine_tune(SegModel& model, std::span<const PseudoPair> pseudo, std::span<const LabeledPair> val,
                         std::span<const LabeledPair> labeled, const FineTuneHyper& hyper) {
  if (pseudo.empty()) throw ConfigError("fine_tune: empty pseudolabel set");
  if (val.empty()) throw ConfigError("fine_tune: empty validation set");
  if (hyper.steps < 0 || hyper.pseudo_per_step < 1 || !(hyper.lr_scale > 0.0)) {
    throw ConfigError("fine_tune: invalid hyperparameters");
  }
  std::set<int> val_ids;
  for (const auto& v : val) val_ids.insert(v.image.id);
  for (const auto& p : pseudo) {
    if (val_ids.count(p.image->id)) {
      throw ConfigError("fine_tune: pseudolabel source " + std::to_string(p.image->id) + " is in the validation set");
    }
  }
  FineTuneResult res;
  res.r_val_before = evaluate_model(model, val).f1;
  res.r_val = res.r_val_before;
  if (hyper.steps == 0) return res;

  std::vector<nc::Parameter<float>> backup(model.params().begin(), model.params().end());
  nc::Optimizer<float> opt({nc::OptimizerKind::kAdam, hyper.base_learning_rate * hyper.lr_scale});
  Rng rng(derive_seed(hyper.seed, 0xF17E));
  std::vector<std::size_t> porder(pseudo.size());
  std::iota(porder.begin(), porder.end(), 0);
  std::vector<std::size_t> lorder(labeled.size());
  std::iota(lorder.begin(), lorder.end(), 0);
  std::size_t pcur = porder.size();
  std::size_t lcur = lorder.size();
  const bool mix = hyper.mix_labeled && !labeled.empty();

  for (int step = 0; step < hyper.steps; ++step) {
    std::vector<const SampleGrid*> imgs;
    std::vector<const BinaryGrid*> masks;
    const int take = std::min<int>(hyper.pseudo_per_step, static_cast<int>(pseudo.size()));
    for (int j = 0; j < take; ++j) {
      if (pcur == porder.size()) {
        for (std::size_t i = porder.size(); i > 1; --i) std::swap(porder[i - 1], porder[rng() % i]);
        pcur = 0;
      }
      const auto& pp = pseudo[porder[pcur++]];
      imgs.push_back(pp.image);
      masks.push_back(&pp.mask.pixels);
      if (mix) {
        if (lcur == lorder.size()) {
          for (std::size_t i = lorder.size(); i > 1; --i) std::swap(lorder[i - 1], lorder[rng() % i]);
          lcur = 0;
        }
        const auto& lp = labeled[lorder[lcur++]];
        imgs.push_back(&lp.image);
        masks.push_back(&lp.mask.pixels);
      }
    }
    float loss = 0.0f;
    try {
      loss = train_step(model, opt, imgs, masks);
    } catch (const NumericalError&) {
      loss = std::numeric_limits<float>::quiet_NaN();
    }
    const bool params_finite = std::all_of(model.params().begin(), model.params().end(),
                                           [](const auto& p) { return p.value.all_finite(); });
    if (!std::isfinite(loss) || !params_finite) {
      for (std::size_t i = 0; i < backup.size(); ++i) model.params()[i] = backup[i];
      res.reverted = true;
      res.r_val = res.r_val_before;
      return res;
    }
    res.steps_run = step + 1;
  }
  res.r_val = evaluate_model(model, val).f1;
  return res;
}

}  // namespace restlab
