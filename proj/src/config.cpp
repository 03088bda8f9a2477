#include "restlab/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "restlab/error.hpp"
#include "restlab/util.hpp"

namespace restlab {

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& text, const std::string& where) {
  T v{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError(where + ": cannot parse '" + text + "' as a number");
  }
  return v;
}

std::vector<double> parse_list(const std::string& text, const std::string& where) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<double>(item, where));
  }
  return out;
}

std::string format_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

struct Field {
  std::string section;
  std::string key;
  std::string doc;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
};

template <typename Getter>
Field make_field(std::string section, std::string key, std::string doc, Getter ref) {
  using T = std::remove_reference_t<decltype(ref(std::declval<ExperimentConfig&>()))>;
  Field f{std::move(section), std::move(key), std::move(doc), {}, {}};
  f.get = [ref](const ExperimentConfig& c) -> std::string {
    const T& v = ref(const_cast<ExperimentConfig&>(c));
    if constexpr (std::is_same_v<T, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_same_v<T, double>) {
      return format_double(v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      return format_list(v);
    } else {
      return std::to_string(v);
    }
  };
  f.set = [ref](ExperimentConfig& c, const std::string& text, const std::string& where) {
    T& v = ref(c);
    if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1") {
        v = true;
      } else if (text == "false" || text == "0") {
        v = false;
      } else {
        throw ConfigError(where + ": expected true or false, got '" + text + "'");
      }
    } else if constexpr (std::is_same_v<T, std::string>) {
      v = text;
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      v = parse_list(text, where);
    } else {
      v = parse_number<T>(text, where);
    }
  };
  return f;
}

#define RL_FIELD(section, key, doc, expr) make_field(section, key, doc, [](ExperimentConfig& c) -> auto& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      RL_FIELD("dataset", "n_labeled", "labeled images", c.dataset.n_labeled),
      RL_FIELD("dataset", "n_unlabeled", "unlabeled images", c.dataset.n_unlabeled),
      RL_FIELD("dataset", "seed", "generator seed", c.dataset.seed),
      RL_FIELD("dataset", "equalize", "histogram-equalize images before use", c.dataset.equalize),
      RL_FIELD("dataset", "height", "image rows", c.dataset.shape.height),
      RL_FIELD("dataset", "width", "image columns", c.dataset.shape.width),
      RL_FIELD("dataset", "blob_count_probs", "P(0..3 blobs)", c.dataset.shape.blob_count_probs),
      RL_FIELD("dataset", "radius_min", "blob semi-axis lower bound (px)", c.dataset.shape.radius_min),
      RL_FIELD("dataset", "radius_max", "blob semi-axis upper bound (px)", c.dataset.shape.radius_max),
      RL_FIELD("dataset", "contrast_min", "blob contrast lower bound", c.dataset.shape.contrast_min),
      RL_FIELD("dataset", "contrast_max", "blob contrast upper bound", c.dataset.shape.contrast_max),
      RL_FIELD("dataset", "noise_sd", "additive Gaussian noise", c.dataset.shape.noise_sd),
      RL_FIELD("dataset", "max_foreground_fraction", "foreground area cap", c.dataset.shape.max_foreground_fraction),

      RL_FIELD("experiment", "fractions", "labeled fractions", c.fractions),
      RL_FIELD("experiment", "baseline_fractions", "fractions where baselines run", c.baseline_fractions),
      RL_FIELD("experiment", "folds", "cross-validation folds", c.folds),
      RL_FIELD("experiment", "repeats", "cross-validation repeats", c.repeats),
      RL_FIELD("experiment", "master_seed", "root of every model seed", c.master_seed),
      RL_FIELD("experiment", "output_dir", "output directory (REST_LAB_OUT overrides)", c.output_dir),

      RL_FIELD("segnet", "base_width", "channels at full resolution", c.arch.base_width),
      RL_FIELD("segnet", "levels", "U-Net resolutions", c.arch.levels),
      RL_FIELD("segnet", "head_bias", "initial output logit (foreground prior)", c.arch.head_bias),
      RL_FIELD("segnet", "learning_rate", "Adam step", c.seg.learning_rate),
      RL_FIELD("segnet", "batch_size", "images per step", c.seg.batch_size),
      RL_FIELD("segnet", "max_epochs", "epoch budget", c.seg.max_epochs),
      RL_FIELD("segnet", "patience", "epochs without F1 gain before stopping", c.seg.patience),

      RL_FIELD("expert", "learning_rate", "Adam step", c.expert.learning_rate),
      RL_FIELD("expert", "l2", "weight decay", c.expert.l2),
      RL_FIELD("expert", "batch_size", "pairs per step", c.expert.batch_size),
      RL_FIELD("expert", "min_epochs", "epochs before the accuracy stop may fire", c.expert.min_epochs),
      RL_FIELD("expert", "max_epochs", "epoch budget", c.expert.max_epochs),
      RL_FIELD("expert", "holdout_fraction", "held-out share of source images", c.expert.holdout_fraction),
      RL_FIELD("expert", "target_accuracy", "held-out accuracy that ends training", c.expert.target_accuracy),
      RL_FIELD("expert", "abort_accuracy", "held-out accuracy below which training fails", c.expert.abort_accuracy),

      RL_FIELD("recipes", "translate", "shifted copies", c.recipes.translate),
      RL_FIELD("recipes", "morphology", "dilated or eroded copies", c.recipes.morphology),
      RL_FIELD("recipes", "random_blob", "unrelated blobs", c.recipes.random_blob),
      RL_FIELD("recipes", "empty", "all-background masks", c.recipes.empty),
      RL_FIELD("recipes", "per_positive", "negatives per expert pair", c.recipes.per_positive),
      RL_FIELD("recipes", "min_shift", "translation lower bound (px, >= 8)", c.recipes.min_shift),
      RL_FIELD("recipes", "max_shift", "translation upper bound (px)", c.recipes.max_shift),
      RL_FIELD("recipes", "min_morph", "morphology radius lower bound (px)", c.recipes.min_morph),
      RL_FIELD("recipes", "max_morph", "morphology radius upper bound (px)", c.recipes.max_morph),

      RL_FIELD("policy", "hidden", "residual branch channels", c.policy.hidden),
      RL_FIELD("policy", "prior_gain", "initial logit slope on the state", c.policy.prior_gain),
      RL_FIELD("policy", "initial_temperature", "T0", c.policy.initial_temperature),
      RL_FIELD("policy", "min_temperature", "T floor", c.policy.min_temperature),

      RL_FIELD("heuristic", "positive_threshold", "theta_pos", c.rest.heuristic.positive_threshold),
      RL_FIELD("heuristic", "negative_threshold", "theta_neg", c.rest.heuristic.negative_threshold),
      RL_FIELD("heuristic", "min_area_px", "smallest kept component (px)", c.rest.heuristic.min_area_px),
      RL_FIELD("heuristic", "epsilon", "initial heuristic probability", c.rest.heuristic.epsilon),
      RL_FIELD("heuristic", "epsilon_decay", "factor per exploration iteration", c.rest.heuristic.epsilon_decay),
      RL_FIELD("heuristic", "epsilon_min", "epsilon floor", c.rest.heuristic.epsilon_min),

      RL_FIELD("rest", "k_iterations", "loop iterations", c.rest.k_iterations),
      RL_FIELD("rest", "phase_threshold", "expert-reward gate (>= 1 disables exploitation)", c.rest.phase_threshold),
      RL_FIELD("rest", "batch_size", "unlabeled samples per iteration", c.rest.batch_size),
      RL_FIELD("rest", "stab_window", "R_val window length", c.rest.stab_window),
      RL_FIELD("rest", "stab_delta", "R_val range counted as stable", c.rest.stab_delta),
      RL_FIELD("rest", "anneal_factor", "temperature factor per exploitation iteration", c.rest.anneal_factor),
      RL_FIELD("rest", "policy_lr", "policy SGD step", c.rest.policy_lr),
      RL_FIELD("rest", "retain_pseudolabels", "accumulate pseudolabels across iterations", c.rest.retain_pseudolabels),
      RL_FIELD("rest", "iou_threshold", "lesion match IoU", c.rest.iou_threshold),

      RL_FIELD("fine_tune", "lr_scale", "fraction of the supervised learning rate", c.rest.fine_tune.lr_scale),
      RL_FIELD("fine_tune", "steps", "optimizer steps per fine-tune", c.rest.fine_tune.steps),
      RL_FIELD("fine_tune", "pseudo_per_step", "pseudolabels per step", c.rest.fine_tune.pseudo_per_step),
      RL_FIELD("fine_tune", "mix_labeled", "pair each pseudolabel with a labeled sample", c.rest.fine_tune.mix_labeled),
  };
  return table;
}

#undef RL_FIELD

}  // namespace

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& msg) { throw ConfigError(key + ": " + msg); };
  if (dataset.n_labeled < folds) fail("dataset.n_labeled", "must be >= experiment.folds");
  if (dataset.n_unlabeled < 1) fail("dataset.n_unlabeled", "must be >= 1");
  if (dataset.shape.height < 8 || dataset.shape.width < 8 || dataset.shape.height % 4 || dataset.shape.width % 4) {
    fail("dataset.height", "image sides must be multiples of 4 and at least 8");
  }
  if (dataset.shape.blob_count_probs.empty()) fail("dataset.blob_count_probs", "must not be empty");
  if (fractions.empty()) fail("experiment.fractions", "must not be empty");
  for (double f : fractions) {
    if (!is_supported_fraction(f)) fail("experiment.fractions", "values must be 0.25, 0.5, 0.75 or 1");
  }
  for (double f : baseline_fractions) {
    if (!is_supported_fraction(f)) fail("experiment.baseline_fractions", "values must be 0.25, 0.5, 0.75 or 1");
  }
  if (folds < 2) fail("experiment.folds", "must be >= 2");
  if (repeats < 1) fail("experiment.repeats", "must be >= 1");
  if (output_dir.empty()) fail("experiment.output_dir", "must not be empty");
  if (arch.base_width < 1 || arch.levels < 1) fail("segnet.levels", "architecture must be positive");
  if (seg.batch_size < 1 || seg.max_epochs < 1 || seg.patience < 1) fail("segnet", "invalid training budget");
  if (!(seg.learning_rate > 0.0)) fail("segnet.learning_rate", "must be > 0");
  if (!(expert.learning_rate > 0.0)) fail("expert.learning_rate", "must be > 0");
  if (expert.max_epochs < 1 || expert.min_epochs < 0) fail("expert.max_epochs", "invalid epoch budget");
  if (!(expert.holdout_fraction > 0.0 && expert.holdout_fraction < 1.0)) {
    fail("expert.holdout_fraction", "must lie in (0,1)");
  }
  if (!(expert.abort_accuracy >= 0.0 && expert.abort_accuracy <= expert.target_accuracy &&
        expert.target_accuracy <= 1.0)) {
    fail("expert.abort_accuracy", "need 0 <= abort_accuracy <= target_accuracy <= 1");
  }
  if (recipes.translate && recipes.min_shift < 8) fail("recipes.min_shift", "must be >= 8");
  if (recipes.per_positive < 2) fail("recipes.per_positive", "must be >= 2");
  if (!(rest.fine_tune.lr_scale > 0.0) || rest.fine_tune.steps < 0 || rest.fine_tune.pseudo_per_step < 1) {
    fail("fine_tune", "invalid fine-tuning settings");
  }
  try {
    rest.validate();
    PolicyModel probe(policy, 0);
  } catch (const ConfigError& e) {
    fail("config", e.what());
  }
}

ExperimentConfig parse_config(std::istream& is, const std::string& source) {
  std::map<std::string, const Field*> index;
  for (const auto& f : fields()) index[f.section + "." + f.key] = &f;
  ExperimentConfig cfg;
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(body.substr(1, body.size() - 2));
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    const auto it = index.find(section + "." + key);
    if (it == index.end()) throw ConfigError(where + ": unknown key '" + section + "." + key + "'");
    it->second->set(cfg, value, where);
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  return parse_config(is, path.string());
}

std::string serialize_config(const ExperimentConfig& cfg, bool with_docs) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) os << "\n";
      section = f.section;
      os << "[" << section << "]\n";
    }
    os << f.key << " = " << f.get(cfg);
    if (with_docs) os << "  # " << f.doc;
    os << "\n";
  }
  return os.str();
}

std::uint64_t config_digest(const ExperimentConfig& cfg) {
  Fnv1a h;
  h.update(serialize_config(cfg));
  return h.digest();
}

}  // namespace restlab
